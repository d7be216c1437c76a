"""Per-layer second-moment matrices: empirical, task-vector (ACTMat) estimate, kappa."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np

from .linalg import frobenius_norm
from .tensor_store import Checkpoint, TaskVector

__all__ = [
    "CovarianceBundle",
    "KappaReport",
    "empirical_covariance",
    "gram",
    "actmat_estimate",
    "actmat_bundle",
    "kappa",
    "kappa_ratio_table",
    "check_psd",
    "bundles_to_checkpoint",
    "bundles_from_checkpoint",
]

COV_PREFIX = "cov/"
ORDER_KEY = "cov_order"  # metadata entry listing task ids in bundle order

Source = Literal["empirical", "actmat"]


@dataclass
class CovarianceBundle:
    task_id: str
    layer_covs: dict[str, np.ndarray]
    source: Source
    sample_count: int = 0
    kappas: dict[str, float] = field(default_factory=dict)


def check_psd(C: np.ndarray, sym_tol: float = 1e-10, psd_tol: float = 1e-8) -> str | None:
    """Return a reason string if C is not (numerically) symmetric PSD, else None.

    Symmetry is judged relative to ``max|C|``; the smallest eigenvalue may
    dip to ``-psd_tol * sigma_max``.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        return f"not square: shape {C.shape}"
    if not np.all(np.isfinite(C)):
        return "non-finite entries"
    scale = float(np.max(np.abs(C))) if C.size else 0.0
    if scale == 0.0:
        return None
    if np.max(np.abs(C - C.T)) > sym_tol * scale:
        return "not symmetric"
    eig = np.linalg.eigvalsh((C + C.T) / 2)
    sigma_max = float(np.max(np.abs(eig)))
    if eig[0] < -psd_tol * sigma_max:
        return f"not positive semidefinite (min eigenvalue {eig[0]:.3e})"
    return None


def _pairwise_gram(Z: np.ndarray) -> np.ndarray:
    # fixed binary-tree reduction over samples; rounding error grows like log(L)
    n = Z.shape[0]
    if n <= 8:
        out = np.zeros((Z.shape[1], Z.shape[1]))
        for z in Z:
            out += np.outer(z, z)
        return out
    half = n // 2
    return _pairwise_gram(Z[:half]) + _pairwise_gram(Z[half:])


def empirical_covariance(samples, dim: int | None = None) -> np.ndarray:
    """Mean outer product ``(1/L) sum_l z_l z_l^T`` of the rows of ``samples``.

    An uncentred second moment, normalised by the sample count.
    """
    Z = np.asarray(samples, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.ndim != 2:
        raise ValueError(f"samples must be a sequence of vectors, got shape {Z.shape}")
    if Z.shape[0] == 0:
        raise ValueError("empirical covariance needs at least one sample")
    if dim is not None and Z.shape[1] != dim:
        raise ValueError(f"sample dimension {Z.shape[1]} does not match dim={dim}")
    C = _pairwise_gram(Z) / Z.shape[0]
    return (C + C.T) / 2


def gram(delta: np.ndarray) -> np.ndarray:
    """Symmetrised ``delta^T delta``."""
    D = np.asarray(delta, dtype=np.float64)
    if D.ndim != 2:
        raise ValueError(f"expected a 2-D difference matrix, got shape {D.shape}")
    M = D.T @ D
    return (M + M.T) / 2


def actmat_estimate(tv: TaskVector, layer: str) -> np.ndarray:
    if layer not in tv.deltas:
        raise KeyError(f"layer {layer!r} not in task vector {tv.task_id!r}")
    delta = tv.deltas[layer]
    if np.ndim(delta) != 2:
        raise ValueError(f"layer {layer!r} is not 2-D (shape {np.shape(delta)})")
    return gram(delta)


def actmat_bundle(tv: TaskVector, layers: Sequence[str] | None = None) -> CovarianceBundle:
    if layers is None:
        layers = [k for k, v in tv.deltas.items() if np.ndim(v) == 2]
    covs = {k: actmat_estimate(tv, k) for k in layers}
    return CovarianceBundle(task_id=tv.task_id, layer_covs=covs, source="actmat")


def kappa(C, C_hat) -> float:
    """Scale factor ``|C|_F / |C_hat|_F`` relating a covariance to its estimate."""
    C = np.asarray(C, dtype=np.float64)
    C_hat = np.asarray(C_hat, dtype=np.float64)
    if C.shape != C_hat.shape or C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"kappa needs equal square shapes, got {C.shape} and {C_hat.shape}")
    denom = frobenius_norm(C_hat)
    if denom == 0.0:
        raise ValueError("zero-norm covariance estimate")
    return frobenius_norm(C) / denom


@dataclass
class KappaReport:
    """kappa per (layer, task) plus kappa_i / kappa_j for ordered pairs i != j."""

    kappas: dict[str, dict[str, float]]
    ratios: list[tuple[str, str, str, float]]
    quantiles: dict[str, dict[str, float]]

    def ratios_for(self, layer: str) -> list[float]:
        return [r for lyr, _, _, r in self.ratios if lyr == layer]

    def to_csv_rows(self) -> list[list[str]]:
        rows = [["layer", "task_i", "task_j", "ratio"]]
        rows += [[lyr, i, j, repr(r)] for lyr, i, j, r in self.ratios]
        return rows


_QUANTILES = {"min": 0.0, "q25": 0.25, "median": 0.5, "q75": 0.75, "max": 1.0}


def kappa_ratio_table(
    bundles_emp: Sequence[CovarianceBundle], bundles_act: Sequence[CovarianceBundle]
) -> KappaReport:
    emp = {b.task_id: b for b in bundles_emp}
    act = {b.task_id: b for b in bundles_act}
    if set(emp) != set(act) or len(emp) != len(bundles_emp) or len(act) != len(bundles_act):
        raise KeyError(f"task ids differ between bundle lists: {sorted(emp)} vs {sorted(act)}")
    tasks = [b.task_id for b in bundles_emp]
    layers = list(bundles_emp[0].layer_covs) if bundles_emp else []
    for b in list(bundles_emp) + list(bundles_act):
        if set(b.layer_covs) != set(layers):
            diff = set(b.layer_covs) ^ set(layers)
            raise KeyError(f"layer keys differ for task {b.task_id!r}: {sorted(diff)}")

    kappas = {
        layer: {t: kappa(emp[t].layer_covs[layer], act[t].layer_covs[layer]) for t in tasks}
        for layer in layers
    }
    ratios = []
    quantiles = {}
    for layer in layers:
        vals = []
        for i, j in itertools.permutations(tasks, 2):
            r = kappas[layer][i] / kappas[layer][j]
            ratios.append((layer, i, j, r))
            vals.append(r)
        if vals:
            quantiles[layer] = {k: float(np.quantile(vals, q)) for k, q in _QUANTILES.items()}
    return KappaReport(kappas=kappas, ratios=ratios, quantiles=quantiles)


def bundles_to_checkpoint(bundles: Sequence[CovarianceBundle], name: str = "covariances") -> Checkpoint:
    """Pack bundles as ``cov/<task_id>/<layer>`` tensors; source and counts go in metadata."""
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for b in bundles:
        if "/" in b.task_id or "," in b.task_id:
            raise ValueError(f"task id {b.task_id!r} may not contain '/' or ','")
        for layer, C in b.layer_covs.items():
            tensors[f"{COV_PREFIX}{b.task_id}/{layer}"] = np.asarray(C, dtype=np.float64)
        meta[f"{COV_PREFIX}{b.task_id}"] = f"{b.source}:{b.sample_count}"
    meta[ORDER_KEY] = ",".join(b.task_id for b in bundles)
    return Checkpoint(name=name, tensors=tensors, metadata=meta)


def bundles_from_checkpoint(ckpt: Checkpoint) -> list[CovarianceBundle]:
    found: dict[str, dict[str, np.ndarray]] = {}
    for key, value in ckpt.items():
        if not key.startswith(COV_PREFIX):
            continue
        task_id, _, layer = key[len(COV_PREFIX):].partition("/")
        if not layer:
            raise ValueError(f"malformed covariance tensor name {key!r}")
        found.setdefault(task_id, {})[layer] = value.astype(np.float64)
    order = [t for t in ckpt.metadata.get(ORDER_KEY, "").split(",") if t in found]
    order += sorted(set(found) - set(order))
    bundles = []
    for task_id in order:
        covs = found[task_id]
        source, _, count = ckpt.metadata.get(f"{COV_PREFIX}{task_id}", "empirical:0").partition(":")
        bundles.append(
            CovarianceBundle(task_id=task_id, layer_covs=covs, source=source, sample_count=int(count or 0))
        )
    return bundles


def kappas_for(true: CovarianceBundle, estimate: CovarianceBundle) -> Mapping[str, float]:
    return {k: kappa(true.layer_covs[k], estimate.layer_covs[k]) for k in true.layer_covs}
