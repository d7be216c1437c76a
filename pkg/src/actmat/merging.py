"""Layer-wise merge rules.

2-D weight matrices go through the selected rule; everything else
(biases, norms, embeddings by default) is averaged across experts.
"""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from .covariance import CovarianceBundle, check_psd, gram
from .linalg import as_matrix, pinv, svd
from .tensor_store import ArchitectureMismatchError, Checkpoint, check_compatible

log = logging.getLogger(__name__)

__all__ = [
    "METHODS",
    "MergeConfig",
    "TaskSet",
    "DegenerateLayerWarning",
    "TruncationWarning",
    "InvalidCovarianceError",
    "MissingCovarianceError",
    "default_selector",
    "merge",
    "merge_layer",
    "merge_average",
    "merge_task_arithmetic",
    "merge_interference",
    "merge_actmat",
    "merge_iso_c",
    "merge_tsv",
]

Method = Literal["average", "task_arithmetic", "regmean", "actmat", "iso_c", "tsv"]
METHODS: tuple[str, ...] = ("average", "task_arithmetic", "regmean", "actmat", "iso_c", "tsv")

DEFAULT_ALPHA = {"task_arithmetic": 0.4, "iso_c": 1.0, "tsv": 1.0}

MERGE_2D = "merge-2d"
AVERAGE = "always-average"


class DegenerateLayerWarning(RuntimeWarning):
    pass


class TruncationWarning(RuntimeWarning):
    pass


class InvalidCovarianceError(ValueError):
    def __init__(self, task_index: int, reason: str):
        self.task_index = task_index
        super().__init__(f"covariance of task {task_index}: {reason}")


class MissingCovarianceError(ValueError):
    pass


def default_selector(name: str, shape: tuple[int, ...], pattern: str = r"embed") -> str:
    if len(shape) == 2 and not re.search(pattern, name, flags=re.IGNORECASE):
        return MERGE_2D
    return AVERAGE


@dataclass
class MergeConfig:
    method: str = "actmat"
    alpha: float | None = None
    pinv_rtol: float | None = None
    embedding_pattern: str = r"embed"
    matrix_selector: Callable[[str, tuple[int, ...]], str] | None = None
    tsv_rank_fraction: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        if self.alpha is not None and not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.pinv_rtol is not None and self.pinv_rtol <= 0:
            raise ValueError("pinv_rtol must be positive")
        if not 0.0 < self.tsv_rank_fraction <= 1.0:
            raise ValueError("tsv_rank_fraction must lie in (0, 1]")

    @property
    def effective_alpha(self) -> float:
        if self.alpha is not None:
            return float(self.alpha)
        return DEFAULT_ALPHA.get(self.method, 1.0)

    def classify(self, name: str, shape: tuple[int, ...]) -> str:
        if self.matrix_selector is not None:
            return self.matrix_selector(name, shape)
        return default_selector(name, shape, self.embedding_pattern)


@dataclass
class TaskSet:
    pretrained: Checkpoint
    experts: list[Checkpoint]
    covariances: list[CovarianceBundle] | None = None

    def __post_init__(self):
        if not self.experts:
            raise ValueError("a TaskSet needs at least one expert")
        for ex in self.experts:
            check_compatible(self.pretrained, ex)
        if self.covariances is not None and len(self.covariances) != len(self.experts):
            raise ValueError(
                f"{len(self.covariances)} covariance bundles for {len(self.experts)} experts"
            )

    @property
    def T(self) -> int:
        return len(self.experts)


# ---------------------------------------------------------------------------
# matrix-level rules


def _stack(mats: Sequence, what: str) -> list[np.ndarray]:
    if len(mats) == 0:
        raise ValueError(f"{what}: empty list")
    out = [as_matrix(m, what) for m in mats]
    shape = out[0].shape
    for i, m in enumerate(out):
        if m.shape != shape:
            raise ValueError(f"{what}: entry {i} has shape {m.shape}, expected {shape}")
    return out


def merge_average(Ws: Sequence) -> np.ndarray:
    Ws = _stack(Ws, "merge_average")
    total = Ws[0].copy()
    for W in Ws[1:]:
        total += W
    return total / len(Ws)


def merge_task_arithmetic(W0, deltas: Sequence, alpha: float) -> np.ndarray:
    W0 = as_matrix(W0, "W0")
    deltas = _stack(deltas, "merge_task_arithmetic")
    if deltas[0].shape != W0.shape:
        raise ValueError(f"delta shape {deltas[0].shape} does not match W0 {W0.shape}")
    total = deltas[0].copy()
    for D in deltas[1:]:
        total += D
    return W0 + alpha * total


def merge_interference(Ws: Sequence, Cs: Sequence, rtol: float | None = None) -> np.ndarray:
    """``(sum_t W_t C_t) pinv(sum_t C_t)``, the minimum-norm minimiser of
    ``sum_t E||W z - W_t z||^2`` when ``C_t = E[z z^T]``.
    """
    Ws = _stack(Ws, "merge_interference weights")
    if len(Cs) != len(Ws):
        raise ValueError(f"{len(Ws)} weights but {len(Cs)} covariances")
    d_in = Ws[0].shape[1]
    Cs = [np.asarray(C, dtype=np.float64) for C in Cs]
    for t, C in enumerate(Cs):
        if C.shape != (d_in, d_in):
            raise InvalidCovarianceError(t, f"shape {C.shape}, expected {(d_in, d_in)}")
        reason = check_psd(C)
        if reason is not None:
            raise InvalidCovarianceError(t, reason)
    A = Cs[0].copy()
    B = Ws[0] @ Cs[0]
    for W, C in zip(Ws[1:], Cs[1:]):
        A += C
        B += W @ C
    return B @ pinv(A, rtol)


def merge_actmat(Ws: Sequence, deltas: Sequence, rtol: float | None = None) -> np.ndarray:
    """Interference merge with each covariance replaced by ``delta^T delta``."""
    deltas = _stack(deltas, "merge_actmat deltas")
    return merge_interference(Ws, [gram(D) for D in deltas], rtol)


def merge_iso_c(W0, deltas: Sequence, alpha: float = 1.0) -> np.ndarray:
    """Flatten the spectrum of the summed task vector to its mean singular value."""
    W0 = as_matrix(W0, "W0")
    deltas = _stack(deltas, "merge_iso_c")
    total = deltas[0].copy()
    for D in deltas[1:]:
        total += D
    U, s, Vt = svd(total)
    if s.size == 0:
        return W0.copy()
    flat = np.full_like(s, s.mean())
    return W0 + alpha * ((U * flat) @ Vt)


def _polar(M: np.ndarray) -> np.ndarray:
    # nearest matrix with orthonormal columns (rows, if M is wide)
    U, _, Vt = svd(M)
    return U @ Vt


def tsv_rank(shape: tuple[int, int], T: int, rank_fraction: float = 1.0) -> int:
    return max(1, int(np.floor(rank_fraction * min(shape) / T)))


def merge_tsv(W0, deltas: Sequence, alpha: float = 1.0, rank_fraction: float = 1.0) -> np.ndarray:
    """Truncate each task's SVD to rank k, pool the factors, orthogonalise the
    pooled left and right singular vectors and reconstruct.

    ``k = max(1, floor(rank_fraction * min(D_o, D_i) / T))``.
    """
    W0 = as_matrix(W0, "W0")
    deltas = _stack(deltas, "merge_tsv")
    if not 0.0 < rank_fraction <= 1.0:
        raise ValueError("rank_fraction must lie in (0, 1]")
    T = len(deltas)
    n = min(W0.shape)
    k = tsv_rank(W0.shape, T, rank_fraction)
    if T * k > n:
        warnings.warn(
            f"TSV pooled rank {T * k} exceeds min dimension {n}; "
            "orthogonalised factors cannot have orthonormal columns",
            TruncationWarning,
            stacklevel=2,
        )
    Us, ss, Vs = [], [], []
    for D in deltas:
        U, s, Vt = svd(D)
        Us.append(U[:, :k])
        ss.append(s[:k])
        Vs.append(Vt[:k].T)
    U_cat = np.concatenate(Us, axis=1)
    V_cat = np.concatenate(Vs, axis=1)
    s_cat = np.concatenate(ss)
    U_orth = _polar(U_cat)
    V_orth = _polar(V_cat)
    return W0 + alpha * ((U_orth * s_cat) @ V_orth.T)


# ---------------------------------------------------------------------------
# checkpoint-level merge


def merge_layer(
    method: str,
    W0: np.ndarray,
    Ws: Sequence[np.ndarray],
    cfg: MergeConfig,
    covs: Sequence[np.ndarray] | None = None,
    name: str = "",
) -> np.ndarray:
    """Merge one 2-D tensor with ``method``; all inputs are float64 matrices."""
    deltas = [W - W0 for W in Ws]
    alpha = cfg.effective_alpha
    if method == "average":
        return merge_average(Ws)
    if method == "task_arithmetic":
        return merge_task_arithmetic(W0, deltas, alpha)
    if method == "regmean":
        if covs is None:
            raise MissingCovarianceError(f"regmean needs covariances for {name!r}")
        return merge_interference(Ws, covs, cfg.pinv_rtol)
    if method == "actmat":
        if all(not np.any(D) for D in deltas):
            warnings.warn(
                f"all task vectors are zero for {name!r}; averaging this layer instead",
                DegenerateLayerWarning,
                stacklevel=2,
            )
            return merge_average(Ws)
        return merge_actmat(Ws, deltas, cfg.pinv_rtol)
    if method == "iso_c":
        return merge_iso_c(W0, deltas, alpha)
    if method == "tsv":
        return merge_tsv(W0, deltas, alpha, cfg.tsv_rank_fraction)
    raise ValueError(f"unknown merge method {method!r}")


def _layer_covariances(ts: TaskSet, name: str) -> list[np.ndarray]:
    if ts.covariances is None:
        raise MissingCovarianceError("regmean requires covariances in the TaskSet")
    covs = []
    missing = []
    for bundle in ts.covariances:
        if name not in bundle.layer_covs:
            missing.append(bundle.task_id)
        else:
            covs.append(bundle.layer_covs[name])
    if missing:
        raise MissingCovarianceError(f"no covariance for {name!r} in tasks {missing}")
    return covs


def merge(ts: TaskSet, cfg: MergeConfig, name: str | None = None) -> Checkpoint:
    """Merge every tensor of the task set; output dtypes follow the pretrained checkpoint."""
    if cfg.method == "regmean" and ts.covariances is None:
        raise MissingCovarianceError("regmean requires covariances in the TaskSet")

    labels = {k: cfg.classify(k, tuple(v.shape)) for k, v in ts.pretrained.items()}
    bad = [k for k, lab in labels.items() if lab not in (MERGE_2D, AVERAGE)]
    bad += [k for k, lab in labels.items() if lab == MERGE_2D and ts.pretrained[k].ndim != 2]
    if bad:
        raise ArchitectureMismatchError("tensors left without a valid merge classification", bad)

    out: dict[str, np.ndarray] = {}
    for key, w0 in ts.pretrained.items():
        Ws = [ex[key].astype(np.float64) for ex in ts.experts]
        if labels[key] == AVERAGE:
            total = Ws[0].copy()
            for W in Ws[1:]:
                total += W
            merged = total / len(Ws)
        else:
            covs = _layer_covariances(ts, key) if cfg.method == "regmean" else None
            merged = merge_layer(cfg.method, w0.astype(np.float64), Ws, cfg, covs, key)
        out[key] = merged.astype(w0.dtype)
        log.debug("merged %s (%s) with %s", key, labels[key], cfg.method)
    return Checkpoint(name=name or f"merged-{cfg.method}", tensors=out)
