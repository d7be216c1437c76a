"""Checks of the covariance-estimation and negative-transfer theory on captured runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .covariance import CovarianceBundle, empirical_covariance
from .linalg import angular_distance, frobenius_cosine, frobenius_norm, pinv, spectral_norm
from .merging import merge_interference
from .tensor_store import Checkpoint
from .toy import ToyNet, TrainTrace, per_sample_loss

__all__ = [
    "AngleAccumulators",
    "ErrorReport",
    "CorrelationSummary",
    "LayerBoundTerms",
    "TransferBoundReport",
    "accumulate_angle_terms",
    "angle_error_report",
    "drift_trajectory",
    "pearson_activation_gradnorm",
    "covariance_alignment",
    "negative_transfer_bound",
    "minimizer_difference_bound",
    "format_record",
]

BOUND_SLACK = 1e-9


@dataclass
class AngleAccumulators:
    G_bar: np.ndarray
    S_bar: np.ndarray
    S_tilde: np.ndarray
    C_final: np.ndarray
    C_trajectory: list[np.ndarray]


def accumulate_angle_terms(trace: TrainTrace) -> AngleAccumulators:
    """Accumulated gradient mean, second moment and uncorrelated second moment.

    Expectations are means over the captured batch at each iteration.
    """
    if not trace.zs:
        raise ValueError("empty trace")
    d_in = trace.zs[0].shape[1]
    d_out = trace.gs[0].shape[1]
    G_bar = np.zeros((d_out, d_in))
    S_bar = np.zeros((d_in, d_in))
    S_tilde = np.zeros((d_in, d_in))
    C_traj = []
    for z, g in zip(trace.zs, trace.gs):
        n = z.shape[0]
        gsq = np.sum(g * g, axis=1)
        G_bar += g.T @ z / n
        S_bar += (z * gsq[:, None]).T @ z / n
        C_k = empirical_covariance(z)
        S_tilde += C_k * gsq.mean()
        C_traj.append(C_k)
    S_bar = (S_bar + S_bar.T) / 2
    return AngleAccumulators(G_bar, S_bar, S_tilde, C_traj[-1], C_traj)


def _angle(A, B) -> float | None:
    if frobenius_norm(A) == 0.0 or frobenius_norm(B) == 0.0:
        return None
    return angular_distance(A, B)


@dataclass
class ErrorReport:
    eps_cross: float | None
    eps_corr: float | None
    eps_drift: float | None
    lhs_angle: float | None
    bound_satisfied: bool | None
    degenerate: bool = False

    @property
    def bound(self) -> float | None:
        if self.degenerate:
            return None
        return self.eps_cross + self.eps_corr + self.eps_drift


def angle_error_report(acc: AngleAccumulators, delta: np.ndarray) -> ErrorReport:
    """Angle between ``delta^T delta`` and the final covariance, with its three-term bound."""
    delta = np.asarray(delta, dtype=np.float64)
    GtG = acc.G_bar.T @ acc.G_bar
    eps_cross = _angle(GtG, acc.S_bar)
    eps_corr = _angle(acc.S_bar, acc.S_tilde)
    eps_drift = _angle(acc.S_tilde, acc.C_final)
    lhs = _angle(delta.T @ delta, acc.C_final)
    parts = (eps_cross, eps_corr, eps_drift, lhs)
    if any(p is None for p in parts):
        return ErrorReport(*parts, bound_satisfied=None, degenerate=True)
    ok = lhs <= eps_cross + eps_corr + eps_drift + BOUND_SLACK
    return ErrorReport(eps_cross, eps_corr, eps_drift, lhs, bound_satisfied=bool(ok))


def drift_trajectory(acc: AngleAccumulators) -> list[float | None]:
    """Angle between each iteration's covariance and the final one."""
    return [_angle(C, acc.C_final) for C in acc.C_trajectory]


@dataclass
class CorrelationSummary:
    """|Pearson r| between entries of ``z z^T`` and ``||g||^2`` across samples."""

    correlations: np.ndarray  # D_i x D_i, NaN where undefined
    quantiles: dict[str, float]
    n_entries: int
    n_skipped: int


def pearson_activation_gradnorm(trace: TrainTrace, iteration: int = -1) -> CorrelationSummary:
    z = trace.zs[iteration]
    g = trace.gs[iteration]
    n, d = z.shape
    if n < 2:
        raise ValueError("need at least two samples for a correlation")
    gsq = np.sum(g * g, axis=1)
    outer = (z[:, :, None] * z[:, None, :]).reshape(n, d * d)

    # vectorised Pearson over entries; an entry or ||g||^2 that is constant is skipped
    const_g = bool(np.all(gsq == gsq[0]))
    const_e = np.all(outer == outer[0], axis=0)
    oc = outer - outer.mean(axis=0)
    gc = gsq - gsq.mean()
    num = gc @ oc
    den = np.sqrt(np.sum(oc * oc, axis=0)) * np.sqrt(gc @ gc)
    valid = ~const_e & (den > 0) & (not const_g)
    r = np.full(d * d, np.nan)
    r[valid] = np.clip(num[valid] / den[valid], -1.0, 1.0)
    vals = np.abs(r[valid])
    q = {}
    if vals.size:
        q = {
            "min": float(vals.min()),
            "q25": float(np.quantile(vals, 0.25)),
            "median": float(np.median(vals)),
            "q75": float(np.quantile(vals, 0.75)),
            "max": float(vals.max()),
            "mean": float(vals.mean()),
        }
    return CorrelationSummary(
        correlations=r.reshape(d, d), quantiles=q, n_entries=d * d, n_skipped=int(d * d - valid.sum())
    )


def covariance_alignment(C_hat: np.ndarray, C: np.ndarray) -> tuple[float, float]:
    """Frobenius cosine of the estimate with C, and of the identity with C (baseline)."""
    C = np.asarray(C, dtype=np.float64)
    return frobenius_cosine(C_hat, C), frobenius_cosine(np.eye(C.shape[0]), C)


# ---------------------------------------------------------------------------
# negative-transfer bound


def minimizer_difference_bound(
    Ws: Sequence[np.ndarray], Cs: Sequence[np.ndarray], C_hats: Sequence[np.ndarray],
    rtol: float | None = None,
) -> dict[str, float]:
    """Constants of the bound on ``|W_m - W*|_F`` for one linear layer."""
    S = sum(Cs[1:], np.array(Cs[0], dtype=np.float64))
    S_hat = sum(C_hats[1:], np.array(C_hats[0], dtype=np.float64))
    kappa_W = max(frobenius_norm(W) for W in Ws)
    S_pinv_norm = frobenius_norm(pinv(S, rtol))
    S_hat_pinv_norm = frobenius_norm(pinv(S_hat, rtol))
    cov_gap = sum(frobenius_norm(np.asarray(C) - np.asarray(Ch)) for C, Ch in zip(Cs, C_hats))
    sum_hat = sum(frobenius_norm(Ch) for Ch in C_hats)
    max_sq = max(S_pinv_norm**2, S_hat_pinv_norm**2)
    factor = kappa_W * S_pinv_norm + kappa_W * max_sq * sum_hat
    return {
        "kappa_W": kappa_W,
        "kappa_S_pinv": S_pinv_norm,
        "S_hat_pinv_norm": S_hat_pinv_norm,
        "max_pinv_sq": max_sq,
        "sum_hat_norms": sum_hat,
        "cov_gap": cov_gap,
        "bound": cov_gap * factor,
    }


@dataclass
class LayerBoundTerms:
    component: int
    kind: str
    name: str | None
    gamma: float
    gamma_tilde: float
    local_error: float  # E[Delta g*^(l)]
    zeta_tilde: float = 0.0
    kappa_W: float = 0.0
    kappa_S_pinv: float = 0.0
    max_pinv_sq: float = 0.0
    sum_hat_norms: float = 0.0
    cov_gap: float = 0.0
    cov_term: float = 0.0


@dataclass
class TransferBoundReport:
    task: int
    per_sample: np.ndarray
    expected: float
    beta: float
    beta_is_estimate: bool
    layers: list[LayerBoundTerms] = field(default_factory=list)
    interference_term: float = 0.0
    covariance_term: float = 0.0

    @property
    def bound(self) -> float:
        return self.interference_term + self.covariance_term

    @property
    def holds(self) -> bool:
        return bool(self.expected <= self.bound + BOUND_SLACK)


def negative_transfer_bound(
    net: ToyNet,
    merged: Checkpoint,
    experts: Sequence[Checkpoint],
    covs_true: Sequence[CovarianceBundle],
    covs_hat: Sequence[CovarianceBundle],
    data: Sequence[np.ndarray],
    loss: str = "norm",
    targets: Sequence[np.ndarray] | None = None,
    rtol: float | None = None,
) -> list[TransferBoundReport]:
    """Evaluate both sides of the expected negative-transfer bound for every task.

    ``merged`` must hold the interference merge with ``covs_hat`` on the
    linear weights. The reference merge is rebuilt from ``covs_true`` with
    every other tensor taken from ``merged``. With the norm loss the loss is
    exactly 1-Lipschitz; with ``"mse"`` the Lipschitz constant is estimated
    as twice the largest residual norm over merged and expert outputs.
    """
    T = len(experts)
    if not (len(covs_true) == len(covs_hat) == len(data) == T):
        raise ValueError("experts, covariances and data must have one entry per task")
    if loss not in ("norm", "mse"):
        raise ValueError(f"unsupported loss {loss!r}")
    if loss == "mse" and targets is None:
        raise ValueError("mse loss needs targets")
    for X in data:
        if np.asarray(X).shape[0] == 0:
            raise ValueError("empty sample set")

    # theta*: true-covariance interference merge on linear weights
    star = dict(merged.tensors)
    for name in net.weight_names:
        Ws = [ex[name].astype(np.float64) for ex in experts]
        star[name] = merge_interference(Ws, [b.layer_covs[name] for b in covs_true], rtol)
    theta_star = Checkpoint(name="theta_star", tensors=star)

    # Lipschitz constants of each component under the merged parameters
    comps = net.components()
    gammas = []
    for kind, idx in comps:
        if kind == "linear":
            gammas.append(spectral_norm(merged[net.weight_name(int(idx))]))
        else:
            gammas.append(1.0)

    layer_consts = {}
    for name in net.weight_names:
        layer_consts[name] = minimizer_difference_bound(
            [ex[name].astype(np.float64) for ex in experts],
            [b.layer_covs[name] for b in covs_true],
            [b.layer_covs[name] for b in covs_hat],
            rtol,
        )

    reports = []
    for t in range(T):
        X = np.asarray(data[t], dtype=np.float64)
        Y = None if targets is None else np.asarray(targets[t], dtype=np.float64)
        out_m = net(merged, X)
        out_t = net(experts[t], X)
        per_sample = np.abs(per_sample_loss(loss, out_m, Y) - per_sample_loss(loss, out_t, Y))
        if loss == "norm":
            beta, estimated = 1.0, False
        else:
            beta = 2.0 * float(max(np.linalg.norm(out_m - Y, axis=1).max(),
                                   np.linalg.norm(out_t - Y, axis=1).max()))
            estimated = True

        # linear-layer inputs under the expert network
        _, lin_inputs, _ = net.forward(experts[t], X)
        report = TransferBoundReport(t, per_sample, float(per_sample.mean()), beta, estimated)
        for l, (kind, idx) in enumerate(comps):
            gamma_tilde = beta * math.prod(gammas[l + 1:])
            if kind == "act":
                # parameter-free: theta* and theta_t coincide
                report.layers.append(LayerBoundTerms(l, kind, None, gammas[l], gamma_tilde, 0.0))
                continue
            i = int(idx)
            wname = net.weight_name(i)
            z = lin_inputs[i]
            y_star = z @ theta_star[wname].T
            y_t = z @ experts[t][wname].T
            if net.bias:
                y_star = y_star + theta_star[net.bias_name(i)]
                y_t = y_t + experts[t][net.bias_name(i)]
            local = float(np.mean(np.linalg.norm(y_star - y_t, axis=1)))
            zeta = gamma_tilde * float(np.mean(np.linalg.norm(z, axis=1)))
            c = layer_consts[wname]
            term = LayerBoundTerms(
                l, kind, wname, gammas[l], gamma_tilde, local,
                zeta_tilde=zeta,
                kappa_W=c["kappa_W"],
                kappa_S_pinv=c["kappa_S_pinv"],
                max_pinv_sq=c["max_pinv_sq"],
                sum_hat_norms=c["sum_hat_norms"],
                cov_gap=c["cov_gap"],
                cov_term=zeta * c["bound"],
            )
            report.layers.append(term)
        report.interference_term = sum(x.gamma_tilde * x.local_error for x in report.layers)
        report.covariance_term = sum(x.cov_term for x in report.layers)
        reports.append(report)
    return reports


def format_record(kind: str, **fields) -> str:
    """One ``key=value`` line; floats in repr form so records round-trip."""
    parts = [f"record={kind}"]
    for key, value in fields.items():
        if isinstance(value, float):
            value = repr(value)
        elif value is None:
            value = "nan"
        parts.append(f"{key}={value}")
    return " ".join(parts)
