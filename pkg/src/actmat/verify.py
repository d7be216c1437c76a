"""Seeded property checks of the merging theory, shared by the CLI and the tests.

Each check returns a :class:`CheckResult`; ``run_all`` runs the whole suite.
Everything is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .covariance import CovarianceBundle, actmat_bundle, empirical_covariance
from .diagnostics import accumulate_angle_terms, negative_transfer_bound, angle_error_report
from .flops import FLOP_METHODS, FlopModel, flops
from .linalg import frobenius_norm, pinv, svd
from .merging import MergeConfig, TaskSet, merge, merge_actmat, merge_interference, merge_iso_c, merge_tsv
from .tensor_store import compute_task_vector
from .toy import (
    brute_force_minimizer,
    generate_scenario,
    interference_gradient,
    layer_inputs,
    train_full_batch,
)

__all__ = [
    "CheckResult",
    "random_psd",
    "random_interference_instance",
    "CHECKS",
    "run_all",
]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {self.detail}".rstrip()


def random_psd(rng: np.random.Generator, d: int, rank: int, basis: np.ndarray | None = None) -> np.ndarray:
    """Random PSD ``d x d`` matrix of the given rank with eigenvalues in [0.5, 1.5].

    If ``basis`` (d x r, orthonormal columns) is given the range lies inside it.
    """
    if basis is None:
        basis = np.linalg.qr(rng.normal(size=(d, d)))[0]
    r_amb = basis.shape[1]
    rank = min(rank, r_amb)
    Q = np.linalg.qr(rng.normal(size=(r_amb, rank)))[0]
    V = basis @ Q
    lam = rng.uniform(0.5, 1.5, rank)
    C = (V * lam) @ V.T
    return (C + C.T) / 2


def random_interference_instance(rng: np.random.Generator, rank_deficient: bool | None = None,
                                 max_dim: int = 8, max_tasks: int = 4):
    """Weights and covariances for one layer; ``sum_t C_t`` is singular if ``rank_deficient``."""
    d_out = int(rng.integers(1, max_dim + 1))
    d_in = int(rng.integers(2, max_dim + 1))
    T = int(rng.integers(1, max_tasks + 1))
    if rank_deficient is None:
        rank_deficient = bool(rng.integers(0, 2))
    if rank_deficient:
        r = int(rng.integers(1, d_in))
        basis = np.linalg.qr(rng.normal(size=(d_in, d_in)))[0][:, :r]
    else:
        basis = None
        r = d_in
    Ws = [rng.normal(size=(d_out, d_in)) for _ in range(T)]
    Cs = []
    for t in range(T):
        # the last task fills the ambient space so the sum has rank exactly r
        rank = r if t == T - 1 else int(rng.integers(1, r + 1))
        Cs.append(random_psd(rng, d_in, rank, basis))
    return Ws, Cs


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(frobenius_norm(b), 1e-300)
    return frobenius_norm(np.asarray(a) - np.asarray(b)) / denom


# ---------------------------------------------------------------------------
# individual checks


def check_closed_form_vs_gd(seed: int, n: int = 100, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        Ws, Cs = random_interference_instance(rng)
        worst = max(worst, _rel(merge_interference(Ws, Cs), brute_force_minimizer(Ws, Cs)))
    return CheckResult("closed_form_matches_gradient_descent", worst <= tol, f"max_rel_err={worst:.3e}")


def check_stationarity(seed: int, n: int = 100, tol: float = 1e-8) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        Ws, Cs = random_interference_instance(rng)
        W = merge_interference(Ws, Cs)
        scale = sum(frobenius_norm(Wt @ C) for Wt, C in zip(Ws, Cs))
        worst = max(worst, frobenius_norm(interference_gradient(W, Ws, Cs)) / scale)
    return CheckResult("stationarity", worst <= tol, f"max_rel_grad={worst:.3e}")


def check_solution_set(seed: int, n: int = 50, perturbations: int = 20, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_gap = -np.inf
    worst_res = 0.0
    for _ in range(n):
        Ws, Cs = random_interference_instance(rng, rank_deficient=True)
        A = sum(Cs[1:], Cs[0].copy())
        B = sum((W @ C for W, C in zip(Ws[1:], Cs[1:])), Ws[0] @ Cs[0])
        W_star = merge_interference(Ws, Cs)
        P = A @ pinv(A)
        worst_res = max(worst_res, _rel(W_star @ A, B) if frobenius_norm(B) > 0 else 0.0)
        base = frobenius_norm(W_star)
        null_proj = np.eye(A.shape[0]) - P
        for _ in range(perturbations):
            Z = rng.normal(size=W_star.shape)
            gap = base - frobenius_norm(W_star + Z @ null_proj)
            worst_gap = max(worst_gap, gap)
    ok = worst_gap <= tol and worst_res <= 1e-8
    return CheckResult("minimum_norm_solution_set", ok, f"max_norm_decrease={worst_gap:.3e} max_residual={worst_res:.3e}")


def pinv_perturbation_gap(A: np.ndarray, B: np.ndarray) -> float:
    """``lhs - rhs`` of the pseudoinverse perturbation bound, net of rounding slack.

    Non-positive means the bound holds. The slack covers the cancellation
    error of forming ``pinv(A) - pinv(B)`` for nearby matrices, about one
    unit roundoff of the pseudoinverse norms.
    """
    Ap, Bp = pinv(A), pinv(B)
    lhs = frobenius_norm(Ap - Bp)
    na, nb = frobenius_norm(Ap), frobenius_norm(Bp)
    rhs = max(na**2, nb**2) * frobenius_norm(A - B)
    slack = 64 * np.finfo(np.float64).eps * max(na, nb)
    return lhs - rhs * (1 + 1e-12) - slack


def pinv_pair(rng: np.random.Generator, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Random same-shape pair; cycles through independent, nearby and rank-deficient cases."""
    m = int(rng.integers(1, 7))
    k = int(rng.integers(1, 7))
    A = rng.normal(size=(m, k))
    B = rng.normal(size=(m, k))
    if i % 3 == 1:
        B = A + 10.0 ** rng.uniform(-8, 0) * rng.normal(size=(m, k))
    if i % 5 == 2 and min(m, k) > 1:
        r = int(rng.integers(1, min(m, k)))
        A = rng.normal(size=(m, r)) @ rng.normal(size=(r, k))
    return A, B


def check_pinv_perturbation(seed: int, n: int = 1000) -> CheckResult:
    rng = np.random.default_rng(seed)
    violations = sum(pinv_perturbation_gap(*pinv_pair(rng, i)) > 0 for i in range(n))
    return CheckResult("pinv_perturbation_bound", violations == 0, f"violations={violations}/{n}")


def check_scale_invariance(seed: int, n: int = 100, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        Ws, Cs = random_interference_instance(rng)
        base = merge_interference(Ws, Cs)
        for c in (1e-3, 1.0, 1e3):
            worst = max(worst, _rel(merge_interference(Ws, [c * C for C in Cs]), base))
    return CheckResult("covariance_scale_invariance", worst <= tol, f"max_rel_err={worst:.3e}")


def check_actmat_equivalence(seed: int, n: int = 50) -> CheckResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n):
        d_out, d_in, T = (int(x) for x in rng.integers(1, 9, size=3))
        W0 = rng.normal(size=(d_out, d_in))
        deltas = [0.1 * rng.normal(size=(d_out, d_in)) for _ in range(T % 4 + 1)]
        Ws = [W0 + D for D in deltas]
        a = merge_actmat(Ws, deltas)
        b = merge_interference(Ws, [D.T @ D for D in deltas])
        mismatches += int(a.tobytes() != b.tobytes())
    return CheckResult("actmat_equals_interference_on_gram", mismatches == 0, f"mismatches={mismatches}/{n}")


def check_iso_c_flat(seed: int, n: int = 50, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        m, k, T = int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 5))
        W0 = rng.normal(size=(m, k))
        out = merge_iso_c(W0, [rng.normal(size=(m, k)) for _ in range(T)])
        s = np.linalg.svd(out - W0, compute_uv=False)
        worst = max(worst, float((s.max() - s.min()) / s.max()))
    return CheckResult("iso_c_flat_spectrum", worst <= tol, f"max_rel_spread={worst:.3e}")


def tsv_factors(deltas, rank_fraction: float = 1.0):
    """Orthogonalised pooled factors as built inside the TSV merge (for inspection)."""
    T = len(deltas)
    k = max(1, int(np.floor(rank_fraction * min(deltas[0].shape) / T)))
    parts = [svd(D) for D in deltas]
    U_cat = np.concatenate([p.U[:, :k] for p in parts], axis=1)
    V_cat = np.concatenate([p.Vt[:k].T for p in parts], axis=1)
    pu, pv = svd(U_cat), svd(V_cat)
    return pu.U @ pu.Vt, pv.U @ pv.Vt


def check_tsv_orthogonal(seed: int, n: int = 50, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        m, k = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        T = int(rng.integers(1, min(m, k) + 1))
        W0 = rng.normal(size=(m, k))
        deltas = [rng.normal(size=(m, k)) for _ in range(T)]
        merge_tsv(W0, deltas)
        U, V = tsv_factors(deltas)
        for F in (U, V):
            worst = max(worst, float(np.max(np.abs(F.T @ F - np.eye(F.shape[1])))))
    return CheckResult("tsv_orthonormal_factors", worst <= tol, f"max_gram_err={worst:.3e}")


def check_covariance_angle_bound(seed: int, runs: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    failures = 0
    worst_margin = np.inf
    for r in range(runs):
        widths = tuple(int(w) for w in rng.integers(2, 9, size=3))
        sc = generate_scenario(
            int(rng.integers(0, 2**31)), T=1, widths=widths, n_samples=int(rng.integers(2, 33)),
            eta=float(rng.uniform(0.005, 0.05)), K=int(rng.integers(0, 60)),
            activation=("tanh", "relu", "identity")[r % 3],
        )
        layers = sc.net.weight_names
        _, traces = train_full_batch(sc, 0, capture_layers=layers)
        for name in layers:
            tr = traces[name]
            rep = angle_error_report(accumulate_angle_terms(tr), tr.delta())
            if rep.degenerate:
                continue
            worst_margin = min(worst_margin, rep.bound - rep.lhs_angle)
            failures += int(not rep.bound_satisfied)
    return CheckResult("covariance_angle_triangle_bound", failures == 0,
                       f"failures={failures} min_margin={worst_margin:.3e}")


def check_exact_proportionality(seed: int, runs: int = 5, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(runs):
        widths = tuple(int(w) for w in rng.integers(2, 9, size=3))
        sc = generate_scenario(int(rng.integers(0, 2**31)), T=1, widths=widths, n_samples=1, K=0)
        layers = sc.net.weight_names
        _, traces = train_full_batch(sc, 0, capture_layers=layers)
        for name in layers:
            tr = traces[name]
            rep = angle_error_report(accumulate_angle_terms(tr), tr.delta())
            if rep.degenerate:
                continue
            worst = max(worst, rep.eps_cross, rep.eps_corr, rep.eps_drift, rep.lhs_angle)
    return CheckResult("single_step_exact_proportionality", worst <= tol, f"max_angle={worst:.3e}")


def transfer_bound_case(seed: int, T: int = 2, widths=None, exact: bool = False):
    """Train T experts on a 2-layer toy net and evaluate the negative-transfer bound."""
    rng = np.random.default_rng(seed)
    if widths is None:
        widths = tuple(int(w) for w in rng.integers(2, 7, size=3))
    sc = generate_scenario(seed, T=T, widths=widths, n_samples=int(rng.integers(4, 25)),
                           eta=0.05, K=int(rng.integers(5, 40)), loss="norm",
                           activation=("tanh", "relu")[seed % 2])
    experts = [train_full_batch(sc, t)[0] for t in range(T)]
    covs_true = []
    for t, ex in enumerate(experts):
        inputs = layer_inputs(sc.net, ex, sc.tasks[t].X)
        covs_true.append(CovarianceBundle(f"task{t}", {k: empirical_covariance(z) for k, z in inputs.items()},
                                          "empirical", sc.tasks[t].X.shape[0]))
    if exact:
        covs_hat = covs_true
    else:
        covs_hat = [
            actmat_bundle(compute_task_vector(sc.pretrained, ex, f"task{t}"), sc.net.weight_names)
            for t, ex in enumerate(experts)
        ]
    ts = TaskSet(sc.pretrained, experts, covs_hat)
    merged = merge(ts, MergeConfig(method="regmean"))
    reports = negative_transfer_bound(sc.net, merged, experts, covs_true, covs_hat,
                                      [d.X for d in sc.tasks], loss="norm")
    return reports


def check_negative_transfer(seed: int, cases: int = 50) -> CheckResult:
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(cases):
        for rep in transfer_bound_case(int(rng.integers(0, 2**31))):
            failures += int(not rep.holds)
    exact_terms = [
        rep.covariance_term for rep in transfer_bound_case(int(rng.integers(0, 2**31)), exact=True)
    ]
    ok = failures == 0 and all(t == 0.0 for t in exact_terms)
    return CheckResult("negative_transfer_bound", ok, f"failures={failures}/{cases}")


def check_flops_table(seed: int) -> CheckResult:
    expected = {("average", 3, 10): 300, ("actmat", 2, 10): 7400, ("regmean", 2, 10): 5200}
    bad = [k for k, v in expected.items() if flops(FlopModel(*k))[0] != v]
    pre = flops(FlopModel("regmean", 2, 10, 100))[1]
    ok = not bad and pre == 39800 and all(
        isinstance(flops(FlopModel(m, 3, 7))[0], int) for m in FLOP_METHODS
    )
    return CheckResult("flop_model", ok, f"bad={bad}")


CHECKS: dict[str, Callable[[int], CheckResult]] = {
    "closed_form_matches_gradient_descent": check_closed_form_vs_gd,
    "stationarity": check_stationarity,
    "minimum_norm_solution_set": check_solution_set,
    "pinv_perturbation_bound": check_pinv_perturbation,
    "covariance_scale_invariance": check_scale_invariance,
    "actmat_equals_interference_on_gram": check_actmat_equivalence,
    "covariance_angle_triangle_bound": check_covariance_angle_bound,
    "single_step_exact_proportionality": check_exact_proportionality,
    "negative_transfer_bound": check_negative_transfer,
    "iso_c_flat_spectrum": check_iso_c_flat,
    "tsv_orthonormal_factors": check_tsv_orthogonal,
    "flop_model": check_flops_table,
}


def run_all(seed: int, only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        try:
            results.append(fn(seed))
        except Exception as exc:  # noqa: BLE001 - report, keep going
            results.append(CheckResult(name, False, f"error={type(exc).__name__}: {exc}"))
    return results
