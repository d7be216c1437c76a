"""The thirteen acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line (shown even under output
capture) before asserting.
"""

import time
import warnings

import numpy as np
import pytest

from actmat.covariance import CovarianceBundle, empirical_covariance, gram
from actmat.flops import FLOP_METHODS, FlopModel, flops
from actmat.linalg import frobenius_norm
from actmat.merging import MergeConfig, TaskSet, merge, merge_actmat, merge_interference, merge_iso_c
from actmat.tensor_store import Checkpoint, load_checkpoint, save_checkpoint
from actmat.toy import (
    brute_force_minimizer,
    generate_scenario,
    interference_gradient,
    layer_inputs,
    task_losses,
    train_full_batch,
)
from actmat.diagnostics import accumulate_angle_terms, angle_error_report
from actmat.verify import (
    pinv_pair,
    pinv_perturbation_gap,
    random_interference_instance,
    transfer_bound_case,
    tsv_factors,
)

SEED = 2024


@pytest.fixture
def report(capsys):
    def _report(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}")
        assert ok, detail

    return _report


def rel(a, b):
    return frobenius_norm(a - b) / max(frobenius_norm(b), 1e-300)


def instances(n, seed=SEED, **kw):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        # alternate so both full-rank and rank-deficient sums are covered
        out.append(random_interference_instance(rng, rank_deficient=bool(i % 2), **kw))
    return out


def test_01_closed_form_vs_oracle(report):
    start = time.perf_counter()
    worst = max(rel(merge_interference(Ws, Cs), brute_force_minimizer(Ws, Cs)) for Ws, Cs in instances(100))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-6 and elapsed < 30,
           f"closed form vs gradient descent, max rel err {worst:.2e} (<= 1e-6), {elapsed:.1f}s (< 30s)")


def test_02_stationarity(report):
    worst = 0.0
    for Ws, Cs in instances(100):
        W = merge_interference(Ws, Cs)
        scale = sum(frobenius_norm(Wt @ C) for Wt, C in zip(Ws, Cs))
        worst = max(worst, frobenius_norm(interference_gradient(W, Ws, Cs)) / scale)
    report(2, worst <= 1e-8, f"stationarity, max |grad| / sum|W_t C_t| = {worst:.2e} (<= 1e-8)")


def test_03_minimum_norm(report):
    rng = np.random.default_rng(SEED + 3)
    worst = -np.inf
    for _ in range(50):
        Ws, Cs = random_interference_instance(rng, rank_deficient=True)
        W = merge_interference(Ws, Cs)
        A = sum(Cs)
        null = np.eye(A.shape[0]) - A @ np.linalg.pinv(A)
        for _ in range(20):
            Z = rng.normal(size=W.shape)
            worst = max(worst, frobenius_norm(W) - frobenius_norm(W + Z @ null))
    report(3, worst <= 1e-10, f"minimum norm, largest norm decrease {worst:.2e} (<= 1e-10)")


def test_04_scale_invariance(report):
    worst = 0.0
    for Ws, Cs in instances(100, SEED + 4):
        base = merge_interference(Ws, Cs)
        for c in (1e-3, 1.0, 1e3):
            worst = max(worst, rel(merge_interference(Ws, [c * C for C in Cs]), base))
    report(4, worst <= 1e-10, f"common covariance rescaling, max rel change {worst:.2e} (<= 1e-10)")


def test_05_triangle_bound(report):
    rng = np.random.default_rng(SEED + 5)
    runs, failures, checked = 24, 0, 0
    for r in range(runs):
        sc = generate_scenario(int(rng.integers(2**31)), T=1, widths=(6, 10, 4),
                               n_samples=int(rng.integers(2, 40)), eta=float(rng.uniform(0.005, 0.05)),
                               K=int(rng.integers(0, 120)), activation=("tanh", "relu", "identity")[r % 3])
        _, traces = train_full_batch(sc, 0, capture_layers=sc.net.weight_names)
        for tr in traces.values():
            rep = angle_error_report(accumulate_angle_terms(tr), tr.delta())
            checked += 1
            failures += int(rep.degenerate or not rep.lhs_angle <= rep.bound + 1e-9)
    report(5, failures == 0, f"angle triangle bound, {failures} failures over {runs} runs / {checked} layers")


def test_06_exact_proportionality(report):
    worst = 0.0
    for seed in range(5):
        sc = generate_scenario(SEED + seed, T=1, widths=(5, 7, 3), n_samples=1, K=0)
        _, traces = train_full_batch(sc, 0, capture_layers=sc.net.weight_names)
        for tr in traces.values():
            rep = angle_error_report(accumulate_angle_terms(tr), tr.delta())
            worst = max(worst, rep.eps_cross, rep.eps_corr, rep.eps_drift, rep.lhs_angle)
    report(6, worst <= 1e-6, f"single-sample single-step, max angle {worst:.2e} (<= 1e-6)")


def test_07_negative_transfer_bound(report):
    failures = 0
    for seed in range(50):
        for rep in transfer_bound_case(SEED + seed):
            failures += int(not rep.holds or rep.beta != 1.0)
    exact = [rep.covariance_term for seed in range(5) for rep in transfer_bound_case(SEED + seed, exact=True)]
    report(7, failures == 0 and all(t == 0.0 for t in exact),
           f"negative-transfer bound, {failures} violations over 50 nets; exact-covariance term max {max(exact)}")


def test_08_pinv_perturbation(report):
    rng = np.random.default_rng(SEED + 8)
    violations = sum(pinv_perturbation_gap(*pinv_pair(rng, i)) > 0 for i in range(1000))
    report(8, violations == 0, f"pseudoinverse perturbation bound, {violations}/1000 violations")


def _table(method, T, N, L):
    n2, n3 = N**2, N**3
    return {
        "average": (T * n2, 0),
        "task_arithmetic": ((2 * T + 1) * n2, 0),
        "regmean": ((T + 3) * n3 + (2 * T - 2) * n2, (2 * L - 1) * T * n2),
        "actmat": ((2 * T + 3) * n3 + (3 * T - 2) * n2, 0),
        "iso_c": (23 * n3 + (2 * T + 2) * n2 + N, 0),
        "tsv": ((22 * T + 45) * n3 + (T + 3) * n2, 0),
    }[method]


def test_09_flop_model(report):
    bad = [(m, T, N) for m in FLOP_METHODS for T in range(1, 9) for N in (1, 10, 64, 512)
           if flops(FlopModel(m, T, N, 100)) != _table(m, T, N, 100)]
    spot = (flops(FlopModel("average", 3, 10))[0], flops(FlopModel("actmat", 2, 10))[0])
    report(9, not bad and spot == (300, 7400), f"FLOP formulas, {len(bad)} mismatches on 192 grid points, spot {spot}")


def test_10_definitional_equivalence(report):
    rng = np.random.default_rng(SEED + 10)
    mismatches = 0
    for _ in range(100):
        m, n, T = (int(x) for x in rng.integers(1, 9, size=3))
        W0 = rng.normal(size=(m, n))
        deltas = [0.05 * rng.normal(size=(m, n)) for _ in range(T)]
        Ws = [W0 + D for D in deltas]
        mismatches += int(merge_actmat(Ws, deltas).tobytes() != merge_interference(Ws, [gram(D) for D in deltas]).tobytes())
    report(10, mismatches == 0, f"ACTMat vs interference merge on delta^T delta, {mismatches}/100 not bitwise equal")


# directional quality check: tasks are perturbations of the pretrained net
QUALITY_SCENARIO = dict(T=3, widths=(8, 16, 16), n_samples=32, eta=0.05, K=50, teacher_shift=0.3)


def test_11_toy_quality(report):
    actmat_wins = regmean_wins = 0
    for seed in range(20):
        sc = generate_scenario(SEED + seed, **QUALITY_SCENARIO)
        experts = [train_full_batch(sc, t)[0] for t in range(sc.T)]
        covs = [
            CovarianceBundle(f"task{t}", {k: empirical_covariance(z) for k, z in
                                          layer_inputs(sc.net, ex, sc.tasks[t].X).items()}, "empirical", 32)
            for t, ex in enumerate(experts)
        ]
        ts = TaskSet(sc.pretrained, experts, covs)
        loss = {m: float(np.mean(task_losses(sc, merge(ts, MergeConfig(method=m)))))
                for m in ("average", "actmat", "regmean")}
        actmat_wins += loss["actmat"] <= loss["average"]
        regmean_wins += loss["regmean"] <= min(loss["actmat"], loss["average"])
    report(11, actmat_wins >= 14 and regmean_wins >= 14,
           f"toy quality, ACTMat <= average in {actmat_wins}/20, RegMean <= both in {regmean_wins}/20 (need 14)")


def test_12_iso_c_and_tsv(report):
    rng = np.random.default_rng(SEED + 12)
    iso, tsv = 0.0, 0.0
    for _ in range(100):
        m, n = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        T = int(rng.integers(1, 5))
        W0 = rng.normal(size=(m, n))
        deltas = [rng.normal(size=(m, n)) for _ in range(T)]
        s = np.linalg.svd(merge_iso_c(W0, deltas) - W0, compute_uv=False)
        iso = max(iso, float(s.max() - s.min()))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            U, V = tsv_factors(deltas[: max(1, min(T, m, n))])
        for F in (U, V):
            tsv = max(tsv, float(np.max(np.abs(F.T @ F - np.eye(F.shape[1])))))
    report(12, iso <= 1e-9 and tsv <= 1e-9,
           f"Iso-C singular value spread {iso:.2e}, TSV factor Gram error {tsv:.2e} (both <= 1e-9)")


def test_13_round_trip(report, tmp_path):
    rng = np.random.default_rng(SEED + 13)
    failures = 0
    for i in range(100):
        tensors = {}
        for j in range(int(rng.integers(0, 6))):
            shape = tuple(int(s) for s in rng.integers(0, 6, size=int(rng.integers(0, 4))))
            dtype = (np.float32, np.float64)[int(rng.integers(2))]
            tensors[f"t{j}"] = rng.normal(size=shape).astype(dtype)
        ck = Checkpoint(f"c{i}", tensors)
        path = tmp_path / f"c{i}.ckpt.st"
        save_checkpoint(ck, path)
        failures += int(not load_checkpoint(path).bit_equal(ck))
    report(13, failures == 0, f"checkpoint round trip, {failures}/100 not bit-exact")
