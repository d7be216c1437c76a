"""Wall-clock timing of the per-layer merge rules."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .covariance import CovarianceBundle, empirical_covariance
from .flops import FlopModel, expensive_ops, flops
from .merging import MERGE_2D, MergeConfig, TaskSet, default_selector, merge_layer
from .tensor_store import Checkpoint

log = logging.getLogger(__name__)

__all__ = ["BenchRow", "bench", "synthetic_taskset", "rows_to_csv", "CSV_HEADER"]

CSV_HEADER = [
    "method", "status", "repeats", "median_s", "iqr_s", "merge_flops", "expensive_ops", "error",
]


@dataclass
class BenchRow:
    method: str
    status: str
    repeats: int
    median_s: float = float("nan")
    iqr_s: float = float("nan")
    merge_flops: int | None = None
    expensive_ops: int | None = None
    error: str = ""

    def as_list(self) -> list[str]:
        return [
            self.method, self.status, str(self.repeats), f"{self.median_s:.6g}", f"{self.iqr_s:.6g}",
            "" if self.merge_flops is None else str(self.merge_flops),
            "" if self.expensive_ops is None else str(self.expensive_ops),
            self.error,
        ]


def synthetic_taskset(n: int, T: int, seed: int = 0, samples: int | None = None) -> TaskSet:
    """One ``n x n`` layer per expert, with empirical covariances from random inputs."""
    rng = np.random.default_rng(seed)
    W0 = rng.normal(0.0, 1.0 / np.sqrt(n), (n, n))
    experts, bundles = [], []
    samples = samples or 2 * n
    for t in range(T):
        delta = rng.normal(0.0, 0.02 / np.sqrt(n), (n, n))
        experts.append(Checkpoint(name=f"expert{t}", tensors={"layer.weight": W0 + delta}))
        Z = rng.normal(size=(samples, n)) * rng.uniform(0.2, 1.5, n)
        bundles.append(
            CovarianceBundle(f"task{t}", {"layer.weight": empirical_covariance(Z)}, "empirical", samples)
        )
    return TaskSet(Checkpoint("pretrained", {"layer.weight": W0}), experts, bundles)


def bench(ts: TaskSet, methods: Sequence[str], repeats: int = 5) -> list[BenchRow]:
    """Median and interquartile range of merge time per method, I/O excluded.

    A failing or unknown method yields a row with ``status="failed"``;
    the remaining methods still run.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    layers = [k for k, v in ts.pretrained.items() if default_selector(k, v.shape) == MERGE_2D]
    rows = []
    for method in methods:
        try:
            cfg = MergeConfig(method=method)
            inputs = []
            for key in layers:
                W0 = ts.pretrained[key].astype(np.float64)
                Ws = [ex[key].astype(np.float64) for ex in ts.experts]
                covs = None
                if method == "regmean":
                    if ts.covariances is None:
                        raise ValueError("regmean requires covariances")
                    covs = [b.layer_covs[key] for b in ts.covariances]
                inputs.append((key, W0, Ws, covs))
            times = []
            for _ in range(repeats):
                start = time.perf_counter()
                for key, W0, Ws, covs in inputs:
                    merge_layer(method, W0, Ws, cfg, covs, key)
                times.append(time.perf_counter() - start)
            q25, q50, q75 = np.quantile(times, [0.25, 0.5, 0.75])
            n = max(ts.pretrained[layers[0]].shape) if layers else 1
            rows.append(BenchRow(
                method, "ok", repeats, float(q50), float(q75 - q25),
                flops(FlopModel(method, ts.T, n))[0], expensive_ops(method, ts.T),
            ))
            log.info("bench %s: median %.4fs", method, q50)
        except Exception as exc:  # noqa: BLE001 - one bad method must not abort the table
            log.warning("bench %s failed: %s", method, exc)
            rows.append(BenchRow(method, "failed", repeats, error=str(exc)))
    return rows


def rows_to_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.as_list())
    return buf.getvalue()

