"""Closed-form operation counts for merging T square N x N linear layers.

Costs assume a matrix product of N^3, an inverse of 2N^3 and an SVD of
22N^3 operations. Only RegMean has a preprocessing cost: accumulating L
outer products per task for its covariance estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["FlopModel", "flops", "expensive_ops", "FLOP_METHODS"]

FLOP_METHODS = ("average", "task_arithmetic", "regmean", "actmat", "iso_c", "tsv")


@dataclass(frozen=True)
class FlopModel:
    method: str
    T: int
    N: int
    L: int = 1

    def __post_init__(self):
        for name in ("T", "N", "L"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")


def flops(model: FlopModel) -> tuple[int, int]:
    """Return ``(merge_flops, preprocess_flops)`` as exact integers."""
    T, N, L = model.T, model.N, model.L
    n2, n3 = N * N, N * N * N
    method = model.method
    if method == "average":
        return T * n2, 0
    if method == "task_arithmetic":
        return (2 * T + 1) * n2, 0
    if method == "regmean":
        return (T + 3) * n3 + (2 * T - 2) * n2, (2 * L - 1) * T * n2
    if method == "actmat":
        return (2 * T + 3) * n3 + (3 * T - 2) * n2, 0
    if method == "iso_c":
        return 23 * n3 + (2 * T + 2) * n2 + N, 0
    if method == "tsv":
        return (22 * T + 45) * n3 + (T + 3) * n2, 0
    raise ValueError(f"unknown method {method!r}; expected one of {FLOP_METHODS}")


def expensive_ops(method: str, T: int) -> int:
    """Number of inherently sequential SVDs or inversions."""
    if method not in FLOP_METHODS:
        raise ValueError(f"unknown method {method!r}")
    return {"average": 0, "task_arithmetic": 0, "regmean": 1, "actmat": 1, "iso_c": 1}.get(method, T + 2)

