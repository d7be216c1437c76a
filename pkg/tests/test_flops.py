import pytest

from actmat.flops import FLOP_METHODS, FlopModel, expensive_ops, flops


def horner(coeffs, x):
    # coefficients highest degree first
    acc = 0
    for c in coeffs:
        acc = acc * x + c
    return acc


def hand_coded(method, T, N, L):
    # each cost as a polynomial in N with T-dependent coefficients
    table = {
        "average": [T, 0, 0],
        "task_arithmetic": [2 * T + 1, 0, 0],
        "regmean": [T + 3, 2 * T - 2, 0, 0],
        "actmat": [2 * T + 3, 3 * T - 2, 0, 0],
        "iso_c": [23, 2 * T + 2, 1, 0],
        "tsv": [22 * T + 45, T + 3, 0, 0],
    }
    pre = horner([(2 * L - 1) * T, 0, 0], N) if method == "regmean" else 0
    return horner(table[method], N), pre


def test_table_examples():
    assert flops(FlopModel("average", 3, 10)) == (300, 0)
    assert flops(FlopModel("regmean", 2, 10, 100)) == (5200, 39800)
    assert flops(FlopModel("actmat", 2, 10)) == (7400, 0)


@pytest.mark.parametrize("method", FLOP_METHODS)
def test_grid_against_hand_coded(method):
    for T in range(1, 9):
        for N in (1, 10, 64, 512):
            for L in (1, 300):
                got = flops(FlopModel(method, T, N, L))
                assert got == hand_coded(method, T, N, L)
                assert all(type(v) is int for v in got)


def test_invalid_models():
    for bad in [("actmat", 0, 10), ("actmat", 2, 0), ("actmat", 2, 3, 0), ("actmat", 2.0, 3)]:
        with pytest.raises(ValueError):
            FlopModel(*bad)
    with pytest.raises(ValueError):
        flops(FlopModel("ties", 2, 3))


def test_expensive_ops():
    assert expensive_ops("tsv", 8) == 10
    assert expensive_ops("actmat", 8) == 1
    assert expensive_ops("average", 8) == 0
