import csv
import io

import pytest

from actmat.bench import CSV_HEADER, bench, rows_to_csv, synthetic_taskset


def test_one_method_one_row():
    rows = bench(synthetic_taskset(8, 2), ["actmat"], repeats=1)
    assert len(rows) == 1 and rows[0].status == "ok" and rows[0].repeats == 1


def test_unknown_method_marked_failed():
    rows = bench(synthetic_taskset(8, 2), ["bogus", "average", "regmean"], repeats=2)
    assert [r.status for r in rows] == ["failed", "ok", "ok"]
    assert "bogus" in rows[0].error


def test_csv_header_and_quoting():
    rows = bench(synthetic_taskset(6, 2), ["tsv", "nope"], repeats=1)
    parsed = list(csv.reader(io.StringIO(rows_to_csv(rows))))
    assert parsed[0] == CSV_HEADER
    assert all(len(r) == len(CSV_HEADER) for r in parsed)
    assert parsed[1][0] == "tsv" and int(parsed[1][6]) == 4


def test_invalid_repeats():
    with pytest.raises(ValueError):
        bench(synthetic_taskset(4, 1), ["average"], repeats=0)


@pytest.mark.slow
def test_actmat_faster_than_tsv_at_512():
    # machine-dependent: relative ordering only
    rows = {r.method: r for r in bench(synthetic_taskset(512, 8), ["actmat", "tsv"], repeats=5)}
    assert rows["actmat"].median_s < rows["tsv"].median_s
