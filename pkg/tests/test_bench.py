from __future__ import annotations

import math

from moprune.bench import bench_csv, bench_hinv, compare_methods, synthetic_bundle
from moprune.hinv import Method


def test_bench_rows_and_csv(tmp_path):
    rows = bench_hinv([[24, 4, 6], [16, 16, 3]], repeats=2)
    assert [(r.method, r.d_in) for r in rows] == [("direct", 24), ("woodbury", 24), ("direct", 16), ("woodbury", 16)]
    assert all(r.max_rel_residual < 1e-7 and r.wall_ms > 0 for r in rows)
    text = bench_csv(rows, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text() == text
    assert text.splitlines()[0] == "method,d_in,N,K,wall_ms,max_rel_residual"


def test_compare_methods_keeps_first_residual():
    out = compare_methods(synthetic_bundle(20, 3, 4), repeats=3)
    assert set(out) == {Method.DIRECT, Method.WOODBURY}
    assert all(not math.isnan(res) for _, res in out.values())
