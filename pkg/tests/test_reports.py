import numpy as np
import pytest

from bilevelfd.benchmarks import gen_matsense, toy_problem
from bilevelfd.reports import (
    aggregate_traces,
    fmt_float,
    read_trace_csv,
    render_trace_figures,
    trace_columns,
    write_trace_csv,
)
from bilevelfd.solver import TraceOptions, TraceRow, run


def _rows(n=5, extras=False, timing=False):
    rows = []
    for t in range(1, n + 1):
        rows.append(
            TraceRow(
                t=t,
                grad_map_norm_sq=1.0 / t,
                surrogate_norm=1.0 / t**0.5,
                lower_grad_norm=0.1 * t,
                v_residual_norm=0.2,
                f_val=float(t),
                g_val=-float(t),
                extras={"loss": 2.0 / t, "distance": 3.0 / t} if extras else {},
                gradient_calls=7 * t,
                wall_time_ns=1000 * t if timing else None,
            )
        )
    return rows


class TestFloatFormat:
    def test_round_trip_exact(self):
        for x in (1 / 3, 1e-17, 123456.789, np.pi, 5e-324, -0.1):
            assert float(fmt_float(x)) == x


class TestTraceCsv:
    def test_column_order_core(self):
        cols = trace_columns(_rows())
        assert cols == [
            "t", "grad_map_norm_sq", "surrogate_norm", "lower_grad_norm",
            "v_residual_norm", "f_val", "g_val", "gradient_calls",
        ]

    def test_column_order_with_extras_and_timing(self):
        cols = trace_columns(_rows(extras=True, timing=True))
        assert cols[-1] == "wall_time_ns"
        assert cols[-2] == "gradient_calls"
        assert cols[7:9] == ["loss", "distance"]

    def test_write_read_round_trip(self, tmp_path):
        path = tmp_path / "trace.csv"
        rows = _rows(extras=True)
        write_trace_csv(path, rows, {"problem": "demo", "seed": 3})
        header, cols, data = read_trace_csv(path)
        assert header == {"problem": "demo", "seed": "3"}
        assert list(data["t"]) == [1, 2, 3, 4, 5]
        np.testing.assert_array_equal(data["loss"], [2.0 / t for t in range(1, 6)])
        np.testing.assert_array_equal(
            data["grad_map_norm_sq"], [1.0 / t for t in range(1, 6)]
        )

    def test_header_lines_are_comments(self, tmp_path):
        path = tmp_path / "trace.csv"
        write_trace_csv(path, _rows(), {"a": 1, "b": "x y"})
        text = path.read_text().splitlines()
        assert text[0] == "# a = 1"
        assert text[1] == "# b = x y"
        assert text[2].startswith("t,")

    def test_rewrite_is_byte_identical(self, tmp_path):
        rows = _rows()
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_trace_csv(p1, rows, {"seed": 0})
        write_trace_csv(p2, rows, {"seed": 0})
        assert p1.read_bytes() == p2.read_bytes()

    def test_optional_column_empty_cells(self, tmp_path):
        rows = _rows(3)
        for r in rows:
            r.lower_gap = None
        rows[0].lower_gap = 0.5  # first row decides the column exists
        path = write_trace_csv(tmp_path / "t.csv", rows)
        _, cols, data = read_trace_csv(path)
        assert "lower_gap" in cols
        assert data["lower_gap"][0] == 0.5
        assert np.isnan(data["lower_gap"][1])


class TestAggregate:
    def test_mean_matches_hand_average(self, tmp_path):
        paths = []
        rng = np.random.default_rng(0)
        all_values = []
        for s in range(3):
            rows = _rows(4)
            vals = rng.standard_normal(4)
            for r, v in zip(rows, vals):
                r.f_val = float(v)
            all_values.append(vals)
            p = tmp_path / f"seed{s}.csv"
            write_trace_csv(p, rows, {"seed": s})
            paths.append(p)
        out = aggregate_traces(paths, tmp_path / "agg.csv")
        _, _, data = read_trace_csv(out)
        hand = np.mean(np.stack(all_values), axis=0)
        np.testing.assert_allclose(data["f_val"], hand, rtol=1e-15)
        assert list(data["gradient_calls"]) == [7, 14, 21, 28]

    def test_length_mismatch_rejected(self, tmp_path):
        p1 = write_trace_csv(tmp_path / "a.csv", _rows(3))
        p2 = write_trace_csv(tmp_path / "b.csv", _rows(4))
        with pytest.raises(ValueError, match="length"):
            aggregate_traces([p1, p2], tmp_path / "agg.csv")


class TestFigures:
    def test_run_figure_written(self, tmp_path):
        path = write_trace_csv(tmp_path / "trace.csv", _rows(20))
        written = render_trace_figures(path, tmp_path / "figs")
        names = {p.name for p in written}
        assert "gradient_norm.png" in names
        for p in written:
            assert p.stat().st_size > 0

    def test_metric_figures_for_sensing_columns(self, tmp_path):
        path = write_trace_csv(tmp_path / "trace.csv", _rows(20, extras=True))
        written = render_trace_figures(path, tmp_path / "figs")
        names = {p.name for p in written}
        assert {"gradient_norm.png", "loss.png", "distance.png"} <= names


class TestEndToEndTraceSerialization:
    def test_solver_rows_serialize_with_metrics(self, tmp_path):
        prob = gen_matsense(d=6, r=2, n=40, seed=0)
        hp = prob.default_hyperparams(iters=5)
        x0, y0, v0 = prob.default_init()
        res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0,
                  extra_metrics=prob.metrics)
        path = write_trace_csv(tmp_path / "t.csv", res.rows, {"problem": "matsense"})
        _, cols, data = read_trace_csv(path)
        assert "loss" in cols and "distance" in cols
        assert data["gradient_calls"][-1] == 35

    def test_timing_column_appears_last(self, tmp_path):
        prob = toy_problem()
        hp = prob.default_hyperparams(iters=3)
        x0, y0, v0 = prob.default_init()
        res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0,
                  options=TraceOptions(timing=True))
        path = write_trace_csv(tmp_path / "t.csv", res.rows)
        _, cols, data = read_trace_csv(path)
        assert cols[-1] == "wall_time_ns"
        assert np.all(np.diff(data["wall_time_ns"]) >= 0)
