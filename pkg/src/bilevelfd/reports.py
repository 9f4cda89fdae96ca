"""Trace serialization and figure rendering.

Traces go to CSV with the run configuration embedded as ``# key = value``
comment lines, floats printed with 17 significant digits so files round-trip
and reruns with the same config are byte-identical. Figures are rendered to
PNG next to the delimited output.

Column order is fixed: t, grad_map_norm_sq, surrogate_norm, lower_grad_norm,
v_residual_norm, f_val, g_val, then any enabled optional columns
(lower_gap, lyapunov, exact_grad_map_norm_sq, problem metrics), then
gradient_calls, then wall_time_ns when timing was recorded.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

CORE_COLUMNS = (
    "t",
    "grad_map_norm_sq",
    "surrogate_norm",
    "lower_grad_norm",
    "v_residual_norm",
    "f_val",
    "g_val",
)
OPTIONAL_COLUMNS = ("lower_gap", "lyapunov", "exact_grad_map_norm_sq")
INT_COLUMNS = ("t", "gradient_calls", "wall_time_ns")


def fmt_float(x: float) -> str:
    return "%.17g" % x


def trace_columns(rows: Sequence) -> list[str]:
    """Column list for a trace, derived from what the first row carries."""
    if not rows:
        return list(CORE_COLUMNS) + ["gradient_calls"]
    first = rows[0]
    cols = list(CORE_COLUMNS)
    for name in OPTIONAL_COLUMNS:
        if getattr(first, name) is not None:
            cols.append(name)
    cols.extend(first.extras.keys())
    cols.append("gradient_calls")
    if first.wall_time_ns is not None:
        cols.append("wall_time_ns")
    return cols


def _cell(row, name: str) -> str:
    if name in row.extras:
        return fmt_float(row.extras[name])
    value = getattr(row, name)
    if value is None:
        return ""
    if name in INT_COLUMNS:
        return str(int(value))
    return fmt_float(float(value))


def write_trace_csv(path, rows: Sequence, config: Optional[dict] = None) -> Path:
    """Write one trace; ``config`` lands in the comment header, key = value."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = trace_columns(rows)
    with path.open("w", newline="") as fh:
        for key, value in (config or {}).items():
            fh.write(f"# {key} = {value}\n")
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_cell(row, c) for c in cols])
    return path


def read_trace_csv(path) -> tuple[dict, list[str], dict[str, np.ndarray]]:
    """Read a trace back: (header config, column names, column arrays)."""
    header: dict[str, str] = {}
    with Path(path).open() as fh:
        lines = fh.read().splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#"):
            text = line[1:].strip()
            if "=" in text:
                key, _, value = text.partition("=")
                header[key.strip()] = value.strip()
            body_start = i + 1
        else:
            break
    reader = csv.reader(lines[body_start:])
    cols = next(reader)
    raw = [r for r in reader if r]
    data = {}
    for j, name in enumerate(cols):
        vals = [r[j] for r in raw]
        if name in INT_COLUMNS:
            data[name] = np.array([int(v) for v in vals], dtype=np.int64)
        else:
            data[name] = np.array([float(v) if v else math.nan for v in vals])
    return header, cols, data


def write_summary_json(path, summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=False)
        fh.write("\n")
    return path


def aggregate_traces(paths: Iterable, out_path, config: Optional[dict] = None) -> Path:
    """Per-iteration mean across trace files with identical columns/length.

    Integer columns must agree across files and are carried through; float
    columns are averaged row by row.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("no trace files to aggregate")
    columns = None
    stacks: dict[str, list[np.ndarray]] = {}
    for p in paths:
        _, cols, data = read_trace_csv(p)
        if columns is None:
            columns = cols
            stacks = {c: [] for c in cols}
        elif cols != columns:
            raise ValueError(f"column mismatch between {paths[0]} and {p}")
        for c in cols:
            stacks[c].append(data[c])

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(config or {})
    header["aggregate_of"] = ",".join(p.name for p in paths)
    with out_path.open("w", newline="") as fh:
        for key, value in header.items():
            fh.write(f"# {key} = {value}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        length = len(stacks[columns[0]][0])
        for c in columns:
            for arr in stacks[c]:
                if len(arr) != length:
                    raise ValueError("trace length mismatch across seeds")
        for i in range(length):
            cells = []
            for c in columns:
                vals = np.array([arr[i] for arr in stacks[c]], dtype=float)
                if c in INT_COLUMNS:
                    if not np.all(vals == vals[0]):
                        raise ValueError(f"integer column {c} differs across seeds")
                    cells.append(str(int(vals[0])))
                else:
                    cells.append(fmt_float(float(vals.mean())))
            writer.writerow(cells)
    return out_path


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _semilogy(plt, t, series: dict[str, np.ndarray], title: str, ylabel: str):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, values in series.items():
        positive = np.where(values > 0, values, np.nan)
        ax.semilogy(t, positive, label=label, linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    return fig


def render_trace_figures(csv_path, out_dir, title: str = "") -> list[Path]:
    """Render the standard figures for one trace (or aggregate) CSV.

    Always draws the gradient-norm decay; adds loss/distance panels when the
    trace carries those columns. Returns the written paths.
    """
    plt = _plt()
    _, cols, data = read_trace_csv(csv_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    t = data["t"]

    series = {"surrogate norm": data["surrogate_norm"]}
    if "grad_map_norm_sq" in cols:
        series["gradient mapping norm"] = np.sqrt(data["grad_map_norm_sq"])
    fig = _semilogy(plt, t, series, title or "gradient norm vs iteration", "norm of gradient")
    path = out_dir / "gradient_norm.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    for col, fname, ylabel in (
        ("loss", "loss.png", "loss"),
        ("distance", "distance.png", "distance"),
        ("lyapunov", "potential.png", "potential"),
    ):
        if col in cols:
            fig = _semilogy(plt, t, {col: data[col]}, f"{col} vs iteration", ylabel)
            path = out_dir / fname
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
    return written
