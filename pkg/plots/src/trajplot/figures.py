"""Render experiment CSVs into grouped-bar and curve figures.

Reads only the documented CSV schemas: the 11-column evaluation table
(method,env,task,seed,query_id,goal_index,mode,foresight,metric_name,
metric_value,ckpt_step) and the return-curve table (step,seed,eval_return).
Bars show the mean with a population (1/N) std error bar; curves show the
mean over seeds with a shaded std band. Inputs are opened read-only and
never modified.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("goal_bars", "multigoal_bars", "curve", "ablation_bars")

CURVE_HEADER = ("step", "seed", "eval_return")

# which column carries the plotted value, per recognized header
_VALUE_COLUMN = {CURVE_HEADER: "eval_return"}

_DEFAULT_GROUPS = {
    "goal_bars": ("task", "method"),
    "multigoal_bars": ("goal_index", "method"),
    "ablation_bars": ("method",),
    "curve": ("method",),
}


class SchemaError(ValueError):
    """A required column is absent from the CSV header."""

    def __init__(self, column: str, path: str):
        self.column = column
        super().__init__(f"missing column {column!r} in {path}")


class EmptyInputError(ValueError):
    """No data rows survived reading and filtering."""


@dataclasses.dataclass(frozen=True)
class FigureSpec:
    csv_paths: tuple[str, ...]
    kind: str
    out: str
    group_by: tuple[str, ...] | None = None
    metric: str | None = None
    title: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}")
        if not self.csv_paths:
            raise ValueError("at least one csv path required")

    @property
    def groups(self) -> tuple[str, ...]:
        return self.group_by or _DEFAULT_GROUPS[self.kind]

    @classmethod
    def from_dict(cls, payload: dict) -> "FigureSpec":
        paths = payload["csv"]
        if isinstance(paths, str):
            paths = [paths]
        group_by = payload.get("group_by")
        return cls(csv_paths=tuple(paths), kind=payload["kind"],
                   out=payload["out"],
                   group_by=tuple(group_by) if group_by else None,
                   metric=payload.get("metric"), title=payload.get("title"))

    @classmethod
    def from_json(cls, path: str) -> "FigureSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def read_rows(paths) -> tuple[tuple[str, ...], list[dict]]:
    """All data rows across files; every file must share one header."""
    header: tuple[str, ...] | None = None
    rows: list[dict] = []
    for path in paths:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            cols = tuple(reader.fieldnames or ())
            if header is None:
                header = cols
            elif cols != header:
                raise ValueError(f"{path} header differs from {paths[0]}")
            rows.extend(reader)
    return header or (), rows


def _require(header: tuple[str, ...], columns, path: str) -> None:
    for col in columns:
        if col not in header:
            raise SchemaError(col, path)


def mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def _select(rows: list[dict], header, spec: FigureSpec, path: str) -> list[dict]:
    value_col = _VALUE_COLUMN.get(header, "metric_value")
    _require(header, (value_col,), path)
    if spec.metric is not None:
        _require(header, ("metric_name",), path)
        rows = [r for r in rows if r["metric_name"] == spec.metric]
    if not rows:
        raise EmptyInputError(f"no rows to plot from {', '.join(spec.csv_paths)}")
    return rows


def aggregate(rows: list[dict], keys: tuple[str, ...],
              value_col: str) -> dict[tuple, tuple[float, float]]:
    """{key tuple: (mean, population std)} over the value column."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = tuple(r[k] for k in keys)
        groups.setdefault(key, []).append(float(r[value_col]))
    return {k: mean_std(v) for k, v in groups.items()}


def _sorted_unique(rows, col):
    vals = {r[col] for r in rows}
    # numeric-looking labels sort numerically so goal indices stay in order
    try:
        return sorted(vals, key=float)
    except ValueError:
        return sorted(vals)


def _render_bars(ax, rows: list[dict], groups: tuple[str, ...],
                 value_col: str) -> None:
    if len(groups) == 1:
        outer, inner = groups[0], None
    else:
        outer, inner = groups[0], groups[1]
    outer_labels = _sorted_unique(rows, outer)
    inner_labels = _sorted_unique(rows, inner) if inner else [None]
    stats = aggregate(rows, tuple(g for g in groups[:2]), value_col)
    width = 0.8 / len(inner_labels)
    for j, bar_label in enumerate(inner_labels):
        xs, heights, errs = [], [], []
        for i, group_label in enumerate(outer_labels):
            key = (group_label,) if bar_label is None else (group_label, bar_label)
            if key not in stats:
                continue
            mean, std = stats[key]
            xs.append(i + (j - (len(inner_labels) - 1) / 2) * width)
            heights.append(mean)
            errs.append(std)
        ax.bar(xs, heights, width=width, yerr=errs, capsize=3,
               label=None if bar_label is None else str(bar_label))
    ax.set_xticks(range(len(outer_labels)))
    ax.set_xticklabels([str(lab) for lab in outer_labels])
    ax.set_xlabel(outer)
    ax.set_ylabel(value_col + " (mean, 1/N std)")
    if inner:
        ax.legend(title=inner)


def _render_curve(ax, rows: list[dict], header, spec: FigureSpec) -> None:
    if header == CURVE_HEADER:
        x_col, y_col, series_cols = "step", "eval_return", ()
    else:
        x_col, y_col = "ckpt_step", "metric_value"
        series_cols = spec.groups
        _require(header, series_cols, spec.csv_paths[0])
    _require(header, (x_col, y_col), spec.csv_paths[0])
    series_labels = ([tuple(lab) for lab in
                      sorted({tuple(r[c] for c in series_cols) for r in rows})]
                     if series_cols else [()])
    for label in series_labels:
        sel = [r for r in rows
               if tuple(r[c] for c in series_cols) == label]
        stats = aggregate(sel, (x_col,), y_col)
        xs = sorted(stats, key=lambda k: float(k[0]))
        x = np.array([float(k[0]) for k in xs])
        mean = np.array([stats[k][0] for k in xs])
        std = np.array([stats[k][1] for k in xs])
        name = "/".join(label) if label else y_col
        ax.plot(x, mean, label=name)
        ax.fill_between(x, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel(x_col)
    ax.set_ylabel(y_col + " (mean over seeds, 1/N std band)")
    ax.legend()


def render(spec: FigureSpec):
    """Build and save the figure; returns the matplotlib Figure."""
    header, rows = read_rows(spec.csv_paths)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    try:
        if spec.kind == "curve":
            if header != CURVE_HEADER:
                rows = _select(rows, header, spec, spec.csv_paths[0])
            elif not rows:
                raise EmptyInputError(
                    f"no rows to plot from {', '.join(spec.csv_paths)}")
            _render_curve(ax, rows, header, spec)
        else:
            _require(header, spec.groups, spec.csv_paths[0])
            rows = _select(rows, header, spec, spec.csv_paths[0])
            _render_bars(ax, rows, spec.groups,
                         _VALUE_COLUMN.get(header, "metric_value"))
        if spec.title:
            ax.set_title(spec.title)
        fig.tight_layout()
        parent = os.path.dirname(spec.out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        fig.savefig(spec.out)
    except Exception:
        plt.close(fig)
        raise
    return fig
