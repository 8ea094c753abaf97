"""Aggregation and serialisation of experiment reports."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import binomtest

import svg_plots

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.12g"
SUMMARY_COLUMNS = ("n", "n_associated", "association_rate", "n_correct", "accuracy",
                   "accuracy_low", "accuracy_high")


def records_frame(records: Sequence[Any]) -> pd.DataFrame:
    """One row per trial; condition fields become columns."""
    rows = []
    for r in records:
        row = {
            "trial": r.trial,
            "seed": r.seed,
            "truth": r.truth,
            "statistic": r.statistic,
            "threshold": r.threshold,
            "decision": r.decision,
            "correct": r.correct,
            "error": r.error,
        }
        row.update(r.condition)
        rows.append(row)
    return pd.DataFrame(rows)


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple:
    if n == 0:
        return float("nan"), float("nan")
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def bin_column(values: pd.Series, edges: Sequence[float]) -> pd.Series:
    """Label each value with the lower edge of its [lo, hi) bin; the last bin is closed."""
    edges = np.asarray(edges, dtype=float)
    raw = values.to_numpy(dtype=float)
    idx = np.clip(np.searchsorted(edges, raw, side="right") - 1, 0, len(edges) - 2)
    return pd.Series(np.where(np.isnan(raw), np.nan, edges[idx]), index=values.index)


def summarize(records: Sequence[Any], by: List[str],
              bins: Optional[Dict[str, Sequence[float]]] = None) -> pd.DataFrame:
    """Association rate and accuracy per group, with Wilson intervals on accuracy."""
    frame = records_frame(records)
    columns = by + list(SUMMARY_COLUMNS)
    if frame.empty:
        return pd.DataFrame(columns=columns)
    for column in by:
        if column not in frame:
            frame[column] = np.nan
    for column, edges in (bins or {}).items():
        frame[column] = bin_column(frame[column], edges)

    rows = []
    # failed trials carry no condition and form their own NaN group
    for key, group in frame.groupby(by, sort=True, dropna=False):
        key = key if isinstance(key, tuple) else (key,)
        n = len(group)
        associated = int(group["decision"].sum())
        correct = int(group["correct"].sum())
        low, high = wilson_interval(correct, n)
        rows.append({
            **dict(zip(by, key)),
            "n": n,
            "n_associated": associated,
            "association_rate": associated / n,
            "n_correct": correct,
            "accuracy": correct / n,
            "accuracy_low": low,
            "accuracy_high": high,
        })
    return pd.DataFrame(rows, columns=columns)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return _jsonable(float(value))
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "to_dict") and not isinstance(value, pd.DataFrame):
        return _jsonable(value.to_dict())
    if isinstance(value, pd.DataFrame):
        return _jsonable(value.to_dict(orient="records"))
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def report_to_json(report: Any) -> str:
    return json.dumps(_jsonable(report.to_dict()), sort_keys=True, indent=2)


def curves_frame(report: Any) -> pd.DataFrame:
    """All curves of a report stacked, tagged by curve name."""
    frames = []
    for name in sorted(report.curves):
        frame = report.curves[name].copy()
        frame.insert(0, "curve", name)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["curve"])
    return pd.concat(frames, ignore_index=True, sort=False)


def write_report(report: Any, out_dir: Path, timestamp: bool = False) -> Dict[str, Path]:
    """Write <experiment>_<seed>.json/.csv/.svg under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{report.experiment}_{report.seed}"
    paths = {
        "json": out_dir / f"{stem}.json",
        "csv": out_dir / f"{stem}.csv",
        "svg": out_dir / f"{stem}.svg",
    }
    paths["json"].write_text(report_to_json(report) + "\n", encoding="utf-8")
    curves_frame(report).to_csv(paths["csv"], index=False, float_format=CSV_FLOAT_FORMAT)
    paths["svg"].write_text(report_svg(report, timestamp=timestamp), encoding="utf-8")
    if getattr(report, "heatmap", None) is not None:
        paths["contingency"] = out_dir / f"{stem}_contingency.svg"
        paths["contingency"].write_text(
            svg_plots.heatmap_svg(report.heatmap, title="Summed photoreceptor response", timestamp=timestamp),
            encoding="utf-8",
        )
    logger.info(f"Wrote {report.experiment} report to {out_dir}")
    return paths


def report_svg(report: Any, timestamp: bool = False) -> str:
    """Plot the report's main curve (or its arrow field when it carries one)."""
    plot = report.plot or {}
    if plot.get("kind") == "arrows":
        return svg_plots.arrow_field_svg(report.plot_data, title=plot.get("title", report.experiment),
                                         timestamp=timestamp)
    if plot.get("kind") == "curves":
        return svg_plots.line_chart(report.plot_data, title=plot.get("title", report.experiment),
                                    xlabel=plot.get("xlabel", ""), ylabel=plot.get("ylabel", ""),
                                    timestamp=timestamp)
    curve = report.curves.get(plot.get("curve", "")) if report.curves else None
    if curve is None or curve.empty:
        return svg_plots.empty_chart(report.experiment, timestamp=timestamp)
    x, y, series = plot["x"], plot.get("y", "association_rate"), plot.get("series")
    data = {}
    groups: Iterable = curve.groupby(series, sort=True) if series else [("all", curve)]
    for name, group in groups:
        group = group.sort_values(x)
        data[str(name)] = (group[x].to_numpy(dtype=float), group[y].to_numpy(dtype=float))
    return svg_plots.line_chart(data, title=plot.get("title", report.experiment),
                                xlabel=x, ylabel=y, timestamp=timestamp)
