"""Ranging error metrics, model comparison and report artifacts."""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .iqfile import atomic_write_text

METRIC_ROWS = (("rmse_m", "RMSE"), ("std_m", "Standard deviation"),
               ("max_abs_error_m", "Maximum error"))


@dataclass
class RangingReport:
    model_id: str
    dataset_id: str
    errors_m: np.ndarray
    rmse_m: float
    std_m: float  # population std of signed errors
    abs_std_m: float  # population std of |errors|
    mean_error_m: float
    max_abs_error_m: float
    cdf_error_m: np.ndarray = field(repr=False)
    cdf_fraction: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        return {"model": self.model_id, "dataset": self.dataset_id,
                "n": int(len(self.errors_m)), "rmse_m": self.rmse_m, "std_m": self.std_m,
                "abs_std_m": self.abs_std_m, "mean_error_m": self.mean_error_m,
                "max_abs_error_m": self.max_abs_error_m}


def empirical_cdf(values):
    """Distinct sorted values and the fraction of samples at or below each."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("CDF of an empty sample")
    xs, counts = np.unique(v, return_counts=True)
    return xs, np.cumsum(counts) / v.size


def compute_metrics(predictions, truths, model_id: str = "model",
                    dataset_id: str = "") -> RangingReport:
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(truths, dtype=float).ravel()
    if p.size == 0:
        raise ValueError("no predictions to evaluate")
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions vs {t.size} truths")
    return report_from_errors(p - t, model_id, dataset_id)


def report_from_errors(errors, model_id: str = "model", dataset_id: str = "") -> RangingReport:
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("no errors to summarize")
    a = np.abs(e)
    xs, frac = empirical_cdf(a)
    return RangingReport(model_id, dataset_id, e,
                         rmse_m=float(np.sqrt(np.mean(e * e))),
                         std_m=float(np.std(e)),
                         abs_std_m=float(np.std(a)),
                         mean_error_m=float(np.mean(e)),
                         max_abs_error_m=float(a.max()),
                         cdf_error_m=xs, cdf_fraction=frac)


@dataclass
class Comparison:
    model_a: str
    model_b: str
    rows: list  # (metric, value_a, value_b, improvement)

    def improvement(self, metric: str = "rmse_m") -> float:
        for name, _, _, imp in self.rows:
            if name == metric:
                return imp
        raise KeyError(metric)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", self.model_a, self.model_b, "improvement"])
        for name, a, b, imp in self.rows:
            w.writerow([name, repr(a), repr(b), repr(imp)])
        return buf.getvalue()


def compare_models(report_a: RangingReport, report_b: RangingReport) -> Comparison:
    """Metrics side by side; improvement = (a - b) / a, positive when b is better."""
    if report_a.dataset_id != report_b.dataset_id:
        raise ValueError(
            f"reports come from different datasets: {report_a.dataset_id!r} vs "
            f"{report_b.dataset_id!r}")
    rows = []
    for key in ("rmse_m", "std_m", "abs_std_m", "max_abs_error_m"):
        a, b = getattr(report_a, key), getattr(report_b, key)
        imp = (a - b) / a if a != 0 else 0.0
        rows.append((key, float(a), float(b), float(imp)))
    return Comparison(report_a.model_id, report_b.model_id, rows)


def render_table(reports, labels=None, claimed_reduction: float | None = None) -> str:
    """Plain-text comparison table in meters, two decimals.

    With two reports, a closing line gives the RMSE reduction of the second
    over the first. ``claimed_reduction`` (a fraction) adds a footnote when a
    separately quoted reduction does not match the computed one.
    """
    labels = labels or [r.model_id for r in reports]
    head = "Performance measure [m]"
    width = max(len(head), max(len(t) for _, t in METRIC_ROWS))
    col = max(10, max(len(lb) for lb in labels) + 2)
    lines = [head.ljust(width) + "".join(lb.rjust(col) for lb in labels)]
    lines.append("-" * len(lines[0]))
    for key, title in METRIC_ROWS:
        lines.append(title.ljust(width) + "".join(f"{getattr(r, key):{col}.2f}" for r in reports))
    if len(reports) == 2:
        a, b = reports
        red = (a.rmse_m - b.rmse_m) / a.rmse_m if a.rmse_m else 0.0
        lines.append(f"RMSE reduction {labels[0]} -> {labels[1]}: {100 * red:.1f}%")
        if claimed_reduction is not None and round(100 * claimed_reduction, 1) != round(100 * red, 1):
            lines.append(
                f"* A quoted reduction of {100 * claimed_reduction:.1f}% is inconsistent with "
                f"these RMSE values; {a.rmse_m:.2f} -> {b.rmse_m:.2f} is a "
                f"{100 * red:.1f}% reduction.")
    return "\n".join(lines) + "\n"


def _slug(name: str) -> str:
    s = re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_")
    if not s:
        raise ValueError(f"model id {name!r} is not usable in a file name")
    return s


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def emit_artifacts(reports, out_dir, train_records: dict | None = None,
                   extra: dict | None = None, claimed_reduction: float | None = None) -> list[Path]:
    """Write metrics, CDF, per-sample error and loss-curve files; return their paths.

    The comparison file is written when exactly two reports are given, the
    first being the reference. ``extra`` entries are merged into
    ``metrics.json`` and must be deterministic.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out / name
        atomic_write_text(path, text)
        written.append(path)

    metrics = {"models": [r.summary() for r in reports]}
    if len(reports) == 2:
        comp = compare_models(*reports)
        metrics["comparison"] = {"reference": comp.model_a, "candidate": comp.model_b,
                                 "improvement": {k: imp for k, _, _, imp in comp.rows}}
        put("comparison.csv", comp.to_csv())
        put("table.txt", render_table(reports, claimed_reduction=claimed_reduction))
    if extra:
        metrics.update(extra)
    put("metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    for r in reports:
        slug = _slug(r.model_id)
        put(f"cdf_{slug}.csv", _csv(("error_m", "fraction"),
                                    ((repr(float(x)), repr(float(f)))
                                     for x, f in zip(r.cdf_error_m, r.cdf_fraction))))
        put(f"errors_{slug}.csv", _csv(("sample_index", "error_m"),
                                       ((i, repr(float(e))) for i, e in enumerate(r.errors_m))))
    for model_id, rec in (train_records or {}).items():
        rows = ((i + 1, repr(float(a)), repr(float(b)))
                for i, (a, b) in enumerate(zip(rec.train_rmse_m, rec.val_rmse_m)))
        put(f"loss_{_slug(model_id)}.csv", _csv(("epoch", "train", "val"), rows))
    return written


def read_errors(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["sample_index", "error_m"]:
        raise ValueError(f"{path}: not an error trace")
    return np.array([float(r[1]) for r in rows[1:]])


def read_cdf(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["error_m", "fraction"]:
        raise ValueError(f"{path}: not a CDF file")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    return data[:, 0], data[:, 1]
