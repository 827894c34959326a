"""Regression metrics, cross-validation averaging and report files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRICS = ("mae", "mse", "mape", "p95_ae", "p95_se", "p95_ape")
CSV_HEADER = ("benchmark",) + METRICS + ("count",)
OVERALL = "overall"


class MetricError(ValueError):
    pass


def percentile(values, q: float = 95.0, method: str = "nearest") -> float:
    """``q``-th percentile of ``values``.

    ``method="nearest"`` is the nearest-rank definition: the smallest order
    statistic whose rank is at least ceil(q/100 * n).  ``"linear"`` defers to
    numpy's interpolating percentile.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size == 0:
        return math.nan
    if method == "nearest":
        rank = max(1, math.ceil(q / 100.0 * x.size - 1e-12))
        return float(x[rank - 1])
    if method == "linear":
        return float(np.percentile(x, q))
    raise ValueError(f"unknown percentile method {method!r}")


@dataclass
class MetricRow:
    mae: float
    mse: float
    mape: float            # percent
    p95_ae: float
    p95_se: float
    p95_ape: float         # percent
    count: int
    mape_excluded: int = 0

    def to_json(self) -> dict:
        return {**{m: getattr(self, m) for m in METRICS}, "count": self.count,
                "mape_excluded": self.mape_excluded}

    @classmethod
    def from_json(cls, obj: dict) -> MetricRow:
        return cls(*(float(obj[m]) for m in METRICS), int(obj["count"]), int(obj.get("mape_excluded", 0)))


@dataclass
class EvalReport:
    suite: str
    benchmarks: list[str]
    rows: dict[str, MetricRow]             # benchmark name or "overall" -> metrics
    folds: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def overall(self) -> MetricRow:
        return self.rows[OVERALL]

    def to_json(self) -> dict:
        return {"suite": self.suite, "benchmarks": list(self.benchmarks), "folds": self.folds,
                "metrics": {k: v.to_json() for k, v in self.rows.items()}, "meta": self.meta}

    @classmethod
    def from_json(cls, obj: dict) -> EvalReport:
        return cls(obj["suite"], list(obj["benchmarks"]),
                   {k: MetricRow.from_json(v) for k, v in obj["metrics"].items()},
                   int(obj.get("folds", 1)), dict(obj.get("meta", {})))


def _row(err: np.ndarray, truth: np.ndarray, method: str) -> MetricRow:
    if err.size == 0:
        return MetricRow(*(math.nan,) * 6, 0)
    ae = np.abs(err)
    se = err * err
    nz = truth != 0
    ape = ae[nz] / np.abs(truth[nz]) * 100.0
    return MetricRow(float(ae.mean()), float(se.mean()),
                     float(ape.mean()) if ape.size else math.nan,
                     percentile(ae, 95, method), percentile(se, 95, method),
                     percentile(ape, 95, method) if ape.size else math.nan,
                     int(err.size), int((~nz).sum()))


def compute_metrics(pred, truth, suite=None, benchmarks=None, mask=None,
                    method: str = "nearest") -> EvalReport:
    """Per-column and pooled error metrics.

    MAPE and P95-APE are in percent.  Entries with zero truth are left out of
    the percentage metrics and counted in ``mape_excluded``; a column whose
    truth is entirely zero raises MetricError.  ``mask`` (same shape, bool)
    drops unobserved entries from every metric.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred[:, None]
    if truth.ndim == 1:
        truth = truth[:, None]
    if pred.shape != truth.shape:
        raise MetricError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    keep = np.ones(truth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if suite is not None and not isinstance(suite, str):
        suite_name, names = suite.name, list(suite.benchmarks)
    else:
        suite_name = suite or ""
        names = list(benchmarks) if benchmarks is not None else [f"out{j}" for j in range(truth.shape[1])]
    if len(names) != truth.shape[1]:
        raise MetricError(f"{len(names)} benchmark names for {truth.shape[1]} output columns")
    rows = {}
    for j, name in enumerate(names):
        t = truth[keep[:, j], j]
        if t.size and np.all(t == 0):
            raise MetricError(f"MAPE undefined for {name!r}: every true value is zero")
        rows[name] = _row(pred[keep[:, j], j] - t, t, method)
    rows[OVERALL] = _row(pred[keep] - truth[keep], truth[keep], method)
    return EvalReport(suite_name, names, rows)


def aggregate_cv(reports: list[EvalReport]) -> EvalReport:
    """Unweighted mean of every metric across fold reports."""
    if len(reports) < 2:
        raise MetricError("cross-validation aggregation needs at least two reports")
    first = reports[0]
    for r in reports[1:]:
        if r.suite != first.suite or r.benchmarks != first.benchmarks:
            raise MetricError(f"cannot aggregate reports for {first.suite!r} and {r.suite!r}")
    rows = {}
    for key in first.rows:
        vals = [r.rows[key] for r in reports]
        rows[key] = MetricRow(*(float(np.mean([getattr(v, m) for v in vals])) for m in METRICS),
                              int(sum(v.count for v in vals)), int(sum(v.mape_excluded for v in vals)))
    return EvalReport(first.suite, list(first.benchmarks), rows, folds=len(reports))


def radar_table(report: EvalReport) -> list[tuple[str, float]]:
    """Per-benchmark MAPE in suite order, one axis per benchmark."""
    return [(b, report.rows[b].mape) for b in report.benchmarks]


def export_report(report: EvalReport, path, fmt: str = "both") -> list[Path]:
    """Write ``report`` as JSON and/or CSV; ``path`` is taken without suffix.

    ``fmt="both"`` also writes ``<stem>_radar.csv`` with per-benchmark MAPE.
    """
    if fmt not in ("json", "csv", "both"):
        raise ValueError(f"unknown report format {fmt!r}")
    base = Path(path)
    if base.suffix in (".json", ".csv"):
        base = base.with_suffix("")
    written = []
    if fmt in ("json", "both"):
        p = base.with_suffix(".json")
        p.write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
        written.append(p)
    if fmt in ("csv", "both"):
        p = base.with_suffix(".csv")
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for key in report.benchmarks + [OVERALL]:
                row = report.rows[key]
                w.writerow([key] + [repr(getattr(row, m)) for m in METRICS] + [row.count])
        written.append(p)
    if fmt == "both":
        p = base.parent / f"{base.name}_radar.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["benchmark", "mape"])
            for name, value in radar_table(report):
                w.writerow([name, repr(value)])
        written.append(p)
    return written


def load_report(path) -> EvalReport:
    return EvalReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def read_report_csv(path) -> dict[str, dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["benchmark"]: {k: float(v) for k, v in row.items() if k != "benchmark"}
                for row in csv.DictReader(fh)}
