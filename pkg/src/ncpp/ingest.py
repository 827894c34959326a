"""Raw benchmark CSV ingestion.

Raw files hold one row per (hardware configuration, benchmark) run with the
schema's feature columns plus ``suite``, ``benchmark`` and ``score``.  The
pipeline is::

    parse_csv -> trim_features -> filter_outliers -> consolidate_multi_output

Consolidated datasets are stored as wide CSVs whose label columns are named
``<suite>::<benchmark>``.
"""
from __future__ import annotations

import csv
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .schema import FeatureSchema, SuiteSpec, get_suite

log = logging.getLogger(__name__)

META_COLUMNS = ("suite", "benchmark", "score")
PART_NO_COLUMN = "DIMM.PartNo"
# lookup field -> schema column filled from it
DIMM_FIELDS = {"density": "Density", "organization": "Organization", "rank": "DIMM_rank", "CL": "CL"}
MISSING = None


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class RawRecord:
    features: dict[str, object]
    benchmark: str
    suite: str
    score: float
    row: int = 0


@dataclass
class ConsolidatedRecord:
    features: dict[str, object]
    labels: np.ndarray
    mask: np.ndarray | None = None


@dataclass
class Dataset:
    suite: SuiteSpec
    records: list[ConsolidatedRecord]
    dropped: int = 0

    def __post_init__(self):
        for r in self.records:
            if r.labels.shape != (self.suite.output_dim,):
                raise DataError(f"label vector of length {r.labels.shape} for suite "
                                f"{self.suite.name} (expects {self.suite.output_dim})")

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, indices) -> Dataset:
        return Dataset(self.suite, [self.records[i] for i in indices])

    def labels(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.suite.output_dim))
        return np.stack([r.labels for r in self.records])

    def label_mask(self) -> np.ndarray:
        out = np.ones((len(self.records), self.suite.output_dim), dtype=bool)
        for i, r in enumerate(self.records):
            if r.mask is not None:
                out[i] = r.mask
        return out

    def column(self, name: str) -> list:
        return [r.features[name] for r in self.records]


# ---------------------------------------------------------------- DIMM lookup

@dataclass
class DimmLookup:
    rows: dict[str, dict[str, object]]
    misses: int = 0

    def __len__(self) -> int:
        return len(self.rows)


def load_dimm_lookup(path=None) -> DimmLookup:
    """Read a part-number table (part_no, generation, density, organization, rank, CL)."""
    path = Path(path) if path is not None else Path(__file__).with_name("data") / "dimm_lookup.csv"
    rows: dict[str, dict[str, object]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for line_no, row in enumerate(csv.DictReader(fh), start=2):
            key = row["part_no"].strip()
            if key in rows:
                raise DataError(f"{path}:{line_no}: duplicate part number {key!r}")
            rows[key] = {
                "generation": row["generation"].strip(),
                "density": float(row["density"]),
                "organization": float(row["organization"]),
                "rank": float(row["rank"]),
                "CL": float(row["CL"]),
            }
    return DimmLookup(rows)


def expand_dimm(part_no: str, lookup: DimmLookup):
    """Return the lookup fields for ``part_no``, or ``MISSING`` (counted)."""
    row = lookup.rows.get(str(part_no).strip())
    if row is None:
        lookup.misses += 1
        return MISSING
    return dict(row)


# ---------------------------------------------------------------- parsing

def _to_float(text: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    return float(text)


def _resolve_columns(header: list[str]) -> dict[str, str]:
    lower = {h.strip().lower(): h for h in header}
    return {m: lower[m] for m in META_COLUMNS if m in lower}


def parse_csv(path, schema: FeatureSchema, lookup: DimmLookup | None = None) -> list[RawRecord]:
    """Read a long-format raw CSV into typed records.

    Memory columns absent from the file are filled from ``DIMM.PartNo`` when
    a lookup is given.  Columns outside the schema are kept on the record
    (``trim_features`` drops them).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    meta = _resolve_columns(header)
    missing_meta = [m for m in META_COLUMNS if m not in meta]
    if missing_meta:
        raise DataError(f"{path}: missing column(s) {missing_meta}")
    derivable = set(DIMM_FIELDS.values()) if (lookup is not None and PART_NO_COLUMN in header) else set()
    absent = [f.name for f in schema if f.name not in header and f.name not in derivable]
    if absent:
        raise DataError(f"{path}: missing column(s) {absent}")
    if not rows:
        log.warning("%s: header only, no records", path)
        return []

    kinds = {f.name: f.kind for f in schema}
    col = {h: i for i, h in enumerate(header)}
    records, errors = [], []
    for line_no, row in enumerate(rows, start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            errors.append(f"row {line_no}: expected {len(header)} fields, got {len(row)}")
            continue
        feats: dict[str, object] = {}
        for name, i in col.items():
            if name.lower() in META_COLUMNS:
                continue
            cell = row[i]
            if kinds.get(name) == "numeric":
                try:
                    feats[name] = _to_float(cell)
                except ValueError:
                    errors.append(f"row {line_no}: column {name!r} value {cell!r} is not numeric")
            else:
                feats[name] = cell.strip()
        if derivable:
            expanded = expand_dimm(feats.get(PART_NO_COLUMN, ""), lookup)
            for src, dst in DIMM_FIELDS.items():
                if dst not in header:
                    feats[dst] = math.nan if expanded is MISSING else expanded[src]
            if expanded is not MISSING:
                feats.setdefault("DIMM_generation", expanded["generation"])
        score_text = row[col[meta["score"]]]
        try:
            score = float(score_text)
        except ValueError:
            errors.append(f"row {line_no}: score {score_text!r} is not numeric")
            continue
        if not math.isfinite(score):
            errors.append(f"row {line_no}: score {score_text!r} is not finite")
            continue
        suite = row[col[meta["suite"]]].strip()
        bench = row[col[meta["benchmark"]]].strip()
        if not suite or not bench:
            errors.append(f"row {line_no}: empty suite or benchmark name")
            continue
        records.append(RawRecord(feats, bench, suite, score, line_no))
    if errors:
        raise DataError(f"{path}: {len(errors)} bad row(s):\n  " + "\n  ".join(errors))
    if lookup is not None and lookup.misses:
        log.warning("%d DIMM part number(s) not found in lookup", lookup.misses)
    return records


def trim_features(records: list[RawRecord], schema: FeatureSchema) -> list[RawRecord]:
    """Keep only schema columns, in schema order."""
    names = schema.names
    return [RawRecord({n: r.features[n] for n in names}, r.benchmark, r.suite, r.score, r.row)
            for r in records]


# ---------------------------------------------------------------- cleaning

def zscore_filter(scores, threshold: float = 3.0) -> list[int]:
    """Indices whose population z-score satisfies |z| <= threshold."""
    x = np.asarray(scores, dtype=np.float64)
    n = len(x)
    if n < 2:
        log.warning("z-score filter on %d score(s): nothing removed", n)
        return list(range(n))
    sigma = x.std()
    if sigma == 0:
        return list(range(n))
    z = np.abs((x - x.mean()) / sigma)
    keep = z <= threshold
    # rounding can flip points sitting on the threshold; decide those exactly
    near = np.flatnonzero(np.abs(z - threshold) <= 1e-9 * max(threshold, 1.0))
    if near.size:
        exact = [Fraction(float(v)) for v in x]
        total = sum(exact)
        dev2 = sum((n * v - total) ** 2 for v in exact)
        t2 = Fraction(threshold) ** 2
        for i in near:
            keep[i] = n * (n * exact[i] - total) ** 2 <= t2 * dev2
    return [i for i in range(n) if keep[i]]


def filter_outliers(records: list[RawRecord], threshold: float = 3.0) -> list[RawRecord]:
    """Apply ``zscore_filter`` within every (suite, benchmark) population."""
    groups: dict[tuple[str, str], list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        groups[(r.suite, r.benchmark)].append(i)
    keep = set()
    for idx in groups.values():
        kept = zscore_filter([records[i].score for i in idx], threshold)
        keep.update(idx[k] for k in kept)
    removed = len(records) - len(keep)
    if removed:
        log.info("z-score filter removed %d of %d rows", removed, len(records))
    return [r for i, r in enumerate(records) if i in keep]


def _config_key(features: dict[str, object], names: list[str]) -> tuple:
    return tuple(repr(features[n]) for n in names)


def consolidate_multi_output(records: list[RawRecord], suite: SuiteSpec, schema: FeatureSchema,
                             policy: str = "drop") -> Dataset:
    """Merge per-benchmark rows of one configuration into one labelled record.

    ``policy`` decides configurations missing some benchmarks: ``"drop"``
    excludes them, ``"mask"`` keeps them with a label-present mask.
    """
    if policy not in ("drop", "mask"):
        raise ValueError(f"unknown policy {policy!r}")
    names = schema.names
    position = {b: i for i, b in enumerate(suite.benchmarks)}
    configs: dict[tuple, dict] = {}
    for r in records:
        if r.suite != suite.name:
            continue
        if r.benchmark not in position:
            raise DataError(f"row {r.row}: benchmark {r.benchmark!r} is not in suite {suite.name}")
        key = _config_key(r.features, names)
        entry = configs.setdefault(key, {"features": {n: r.features[n] for n in names}, "scores": {}})
        prev = entry["scores"].get(r.benchmark)
        if prev is not None and prev[0] != r.score:
            raise DataError(f"ambiguous scores for {r.benchmark} in one configuration: "
                            f"row {prev[1]} = {prev[0]} vs row {r.row} = {r.score}")
        entry["scores"][r.benchmark] = (r.score, r.row)

    out, dropped = [], 0
    for key in sorted(configs):
        entry = configs[key]
        labels = np.zeros(suite.output_dim)
        mask = np.zeros(suite.output_dim, dtype=bool)
        for bench, (score, _) in entry["scores"].items():
            labels[position[bench]] = score
            mask[position[bench]] = True
        if mask.all():
            out.append(ConsolidatedRecord(entry["features"], labels))
        elif policy == "drop":
            dropped += 1
        else:
            out.append(ConsolidatedRecord(entry["features"], labels, mask))
    if dropped:
        log.warning("%s: dropped %d incomplete configuration(s)", suite.name, dropped)
    return Dataset(suite, out, dropped)


def ingest(path, schema: FeatureSchema, suite: SuiteSpec | str | None = None,
           lookup: DimmLookup | None = None, threshold: float = 3.0,
           policy: str = "drop") -> Dataset:
    """Run the full raw-file pipeline; ``suite`` defaults to the file's only suite.

    Without ``lookup`` the bundled DIMM part-number table is used.
    """
    records = parse_csv(path, schema, lookup if lookup is not None else load_dimm_lookup())
    if suite is None:
        names = sorted({r.suite for r in records})
        if len(names) != 1:
            raise DataError(f"{path}: cannot infer suite from {names}; pick one")
        suite = names[0]
    suite = get_suite(suite) if isinstance(suite, str) else suite
    records = trim_features(records, schema)
    records = filter_outliers(records, threshold)
    return consolidate_multi_output(records, suite, schema, policy)


# ---------------------------------------------------------------- wide format

_LABEL_RE = re.compile(r"^(?P<suite>[^:]+)::(?P<bench>.+)$")


def write_dataset(dataset: Dataset, path, schema: FeatureSchema) -> None:
    label_cols = dataset.suite.label_columns()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(schema.names + label_cols)
        for r in dataset.records:
            feats = ["" if isinstance(r.features[n], float) and math.isnan(r.features[n])
                     else (repr(r.features[n]) if isinstance(r.features[n], float) else r.features[n])
                     for n in schema.names]
            labels = [repr(float(v)) if (r.mask is None or r.mask[j]) else ""
                      for j, v in enumerate(r.labels)]
            w.writerow(feats + labels)


def read_dataset(path, schema: FeatureSchema, suite: SuiteSpec | str | None = None) -> Dataset:
    """Read a wide CSV with ``<suite>::<benchmark>`` label columns."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    labels = [(i, m.group("suite"), m.group("bench")) for i, h in enumerate(header)
              if (m := _LABEL_RE.match(h))]
    if not labels:
        raise DataError(f"{path}: no '<suite>::<benchmark>' label columns")
    suites = {s for _, s, _ in labels}
    if suite is None:
        if len(suites) != 1:
            raise DataError(f"{path}: several suites present {sorted(suites)}; pick one")
        suite = next(iter(suites))
    suite = get_suite(suite) if isinstance(suite, str) else suite
    label_idx = {b: i for i, s, b in labels if s == suite.name}
    missing = [b for b in suite.benchmarks if b not in label_idx]
    if missing:
        raise DataError(f"{path}: missing label column(s) for {suite.name}: {missing}")
    col = {h: i for i, h in enumerate(header)}
    absent = [f.name for f in schema if f.name not in col]
    if absent:
        raise DataError(f"{path}: missing column(s) {absent}")
    if not rows:
        log.warning("%s: header only, no records", path)

    out, errors = [], []
    for line_no, row in enumerate(rows, start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            errors.append(f"row {line_no}: expected {len(header)} fields, got {len(row)}")
            continue
        feats: dict[str, object] = {}
        for f in schema:
            cell = row[col[f.name]]
            if f.kind == "numeric":
                try:
                    feats[f.name] = _to_float(cell)
                except ValueError:
                    errors.append(f"row {line_no}: column {f.name!r} value {cell!r} is not numeric")
            else:
                feats[f.name] = cell.strip()
        vals = np.zeros(suite.output_dim)
        mask = np.ones(suite.output_dim, dtype=bool)
        for j, b in enumerate(suite.benchmarks):
            cell = row[label_idx[b]].strip()
            if cell == "":
                mask[j] = False
                continue
            try:
                vals[j] = float(cell)
            except ValueError:
                errors.append(f"row {line_no}: label {b!r} value {cell!r} is not numeric")
        out.append(ConsolidatedRecord(feats, vals, None if mask.all() else mask))
    if errors:
        raise DataError(f"{path}: {len(errors)} bad row(s):\n  " + "\n  ".join(errors))
    return Dataset(suite, out)


def load_dataset(path, schema: FeatureSchema, suite: SuiteSpec | str | None = None,
                 lookup: DimmLookup | None = None, threshold: float = 3.0,
                 policy: str = "drop") -> Dataset:
    """Load either a raw long-format CSV or a consolidated wide CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise DataError(f"{path}: empty file")
    lowered = {h.strip().lower() for h in header}
    if {"benchmark", "score"} <= lowered:
        return ingest(path, schema, suite, lookup, threshold, policy)
    return read_dataset(path, schema, suite)
