"""Deterministic synthetic benchmark data with planted label functions.

Feature ranges below are invented for testing and are not statistics of
any real processor population.  Two label families exist:

``linear``
    y_k = b_k + sum_j w_kj * u_j + sum_tokens t_k(token)   (exactly linear in
    the normalised numeric features and in bag-of-token counts)
``nonlinear``
    y_k = b_k * exp(sum_j a_kj * u_j + gain * interaction_k + token terms),
    where interaction_k mixes within-group products, a hinge on TDP and a
    categorical interaction.  ``gain`` is calibrated so that the best linear
    fit misses by a requested MAPE.

``u_j`` is feature j mapped linearly from its declared range onto [-1, 1].
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .encode import tokenize
from .ingest import ConsolidatedRecord, Dataset, load_dimm_lookup
from .schema import FeatureSchema, SuiteSpec, default_schema, get_suite

# declared ranges used both for sampling and for the [-1, 1] driver scaling
RANGES = {
    "Core_per_Socket": (8, 60),
    "Base_Freq": (1.8, 3.6),
    "All_Core_Turbo_Freq": (2.0, 4.4),
    "Sockets": (1, 2),
    "Threads_per_Core": (1, 2),
    "TDP": (150, 350),
    "Power_freq": (1.6, 2.4),
    "DIMM_Freq": (4400, 5600),
    "DIMM_Num": (8, 32),
    "DIMM_rank": (1, 2),
}
DRIVERS = tuple(RANGES)
# baseline exponent weight per driver
_BASE_WEIGHT = {
    "Core_per_Socket": 0.22, "Base_Freq": 0.10, "All_Core_Turbo_Freq": 0.06, "Sockets": 0.18,
    "Threads_per_Core": 0.04, "TDP": 0.10, "Power_freq": 0.02, "DIMM_Freq": 0.06,
    "DIMM_Num": 0.05, "DIMM_rank": 0.03,
}
_MEMORY_DRIVERS = {"DIMM_Freq", "DIMM_Num", "DIMM_rank"}
POOLS = {
    "Preset": ["base", "max performance", "balanced power"],
    "Tool": ["speccpu 2017 v1.1.8", "speccpu 2017 v1.1.9"],
    "OS": ["CentOS Stream 8", "Ubuntu 22.04", "RHEL 9.0"],
    "Microcode": ["0x2b000161", "0x2b000461", "0x2b0004d0"],
    "CPU_Stepping": ["E3", "E4", "E5"],
    "CPU_Family": ["6-143", "6-207"],
}


@dataclass
class SynthConfig:
    n_records: int = 200
    suite: str = "SPECrate2017_fp_base"
    noise: float = 0.0
    family: str = "nonlinear"
    seed: int = 0
    target_linear_mape: float = 20.0   # percent, nonlinear family calibration target

    def validate(self) -> SynthConfig:
        if self.n_records < 1:
            raise ValueError("n_records must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.family not in ("linear", "nonlinear"):
            raise ValueError(f"unknown family {self.family!r}")
        get_suite(self.suite)
        return self


@dataclass
class SynthTruth:
    """Everything needed to recompute noiseless labels from features."""
    family: str
    suite: str
    scale: list[float]
    weights: list[list[float]]             # [out][driver]
    token_effects: dict[str, dict[str, list[float]]]
    interaction: list[list[float]] = field(default_factory=list)   # [out][5]
    gain: float = 0.0
    calibration: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> SynthTruth:
        return cls(**obj)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)


def _u(features: dict, name: str) -> float:
    lo, hi = RANGES[name]
    return (float(features[name]) - 0.5 * (lo + hi)) / (0.5 * (hi - lo))


def _token_term(features: dict, effects: dict[str, dict[str, list[float]]], k: int) -> float:
    total = 0.0
    for name, table in effects.items():
        for tok in tokenize(features[name]):
            if tok in table:
                total += table[tok][k]
    return total


def _interactions(features: dict) -> np.ndarray:
    cores, freq = _u(features, "Core_per_Socket"), _u(features, "Base_Freq")
    dfreq, dnum = _u(features, "DIMM_Freq"), _u(features, "DIMM_Num")
    tdp, pfreq = _u(features, "TDP"), _u(features, "Power_freq")
    preset = tokenize(features["Preset"])
    os_ = tokenize(features["OS"])
    char = (1.0 if "max" in preset else -0.5) * (1.0 if "ubuntu" in os_ else -0.5)
    return np.array([cores * freq, dfreq * dnum, tdp * pfreq, max(0.0, tdp - 0.2), char])


def linear_part(features: dict, truth: SynthTruth) -> np.ndarray:
    """Driver-weighted sum (without intercept/scale) for each output."""
    u = np.array([_u(features, d) for d in DRIVERS])
    return np.asarray(truth.weights) @ u


def oracle_label(features: dict, truth: SynthTruth) -> np.ndarray:
    """Exact noiseless label vector for one configuration."""
    missing = [d for d in DRIVERS if d not in features] + [c for c in truth.token_effects if c not in features]
    if missing:
        raise KeyError(f"features missing for the planted function: {missing}")
    n_out = len(truth.scale)
    lin = linear_part(features, truth)
    tok = np.array([_token_term(features, truth.token_effects, k) for k in range(n_out)])
    if truth.family == "linear":
        return np.asarray(truth.scale) + lin + tok
    inter = np.asarray(truth.interaction) @ _interactions(features)
    return np.asarray(truth.scale) * np.exp(lin + tok + truth.gain * inter)


# ---------------------------------------------------------------- features

def _sample_features(rng: np.random.Generator, lookup_rows: list[tuple[str, dict]]) -> dict:
    f: dict[str, object] = {}
    sockets = int(rng.integers(1, 3))
    cores = int(rng.integers(8, 61))
    threads = int(rng.integers(1, 3))
    base = round(float(rng.uniform(1.8, 3.6)), 2)
    f.update(Core_per_Socket=float(cores), Sockets=float(sockets), Threads_per_Core=float(threads),
             CPUs=float(cores * sockets * threads), Base_Freq=base)
    f["Max_Turbo_Freq"] = round(base + float(rng.uniform(0.5, 1.4)), 2)
    all_core = round(min(4.4, base + float(rng.uniform(0.2, 0.8))), 2)
    f["All_Core_Turbo_Freq"] = all_core
    f["AVX2_P1Freq"] = round(base - float(rng.uniform(0.1, 0.4)), 2)
    f["AVX2_TurboFreq"] = round(all_core - float(rng.uniform(0.0, 0.3)), 2)
    f["AVX3_P1Freq"] = round(base - float(rng.uniform(0.3, 0.7)), 2)
    f["AVX3_TurboFreq"] = round(all_core - float(rng.uniform(0.2, 0.6)), 2)
    f["TMUL_P1Freq"] = round(base - float(rng.uniform(0.5, 0.9)), 2)
    f["TMUL_TurboFreq"] = round(all_core - float(rng.uniform(0.4, 0.8)), 2)
    f["L1d_Cache"] = 48.0
    f["L1i_Cache"] = 32.0
    f["L2_Cache"] = 2.0 * cores
    f["L3_Cache"] = 1.875 * cores
    f["NUMA_Nodes"] = float(sockets * int(rng.choice([1, 2])))
    f["Uncore_Max_Freq"] = round(float(rng.uniform(2.0, 2.5)), 2)
    f["UPI_Links"] = float(int(rng.integers(2, 5)) if sockets == 2 else 0)
    f["TDP"] = float(5 * round(rng.uniform(150, 350) / 5))
    f["Power_freq"] = round(float(rng.uniform(1.6, 2.4)), 2)
    part, dimm = lookup_rows[int(rng.integers(len(lookup_rows)))]
    n_dimm = float(rng.choice([8, 16, 24, 32]))
    f["DIMM.PartNo"] = part
    f["DIMM_rank"] = dimm["rank"]
    f["Density"] = dimm["density"]
    f["Organization"] = dimm["organization"]
    f["CL"] = dimm["CL"]
    f["DIMM_Num"] = n_dimm
    f["DIMM_Freq"] = float(rng.choice([4400, 4800, 5200, 5600]))
    per_dimm_gb = dimm["density"] * (64 / dimm["organization"]) * dimm["rank"] / 8
    f["DIMM_Total"] = n_dimm * per_dimm_gb
    for name, pool in POOLS.items():
        f[name] = pool[int(rng.integers(len(pool)))]
    return f


def _make_truth(rng: np.random.Generator, family: str, suite: SuiteSpec) -> SynthTruth:
    n_out = suite.output_dim
    weights, scale, interaction = [], [], []
    for _ in range(n_out):
        mem_bound = float(rng.uniform(0.0, 1.0))
        row = []
        for d in DRIVERS:
            w = _BASE_WEIGHT[d] * (1.0 + 0.3 * float(rng.standard_normal()))
            w *= 2.0 * mem_bound if d in _MEMORY_DRIVERS else 1.5 - mem_bound
            row.append(w)
        weights.append(row)
        scale.append(float(rng.uniform(80.0, 400.0)))
        interaction.append([float(c * (1.0 + 0.25 * rng.standard_normal()))
                            for c in (1.0, 0.8 + mem_bound, 0.9, -1.2, 0.6)])
    effects: dict[str, dict[str, list[float]]] = {}
    for name in ("Preset", "OS", "Microcode"):
        toks = sorted({t for v in POOLS[name] for t in tokenize(v)})
        effects[name] = {t: [float(0.03 * rng.standard_normal()) for _ in range(n_out)] for t in toks}
    if family == "linear":
        # additive form in absolute score units; 0.4 keeps every label positive
        weights = [[0.4 * w * s for w in row] for row, s in zip(weights, scale)]
        for table in effects.values():
            for t, vals in table.items():
                table[t] = [v * s for v, s in zip(vals, scale)]
        interaction = []
    return SynthTruth(family, suite.name, scale, weights, effects, interaction)


def _design(features: list[dict]) -> np.ndarray:
    """Numeric columns, one-hot categorical columns and an intercept."""
    schema = default_schema()
    blocks = [np.array([[float(f[s.name]) for s in schema.numeric()] for f in features])]
    for s in schema.categorical():
        values = sorted({f[s.name] for f in features})
        blocks.append(np.array([[1.0 if f[s.name] == v else 0.0 for v in values] for f in features]))
    blocks.append(np.ones((len(features), 1)))
    return np.hstack(blocks)


def _linear_fit_mape(features: list[dict], labels: np.ndarray) -> float:
    """In-sample MAPE (percent) of least squares on numeric + one-hot columns."""
    A = _design(features)
    coef, *_ = np.linalg.lstsq(A, labels, rcond=None)
    return float(np.mean(np.abs(A @ coef - labels) / np.abs(labels)) * 100.0)


def calibrate(truth: SynthTruth, seed: int, target: float, n: int = 1500) -> SynthTruth:
    """Pick the interaction gain so the best linear fit has ``target`` MAPE."""
    rng = np.random.default_rng([seed, 7919])
    rows = list(load_dimm_lookup().rows.items())
    feats = [_sample_features(rng, rows) for _ in range(n)]
    n_out = len(truth.scale)
    # the exponent splits into a gain-free part and the interaction term
    base = np.stack([linear_part(f, truth) +
                     np.array([_token_term(f, truth.token_effects, k) for k in range(n_out)])
                     for f in feats])
    inter = np.stack([_interactions(f) for f in feats]) @ np.asarray(truth.interaction).T
    A = _design(feats)
    hat = A @ np.linalg.pinv(A)
    scale = np.asarray(truth.scale)

    def mape_at(gain):
        y = scale * np.exp(base + gain * inter)
        return float(np.mean(np.abs(hat @ y - y) / np.abs(y)) * 100.0)

    lo, hi = 0.0, 0.25
    while mape_at(hi) < target and hi < 8.0:
        lo, hi = hi, hi * 2
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if mape_at(mid) < target:
            lo = mid
        else:
            hi = mid
    truth.gain = hi
    truth.calibration = {"target_linear_mape": target, "achieved_linear_mape": mape_at(hi),
                         "gain": hi, "calibration_records": n}
    return truth


def generate(config: SynthConfig, schema: FeatureSchema | None = None) -> tuple[Dataset, SynthTruth]:
    cfg = config.validate()
    schema = schema or default_schema()
    unknown = [f.name for f in schema if f.name not in RANGES and f.name not in _all_feature_names()]
    if unknown:
        raise KeyError(f"the generator does not know feature(s) {unknown}")
    suite = get_suite(cfg.suite)
    truth = _make_truth(np.random.default_rng([cfg.seed, 1]), cfg.family, suite)
    if cfg.family == "nonlinear":
        truth = calibrate(truth, cfg.seed, cfg.target_linear_mape)
    rng = np.random.default_rng([cfg.seed, 2])
    rows = list(load_dimm_lookup().rows.items())
    records = []
    for i in range(cfg.n_records):
        feats = _sample_features(np.random.default_rng([cfg.seed, 3, i]), rows)
        y = oracle_label(feats, truth)
        if cfg.noise > 0:
            if cfg.family == "nonlinear":
                y = y * np.exp(cfg.noise * rng.standard_normal(len(y)))
            else:
                y = y + cfg.noise * rng.standard_normal(len(y))
        kept = {f.name: feats[f.name] for f in schema}
        kept["DIMM.PartNo"] = feats["DIMM.PartNo"]
        records.append(ConsolidatedRecord(kept, y))
    return Dataset(suite, records), truth


def _all_feature_names() -> set[str]:
    rows = list(load_dimm_lookup().rows.items())
    return set(_sample_features(np.random.default_rng(0), rows))


def write_raw_csv(dataset: Dataset, path, schema: FeatureSchema) -> None:
    """Long format: one row per (configuration, benchmark), as ingest reads it."""
    names = schema.names
    extra = ["DIMM.PartNo"] if dataset.records and "DIMM.PartNo" in dataset.records[0].features else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names + extra + ["suite", "benchmark", "score"])
        for r in dataset.records:
            vals = [repr(v) if isinstance(v, float) else v for v in (r.features[n] for n in names)]
            vals += [r.features[e] for e in extra]
            for bench, score in zip(dataset.suite.benchmarks, r.labels):
                w.writerow(vals + [dataset.suite.name, bench, repr(float(score))])


def labels_within_noise(dataset: Dataset, truth: SynthTruth, noise: float, k: float = 3.0) -> float:
    """Fraction of label entries within ``k`` noise standard deviations of the oracle."""
    hits = total = 0
    for r in dataset.records:
        y0 = oracle_label(r.features, truth)
        if truth.family == "nonlinear":
            dev = np.abs(np.log(r.labels / y0))
        else:
            dev = np.abs(r.labels - y0)
        hits += int(np.sum(dev <= k * noise + 1e-12))
        total += dev.size
    return hits / total if total else math.nan
