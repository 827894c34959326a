"""Fit-on-train transforms that turn a Dataset into model-ready arrays."""
from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import ConsolidatedRecord, Dataset
from .schema import FeatureSchema, group_partition, schema_from_json

log = logging.getLogger(__name__)

PAD_ID = 0
OOV_ID = 1
VOCAB_CAP = 100
TRANSFORMS_VERSION = 1
_SPLIT = re.compile(r"[\W_]+")


def _records(data) -> list[ConsolidatedRecord]:
    return data.records if isinstance(data, Dataset) else list(data)


# ---------------------------------------------------------------- numeric

@dataclass
class NormalizerStats:
    """Per-feature centre and scale.

    For ``method="zscore"`` centre/scale are the population mean and standard
    deviation; for ``"minmax"`` they are the minimum and the range.  A
    zero-spread feature gets scale 1 and is listed in ``constant``.
    """
    center: dict[str, float]
    scale: dict[str, float]
    count: int
    constant: list[str] = field(default_factory=list)
    method: str = "zscore"

    @property
    def mean(self) -> dict[str, float]:
        return self.center

    @property
    def std(self) -> dict[str, float]:
        return self.scale

    def to_json(self) -> dict:
        return {"method": self.method, "center": self.center, "scale": self.scale,
                "count": self.count, "constant": self.constant}

    @classmethod
    def from_json(cls, obj: dict) -> NormalizerStats:
        return cls(dict(obj["center"]), dict(obj["scale"]), int(obj["count"]),
                   list(obj.get("constant", [])), obj.get("method", "zscore"))


def fit_normalizer(train, schema: FeatureSchema, method: str = "zscore") -> NormalizerStats:
    records = _records(train)
    if not records:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    if method not in ("zscore", "minmax"):
        raise ValueError(f"unknown normalization {method!r}")
    center, scale, constant = {}, {}, []
    for f in schema.numeric():
        x = np.array([r.features[f.name] for r in records], dtype=np.float64)
        x = x[~np.isnan(x)]
        if x.size == 0:
            c, s = 0.0, 0.0
        elif method == "zscore":
            c, s = float(x.mean()), float(x.std())
        else:
            c, s = float(x.min()), float(x.max() - x.min())
        if s == 0.0:
            s = 1.0
            constant.append(f.name)
        center[f.name], scale[f.name] = c, s
    return NormalizerStats(center, scale, len(records), constant, method)


def apply_normalizer(stats: NormalizerStats, records, names: list[str]) -> np.ndarray:
    """Normalised [n_records, len(names)] matrix; missing values map to 0."""
    records = _records(records)
    for n in names:
        if n not in stats.center:
            raise KeyError(f"feature {n!r} was not seen when fitting the normalizer")
    raw = np.array([[r.features[n] for n in names] for r in records], dtype=np.float64)
    raw = raw.reshape(len(records), len(names))
    c = np.array([stats.center[n] for n in names])
    s = np.array([stats.scale[n] for n in names])
    out = (raw - c) / s
    return np.where(np.isnan(out), 0.0, out)


def invert_normalizer(stats: NormalizerStats, values: np.ndarray, names: list[str]) -> np.ndarray:
    c = np.array([stats.center[n] for n in names])
    s = np.array([stats.scale[n] for n in names])
    return np.asarray(values) * s + c


# ---------------------------------------------------------------- categorical

def tokenize(value) -> list[str]:
    """Lower-cased pieces of ``value`` split on whitespace and punctuation."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return []
    return [t for t in _SPLIT.split(str(value).lower()) if t]


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    t_max: int
    pad_id: int = PAD_ID
    oov_id: int = OOV_ID

    def __len__(self) -> int:
        return len(self.token_to_id) + 2

    def encode(self, value) -> list[int]:
        return [self.token_to_id.get(t, self.oov_id) for t in tokenize(value)]

    def decode(self, ids) -> list[str | None]:
        inv = {i: t for t, i in self.token_to_id.items()}
        return [inv.get(int(i)) for i in ids if int(i) != self.pad_id]

    def to_json(self) -> dict:
        return {"tokens": self.token_to_id, "t_max": self.t_max,
                "pad_id": self.pad_id, "oov_id": self.oov_id}

    @classmethod
    def from_json(cls, obj: dict) -> Vocab:
        return cls({k: int(v) for k, v in obj["tokens"].items()}, int(obj["t_max"]),
                   int(obj["pad_id"]), int(obj["oov_id"]))


def fit_tokenizer(train, schema: FeatureSchema, cap: int = VOCAB_CAP) -> dict[str, Vocab]:
    """One vocabulary per categorical feature, most frequent tokens first.

    Ids 0 and 1 are padding and out-of-vocabulary; at most ``cap - 2`` tokens
    are kept, ties broken lexicographically.
    """
    records = _records(train)
    out = {}
    for f in schema.categorical():
        counts: Counter[str] = Counter()
        t_max = 1
        for r in records:
            toks = tokenize(r.features[f.name])
            counts.update(toks)
            t_max = max(t_max, len(toks))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max(cap - 2, 0)]
        out[f.name] = Vocab({tok: i + 2 for i, (tok, _) in enumerate(ranked)}, t_max)
    return out


# ---------------------------------------------------------------- batches

@dataclass
class EncodedBatch:
    numeric: dict[str, np.ndarray]          # group -> [batch, group_len]
    char_ids: np.ndarray                    # [batch, n_char, T]
    char_mask: np.ndarray                   # [batch, n_char, T]
    labels: np.ndarray                      # [batch, out_dim]
    label_mask: np.ndarray                  # [batch, out_dim]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, idx) -> EncodedBatch:
        idx = np.asarray(idx)
        return EncodedBatch({g: v[idx] for g, v in self.numeric.items()}, self.char_ids[idx],
                            self.char_mask[idx], self.labels[idx], self.label_mask[idx])


@dataclass
class Transforms:
    schema: FeatureSchema
    stats: NormalizerStats
    vocabs: dict[str, Vocab]

    @property
    def t_max(self) -> int:
        return max((v.t_max for v in self.vocabs.values()), default=1)

    def encode(self, data) -> EncodedBatch:
        return encode_batch(data, self.stats, self.vocabs, self.schema)

    def to_json(self) -> dict:
        return {"version": TRANSFORMS_VERSION, "schema": self.schema.to_json(),
                "normalizer": self.stats.to_json(),
                "vocabs": {k: v.to_json() for k, v in self.vocabs.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> Transforms:
        if obj.get("version") != TRANSFORMS_VERSION:
            raise ValueError(f"unsupported transforms version {obj.get('version')}")
        return cls(schema_from_json(obj["schema"]), NormalizerStats.from_json(obj["normalizer"]),
                   {k: Vocab.from_json(v) for k, v in obj["vocabs"].items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> Transforms:
        return cls.from_json(json.loads(Path(path).read_text()))


def fit_transforms(train, schema: FeatureSchema, cap: int = VOCAB_CAP,
                   method: str = "zscore") -> Transforms:
    return Transforms(schema, fit_normalizer(train, schema, method), fit_tokenizer(train, schema, cap))


def encode_batch(data, stats: NormalizerStats, vocabs: dict[str, Vocab],
                 schema: FeatureSchema) -> EncodedBatch:
    records = _records(data)
    n = len(records)
    part = group_partition(schema)
    numeric = {}
    for g, idx in part.items():
        if g == "char":
            continue
        names = [schema.features[i].name for i in idx]
        numeric[g] = apply_normalizer(stats, records, names)

    cats = [schema.features[i].name for i in part.get("char", [])]
    t = max((vocabs[c].t_max for c in cats), default=1)
    ids = np.zeros((n, len(cats), t), dtype=np.int64)
    truncated = 0
    for j, name in enumerate(cats):
        vocab = vocabs[name]
        for i, r in enumerate(records):
            seq = vocab.encode(r.features[name])
            if len(seq) > vocab.t_max:
                truncated += 1
                seq = seq[:vocab.t_max]
            ids[i, j, :len(seq)] = seq
    if truncated:
        log.warning("truncated %d categorical value(s) longer than the fitted token length", truncated)
    if n:
        labels = np.stack([r.labels for r in records])
    else:
        labels = np.zeros((0, 0))
    label_mask = np.ones(labels.shape, dtype=bool)
    for i, r in enumerate(records):
        if r.mask is not None:
            label_mask[i] = r.mask
    return EncodedBatch(numeric, ids, ids != PAD_ID, labels, label_mask)


def flat_features(data, transforms: Transforms) -> tuple[np.ndarray, list[str]]:
    """Design matrix for linear models.

    Columns are the normalised numeric features in schema order followed by
    bag-of-token counts per categorical feature (OOV first, then vocabulary
    order).
    """
    records = _records(data)
    schema = transforms.schema
    num_names = [f.name for f in schema.numeric()]
    blocks = [apply_normalizer(transforms.stats, records, num_names)]
    names = list(num_names)
    for f in schema.categorical():
        vocab = transforms.vocabs[f.name]
        width = len(vocab) - 1
        counts = np.zeros((len(records), width))
        for i, r in enumerate(records):
            for tok_id in vocab.encode(r.features[f.name]):
                counts[i, tok_id - 1] += 1
        blocks.append(counts)
        inv = {v: k for k, v in vocab.token_to_id.items()}
        names += [f"{f.name}:<oov>"] + [f"{f.name}:{inv[i]}" for i in range(2, len(vocab))]
    return np.hstack(blocks), names
