"""Attention-based feature and group importance."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encode import EncodedBatch
from .model import AttentionTrace, NCPPParams, forward


@dataclass
class ImportanceReport:
    """Normalised importance scores per group plus the inter-group scores.

    ``matrices`` keeps the attention matrices the scores were reduced from,
    keyed by group name and ``"inter"``.
    """
    groups: dict[str, tuple[list[str], np.ndarray]]
    inter: tuple[list[str], np.ndarray]
    provenance: dict
    matrices: dict[str, np.ndarray] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"groups": {g: {"features": names, "scores": scores.tolist()}
                           for g, (names, scores) in self.groups.items()},
                "inter": {"groups": self.inter[0], "scores": self.inter[1].tolist()},
                "provenance": self.provenance,
                "matrices": {k: v.tolist() for k, v in self.matrices.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> ImportanceReport:
        return cls({g: (list(v["features"]), np.array(v["scores"])) for g, v in obj["groups"].items()},
                   (list(obj["inter"]["groups"]), np.array(obj["inter"]["scores"])),
                   dict(obj["provenance"]),
                   {k: np.array(v) for k, v in obj.get("matrices", {}).items()})


def _select(stack: np.ndarray, sample, head) -> np.ndarray:
    """Reduce a [batch, heads, n, n] array to one n x n matrix."""
    b, h = stack.shape[:2]
    if sample == "mean":
        stack = stack.mean(axis=0, keepdims=True)
    elif not 0 <= sample < b:
        raise IndexError(f"sample {sample} out of range for a batch of {b}")
    else:
        stack = stack[sample:sample + 1]
    if head == "mean":
        stack = stack.mean(axis=1, keepdims=True)
    elif not 0 <= head < h:
        raise IndexError(f"head {head} out of range for {h} heads")
    else:
        stack = stack[:, head:head + 1]
    return stack[0, 0]


def trace_batch(params: NCPPParams, batch: EncodedBatch) -> AttentionTrace:
    if len(batch) == 0:
        raise ValueError("cannot trace attention on an empty batch")
    trace = AttentionTrace()
    forward(params, batch, training=False, trace=trace)
    return trace


def extract_attention(params: NCPPParams, batch: EncodedBatch, sample=0, head=0,
                      layer: int = 0) -> dict[str, np.ndarray]:
    """Intra-group matrices (one per group with attention) and the inter-group matrix.

    ``sample`` and ``head`` accept an index or ``"mean"``.
    """
    if not 0 <= layer < params.config.layers:
        raise IndexError(f"layer {layer} out of range for {params.config.layers} layer(s)")
    trace = trace_batch(params, batch)
    out = {g: _select(mats[layer], sample, head) for g, mats in trace.intra.items()}
    out["inter"] = _select(trace.inter[layer], sample, head)
    return out


def aggregate_importance(matrix, reduction: str = "column") -> np.ndarray:
    """Scores summing to 1 from a square attention matrix.

    ``"column"`` averages the attention each position receives (column
    means); ``"row"`` averages what each position gives (row means).
    """
    A = np.asarray(matrix, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"importance needs a square matrix, got shape {A.shape}")
    if reduction == "column":
        s = A.mean(axis=0)
    elif reduction == "row":
        s = A.mean(axis=1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    total = s.sum()
    return s / total if total > 0 else np.full(len(s), 1.0 / len(s))


def explain(params: NCPPParams, batch: EncodedBatch, sample=0, head=0, layer: int = 0,
            reduction: str = "column", suite: str = "") -> ImportanceReport:
    mats = extract_attention(params, batch, sample, head, layer)
    groups = {g: (list(params.layout[g]), aggregate_importance(m, reduction))
              for g, m in mats.items() if g != "inter"}
    if params.config.inter_mode == "pooled":
        inter_labels = list(params.layout)
    else:
        inter_labels = [f"{g}:{n}" for g in params.layout for n in params.layout[g]]
    prov = {"suite": suite, "sample": "mean over batch" if sample == "mean" else int(sample),
            "head": "mean over heads" if head == "mean" else int(head), "layer": int(layer),
            "reduction": reduction, "batch_size": len(batch)}
    return ImportanceReport(groups, (inter_labels, aggregate_importance(mats["inter"], reduction)),
                            prov, mats)


def _tag(report: ImportanceReport) -> str:
    p = report.provenance
    sample = "mean" if p["sample"] == "mean over batch" else p["sample"]
    head = "mean" if p["head"] == "mean over heads" else p["head"]
    suite = p.get("suite") or "suite"
    return f"{suite}_s{sample}_h{head}_l{p['layer']}"


def export_importance(report: ImportanceReport, out_dir) -> dict[str, list[Path]]:
    """Write per-group and inter-group score CSVs, matrix CSVs and a JSON bundle."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = _tag(report)
    written: dict[str, list[Path]] = {"importance": [], "matrices": [], "bundle": []}
    for g, (names, scores) in report.groups.items():
        written["importance"].append(_write_scores(out / f"{tag}_{g}_importance.csv", "feature", names, scores))
    written["importance"].append(_write_scores(out / f"{tag}_inter_importance.csv", "group",
                                               report.inter[0], report.inter[1]))
    for key, mat in report.matrices.items():
        p = out / f"{tag}_{key}_matrix.csv"
        labels = report.inter[0] if key == "inter" else report.groups[key][0]
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([""] + labels)
            for name, row in zip(labels, mat):
                w.writerow([name] + [repr(float(v)) for v in row])
        written["matrices"].append(p)
    bundle = out / f"{tag}_importance.json"
    bundle.write_text(json.dumps(report.to_json(), indent=1) + "\n", encoding="utf-8")
    written["bundle"].append(bundle)
    return written


def _write_scores(path: Path, key: str, names, scores) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([key, "score"])
        for n, s in zip(names, scores):
            w.writerow([n, repr(float(s))])
    return path


def read_scores(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r[0] for r in rows], np.array([float(r[1]) for r in rows])


def load_importance(path) -> ImportanceReport:
    return ImportanceReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
