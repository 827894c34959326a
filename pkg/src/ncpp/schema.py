"""Feature schema and suite label layouts.

The schema is the single description of every input column: its name,
whether it is numeric or categorical, and which semantic group it belongs
to.  Model groups are derived from it by :func:`group_partition`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

KINDS = ("numeric", "categorical")
SEMANTIC_GROUPS = ("Memory", "Workload", "CPU", "Other")
# Model-side groups, in the order the network processes them.
MODEL_GROUPS = ("char", "cpu", "other", "memory")
_NUMERIC_TO_MODEL = {"CPU": "cpu", "Other": "other", "Memory": "memory", "Workload": "other"}


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    group: str
    unit: str = ""

    @property
    def model_group(self) -> str:
        if self.kind == "categorical":
            return "char"
        return _NUMERIC_TO_MODEL[self.group]


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        seen = set()
        for f in self.features:
            if f.name in seen:
                raise SchemaError(f"duplicate feature name {f.name!r}")
            if f.kind not in KINDS:
                raise SchemaError(f"feature {f.name!r}: unknown kind {f.kind!r}")
            if f.group not in SEMANTIC_GROUPS:
                raise SchemaError(f"feature {f.name!r}: unknown group {f.group!r}")
            seen.add(f.name)
        if not self.features:
            raise SchemaError("schema has no features")

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def numeric(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.kind == "numeric"]

    def categorical(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.kind == "categorical"]

    def counts(self) -> dict[str, int]:
        out = {g: 0 for g in MODEL_GROUPS}
        for f in self.features:
            out[f.model_group] += 1
        return out

    def get(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def to_json(self) -> list[dict]:
        return [asdict(f) for f in self.features]

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SuiteSpec:
    name: str
    benchmarks: tuple[str, ...]

    @property
    def output_dim(self) -> int:
        return len(self.benchmarks)

    def label_columns(self) -> list[str]:
        return [f"{self.name}::{b}" for b in self.benchmarks]

    def to_json(self) -> dict:
        return {"name": self.name, "benchmarks": list(self.benchmarks)}

    @classmethod
    def from_json(cls, obj: dict) -> SuiteSpec:
        return cls(obj["name"], tuple(obj["benchmarks"]))


# Benchmark rosters. The SPECrate suites list the individual benchmarks
# followed by the overall suite score. MLC names are descriptive placeholders.
SUITES: dict[str, SuiteSpec] = {s.name: s for s in [
    SuiteSpec("SPECrate2017_int_base", (
        "500.perlbench_r", "502.gcc_r", "505.mcf_r", "520.omnetpp_r", "523.xalancbmk_r",
        "525.x264_r", "531.deepsjeng_r", "541.leela_r", "548.exchange2_r", "557.xz_r",
        "SPECrate2017_int_base")),
    SuiteSpec("SPECrate2017_fp_base", (
        "503.bwaves_r", "507.cactuBSSN_r", "508.namd_r", "510.parest_r", "511.povray_r",
        "519.lbm_r", "521.wrf_r", "526.blender_r", "527.cam4_r", "538.imagick_r",
        "544.nab_r", "549.fotonik3d_r", "554.roms_r", "SPECrate2017_fp_base")),
    SuiteSpec("MLC_Latency", (
        "l1_hit", "l2_hit", "l3_hit", "local_dram", "remote_dram",
        "local_l3_snoop", "remote_l3_snoop", "local_hitm", "remote_hitm")),
    SuiteSpec("MLC_Bandwidth", (
        "l3_max", "all_reads", "reads_3to1", "reads_2to1", "reads_1to1",
        "stream_triad_like", "local_socket", "remote_socket", "cross_socket_writes")),
    SuiteSpec("Stream", ("Copy", "Scale", "Sum", "Triad")),
    SuiteSpec("HPCG", ("HPCG",)),
]}


def get_suite(name: str) -> SuiteSpec:
    try:
        return SUITES[name]
    except KeyError:
        raise SchemaError(f"unknown suite {name!r}; known: {sorted(SUITES)}") from None


_DEFAULT_PATH = Path(__file__).with_name("data") / "default_schema.json"


def _parse(obj, origin: str) -> FeatureSchema:
    if isinstance(obj, dict):
        obj = obj.get("features")
    if not isinstance(obj, list):
        raise SchemaError(f"{origin}: expected a JSON list of features")
    feats = []
    for i, entry in enumerate(obj):
        try:
            feats.append(FeatureSpec(str(entry["name"]), str(entry["kind"]), str(entry["group"]),
                                     str(entry.get("unit") or "")))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"{origin}: feature #{i} is malformed ({exc})") from None
    return FeatureSchema(tuple(feats))


def load_schema(path=None) -> FeatureSchema:
    """Load and validate a schema file; ``None`` gives the built-in default."""
    path = Path(path) if path is not None else _DEFAULT_PATH
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise SchemaError(f"{path}: empty schema file")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    return _parse(obj, str(path))


def save_schema(schema: FeatureSchema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_json(), indent=2) + "\n", encoding="utf-8")


def schema_from_json(obj) -> FeatureSchema:
    return _parse(obj, "<json>")


def default_schema() -> FeatureSchema:
    return load_schema(None)


def group_partition(schema: FeatureSchema) -> dict[str, list[int]]:
    """Map each non-empty model group to the schema indices it holds.

    Categorical features always form the ``char`` group; numeric features
    keep their semantic group. Groups appear in ``MODEL_GROUPS`` order and
    indices keep schema order within a group.
    """
    out: dict[str, list[int]] = {g: [] for g in MODEL_GROUPS}
    for i, f in enumerate(schema.features):
        out[f.model_group].append(i)
    return {g: idx for g, idx in out.items() if idx}


def group_names(schema: FeatureSchema) -> dict[str, list[str]]:
    part = group_partition(schema)
    return {g: [schema.features[i].name for i in idx] for g, idx in part.items()}
