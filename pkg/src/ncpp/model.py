"""NCPP network: grouped residual-conv feature extraction, intra-group and
inter-group multi-head self-attention, dense linear head.

Data flow for one batch::

    numeric scalars --conv block--+                      +-- intra attn (cpu) ----+
                                  |-- split by group --->|-- intra attn (other) --|-- pool --> inter attn --> flatten --> dense
    char tokens --embed/mean--conv block-----------------+-- intra attn (memory) -+
                                                         +-- intra attn (char) ---+
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .encode import EncodedBatch
from .schema import MODEL_GROUPS, FeatureSchema, group_names
from .tensor import BatchNormState, Tensor

GROUP_ALIASES = {"workload": "char", "character": "char", "processor": "cpu", "mem": "memory"}


class ConfigError(ValueError):
    pass


@dataclass
class NCPPConfig:
    heads: int = 2
    layers: int = 1
    d_model: int = 64
    embed_dim: int = 4
    conv_filters: int = 64
    kernel_size: int = 1
    ffn_dim: int | None = None
    output_dim: int = 1
    delta: float = 1.0
    seed: int = 0
    vocab_size: int = 100
    feature_embedding: bool = True
    inter_mode: str = "pooled"
    intra_attention: bool = True
    ablate_groups: tuple[str, ...] = ()
    batch_norm: bool = True
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.ablate_groups = tuple(sorted({GROUP_ALIASES.get(g, g) for g in self.ablate_groups}))
        if self.ffn_dim is None:
            self.ffn_dim = 2 * self.d_model

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def validate(self) -> NCPPConfig:
        for name in ("heads", "layers", "d_model", "embed_dim", "conv_filters", "kernel_size",
                     "ffn_dim", "output_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.conv_filters != self.d_model:
            raise ConfigError("conv_filters must equal d_model (conv output feeds attention directly)")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd")
        if self.inter_mode not in ("pooled", "sequence"):
            raise ConfigError(f"unknown inter_mode {self.inter_mode!r}")
        if not self.delta > 0:
            raise ConfigError("huber delta must be positive")
        unknown = set(self.ablate_groups) - set(MODEL_GROUPS)
        if unknown:
            raise ConfigError(f"unknown ablation group(s) {sorted(unknown)}")
        return self

    def intra_enabled(self, group: str) -> bool:
        return self.intra_attention and group not in self.ablate_groups

    def to_json(self) -> dict:
        out = asdict(self)
        out["ablate_groups"] = list(self.ablate_groups)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> NCPPConfig:
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in obj.items() if k in names}
        if "ablate_groups" in kwargs:
            kwargs["ablate_groups"] = tuple(kwargs["ablate_groups"])
        return cls(**kwargs)


@dataclass
class AttentionTrace:
    """Softmax weights captured during a forward pass.

    ``intra[group][layer]`` and ``inter[layer]`` are arrays shaped
    [batch, heads, n, n].
    """
    intra: dict[str, list[np.ndarray]] = field(default_factory=dict)
    inter: list[np.ndarray] = field(default_factory=list)
    inter_labels: list[str] = field(default_factory=list)


class NCPPParams:
    """Trainable tensors (addressed by path) plus batch-norm running state."""

    def __init__(self, config: NCPPConfig, layout: dict[str, list[str]]):
        self.config = config
        self.layout = layout
        self.tensors: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        # fixed per-output multiplier on the head's weight path (not trained)
        self.output_scale = np.ones(config.output_dim)

    def __getitem__(self, path: str) -> Tensor:
        return self.tensors[path]

    @property
    def groups(self) -> list[str]:
        return list(self.layout)

    @property
    def numeric_groups(self) -> list[str]:
        return [g for g in self.layout if g != "char"]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.tensors.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.tensors.items()}
        for name, s in self.bn.items():
            out[f"{name}/running_mean"] = s.running_mean.copy()
            out[f"{name}/running_var"] = s.running_var.copy()
        out["head/output_scale"] = self.output_scale.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            if state[k].shape != t.data.shape:
                raise T.ShapeError(f"{k}: checkpoint shape {state[k].shape} != {t.data.shape}")
            t.data = np.array(state[k], dtype=np.float64)
            t.zero_grad()
        for name, s in self.bn.items():
            s.running_mean = np.array(state[f"{name}/running_mean"], dtype=np.float64)
            s.running_var = np.array(state[f"{name}/running_var"], dtype=np.float64)
        if "head/output_scale" in state:
            self.output_scale = np.array(state["head/output_scale"], dtype=np.float64)

    def copy(self) -> NCPPParams:
        other = NCPPParams(self.config, {g: list(v) for g, v in self.layout.items()})
        for k, t in self.tensors.items():
            other.tensors[k] = Tensor(t.data.copy(), requires_grad=True)
        other.bn = {k: s.copy() for k, s in self.bn.items()}
        other.output_scale = self.output_scale.copy()
        return other

    def save(self, path, meta: dict | None = None) -> None:
        # the header is written with sorted keys, so keep group order separately
        header = {"config": self.config.to_json(), "layout": self.layout, "group_order": list(self.layout)}
        header.update(meta or {})
        save_tensors(path, self.state_dict(), header)

    @classmethod
    def load(cls, path) -> tuple[NCPPParams, dict]:
        state, meta = load_tensors(path)
        config = NCPPConfig.from_json(meta["config"])
        order = meta.get("group_order", list(meta["layout"]))
        params = _allocate(config, {g: list(meta["layout"][g]) for g in order})
        params.load_state_dict(state)
        return params, meta

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- construction

def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _allocate(config: NCPPConfig, layout: dict[str, list[str]],
              rng: np.random.Generator | None = None) -> NCPPParams:
    """Create every parameter; weights are drawn from ``rng`` in a fixed order."""
    cfg = config.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    p = NCPPParams(cfg, layout)
    d, k, h, dk, f = cfg.d_model, cfg.kernel_size, cfg.heads, cfg.d_k, cfg.ffn_dim

    def add(path, value):
        p.tensors[path] = Tensor(value, requires_grad=True)

    def conv_block(prefix, c_in):
        c = cfg.conv_filters
        add(f"{prefix}/conv1/filters", _glorot(rng, (k, c_in, c), k * c_in, c))
        add(f"{prefix}/conv1/bias", np.zeros(c))
        add(f"{prefix}/conv2/filters", _glorot(rng, (k, c, c), k * c, c))
        add(f"{prefix}/conv2/bias", np.zeros(c))
        if cfg.batch_norm:
            for i in (1, 2):
                add(f"{prefix}/bn{i}/gamma", np.ones(c))
                add(f"{prefix}/bn{i}/beta", np.zeros(c))
                p.bn[f"{prefix}/bn{i}"] = BatchNormState(c, cfg.bn_momentum, cfg.bn_eps)
        add(f"{prefix}/shortcut/filters", _glorot(rng, (1, c_in, c), c_in, c))

    def attention_stack(prefix):
        for layer in range(cfg.layers):
            q = f"{prefix}/layer{layer}"
            for name in ("W_Q", "W_K", "W_V"):
                add(f"{q}/{name}", _glorot(rng, (h, d, dk), d, d))
            add(f"{q}/W_O", _glorot(rng, (d, d), d, d))
            add(f"{q}/ln1/gamma", np.ones(d))
            add(f"{q}/ln1/beta", np.zeros(d))
            add(f"{q}/ffn/W_1", _glorot(rng, (d, f), d, f))
            add(f"{q}/ffn/b_1", np.zeros(f))
            add(f"{q}/ffn/W_2", _glorot(rng, (f, d), f, d))
            add(f"{q}/ffn/b_2", np.zeros(d))
            add(f"{q}/ln2/gamma", np.ones(d))
            add(f"{q}/ln2/beta", np.zeros(d))

    if "char" in layout:
        table = rng.uniform(-0.05, 0.05, size=(cfg.vocab_size, cfg.embed_dim))
        table[0] = 0.0
        add("char/embedding", table)
        conv_block("char", cfg.embed_dim)
    if any(g != "char" for g in layout):
        conv_block("numeric", 1)
    if cfg.feature_embedding:
        for g, names in layout.items():
            add(f"feature_embedding/{g}", _glorot(rng, (len(names), d), len(names), d))
    for g in layout:
        if cfg.intra_enabled(g):
            attention_stack(f"intra/{g}")
    attention_stack("inter")
    n_groups = len(layout)
    add("head/W", _glorot(rng, (n_groups * d, cfg.output_dim), n_groups * d, cfg.output_dim))
    add("head/b", np.zeros(cfg.output_dim))
    return p


def init_model(config: NCPPConfig, schema: FeatureSchema, label_mean: np.ndarray | None = None,
               label_scale: np.ndarray | None = None) -> NCPPParams:
    """Seeded parameters for ``schema``.

    The head bias starts at ``label_mean`` and the head's weight path is
    multiplied by the fixed ``label_scale`` (both per output) when given.
    """
    params = _allocate(config, group_names(schema))
    if label_mean is not None:
        params["head/b"].data[:] = np.asarray(label_mean, dtype=np.float64)
    if label_scale is not None:
        scale = np.asarray(label_scale, dtype=np.float64)
        if scale.shape != (config.output_dim,) or not np.all(scale > 0):
            raise ValueError("label_scale must hold one positive value per output")
        params.output_scale = scale.copy()
    return params


def parameter_count(config: NCPPConfig, group_sizes: dict[str, int]) -> int:
    """Closed-form parameter count (see README for the derivation)."""
    cfg = config
    d, k, f, c = cfg.d_model, cfg.kernel_size, cfg.ffn_dim, cfg.conv_filters
    bn = 4 * c if cfg.batch_norm else 0

    def block(c_in):
        return k * c_in * c + c + k * c * c + c + bn + c_in * c

    layer = 4 * d * d + 2 * d * f + f + d + 4 * d
    total = 0
    if "char" in group_sizes:
        total += cfg.vocab_size * cfg.embed_dim + block(cfg.embed_dim)
    if any(g != "char" for g in group_sizes):
        total += block(1)
    if cfg.feature_embedding:
        total += sum(group_sizes.values()) * d
    total += sum(cfg.layers * layer for g in group_sizes if cfg.intra_enabled(g))
    total += cfg.layers * layer
    total += len(group_sizes) * d * cfg.output_dim + cfg.output_dim
    return total


# ---------------------------------------------------------------- forward pieces

def residual_conv_block(x: Tensor, params: NCPPParams, prefix: str, training: bool,
                        update_stats: bool = True) -> Tensor:
    """Two conv-BN-ReLU layers plus a learned width-1 projection shortcut."""
    h = x
    for i in (1, 2):
        bn = params.bn.get(f"{prefix}/bn{i}")
        gamma = params.tensors.get(f"{prefix}/bn{i}/gamma")
        beta = params.tensors.get(f"{prefix}/bn{i}/beta")
        h = T.conv_bn_relu(h, params[f"{prefix}/conv{i}/filters"], params[f"{prefix}/conv{i}/bias"],
                           gamma, beta, bn, training, update_stats)
    return T.add(h, T.conv1d(x, params[f"{prefix}/shortcut/filters"]))


def feature_division(params: NCPPParams, batch: EncodedBatch, training: bool = False,
                     update_stats: bool = True) -> dict[str, Tensor]:
    """Per-group feature sequences, each [batch, group_len, d_model]."""
    out: dict[str, Tensor] = {}
    numeric = params.numeric_groups
    if numeric:
        for g in numeric:
            if batch.numeric[g].shape[1] != len(params.layout[g]):
                raise T.ShapeError(f"group {g}: batch has {batch.numeric[g].shape[1]} features, "
                                   f"model expects {len(params.layout[g])}")
        x = np.concatenate([batch.numeric[g] for g in numeric], axis=1)[..., None]
        h = residual_conv_block(Tensor(x), params, "numeric", training, update_stats)
        start = 0
        for g in numeric:
            n = len(params.layout[g])
            out[g] = T.take(h, np.arange(start, start + n), axis=1)
            start += n
    if "char" in params.layout:
        ids, mask = batch.char_ids, batch.char_mask
        if ids.shape[1] != len(params.layout["char"]):
            raise T.ShapeError(f"char group: batch has {ids.shape[1]} features, "
                               f"model expects {len(params.layout['char'])}")
        emb = T.embedding_lookup_masked(ids, params["char/embedding"], mask)
        counts = np.maximum(mask.sum(axis=-1, keepdims=True), 1).astype(np.float64)
        pooled = T.mul(T.tsum(emb, axis=2), 1.0 / counts)
        out["char"] = residual_conv_block(pooled, params, "char", training, update_stats)
    ordered = {}
    for g in params.layout:
        seq = out[g]
        if params.config.feature_embedding:
            seq = T.add(seq, params[f"feature_embedding/{g}"])
        ordered[g] = seq
    return ordered


def attention_layer(x: Tensor, params: NCPPParams, prefix: str, capture: list | None = None) -> Tensor:
    """Multi-head self-attention, add & norm, feed-forward, add & norm."""
    cfg = params.config
    b, n, d = x.shape
    if n == 0:
        raise T.ShapeError("attention over an empty sequence")
    h, dk = cfg.heads, cfg.d_k

    def project(name):
        # [heads, d, d_k] -> [d, heads * d_k], then split heads: [b, heads, n, d_k]
        w = T.reshape(T.transpose(params[f"{prefix}/{name}"], (1, 0, 2)), (d, h * dk))
        return T.transpose(T.reshape(T.matmul(x, w), (b, n, h, dk)), (0, 2, 1, 3))

    q, k, v = project("W_Q"), project("W_K"), project("W_V")
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(cfg.d_k))
    weights = T.softmax(scores, axis=-1)
    if capture is not None:
        capture.append(weights.data.copy())
    heads = T.matmul(weights, v)
    merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, n, d))
    mha = T.matmul(merged, params[f"{prefix}/W_O"])
    ln1 = T.layer_norm(T.add(x, mha), params[f"{prefix}/ln1/gamma"], params[f"{prefix}/ln1/beta"],
                       cfg.ln_eps)
    hidden = T.relu(T.add(T.matmul(ln1, params[f"{prefix}/ffn/W_1"]), params[f"{prefix}/ffn/b_1"]))
    ffn = T.add(T.matmul(hidden, params[f"{prefix}/ffn/W_2"]), params[f"{prefix}/ffn/b_2"])
    return T.layer_norm(T.add(ffn, ln1), params[f"{prefix}/ln2/gamma"], params[f"{prefix}/ln2/beta"],
                        cfg.ln_eps)


def intra_group_attention(seq: Tensor, params: NCPPParams, group: str,
                          trace: AttentionTrace | None = None) -> Tensor:
    """L stacked attention layers private to ``group``; identity when ablated."""
    if not params.config.intra_enabled(group):
        return seq
    capture = trace.intra.setdefault(group, []) if trace is not None else None
    for layer in range(params.config.layers):
        seq = attention_layer(seq, params, f"intra/{group}/layer{layer}", capture)
    return seq


def inter_group_attention(groups: dict[str, Tensor], params: NCPPParams,
                          trace: AttentionTrace | None = None) -> Tensor:
    """Attention across groups; returns [batch, n_groups * d_model]."""
    missing = [g for g in params.layout if g not in groups]
    if missing:
        raise KeyError(f"missing group output(s) {missing}")
    order = list(params.layout)
    capture = trace.inter if trace is not None else None
    if params.config.inter_mode == "pooled":
        tokens = T.concat([T.mean(groups[g], axis=1, keepdims=True) for g in order], axis=1)
        if trace is not None:
            trace.inter_labels = order
        for layer in range(params.config.layers):
            tokens = attention_layer(tokens, params, f"inter/layer{layer}", capture)
        b = tokens.shape[0]
        return T.reshape(tokens, (b, len(order) * params.config.d_model))
    seq = T.concat([groups[g] for g in order], axis=1)
    if trace is not None:
        trace.inter_labels = [f"{g}:{name}" for g in order for name in params.layout[g]]
    for layer in range(params.config.layers):
        seq = attention_layer(seq, params, f"inter/layer{layer}", capture)
    pooled, start = [], 0
    for g in order:
        n = len(params.layout[g])
        pooled.append(T.mean(T.take(seq, np.arange(start, start + n), axis=1), axis=1))
        start += n
    return T.concat(pooled, axis=1)


def forward(params: NCPPParams, batch: EncodedBatch, training: bool = False,
            trace: AttentionTrace | None = None, update_stats: bool = True) -> Tensor:
    """Predictions [batch, output_dim]; pass an AttentionTrace to capture weights."""
    seqs = feature_division(params, batch, training, update_stats)
    attended = {g: intra_group_attention(s, params, g, trace) for g, s in seqs.items()}
    fused = inter_group_attention(attended, params, trace)
    return T.add(T.mul(T.matmul(fused, params["head/W"]), params.output_scale), params["head/b"])


def predict(params: NCPPParams, batch: EncodedBatch, chunk: int = 256) -> np.ndarray:
    """Inference-mode predictions as a plain array."""
    n = len(batch)
    if n == 0:
        return np.zeros((0, params.config.output_dim))
    outs = [forward(params, batch.take(np.arange(s, min(s + chunk, n)))).data
            for s in range(0, n, chunk)]
    return np.concatenate(outs, axis=0)


def sidecar(params: NCPPParams, schema: FeatureSchema, suite_json: dict, transforms_file: str) -> dict:
    return {"config": params.config.to_json(), "schema_hash": schema.digest(), "suite": suite_json,
            "transforms": transforms_file, "layout": params.layout}


def write_sidecar(path, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
