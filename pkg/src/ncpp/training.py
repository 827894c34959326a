"""Data splits, k-fold cross-validation and the mini-batch training loop."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .encode import EncodedBatch, Transforms, fit_transforms
from .ingest import Dataset
from .model import NCPPConfig, NCPPParams, forward, init_model, predict
from .optim import AdamState, ExponentialDecay, adam_step
from .schema import FeatureSchema


class NumericError(FloatingPointError):
    """Raised when training produces a non-finite loss."""


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test fractions.

    ``mode="flat"`` takes floor(frac * n) records for validation and test
    and gives the remainder to training.  ``mode="nested"`` first carves the
    test set off the whole dataset and then the validation set off what is
    left, each with floor semantics; with fractions (0.64, 0.16, 0.20) this
    is a 20% hold-out followed by a 20% validation cut.
    """
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    seed: int = 0
    mode: str = "flat"

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(not f > 0 for f in fr):
            raise ValueError(f"split fractions must be positive, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")
        if self.mode not in ("flat", "nested"):
            raise ValueError(f"unknown split mode {self.mode!r}")

    def sizes(self, n: int) -> tuple[int, int, int]:
        # the 1e-9 guard keeps e.g. 0.2 * 10 from flooring to 1
        if self.mode == "flat":
            n_val = math.floor(self.val * n + 1e-9)
            n_test = math.floor(self.test * n + 1e-9)
        else:
            n_test = math.floor(self.test * n + 1e-9)
            n_val = math.floor(self.val / (self.train + self.val) * (n - n_test) + 1e-9)
        return n - n_val - n_test, n_val, n_test


SPLIT_PRESETS = {
    "default": SplitSpec(0.6, 0.2, 0.2, mode="flat"),
    "table2": SplitSpec(0.64, 0.16, 0.20, mode="nested"),
}


def split_preset(name: str, seed: int = 0) -> SplitSpec:
    try:
        base = SPLIT_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown split preset {name!r}; known: {sorted(SPLIT_PRESETS)}") from None
    return SplitSpec(base.train, base.val, base.test, seed, base.mode)


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_train, n_val, n_test = spec.sizes(n)
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{n} records give an empty partition at sizes {(n_train, n_val, n_test)}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


def split_dataset(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    tr, va, te = split_indices(len(dataset), spec)
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)


def kfold_indices(n: int, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    if k < 2:
        raise ValueError(f"k-fold needs k >= 2, got {k}")
    if n < k:
        raise ValueError(f"{n} records cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        val = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, val))
    return out


def kfold(train_val: Dataset, k: int = 5, seed: int = 0) -> list[tuple[Dataset, Dataset]]:
    return [(train_val.subset(tr), train_val.subset(va))
            for tr, va in kfold_indices(len(train_val), k, seed)]


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    suite: str = "SPECrate2017_fp_base"
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_mode: str = "flat"
    k: int = 5
    epochs: int = 1000
    batch_size: int = 64
    lr_initial: float = 0.01
    decay_rate: float = 0.96
    decay_steps: int = 1000
    H: int = 2
    L: int = 1
    delta: float = 1.0
    seed: int = 0
    d_model: int = 64
    embed_dim: int = 4
    kernel_size: int = 1
    ffn_dim: int | None = None
    inter_mode: str = "pooled"
    feature_embedding: bool = True
    intra_attention: bool = True
    ablate_groups: tuple[str, ...] = ()
    scale_output: bool = True
    eval_every: int = 1

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        self.ablate_groups = tuple(self.ablate_groups)

    def validate(self) -> TrainConfig:
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be positive")
        if not self.lr_initial > 0:
            raise ValueError("lr_initial must be positive")
        self.split_spec()
        return self

    def split_spec(self) -> SplitSpec:
        return SplitSpec(*self.fractions, seed=self.seed, mode=self.split_mode)

    def model_config(self, output_dim: int) -> NCPPConfig:
        return NCPPConfig(heads=self.H, layers=self.L, d_model=self.d_model, embed_dim=self.embed_dim,
                          conv_filters=self.d_model, kernel_size=self.kernel_size, ffn_dim=self.ffn_dim,
                          output_dim=output_dim, delta=self.delta, seed=self.seed,
                          feature_embedding=self.feature_embedding, inter_mode=self.inter_mode,
                          intra_attention=self.intra_attention, ablate_groups=self.ablate_groups)

    def schedule(self) -> ExponentialDecay:
        return ExponentialDecay(self.lr_initial, self.decay_rate, self.decay_steps)

    def to_json(self) -> dict:
        out = asdict(self)
        out["fractions"] = list(self.fractions)
        out["ablate_groups"] = list(self.ablate_groups)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown training config key(s) {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- history

@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    step_lrs: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf

    def __len__(self) -> int:
        return len(self.epoch)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "wall_time"])
            for row in zip(self.epoch, self.train_loss, self.val_loss, self.lr, self.wall_time):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def from_csv(cls, path) -> TrainHistory:
        h = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                h.epoch.append(int(row["epoch"]))
                h.train_loss.append(float(row["train_loss"]))
                h.val_loss.append(float(row["val_loss"]))
                h.lr.append(float(row["lr"]))
                h.wall_time.append(float(row["wall_time"]))
        return h


@dataclass
class TrainResult:
    params: NCPPParams
    history: TrainHistory
    best_params: NCPPParams
    transforms: Transforms

    def __iter__(self):
        # allows ``params, history = train(...)``
        return iter((self.params, self.history))


# ---------------------------------------------------------------- loop

def label_statistics(batch: EncodedBatch) -> tuple[np.ndarray, np.ndarray]:
    """Per-output mean and standard deviation of the observed training labels.

    A column with no observations gets (0, 1); zero spread maps to 1.
    """
    bad = batch.label_mask & ~np.isfinite(batch.labels)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise NumericError(f"non-finite training label at record {i}, output {j}")
    k = batch.labels.shape[1]
    mean, std = np.zeros(k), np.ones(k)
    for j in range(k):
        col = batch.labels[batch.label_mask[:, j], j]
        if col.size:
            mean[j] = col.mean()
            std[j] = col.std() or 1.0
    return mean, std


def batch_loss(params: NCPPParams, batch: EncodedBatch, training: bool,
               update_stats: bool = True) -> T.Tensor:
    pred = forward(params, batch, training=training, update_stats=update_stats)
    return T.huber_loss(pred, batch.labels, params.config.delta, batch.label_mask)


def evaluate_loss(params: NCPPParams, batch: EncodedBatch) -> float:
    """Masked Huber loss with inference-mode batch norm."""
    if len(batch) == 0:
        return math.nan
    pred = predict(params, batch)
    return float(T.huber_loss(T.Tensor(pred), batch.labels, params.config.delta, batch.label_mask).data)


def train(config: TrainConfig, train_data: Dataset, val_data: Dataset | None = None,
          transforms: Transforms | None = None, schema: FeatureSchema | None = None,
          out_dir=None, log=None) -> TrainResult:
    """Fit an NCPP model with Adam on mini-batches.

    ``transforms`` default to fitting on ``train_data``.  If ``out_dir`` is
    given, the final and best-validation checkpoints plus the history CSV are
    written there.  The result unpacks as ``(params, history)``.
    """
    cfg = config.validate()
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    if transforms is None:
        if schema is None:
            raise ValueError("pass either fitted transforms or a schema to fit them on")
        transforms = fit_transforms(train_data, schema)
    schema = transforms.schema
    tr = transforms.encode(train_data)
    va = transforms.encode(val_data) if val_data is not None and len(val_data) else None

    label_mean, label_scale = label_statistics(tr)
    params = init_model(cfg.model_config(tr.labels.shape[1]), schema, label_mean,
                        label_scale if cfg.scale_output else None)
    best = params.copy()
    schedule = cfg.schedule()
    adam = AdamState()
    rng = np.random.default_rng([cfg.seed, 17])
    history = TrainHistory()
    n = len(tr)
    step = 0
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, weight = 0.0, 0.0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            batch = tr.take(order[s:s + cfg.batch_size])
            params.zero_grad()
            loss = batch_loss(params, batch, training=True)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b} "
                                   f"(global step {step})")
            T.backward(loss)
            lr = schedule(step)
            adam_step(params.tensors, params.grads(), adam, lr)
            history.step_lrs.append(lr)
            step += 1
            total += value * len(batch)
            weight += len(batch)
        last = epoch == cfg.epochs - 1
        if va is not None and (epoch % cfg.eval_every == 0 or last):
            val_loss = evaluate_loss(params, va)
            if not math.isfinite(val_loss):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
        else:
            val_loss = math.nan
        if va is None or val_loss < history.best_val_loss:
            best = params.copy()
            history.best_epoch = epoch
            history.best_val_loss = val_loss if va is not None else math.nan
        history.epoch.append(epoch)
        history.train_loss.append(total / weight)
        history.val_loss.append(val_loss)
        history.lr.append(history.step_lrs[-1])
        history.wall_time.append(time.perf_counter() - start)
        if log is not None:
            log(epoch, history)

    if out_dir is not None:
        save_run(out_dir, cfg, params, best, history, transforms, train_data.suite.to_json())
    return TrainResult(params, history, best, transforms)


def save_run(out_dir, cfg: TrainConfig, params: NCPPParams, best: NCPPParams, history: TrainHistory,
             transforms: Transforms, suite_json: dict) -> dict[str, Path]:
    """Write checkpoints, sidecars, transforms, config and history; return the paths."""
    from .model import sidecar, write_sidecar

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"transforms": out / "transforms.json", "model": out / "model.ckpt",
             "best": out / "best.ckpt", "history": out / "history.csv", "config": out / "train_config.json"}
    transforms.save(paths["transforms"])
    meta = {"suite": suite_json, "schema_hash": transforms.schema.digest()}
    params.save(paths["model"], meta)
    best.save(paths["best"], dict(meta, best_epoch=history.best_epoch))
    for key in ("model", "best"):
        p = paths[key]
        write_sidecar(p.with_suffix(".json"),
                      sidecar(params, transforms.schema, suite_json, paths["transforms"].name))
        paths[f"{key}_sidecar"] = p.with_suffix(".json")
    history.to_csv(paths["history"])
    paths["config"].write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    return paths


def cross_validate(config: TrainConfig, train_val: Dataset, schema: FeatureSchema,
                   k: int | None = None) -> list[tuple[TrainResult, Dataset]]:
    """Train one model per fold on pooled train+validation data.

    Fold ``i`` uses seed ``config.seed + i``; transforms are refit on each
    fold's training part.  Returns (result, validation fold) pairs.
    """
    k = k or config.k
    out = []
    for i, (tr, va) in enumerate(kfold(train_val, k, config.seed)):
        fold_cfg = TrainConfig.from_json(dict(config.to_json(), seed=config.seed + i))
        out.append((train(fold_cfg, tr, va, schema=schema), va))
    return out
