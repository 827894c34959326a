"""Splits, k-fold, the training loop and its persisted artefacts."""
import json
import math

import numpy as np
import pytest

from ncpp.encode import fit_transforms
from ncpp.ingest import ConsolidatedRecord, Dataset
from ncpp.model import NCPPParams, predict
from ncpp.optim import lr_schedule
from ncpp.schema import get_suite
from ncpp.training import (NumericError, SplitSpec, TrainConfig, TrainHistory, cross_validate, kfold,
                           kfold_indices, label_statistics, split_dataset, split_indices, split_preset,
                           train)

TINY = dict(d_model=8, epochs=2, batch_size=16)


# =============================================================================
# Splits
# =============================================================================

class TestSplits:
    def test_ten_records(self):
        tr, va, te = split_indices(10, SplitSpec(seed=0))
        assert (len(tr), len(va), len(te)) == (6, 2, 2)

    @pytest.mark.parametrize("n", [5, 17, 100, 1274])
    def test_disjoint_exhaustive(self, n):
        parts = split_indices(n, SplitSpec(seed=3))
        joined = np.concatenate(parts)
        assert sorted(joined.tolist()) == list(range(n))

    def test_table2_preset(self):
        assert split_preset("table2").sizes(1274) == (816, 204, 254)
        tr, va, te = split_indices(1274, split_preset("table2", seed=9))
        assert (len(tr), len(va), len(te)) == (816, 204, 254)

    def test_flat_floor_remainder_to_train(self):
        assert SplitSpec().sizes(11) == (7, 2, 2)

    def test_seeded(self):
        a = split_indices(50, SplitSpec(seed=4))
        b = split_indices(50, SplitSpec(seed=4))
        c = split_indices(50, SplitSpec(seed=5))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    @pytest.mark.parametrize("fr", [(0.5, 0.5, 0.0), (0.6, 0.2, 0.3), (-0.2, 0.6, 0.6)])
    def test_bad_fractions(self, fr):
        with pytest.raises(ValueError):
            SplitSpec(*fr)

    def test_empty_partition(self):
        with pytest.raises(ValueError, match="empty"):
            split_indices(3, SplitSpec())

    def test_split_dataset(self, synth_small):
        tr, va, te = split_dataset(synth_small[0], SplitSpec(seed=1))
        assert (len(tr), len(va), len(te)) == (24, 8, 8)


class TestKFold:
    def test_sizes(self):
        folds = kfold_indices(10, 5, seed=0)
        assert [(len(a), len(b)) for a, b in folds] == [(8, 2)] * 5

    def test_each_index_validates_once(self):
        folds = kfold_indices(23, 5, seed=2)
        val = np.concatenate([v for _, v in folds])
        assert sorted(val.tolist()) == list(range(23))
        sizes = [len(v) for _, v in folds]
        assert max(sizes) - min(sizes) <= 1
        for tr, va in folds:
            assert not set(tr) & set(va)

    def test_seeded(self):
        a = kfold_indices(30, 5, seed=8)
        b = kfold_indices(30, 5, seed=8)
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))

    def test_errors(self):
        with pytest.raises(ValueError):
            kfold_indices(10, 1)
        with pytest.raises(ValueError):
            kfold_indices(3, 5)

    def test_dataset_folds(self, synth_small):
        pairs = kfold(synth_small[0], 4, seed=0)
        assert [len(v) for _, v in pairs] == [10] * 4


# =============================================================================
# Config
# =============================================================================

class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig(epochs=3, ablate_groups=("cpu",), fractions=(0.64, 0.16, 0.2))
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_json()))
        assert TrainConfig.load(path) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_json({"epocs": 3})

    def test_model_config(self):
        m = TrainConfig(H=4, L=3, delta=0.1).model_config(9)
        assert (m.heads, m.layers, m.delta, m.output_dim, m.d_model) == (4, 3, 0.1, 9, 64)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.lr_initial, cfg.H, cfg.L, cfg.delta) == (1000, 64, 0.01, 2, 1, 1.0)


# =============================================================================
# Loop
# =============================================================================

class TestTrain:
    def test_steps_per_epoch(self, schema):
        from builders import synthetic
        data, _ = synthetic(130, seed=0)
        res = train(TrainConfig(d_model=8, epochs=1, batch_size=64), data, schema=schema)
        assert len(res.history.step_lrs) == 3

    def test_history_and_schedule(self, synth_small, schema):
        cfg = TrainConfig(d_model=8, epochs=3, batch_size=16, decay_steps=2)
        tr, va = synth_small[0].subset(range(30)), synth_small[0].subset(range(30, 40))
        res = train(cfg, tr, va, schema=schema)
        h = res.history
        assert len(h) == len(h.train_loss) == len(h.val_loss) == len(h.lr) == len(h.wall_time) == 3
        assert h.step_lrs == [lr_schedule(s, 0.01, 0.96, 2) for s in range(6)]
        assert h.lr == [h.step_lrs[1], h.step_lrs[3], h.step_lrs[5]]
        assert all(math.isfinite(v) for v in h.val_loss)
        assert h.best_val_loss == min(h.val_loss)

    def test_unpacks_and_best_copy(self, synth_small, schema):
        params, history = train(TrainConfig(**TINY), synth_small[0], synth_small[0], schema=schema)
        assert isinstance(params, NCPPParams) and isinstance(history, TrainHistory)

    def test_zero_variance_labels_start_near_zero(self, synth_small, schema):
        recs = [ConsolidatedRecord(r.features, np.full(14, 250.0)) for r in synth_small[0].records]
        data = Dataset(synth_small[0].suite, recs)
        res = train(TrainConfig(**TINY), data, schema=schema)
        # a zero-bias head would start near Huber(250) = 249.5; the mean-initialised bias starts near zero
        assert res.history.train_loss[0] < 1e-2 * 249.5

    def test_deterministic(self, synth_small, schema):
        a = train(TrainConfig(**TINY), synth_small[0], schema=schema)
        b = train(TrainConfig(**TINY), synth_small[0], schema=schema)
        assert a.params.digest() == b.params.digest()
        assert a.history.train_loss == b.history.train_loss

    def test_loss_improves_on_small_set(self, synth_small, schema):
        res = train(TrainConfig(d_model=16, epochs=40, batch_size=8), synth_small[0], schema=schema)
        tl = res.history.train_loss
        assert np.median(tl[-10:]) < np.median(tl[:10])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_batch(self, synth_small, schema):
        # Adam steps are bounded by the learning rate, so only an absurd rate overflows
        cfg = TrainConfig(d_model=8, epochs=5, batch_size=16, lr_initial=1e200)
        with pytest.raises(NumericError, match=r"epoch \d+, batch \d+"):
            train(cfg, synth_small[0], schema=schema)

    def test_non_finite_label_rejected(self, synth_small, schema):
        recs = [ConsolidatedRecord(r.features, r.labels.copy()) for r in synth_small[0].records]
        recs[5].labels[2] = np.inf
        with pytest.raises(NumericError, match="record 5, output 2"):
            train(TrainConfig(**TINY), Dataset(synth_small[0].suite, recs), schema=schema)

    def test_masked_labels_train(self, synth_small, schema):
        recs = [ConsolidatedRecord(r.features, r.labels.copy(), np.ones(14, dtype=bool))
                for r in synth_small[0].records]
        for r in recs[:10]:
            r.mask[3] = False
            r.labels[3] = 0.0
        res = train(TrainConfig(**TINY), Dataset(synth_small[0].suite, recs), schema=schema)
        assert all(math.isfinite(v) for v in res.history.train_loss)

    def test_label_statistics(self):
        from ncpp.encode import EncodedBatch
        labels = np.array([[1.0, 5.0], [3.0, 5.0]])
        mask = np.array([[True, True], [True, False]])
        b = EncodedBatch({}, np.zeros((2, 0, 1)), np.zeros((2, 0, 1), bool), labels, mask)
        mean, std = label_statistics(b)
        assert mean.tolist() == [2.0, 5.0] and std.tolist() == [1.0, 1.0]

    def test_needs_schema_or_transforms(self, synth_small):
        with pytest.raises(ValueError):
            train(TrainConfig(**TINY), synth_small[0])

    def test_artifacts_written(self, tmp_path, synth_small, schema):
        tf = fit_transforms(synth_small[0], schema)
        res = train(TrainConfig(**TINY), synth_small[0], synth_small[0], tf, out_dir=tmp_path)
        for name in ("model.ckpt", "model.json", "best.ckpt", "best.json", "transforms.json", "history.csv",
                     "train_config.json"):
            assert (tmp_path / name).is_file(), name
        back, _ = NCPPParams.load(tmp_path / "model.ckpt")
        batch = tf.encode(synth_small[0])
        assert predict(back, batch).tobytes() == predict(res.params, batch).tobytes()
        h = TrainHistory.from_csv(tmp_path / "history.csv")
        assert h.train_loss == res.history.train_loss


def test_cross_validate_fold_seeds(synth_small, schema):
    runs = cross_validate(TrainConfig(**TINY, seed=7), synth_small[0], schema, k=3)
    assert len(runs) == 3
    assert [len(va) for _, va in runs] == [14, 13, 13]
    assert [r.params.config.seed for r, _ in runs] == [7, 8, 9]


def test_suite_mismatch_in_dataset():
    with pytest.raises(ValueError):
        Dataset(get_suite("HPCG"), [ConsolidatedRecord({}, np.zeros(2))])
