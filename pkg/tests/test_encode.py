"""Normaliser, tokenizer, vocabularies and batch encoding."""
import logging

import numpy as np
import pytest

from ncpp.encode import (OOV_ID, PAD_ID, Transforms, Vocab, apply_normalizer, encode_batch, fit_normalizer,
                         fit_tokenizer, fit_transforms, flat_features, invert_normalizer, tokenize)
from ncpp.ingest import ConsolidatedRecord, Dataset
from ncpp.schema import FeatureSchema, FeatureSpec, get_suite

HPCG = get_suite("HPCG")
SMALL = FeatureSchema((FeatureSpec("A", "numeric", "CPU"), FeatureSpec("B", "numeric", "Memory"),
                       FeatureSpec("C", "categorical", "Other")))


def dataset(rows):
    return Dataset(HPCG, [ConsolidatedRecord({"A": a, "B": b, "C": c}, np.array([1.0])) for a, b, c in rows])


# =============================================================================
# Normaliser
# =============================================================================

class TestNormalizer:
    def test_population_std(self):
        st = fit_normalizer(dataset([(2.0, 1.0, ""), (4.0, 1.0, "")]), SMALL)
        assert st.mean["A"] == 3.0 and st.std["A"] == 1.0

    def test_constant_flagged(self):
        st = fit_normalizer(dataset([(5.0, 5.0, "")] * 3), SMALL)
        assert st.std["B"] == 1.0 and "B" in st.constant

    def test_training_moments(self, synth_small, schema):
        st = fit_normalizer(synth_small[0], schema)
        names = [f.name for f in schema.numeric() if f.name not in st.constant]
        z = apply_normalizer(st, synth_small[0], names)
        np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-9)
        np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-9)

    def test_identity_and_center(self):
        st = fit_normalizer(dataset([(2.0, 1.0, ""), (4.0, 3.0, "")]), SMALL)
        st.center["A"], st.scale["A"] = 0.0, 1.0
        recs = dataset([(7.5, 2.0, "")])
        assert apply_normalizer(st, recs, ["A"])[0, 0] == 7.5
        assert apply_normalizer(st, recs, ["B"])[0, 0] == 0.0

    def test_inverse_round_trip(self, synth_small, schema):
        st = fit_normalizer(synth_small[0], schema)
        names = [f.name for f in schema.numeric()]
        raw = np.array([[r.features[n] for n in names] for r in synth_small[0].records])
        back = invert_normalizer(st, apply_normalizer(st, synth_small[0], names), names)
        np.testing.assert_allclose(back, raw, rtol=0, atol=1e-12 * np.abs(raw).max())

    def test_minmax(self):
        st = fit_normalizer(dataset([(2.0, 1.0, ""), (6.0, 3.0, "")]), SMALL, method="minmax")
        np.testing.assert_allclose(apply_normalizer(st, dataset([(4.0, 3.0, "")]), ["A", "B"]), [[0.5, 1.0]])

    def test_errors(self):
        with pytest.raises(ValueError):
            fit_normalizer(dataset([]), SMALL)
        st = fit_normalizer(dataset([(1.0, 1.0, "")]), SMALL)
        with pytest.raises(KeyError):
            apply_normalizer(st, dataset([(1.0, 1.0, "")]), ["Z"])


# =============================================================================
# Tokenizer
# =============================================================================

class TestTokenizer:
    def test_split_rule(self):
        assert tokenize("SPR-XCC") == ["spr", "xcc"]
        assert tokenize("  Ubuntu 22.04_LTS ") == ["ubuntu", "22", "04", "lts"]
        assert tokenize("") == [] and tokenize(None) == []

    def test_vocab_and_tmax(self):
        v = fit_tokenizer(dataset([(0, 0, "SPR-XCC"), (0, 0, "SPR-MCC")]), SMALL)["C"]
        assert set(v.token_to_id) == {"spr", "xcc", "mcc"}
        assert v.t_max == 2
        assert v.token_to_id["spr"] == 2            # most frequent first
        assert min(v.token_to_id.values()) == 2     # 0 and 1 reserved

    def test_cap_sends_rarest_to_oov(self):
        rows = [(0, 0, f"t{i:03d}") for i in range(120)] + [(0, 0, "common")] * 5
        v = fit_tokenizer(dataset(rows), SMALL, cap=100)["C"]
        assert len(v) == 100
        assert "common" in v.token_to_id
        assert v.encode("t119") == [OOV_ID]
        assert sorted(v.token_to_id.values()) == list(range(2, 100))

    def test_refit_identical_with_lexicographic_ties(self):
        rows = [(0, 0, "b a"), (0, 0, "c")]
        a = fit_tokenizer(dataset(rows), SMALL)["C"]
        b = fit_tokenizer(dataset(rows[::-1]), SMALL)["C"]
        assert a == b
        assert list(a.token_to_id) == ["a", "b", "c"]

    def test_vocab_json(self):
        v = Vocab({"x": 2, "y": 3}, 4)
        assert Vocab.from_json(v.to_json()) == v


# =============================================================================
# Batches
# =============================================================================

class TestEncodeBatch:
    def test_single_constant_record(self):
        ds = dataset([(3.0, 4.0, "linux kernel")])
        tf = fit_transforms(ds, SMALL)
        b = tf.encode(ds)
        assert b.numeric["cpu"].tolist() == [[0.0]] and b.numeric["memory"].tolist() == [[0.0]]
        assert b.char_mask.tolist() == [[[True, True]]]

    def test_empty_value_all_pad(self):
        tf = fit_transforms(dataset([(1.0, 1.0, "a b")]), SMALL)
        b = tf.encode(dataset([(1.0, 1.0, "")]))
        assert b.char_ids.tolist() == [[[PAD_ID, PAD_ID]]]
        assert not b.char_mask.any()

    def test_decode_recovers_tokens(self, synth_small, schema, transforms_small):
        b = transforms_small.encode(synth_small[0])
        cats = [f.name for f in schema.categorical()]
        for i, r in enumerate(synth_small[0].records):
            for j, name in enumerate(cats):
                assert transforms_small.vocabs[name].decode(b.char_ids[i, j]) == tokenize(r.features[name])

    def test_truncation_warns(self, caplog):
        tf = fit_transforms(dataset([(1.0, 1.0, "a b")]), SMALL)
        with caplog.at_level(logging.WARNING):
            b = tf.encode(dataset([(1.0, 1.0, "a b a b")]))
        assert b.char_ids.shape == (1, 1, 2)
        assert "truncated" in caplog.text

    def test_groups_follow_partition(self, synth_small, transforms_small):
        b = transforms_small.encode(synth_small[0])
        assert {g: v.shape[1] for g, v in b.numeric.items()} == {"cpu": 20, "other": 2, "memory": 7}
        assert b.char_ids.shape[:2] == (40, 6)
        assert np.array_equal(b.char_mask, b.char_ids != PAD_ID)
        np.testing.assert_array_equal(b.labels, synth_small[0].labels())

    def test_no_leakage(self, synth_small, schema):
        data = synth_small[0]
        train = data.subset(range(30))
        rest = data.subset(range(30, 40))
        a = fit_transforms(train, schema)
        b = fit_transforms(train, schema)
        assert a.to_json() == b.to_json()
        a.encode(rest)                     # applying never mutates the fitted state
        assert a.to_json() == b.to_json()

    def test_transforms_round_trip(self, tmp_path, synth_small, transforms_small):
        path = tmp_path / "t.json"
        transforms_small.save(path)
        back = Transforms.load(path)
        x, y = back.encode(synth_small[0]), transforms_small.encode(synth_small[0])
        for g in x.numeric:
            assert x.numeric[g].tobytes() == y.numeric[g].tobytes()
        assert np.array_equal(x.char_ids, y.char_ids)

    def test_encode_batch_function_matches_method(self, synth_small, transforms_small):
        tf = transforms_small
        a = encode_batch(synth_small[0], tf.stats, tf.vocabs, tf.schema)
        assert np.array_equal(a.char_ids, tf.encode(synth_small[0]).char_ids)


def test_flat_features_layout(synth_small, transforms_small):
    X, names = flat_features(synth_small[0], transforms_small)
    assert X.shape == (40, len(names))
    assert names[:29] == [f.name for f in transforms_small.schema.numeric()]
    # each categorical block's counts add up to its token count
    start = 29
    for f in transforms_small.schema.categorical():
        width = len(transforms_small.vocabs[f.name]) - 1
        counts = X[:, start:start + width].sum(axis=1)
        expected = [len(tokenize(r.features[f.name])) for r in synth_small[0].records]
        np.testing.assert_array_equal(counts, expected)
        start += width
    assert start == X.shape[1]
