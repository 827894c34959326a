"""NCPP network: construction, forward pieces, reference agreement and invariances."""
import numpy as np
import pytest

from ncpp import tensor as T
from ncpp.model import (AttentionTrace, ConfigError, NCPPConfig, NCPPParams, attention_layer,
                        feature_division, forward, init_model, inter_group_attention,
                        intra_group_attention, parameter_count, predict)
from ncpp.schema import group_names
from ncpp.tensor import ShapeError, Tensor
from ncpp.training import batch_loss

from builders import encoded, randomized_model, tiny_config
from oracles import (central_difference, forward_ref, gradients_agree, inter_pooled_ref, stack_ref)


@pytest.fixture(scope="module")
def setup():
    schema, tf, batch = encoded(8, seed=3)
    return schema, tf, batch


def state_of(params):
    return {k: v.copy() for k, v in params.state_dict().items()}


# =============================================================================
# Construction
# =============================================================================

class TestInit:
    def test_same_seed_bitwise(self, schema):
        a = init_model(NCPPConfig(output_dim=14), schema)
        b = init_model(NCPPConfig(output_dim=14), schema)
        assert a.digest() == b.digest()
        c = init_model(NCPPConfig(output_dim=14, seed=1), schema)
        assert a.digest() != c.digest()

    def test_heads_must_divide(self, schema):
        with pytest.raises(ConfigError, match="divisible"):
            init_model(NCPPConfig(heads=3, d_model=64), schema)

    @pytest.mark.parametrize("kw", [dict(layers=0), dict(delta=0.0), dict(inter_mode="full"),
                                    dict(ablate_groups=("gpu",)), dict(kernel_size=2)])
    def test_invalid_config(self, schema, kw):
        with pytest.raises(ConfigError):
            init_model(NCPPConfig(**kw), schema)

    def test_default_parameter_count(self, schema):
        d, f, c = 64, 128, 64
        embedding = 100 * 4
        char_block = (4 * c + c) + (c * c + c) + 2 * 2 * c + 4 * c
        numeric_block = (1 * c + c) + (c * c + c) + 2 * 2 * c + 1 * c
        feature_ids = 35 * d
        layer = 3 * d * d + d * d + (d * f + f) + (f * d + d) + 2 * 2 * d
        stacks = 4 + 1
        head = 4 * d * 14 + 14
        hand = embedding + char_block + numeric_block + feature_ids + stacks * layer + head
        assert hand == 181_918
        params = init_model(NCPPConfig(output_dim=14), schema)
        assert params.count() == hand
        assert parameter_count(params.config, schema.counts()) == hand

    @pytest.mark.parametrize("kw", [dict(heads=4, layers=3), dict(feature_embedding=False),
                                    dict(intra_attention=False), dict(ablate_groups=("cpu", "memory")),
                                    dict(kernel_size=3, d_model=16, conv_filters=16)])
    def test_parameter_count_formula(self, schema, kw):
        cfg = NCPPConfig(output_dim=4, **kw)
        assert init_model(cfg, schema).count() == parameter_count(cfg, schema.counts())

    def test_pad_row_zero_and_biases_zero(self, schema):
        p = init_model(NCPPConfig(output_dim=3), schema)
        assert not p["char/embedding"].data[0].any()
        assert not p["numeric/conv1/bias"].data.any()
        assert not p["intra/cpu/layer0/ffn/b_1"].data.any()

    def test_head_init_from_labels(self, schema):
        p = init_model(NCPPConfig(output_dim=2), schema, label_mean=[5.0, 7.0], label_scale=[2.0, 3.0])
        assert p["head/b"].data.tolist() == [5.0, 7.0]
        assert p.output_scale.tolist() == [2.0, 3.0]
        with pytest.raises(ValueError):
            init_model(NCPPConfig(output_dim=2), schema, label_scale=[1.0, 0.0])

    def test_ablated_stacks_have_no_parameters(self, schema):
        p = init_model(NCPPConfig(output_dim=1, ablate_groups=("workload",)), schema)
        assert not any(k.startswith("intra/char/") for k in p.tensors)
        assert any(k.startswith("intra/cpu/") for k in p.tensors)
        p = init_model(NCPPConfig(output_dim=1, intra_attention=False), schema)
        assert not any(k.startswith("intra/") for k in p.tensors)


# =============================================================================
# Feature division
# =============================================================================

class TestFeatureDivision:
    def test_shapes(self, setup):
        schema, _, batch = setup
        params = init_model(tiny_config(), schema)
        seqs = feature_division(params, batch)
        assert {g: s.shape for g, s in seqs.items()} == {
            "char": (8, 6, 8), "cpu": (8, 20, 8), "other": (8, 2, 8), "memory": (8, 7, 8)}

    def test_all_masked_char_feature_is_finite(self, setup):
        schema, _, batch = setup
        params = randomized_model(tiny_config(), schema)
        b = batch.take(np.arange(8))
        b.char_ids[:, 2] = 0
        b.char_mask[:, 2] = False
        out = feature_division(params, b)
        assert all(np.all(np.isfinite(s.data)) for s in out.values())

    def test_zero_residual_branch_leaves_projection(self, setup):
        schema, _, batch = setup
        params = init_model(tiny_config(feature_embedding=False), schema)
        for prefix in ("numeric", "char"):
            for i in (1, 2):
                params[f"{prefix}/conv{i}/filters"].data[...] = 0.0
        seqs = feature_division(params, batch)
        x = np.concatenate([batch.numeric[g] for g in ("cpu", "other", "memory")], axis=1)[..., None]
        proj = x @ params["numeric/shortcut/filters"].data[0]
        np.testing.assert_allclose(seqs["cpu"].data, proj[:, :20], atol=1e-15)
        np.testing.assert_allclose(seqs["memory"].data, proj[:, 22:], atol=1e-15)

    def test_group_count_mismatch(self, setup):
        schema, _, batch = setup
        params = init_model(tiny_config(), schema)
        b = batch.take(np.arange(2))
        b.numeric["other"] = b.numeric["other"][:, :1]
        with pytest.raises(ShapeError):
            feature_division(params, b)


# =============================================================================
# Attention against the straight-line reference
# =============================================================================

class TestAttentionReference:
    def test_single_key_weights_are_one(self, schema, rng):
        params = init_model(tiny_config(), schema)
        cap = []
        attention_layer(Tensor(rng.standard_normal((3, 1, 8))), params, "intra/cpu/layer0", cap)
        np.testing.assert_array_equal(cap[0], np.ones((3, 2, 1, 1)))

    def test_duplicate_rows_identical_attention(self, schema, rng):
        params = randomized_model(tiny_config(), schema)
        x = rng.standard_normal((1, 5, 8))
        x[0, 3] = x[0, 1]
        cap = []
        attention_layer(Tensor(x), params, "intra/cpu/layer0", cap)
        np.testing.assert_array_equal(cap[0][0, :, 1], cap[0][0, :, 3])

    @pytest.mark.parametrize("heads,layers", [(1, 1), (2, 2), (4, 1)])
    def test_intra_matches_reference(self, schema, rng, heads, layers):
        params = randomized_model(tiny_config(heads=heads, layers=layers), schema)
        x = rng.standard_normal((3, 5, 8))
        trace = AttentionTrace()
        out = intra_group_attention(Tensor(x), params, "cpu", trace).data
        ref, mats = stack_ref(x, state_of(params), "intra/cpu", heads, layers)
        assert np.max(np.abs(out - ref)) < 1e-10
        for got, want in zip(trace.intra["cpu"], mats):
            assert np.max(np.abs(got - want)) < 1e-10

    def test_inter_matches_reference(self, schema, rng):
        params = randomized_model(tiny_config(layers=2), schema)
        groups = {g: rng.standard_normal((3, n, 8)) for g, n in
                  (("char", 6), ("cpu", 20), ("other", 2), ("memory", 7))}
        trace = AttentionTrace()
        out = inter_group_attention({g: Tensor(v) for g, v in groups.items()}, params, trace).data
        ref, mats = inter_pooled_ref(groups, list(params.layout), state_of(params), 2, 2)
        assert out.shape == (3, 32)
        assert np.max(np.abs(out - ref)) < 1e-10
        assert np.max(np.abs(trace.inter[1] - mats[1])) < 1e-10

    def test_identical_group_tokens_uniform(self, schema, rng):
        params = randomized_model(tiny_config(), schema)
        tok = rng.standard_normal((2, 1, 8))
        groups = {g: Tensor(np.repeat(tok, n, axis=1)) for g, n in
                  (("char", 6), ("cpu", 20), ("other", 2), ("memory", 7))}
        trace = AttentionTrace()
        inter_group_attention(groups, params, trace)
        np.testing.assert_allclose(trace.inter[0], 0.25, atol=1e-15)

    def test_missing_group(self, schema, rng):
        params = init_model(tiny_config(), schema)
        with pytest.raises(KeyError):
            inter_group_attention({"cpu": Tensor(rng.standard_normal((1, 20, 8)))}, params)

    def test_full_forward_matches_reference(self, setup):
        schema, _, batch = setup
        params = randomized_model(tiny_config(layers=2), schema)
        trace = AttentionTrace()
        pred = forward(params, batch, trace=trace).data
        ref, intra, inter = forward_ref(state_of(params), params.layout, params.config, batch.numeric,
                                        batch.char_ids, batch.char_mask)
        assert np.max(np.abs(pred - ref)) < 1e-10 * max(1.0, np.abs(ref).max())
        for g in intra:
            for got, want in zip(trace.intra[g], intra[g]):
                assert np.max(np.abs(got - want)) < 1e-10

    def test_all_rows_stochastic(self, setup):
        schema, _, batch = setup
        for mode in ("pooled", "sequence"):
            params = randomized_model(tiny_config(layers=2, heads=4, inter_mode=mode), schema)
            trace = AttentionTrace()
            forward(params, batch, trace=trace)
            mats = [m for stack in trace.intra.values() for m in stack] + trace.inter
            assert len(mats) == 4 * 2 + 2
            for m in mats:
                assert np.all(np.abs(m.sum(axis=-1) - 1) <= 1e-6)
        assert trace.inter[0].shape == (8, 4, 35, 35)


# =============================================================================
# End-to-end properties
# =============================================================================

class TestForwardProperties:
    def test_padding_never_matters(self, setup, rng):
        schema, _, batch = setup
        params = randomized_model(tiny_config(), schema)
        base = predict(params, batch)
        b = batch.take(np.arange(len(batch)))
        pads = ~b.char_mask
        assert pads.any()
        b.char_ids = np.where(pads, rng.integers(1, 100, size=b.char_ids.shape), b.char_ids)
        assert predict(params, b).tobytes() == base.tobytes()

    def test_zero_head_gives_bias(self, setup):
        schema, _, batch = setup
        params = randomized_model(tiny_config(), schema)
        params["head/W"].data[...] = 0.0
        pred = predict(params, batch)
        assert np.array_equal(pred, np.broadcast_to(params["head/b"].data, pred.shape))

    def test_duplicated_rows(self, setup):
        schema, _, batch = setup
        params = randomized_model(tiny_config(), schema)
        dup = batch.take(np.array([2, 2, 5, 5]))
        pred = predict(params, dup)
        assert pred[0].tobytes() == pred[1].tobytes() and pred[2].tobytes() == pred[3].tobytes()

    def test_permutation_equivariance(self, schema, rng):
        params = randomized_model(tiny_config(), schema)
        x = rng.standard_normal((2, 5, 8))
        perm = np.array([3, 0, 4, 1, 2])
        out = intra_group_attention(Tensor(x), params, "other").data
        out_p = intra_group_attention(Tensor(x[:, perm]), params, "other").data
        np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)
        # undoing the permutation before pooling gives the same fused output
        groups = {g: Tensor(rng.standard_normal((2, n, 8))) for g, n in (("char", 6), ("cpu", 20), ("memory", 7))}
        a = inter_group_attention(dict(groups, other=Tensor(out)), params).data
        b = inter_group_attention(dict(groups, other=Tensor(out_p[:, np.argsort(perm)])), params).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_chunked_predict_matches_forward(self, setup):
        schema, _, batch = setup
        params = randomized_model(tiny_config(), schema)
        np.testing.assert_array_equal(predict(params, batch, chunk=3), forward(params, batch).data)

    def test_inference_does_not_touch_running_stats(self, setup):
        schema, _, batch = setup
        params = randomized_model(tiny_config(), schema)
        before = state_of(params)
        predict(params, batch)
        after = state_of(params)
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_save_load_round_trip(self, tmp_path, setup):
        schema, _, batch = setup
        params = randomized_model(tiny_config(), schema)
        params.save(tmp_path / "m.ckpt", {"note": 1})
        back, meta = NCPPParams.load(tmp_path / "m.ckpt")
        assert meta["note"] == 1 and back.digest() == params.digest()
        assert predict(back, batch).tobytes() == predict(params, batch).tobytes()
        assert list(back.layout.items()) == list(group_names(schema).items())

    def test_ablated_arms_run(self, setup):
        schema, _, batch = setup
        for kw in (dict(intra_attention=False), dict(ablate_groups=("memory",)),
                   dict(ablate_groups=("other",)), dict(ablate_groups=("cpu",)), dict(ablate_groups=("char",))):
            params = randomized_model(tiny_config(**kw), schema)
            trace = AttentionTrace()
            pred = forward(params, batch, trace=trace).data
            assert np.all(np.isfinite(pred))
            for g in kw.get("ablate_groups", ("char", "cpu", "other", "memory")):
                assert g not in trace.intra


def test_sampled_gradients_default_width(setup):
    """A few entries of every tensor of the default-width model, against central differences."""
    schema, _, batch = setup
    b = batch.take(np.arange(4))
    params = randomized_model(NCPPConfig(output_dim=14), schema)
    b.labels = predict(params, b) + np.linspace(-2, 2, 14)     # both Huber branches
    params.zero_grad()
    T.backward(batch_loss(params, b, training=True, update_stats=False))
    rng = np.random.default_rng(0)

    def loss():
        return float(batch_loss(params, b, training=True, update_stats=False).data)
    for path, t in params.tensors.items():
        idx = rng.choice(t.data.size, size=min(2, t.data.size), replace=False)
        if path == "char/embedding":
            used = np.unique(b.char_ids[b.char_mask])
            idx = [int(used[0]) * t.data.shape[1], int(used[-1]) * t.data.shape[1] + 1]
        numeric = central_difference(loss, t.data, h=1e-6, index=idx)
        ok, worst = gradients_agree(t.grad.reshape(-1)[idx], numeric.reshape(-1)[idx], 1e-4, 1e-6)
        assert ok, f"{path}: worst abs diff {worst}"
