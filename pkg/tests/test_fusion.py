import math

import numpy as np
import pytest

from cinefuse import tensor as T
from cinefuse.errors import ContractError, ShapeError
from cinefuse.fusion import (
    AttentionParams,
    FusionConfig,
    StactModel,
    attention_block,
    build_model,
    sinusoidal_pe,
    stact_forward,
)
from cinefuse.gradcheck import grad_check
from cinefuse.rng import rng_for
from cinefuse.tensor import Tensor
from cinefuse.training import focal_loss


def scalar_loop_attention(x_q, x_kv, params: AttentionParams, use_scale=True):
    """Independent all-loops reference for one attention block."""
    m, d = x_q.shape
    heads = params.heads
    d_k = d // heads

    def project(x, w, b):
        out = np.zeros((x.shape[0], d))
        for i in range(x.shape[0]):
            for j in range(d):
                acc = 0.0
                for t in range(d):
                    acc += x[i, t] * w[t, j]
                out[i, j] = acc + b[j]
        return out

    q = project(x_q, params.wq.data, params.bq.data)
    k = project(x_kv, params.wk.data, params.bk.data)
    v = project(x_kv, params.wv.data, params.bv.data)

    merged = np.zeros((m, d))
    for h in range(heads):
        lo = h * d_k
        for i in range(m):
            scores = []
            for j in range(m):
                s = 0.0
                for t in range(d_k):
                    s += q[i, lo + t] * k[j, lo + t]
                if use_scale:
                    s /= math.sqrt(d_k)
                scores.append(s)
            mx = max(scores)
            exps = [math.exp(s - mx) for s in scores]
            z = sum(exps)
            weights = [e / z for e in exps]
            for t in range(d_k):
                merged[i, lo + t] = sum(weights[j] * v[j, lo + t] for j in range(m))
    return project(merged, params.wo.data, params.bo.data)


class TestPositionalEncoding:
    def test_row_zero_alternates(self):
        pe = sinusoidal_pe(3, 8)
        np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])

    def test_first_entry_of_row_one(self):
        assert abs(sinusoidal_pe(2, 256)[1, 0] - math.sin(1.0)) < 1e-12
        assert abs(sinusoidal_pe(2, 256)[1, 0] - 0.841471) < 1e-6

    def test_pythagorean_identity(self):
        pe = sinusoidal_pe(7, 64)
        np.testing.assert_allclose(pe[:, 0::2] ** 2 + pe[:, 1::2] ** 2, 1.0, atol=1e-12)

    def test_contract(self):
        with pytest.raises(ContractError):
            sinusoidal_pe(0, 8)
        with pytest.raises(ContractError):
            sinusoidal_pe(3, 7)


class TestAttentionBlock:
    def test_single_row_returns_projected_value(self):
        rng = rng_for(0, "attn-m1")
        params = AttentionParams.init(rng, dim=16, heads=4)
        x_q = Tensor(rng.standard_normal((1, 16)))
        x_kv = Tensor(rng.standard_normal((1, 16)))
        out = attention_block(x_q, x_kv, params)
        expected = (x_kv.data @ params.wv.data + params.bv.data) @ params.wo.data + params.bo.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_identical_keys_average_values(self):
        rng = rng_for(1, "attn-uk")
        params = AttentionParams.init(rng, dim=8, heads=2)
        params.wk.data[:] = 0.0  # keys collapse to the bias row -> uniform weights
        x_q = Tensor(rng.standard_normal((5, 8)))
        x_kv = Tensor(rng.standard_normal((5, 8)))
        sink = []
        out = attention_block(x_q, x_kv, params, attn_sink=sink)
        for w in sink:
            np.testing.assert_allclose(w, np.full((5, 5), 0.2), atol=1e-12)
        v = x_kv.data @ params.wv.data + params.bv.data
        expected = np.tile(v.mean(axis=0), (5, 1)) @ params.wo.data + params.bo.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_matches_scalar_loop_oracle_256(self):
        rng = rng_for(3, "attn-oracle")
        params = AttentionParams.init(rng, dim=256, heads=4)
        x_q = rng.standard_normal((4, 256))
        x_kv = rng.standard_normal((4, 256))
        out = attention_block(Tensor(x_q), Tensor(x_kv), params)
        ref = scalar_loop_attention(x_q, x_kv, params)
        np.testing.assert_allclose(out.data, ref, atol=1e-10)

    def test_matches_oracle_unscaled_small(self):
        rng = rng_for(4, "attn-oracle-s")
        params = AttentionParams.init(rng, dim=8, heads=2)
        x = rng.standard_normal((3, 8))
        out = attention_block(Tensor(x), Tensor(x), params, use_scale=False)
        np.testing.assert_allclose(out.data, scalar_loop_attention(x, x, params, False), atol=1e-12)

    def test_weight_rows_are_probabilities(self):
        rng = rng_for(5, "attn-rows")
        params = AttentionParams.init(rng, dim=32, heads=4)
        sink = []
        attention_block(Tensor(rng.standard_normal((6, 32)) * 3),
                        Tensor(rng.standard_normal((6, 32)) * 3), params, attn_sink=sink)
        assert len(sink) == 4
        for w in sink:
            assert (w >= 0).all()
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_row_count_mismatch(self):
        params = AttentionParams.init(rng_for(6, "a"), dim=8, heads=2)
        with pytest.raises(ShapeError):
            attention_block(Tensor(np.zeros((3, 8))), Tensor(np.zeros((4, 8))), params)

    def test_residual_adds_query_input(self):
        rng = rng_for(7, "attn-res")
        params = AttentionParams.init(rng, dim=8, heads=2)
        x = Tensor(rng.standard_normal((3, 8)))
        plain = attention_block(x, x, params, use_residual=False)
        res = attention_block(x, x, params, use_residual=True)
        np.testing.assert_allclose(res.data, plain.data + x.data, atol=1e-12)


class TestStactForward:
    def _zero_model(self, bias, dim=16, heads=2):
        model = StactModel.init(rng_for(8, "zero"), FusionConfig(heads=heads, dim=dim))
        for p in model.named_parameters().values():
            p.data[:] = 0.0
        model.head_b.data[:] = bias
        return model

    def test_zero_weights_give_head_bias(self):
        model = self._zero_model(0.7)
        rng = rng_for(9, "x")
        logit, prob = stact_forward(rng.standard_normal((5, 16)), rng.standard_normal((5, 16)), model)
        assert abs(logit.item() - 0.7) < 1e-15
        assert abs(prob.item() - 1.0 / (1.0 + math.exp(-0.7))) < 1e-15

    def test_permutation_invariance_without_pe(self):
        cfg = FusionConfig(heads=4, dim=32, pe_enabled=False)
        model = StactModel.init(rng_for(10, "perm"), cfg)
        rng = rng_for(10, "perm-x")
        image, seg = rng.standard_normal((6, 32)), rng.standard_normal((6, 32))
        perm = rng.permutation(6)
        base = model.forward(image, seg).logit.item()
        shuffled = model.forward(image[perm], seg[perm]).logit.item()
        assert abs(base - shuffled) < 1e-12

    def test_pe_breaks_permutation_invariance(self):
        cfg = FusionConfig(heads=4, dim=32, pe_enabled=True)
        model = StactModel.init(rng_for(11, "pe"), cfg)
        rng = rng_for(11, "pe-x")
        image, seg = rng.standard_normal((6, 32)), rng.standard_normal((6, 32))
        perm = np.array([5, 4, 3, 2, 1, 0])
        assert abs(model.forward(image, seg).logit.item()
                   - model.forward(image[perm], seg[perm]).logit.item()) > 1e-6

    def test_zeroed_cross_value_ignores_seg(self):
        model = StactModel.init(rng_for(12, "wv"), FusionConfig(heads=4, dim=32))
        rng = rng_for(12, "wv-x")
        image = rng.standard_normal((5, 32))
        s1, s2 = rng.standard_normal((5, 32)), rng.standard_normal((5, 32))
        assert abs(model.forward(image, s1).logit.item()
                   - model.forward(image, s2).logit.item()) > 1e-6
        model.cross_block.wv.data[:] = 0.0
        assert abs(model.forward(image, s1).logit.item()
                   - model.forward(image, s2).logit.item()) < 1e-12

    def test_matches_scalar_loop_end_to_end(self):
        cfg = FusionConfig(heads=2, dim=16)
        model = StactModel.init(rng_for(21, "e2e"), cfg)
        rng = rng_for(21, "e2e-x")
        image, seg = rng.standard_normal((4, 16)), rng.standard_normal((4, 16))
        pe = sinusoidal_pe(4, 16)
        a_self = scalar_loop_attention(image + pe, image + pe, model.self_block)
        a_cross = scalar_loop_attention(image + pe, seg + pe, model.cross_block)
        feats = np.concatenate([a_self, a_cross], axis=1)
        ref_logit = float(feats.mean(axis=0) @ model.head_w.data[:, 0] + model.head_b.data[0])
        logit, prob = stact_forward(image, seg, model)
        assert abs(logit.item() - ref_logit) < 1e-10
        assert abs(prob.item() - 1.0 / (1.0 + math.exp(-ref_logit))) < 1e-12

    def test_m1_sequences_are_valid(self):
        model = StactModel.init(rng_for(13, "m1"), FusionConfig(heads=4, dim=32))
        rng = rng_for(13, "m1-x")
        out = model.forward(rng.standard_normal((1, 32)), rng.standard_normal((1, 32)))
        assert np.isfinite(out.logit.item())

    def test_empty_sequence_rejected(self):
        model = StactModel.init(rng_for(14, "m0"), FusionConfig(heads=4, dim=32))
        with pytest.raises(ContractError):
            model.forward(np.zeros((0, 32)), np.zeros((0, 32)))

    def test_misaligned_sequences_rejected(self):
        model = StactModel.init(rng_for(15, "mis"), FusionConfig(heads=4, dim=32))
        with pytest.raises(ShapeError):
            model.forward(np.zeros((3, 32)), np.zeros((4, 32)))

    def test_row_logits_mean_equals_logit(self):
        model = StactModel.init(rng_for(16, "rows"), FusionConfig(heads=4, dim=32))
        rng = rng_for(16, "rows-x")
        out = model.forward(rng.standard_normal((5, 32)), rng.standard_normal((5, 32)), want_rows=True)
        assert out.row_logits.shape == (5,)
        assert abs(out.row_logits.mean() - out.logit.item()) < 1e-10


class TestVariants:
    def test_build_all(self):
        cfg = FusionConfig(heads=2, dim=16)
        rng = rng_for(17, "variants")
        x = rng_for(17, "vx").standard_normal((3, 16))
        for variant in ("image_self", "seg_self", "concat_pool", "stact"):
            model = build_model(variant, rng, cfg)
            assert model.variant == variant
            out = model.forward(x, x * 0.5, want_rows=True)
            assert np.isfinite(out.logit.item())
            assert out.row_logits.shape == (3,)

    def test_unknown_variant(self):
        with pytest.raises(ContractError):
            build_model("bogus", rng_for(18, "v"), FusionConfig())

    def test_image_only_ignores_seg(self):
        model = build_model("image_self", rng_for(19, "io"), FusionConfig(heads=2, dim=16))
        rng = rng_for(19, "io-x")
        image = rng.standard_normal((4, 16))
        a = model.forward(image, rng.standard_normal((4, 16))).logit.item()
        b = model.forward(image, rng.standard_normal((4, 16))).logit.item()
        assert a == b

    def test_concat_pool_uses_both(self):
        model = build_model("concat_pool", rng_for(20, "cp"), FusionConfig(heads=2, dim=16))
        rng = rng_for(20, "cp-x")
        image = rng.standard_normal((4, 16))
        a = model.forward(image, rng.standard_normal((4, 16))).logit.item()
        b = model.forward(image, rng.standard_normal((4, 16))).logit.item()
        assert a != b


def stact_with(params: dict, cfg: FusionConfig, override_name: str, override: Tensor) -> StactModel:
    """Rebuild a model so the overridden tensor is the actual tape leaf."""
    d = dict(params)
    d[override_name] = override

    def blk(prefix):
        names = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
        return AttentionParams(**{k: d[f"{prefix}.{k}"] for k in names}, heads=cfg.heads)

    return StactModel(blk("self_block"), blk("cross_block"), d["head_w"], d["head_b"], cfg)


class TestGradients:
    @pytest.mark.parametrize("m", [1, 2, 5])
    def test_focal_stact_grad_vs_finite_differences(self, m):
        cfg = FusionConfig(heads=2, dim=16)
        model = StactModel.init(rng_for(40 + m, "gc"), cfg)
        rng = rng_for(40 + m, "gc-x")
        image, seg = rng.standard_normal((m, 16)), rng.standard_normal((m, 16))
        params = model.named_parameters()
        worst = 0.0
        for name, p in params.items():

            def loss_fn(t, name=name):
                trial = stact_with(params, cfg, name, t)
                return focal_loss(trial.forward(image, seg).logit, 1.0)

            err = grad_check(loss_fn, p, max_entries=5, rng=rng_for(m, "pick", name))
            worst = max(worst, err)
        assert worst < 1e-4, f"m={m}: worst {worst}"
