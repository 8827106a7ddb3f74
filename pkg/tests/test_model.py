import numpy as np
import pytest

import farsight.tensor as T
from farsight.encoders import Vocabulary
from farsight.errors import ConfigError
from farsight.gradcheck import finite_diff_check
from farsight.layers import Linear, MultiheadAttention
from farsight.losses import attribute_loss, gender_loss, total_loss
from farsight.model import (DualPathModel, ModelConfig, SpatialChannelAttention,
                            pool_tokens)
from farsight.optim import Group
from farsight.tensor import Tensor


@pytest.fixture(scope="module")
def toy_model():
    cfg = ModelConfig()
    vocab = Vocabulary.from_texts(["a person wearing high heels",
                                   "the attribute is unclear"])
    return DualPathModel(cfg, vocab, seed=0)


def micro_model(seed=0, **overrides):
    """Tiny configuration for gradient checks: 8x8 images, 4 tokens."""
    kwargs = dict(image_size=8, patch_size=4, token_dim=8, joint_dim=8,
                  visual_depth=1, visual_heads=2, text_depth=1, text_heads=2,
                  attributes=(("hairstyle", 4), ("feet", 3)),
                  sca_reduction=2, fusion_heads=2, attribute_attention_heads=2,
                  dropout=0.0)
    kwargs.update(overrides)
    cfg = ModelConfig(**kwargs)
    vocab = Vocabulary.from_texts(["a person wearing high heels",
                                   "the attribute is unclear"])
    return DualPathModel(cfg, vocab, seed=seed)


class TestModelConfig:
    def test_head_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            ModelConfig(joint_dim=15, fusion_heads=4)

    def test_class_counts_validated(self):
        with pytest.raises(ConfigError):
            ModelConfig(attributes=(("hairstyle", 1),))

    def test_empty_attribute_set_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(attributes=())

    def test_grid(self):
        assert ModelConfig().grid == 4


class TestProjection:
    def test_manual_expansion(self):
        proj = Linear(np.random.default_rng(0), 3, 2, Group.NEW_MODULE, "p")
        proj.w.tensor.data = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        proj.b.tensor.data = np.zeros(2)
        tokens = Tensor(np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]))
        out = proj(tokens)
        np.testing.assert_array_equal(out.data, [[[1.0, 0.0], [0.0, 1.0]]])

    def test_zero_weights_yield_bias(self):
        proj = Linear(np.random.default_rng(0), 3, 2, Group.NEW_MODULE, "p")
        proj.w.tensor.data = np.zeros((3, 2))
        proj.b.tensor.data = np.array([1.5, -2.0])
        out = proj(Tensor(np.random.default_rng(1).normal(size=(2, 5, 3))))
        np.testing.assert_allclose(out.data, np.broadcast_to([1.5, -2.0], (2, 5, 2)))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        proj = Linear(rng, 4, 3, Group.NEW_MODULE, "p")
        mask = rng.normal(size=(2, 3))
        x = Tensor(rng.normal(size=(2, 4)))
        err = finite_diff_check(lambda t: T.reduce_sum(proj(t) * Tensor(mask)), x)
        assert err < 1e-4


class TestSpatialChannelAttention:
    def make(self, dim=8, grid=4, seed=0):
        return SpatialChannelAttention(np.random.default_rng(seed), dim, 2, "sca")

    def test_unit_gates_double_the_input(self):
        sca = self.make()
        tokens = Tensor(np.random.default_rng(1).normal(size=(2, 16, 8)))
        out = sca(tokens, 4, gate_override=(1.0, 1.0))
        np.testing.assert_allclose(out.data, 2 * tokens.data, rtol=1e-12)

    def test_zero_spatial_gate_is_identity(self):
        sca = self.make()
        tokens = Tensor(np.random.default_rng(2).normal(size=(3, 16, 8)))
        out = sca(tokens, 4, gate_override=(0.37, 0.0))
        np.testing.assert_array_equal(out.data, tokens.data)

    def test_zeroed_conv_gives_half_gate(self):
        sca = self.make()
        sca.conv_w.tensor.data = np.zeros_like(sca.conv_w.tensor.data)
        sca.conv_b.tensor.data = np.zeros_like(sca.conv_b.tensor.data)
        fmap = Tensor(np.random.default_rng(3).normal(size=(2, 8, 4, 4)))
        gate = sca.spatial_gate(fmap)
        np.testing.assert_allclose(gate.data, 0.5, atol=1e-15)

    def test_reduction_divisibility(self):
        with pytest.raises(ConfigError):
            SpatialChannelAttention(np.random.default_rng(0), 6, 4, "sca")

    def test_gradient_through_full_gate_path(self):
        rng = np.random.default_rng(4)
        sca = self.make()
        mask = rng.normal(size=(1, 4, 8))
        x = Tensor(rng.normal(size=(1, 4, 8)))
        err = finite_diff_check(lambda t: T.reduce_sum(sca(t, 2) * Tensor(mask)), x)
        assert err < 1e-4


class TestDirectPath:
    def test_equal_tokens_pool_to_that_token(self):
        z = np.random.default_rng(0).normal(size=(2, 1, 8))
        tokens = Tensor(np.repeat(z, 5, axis=1))
        np.testing.assert_allclose(pool_tokens(tokens).data, z[:, 0], rtol=1e-12)

    def test_two_token_average(self):
        tokens = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        np.testing.assert_allclose(pool_tokens(tokens).data, [[0.5, 0.5]])

    def test_token_permutation_invariance(self, toy_model):
        rng = np.random.default_rng(1)
        tokens = rng.normal(size=(2, 16, 16))
        v1, logits1 = toy_model.direct_path(Tensor(tokens), False, None)
        perm = rng.permutation(16)
        v2, logits2 = toy_model.direct_path(Tensor(tokens[:, perm]), False, None)
        np.testing.assert_allclose(v1.data, v2.data, atol=1e-9)
        np.testing.assert_allclose(logits1.data, logits2.data, atol=1e-9)


class TestAttributeAttention:
    def test_single_key_ignores_query(self, toy_model):
        tokens = Tensor(np.random.default_rng(0).normal(size=(2, 1, 16)))
        q1 = Tensor(np.random.default_rng(1).normal(size=(2, 1, 16)))
        q2 = Tensor(np.random.default_rng(2).normal(size=(2, 1, 16)))
        r1, w1 = toy_model.attend_attribute(q1, tokens, retain=True)
        r2, _ = toy_model.attend_attribute(q2, tokens, retain=True)
        np.testing.assert_array_equal(r1.data, r2.data)
        np.testing.assert_allclose(w1, 1.0)

    def test_zero_key_projection_uniform_weights(self):
        rng = np.random.default_rng(0)
        attn = MultiheadAttention(rng, 8, 2, Group.NEW_MODULE, "attn")
        attn.wk.w.tensor.data = np.zeros((8, 8))
        attn.wk.b.tensor.data = np.zeros(8)
        q = Tensor(rng.normal(size=(2, 1, 8)))
        kv = Tensor(rng.normal(size=(2, 6, 8)))
        _, weights = attn(q, kv, kv, retain=True)
        np.testing.assert_allclose(weights, 1.0 / 6.0, atol=1e-12)

    def test_weights_row_stochastic(self, toy_model):
        rng = np.random.default_rng(3)
        tokens = Tensor(rng.normal(size=(2, 16, 16)))
        q = Tensor(rng.normal(size=(2, 1, 16)))
        _, weights = toy_model.attend_attribute(q, tokens, retain=True)
        assert weights.shape == (2, toy_model.config.attribute_attention_heads, 1, 16)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)


class TestAttributeHeads:
    def test_zero_weights_give_bias(self, toy_model):
        head = toy_model.attribute_heads["feet"]
        head_w = head.w.tensor.data.copy()
        head.w.tensor.data = np.zeros_like(head.w.tensor.data)
        head.b.tensor.data = np.array([0.1, 0.2, 0.3])
        out = head(Tensor(np.random.default_rng(0).normal(size=(4, 16))))
        np.testing.assert_allclose(out.data, np.broadcast_to([0.1, 0.2, 0.3], (4, 3)))
        head.w.tensor.data = head_w

    def test_five_attribute_ontology_class_counts(self, toy_model):
        shapes = {name: toy_model.attribute_heads[name].w.tensor.shape[1]
                  for name in toy_model.config.attribute_names}
        assert shapes == {"hairstyle": 4, "upper": 4, "lower": 4, "feet": 3,
                          "accessories": 3}

    def test_gradient_through_head(self):
        model = micro_model()
        rng = np.random.default_rng(0)
        labels = np.array([0, 2])
        x = Tensor(rng.normal(size=(2, 8)))
        head = model.attribute_heads["hairstyle"]
        err = finite_diff_check(lambda t: T.cross_entropy_ignore(head(t), labels), x)
        assert err < 1e-4


class TestAggregation:
    def test_equal_vectors(self, toy_model):
        r = Tensor(np.random.default_rng(0).normal(size=(2, 16)))
        pooled, _ = toy_model.aggregate_attributes([r, r, r], False, None)
        np.testing.assert_allclose(pooled.data, r.data, rtol=1e-12)

    def test_two_attribute_average(self, toy_model):
        a = Tensor(np.tile([1.0, 0.0], (1, 8)))
        b = Tensor(np.tile([0.0, 1.0], (1, 8)))
        pooled, _ = toy_model.aggregate_attributes([a, b], False, None)
        np.testing.assert_allclose(pooled.data, 0.5)

    def test_order_invariance(self, toy_model):
        rng = np.random.default_rng(1)
        vs = [Tensor(rng.normal(size=(2, 16))) for _ in range(5)]
        p1, l1 = toy_model.aggregate_attributes(vs, False, None)
        p2, l2 = toy_model.aggregate_attributes(vs[::-1], False, None)
        np.testing.assert_allclose(p1.data, p2.data, atol=1e-9)
        np.testing.assert_allclose(l1.data, l2.data, atol=1e-9)


class TestFusion:
    def test_swap_invariance(self, toy_model):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v1 = Tensor(rng.normal(size=(3, 16)))
            v2 = Tensor(rng.normal(size=(3, 16)))
            _, logits_a, _ = toy_model.fuse(v1, v2)
            _, logits_b, _ = toy_model.fuse(v2, v1)
            assert np.max(np.abs(logits_a.data - logits_b.data)) < 1e-9

    def test_identical_inputs_fuse_to_symmetric_tokens(self, toy_model):
        v = Tensor(np.random.default_rng(1).normal(size=(2, 16)))
        fused, _, weights = toy_model.fuse(v, v, retain=True)
        assert np.isfinite(fused.data).all()
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(weights, 0.5, atol=1e-12)

    def test_fusion_attention_rows_stochastic(self, toy_model):
        rng = np.random.default_rng(2)
        _, _, weights = toy_model.fuse(Tensor(rng.normal(size=(4, 16))),
                                       Tensor(rng.normal(size=(4, 16))), retain=True)
        assert weights.shape == (4, toy_model.config.fusion_heads, 2, 2)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)


class TestForwardFull:
    def test_output_shapes(self, toy_model):
        imgs = np.random.default_rng(0).normal(size=(2, 3, 32, 32))
        out = toy_model.forward(imgs, retain_attention=True)
        for logits in (out.direct_logits, out.mediated_logits, out.fused_logits):
            assert logits.shape == (2, 3)
        for name, k in toy_model.config.attributes:
            assert out.attribute_logits[name].shape == (2, k)
        assert out.fusion_attention.shape == (2, 4, 2, 2)
        for name in toy_model.config.attribute_names:
            cross = out.cross_attention[name]
            assert cross.shape == (2, 4, 1, 16)
            np.testing.assert_allclose(cross.sum(axis=-1), 1.0, atol=1e-9)
        assert len(out.visual_attention_mediated) == 4

    def test_deterministic_without_dropout(self):
        model = micro_model()
        imgs = np.random.default_rng(1).normal(size=(2, 3, 8, 8))
        a = model.forward(imgs)
        b = model.forward(imgs)
        np.testing.assert_array_equal(a.fused_logits.data, b.fused_logits.data)

    def test_sca_flags_off_match_manual_composition(self):
        model = micro_model(use_sca_path1=False, use_sca_path2=False)
        assert model.sca_direct is None and model.sca_mediated is None
        imgs = np.random.default_rng(2).normal(size=(2, 3, 8, 8))
        out = model.forward(imgs)
        tokens, _ = model.visual_direct.encode(imgs)
        direct_vec, direct_logits = model.direct_path(
            model.project_direct(tokens), False, None)
        np.testing.assert_array_equal(out.direct_logits.data, direct_logits.data)

    def test_sample_prompt_mode_requires_prompts(self):
        model = micro_model(prompt_mode="sample")
        with pytest.raises(ConfigError):
            model.forward(np.zeros((1, 3, 8, 8)))

    def test_sample_prompt_mode_runs(self):
        model = micro_model(prompt_mode="sample")
        out = model.forward(np.zeros((2, 3, 8, 8)), prompts=["high heels", ""])
        assert out.fused_logits.shape == (2, 3)


@pytest.mark.parametrize("seed", range(10))
def test_full_forward_loss_gradient(seed):
    """Composite check: forward + composite objective against finite differences."""
    model = micro_model(seed=seed)
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(2, 3, 8, 8)) * 0.5
    labels = rng.integers(0, 3, size=2)
    attr_labels = {"hairstyle": rng.integers(0, 4, size=2),
                   "feet": np.array([rng.integers(0, 3), -100])}

    def loss_fn():
        out = model.forward(Tensor(images))
        lg = gender_loss(out.fused_logits, out.direct_logits, out.mediated_logits, labels)
        la = attribute_loss(out.attribute_logits, attr_labels)
        return total_loss(lg, la)

    # rotate which tensor is probed across seeds; keep each probe small
    probes = [model.fused_head.fc2.w, model.project_direct.b,
              model.gender_head_direct.fc1.b, model.fusion_attention_block.wo.b,
              model.cross_attention.wv.b]
    probe_param = probes[seed % len(probes)]

    def fn(t):
        saved = probe_param.tensor
        probe_param.tensor = t
        try:
            return loss_fn()
        finally:
            probe_param.tensor = saved

    err = finite_diff_check(fn, Tensor(probe_param.tensor.data.copy()))
    assert err < 1e-4
