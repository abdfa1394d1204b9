"""Backbone: shape contracts, residual-identity behavior, causality, key
masking, variate equivariance, PerDimScale, checkpoints, and audits."""

import numpy as np
import pytest

from patchcast.autodiff import Tensor, finite_diff_check
from patchcast.model import (
    GEOMETRY_PRESETS,
    CapacityError,
    Model,
    ModelConfig,
    config_from_preset,
)

CFG64 = dict(context_length=512, dtype="float64", **GEOMETRY_PRESETS["64/4/1"])


def small_model(seed=0, **overrides):
    kw = dict(CFG64)
    kw.update(overrides)
    return Model(ModelConfig(**kw), seed=seed)


def rand_input(rng, v=2, n=8, p=32, missing_patch=None):
    patches = rng.standard_normal((v, n, p))
    mask = np.zeros_like(patches)
    if missing_patch is not None:
        patches[:, missing_patch] = 0.0
        mask[:, missing_patch] = 1.0
    return patches, mask


def test_forward_shapes():
    model = small_model()
    rng = np.random.default_rng(0)
    patches, mask = rand_input(rng)
    out = model.forward(patches, mask)
    assert out.shape == (1, 2, 8, 32, 9)
    assert np.isfinite(out.data).all()


def test_proxy_geometry_runs_end_to_end():
    cfg = config_from_preset("proxy-10m", context_length=4096, dtype="float32")
    assert (cfg.d_model, cfg.n_layers, cfg.n_heads) == (256, 12, 4)
    model = Model(cfg, seed=1)
    rng = np.random.default_rng(1)
    patches, mask = rand_input(rng)
    out = model.forward(patches.astype(np.float32), mask.astype(np.float32))
    assert out.shape == (1, 2, 8, 32, 9)
    assert np.isfinite(out.data).all()


def test_embed_residual_identity_when_branch_zeroed():
    model = small_model()
    model.params["embed.mlp2.w"].data[:] = 0.0
    rng = np.random.default_rng(2)
    patches, mask = rand_input(rng, v=1, n=2)
    t = model.make_tensors(False)
    emb = model.patch_embed(t, patches[None], mask[None])
    lin = model._linear(t, Tensor(np.concatenate(
        [patches, mask.mean(-1, keepdims=True)], axis=-1)[None]), "embed.proj")
    np.testing.assert_allclose(emb.data, lin.data, atol=1e-12)


def test_head_residual_identity_when_branch_zeroed():
    model = small_model()
    model.params["head.mlp2.w"].data[:] = 0.0
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 1, 2, 64)))
    t = model.make_tensors(False)
    out = model.output_head(t, x)
    ro = 1.0 / np.sqrt(64)
    lin = model._linear(t, x, "head.proj") * ro
    np.testing.assert_allclose(out.data, lin.data, atol=1e-12)


def test_embed_is_pointwise_over_patches():
    model = small_model()
    rng = np.random.default_rng(4)
    patches, mask = rand_input(rng, v=1, n=4)
    t = model.make_tensors(False)
    base = model.patch_embed(t, patches[None], mask[None]).data
    p2 = patches.copy()
    p2[:, 2] += 10.0  # only patch 2 changes
    out = model.patch_embed(t, p2[None], mask[None]).data
    np.testing.assert_array_equal(base[:, :, [0, 1, 3]], out[:, :, [0, 1, 3]])
    assert not np.allclose(base[:, :, 2], out[:, :, 2])


def test_end_to_end_causality():
    model = small_model()
    rng = np.random.default_rng(5)
    patches, mask = rand_input(rng)
    base = model.forward(patches, mask).data
    p2 = patches.copy()
    p2[:, 5:] = rng.standard_normal(p2[:, 5:].shape)  # perturb patches > 4
    out = model.forward(p2, mask).data
    np.testing.assert_array_equal(base[:, :, :5], out[:, :, :5])


def test_fully_missing_patch_is_invisible_to_others():
    model = small_model()
    rng = np.random.default_rng(6)
    patches, mask = rand_input(rng, missing_patch=3)
    base = model.forward(patches, mask).data
    p2 = patches.copy()
    p2[:, 3] = rng.standard_normal(p2[:, 3].shape)  # hidden values under the mask
    out = model.forward(p2, mask).data
    np.testing.assert_array_equal(np.delete(base, 3, axis=2), np.delete(out, 3, axis=2))
    # the masked patch's own output is also unchanged: values were zero-filled
    np.testing.assert_array_equal(base, out)


def test_leading_missing_patch_finite_self_fallback():
    model = small_model()
    rng = np.random.default_rng(7)
    patches, mask = rand_input(rng, missing_patch=0)
    out = model.forward(patches, mask).data
    assert np.isfinite(out).all()


def test_time_attention_per_variate_independence():
    model = small_model(variate_attn_position=1)  # keep later layers time-only
    # with the variate layer first and zeroed value/out paths it cannot mix
    model_t = small_model()
    rng = np.random.default_rng(8)
    patches, mask = rand_input(rng, v=3)
    t = model_t.make_tensors(False)
    h = Tensor(rng.standard_normal((1, 3, 8, 64)))
    base, _ = model_t._time_attention(t, h, 0, np.arange(8), np.zeros((1, 3, 8), bool))
    h2 = Tensor(np.concatenate([h.data[:, :1] + 1.0, h.data[:, 1:]], axis=1))
    out, _ = model_t._time_attention(t, h2, 0, np.arange(8), np.zeros((1, 3, 8), bool))
    np.testing.assert_array_equal(base.data[:, 1:], out.data[:, 1:])


def test_variate_attention_single_variate_finite():
    model = small_model()
    rng = np.random.default_rng(9)
    patches, mask = rand_input(rng, v=1)
    out = model.forward(patches, mask).data
    assert np.isfinite(out).all()


def test_variate_permutation_equivariance():
    model = small_model()
    rng = np.random.default_rng(10)
    patches, mask = rand_input(rng, v=4)
    perm = np.array([2, 0, 3, 1])
    base = model.forward(patches, mask).data
    out = model.forward(patches[perm], mask[perm]).data
    np.testing.assert_allclose(out, base[:, perm], rtol=1e-9, atol=1e-11)


def test_per_patch_independence_of_variate_attention():
    model = small_model()
    rng = np.random.default_rng(11)
    t = model.make_tensors(False)
    h = Tensor(rng.standard_normal((1, 3, 8, 64)))
    base = model._variate_attention(t, h, 3).data
    h2 = h.data.copy()
    h2[:, :, 5] += 1.0
    out = model._variate_attention(t, Tensor(h2), 3).data
    np.testing.assert_array_equal(np.delete(base, 5, 2), np.delete(out, 5, 2))


def test_per_dim_scale_identity_at_init():
    model = small_model()
    t = model.make_tensors(False)
    rng = np.random.default_rng(12)
    q = Tensor(rng.standard_normal((1, 2, 1, 8, 64)))
    out = model.per_dim_scale(t, q, 0)
    np.testing.assert_allclose(out.data, q.data, rtol=1e-12)


def test_attention_at_init_equals_plain_inv_dk_reference():
    # PerDimScale at s=0 reproduces a PerDimScale-free 1/d_k attention
    model = small_model()
    rng = np.random.default_rng(13)
    patches, mask = rand_input(rng, v=1, n=4)
    t = model.make_tensors(False)
    h = Tensor(rng.standard_normal((1, 1, 4, 64)))
    out, _ = model._time_attention(t, h, 0, np.arange(4), np.zeros((1, 1, 4), bool))

    def reference():
        pre = "blocks.0.attn"
        q = model._split_heads(model._linear(t, h, f"{pre}.q", f"{pre}.q.b"))
        k = model._split_heads(model._linear(t, h, f"{pre}.k", f"{pre}.k.b"))
        v = model._split_heads(model._linear(t, h, f"{pre}.v", f"{pre}.v.b"))
        cos, sin = model._rope_tables(np.arange(4))
        q, k = model._apply_rope(q, cos, sin), model._apply_rope(k, cos, sin)
        logits = (q @ k.swapaxes(-1, -2)) * (1.0 / 64)
        causal = np.arange(4)[None, :] > np.arange(4)[:, None]
        logits = logits.masked_fill(causal, -1e30)
        o = model._merge_heads(logits.softmax(axis=-1) @ v)
        return model._linear(t, o, f"{pre}.o", f"{pre}.o.b")

    np.testing.assert_allclose(out.data, reference().data, atol=1e-12)


def test_per_dim_scale_gradient():
    model = small_model()
    rng = np.random.default_rng(14)
    q = rng.standard_normal((1, 1, 1, 3, 64))
    target = rng.standard_normal(q.shape)

    def fn(s):
        factor = s.softplus() * (1.0 / np.log(2.0))
        scaled = Tensor(q) * factor.reshape(1, 1, 1, 1, 64)
        return ((scaled - Tensor(target)) * (scaled - Tensor(target))).mean()

    assert finite_diff_check(fn, rng.standard_normal((1, 64)), step=1e-5) <= 1e-4


def test_no_dropout_forward_deterministic():
    model = small_model()
    rng = np.random.default_rng(15)
    patches, mask = rand_input(rng)
    a = model.forward(patches, mask).data
    b = model.forward(patches, mask).data
    np.testing.assert_array_equal(a, b)


def test_capacity_error():
    model = small_model()  # capacity 16 patches
    rng = np.random.default_rng(16)
    patches, mask = rand_input(rng, n=17)
    with pytest.raises(CapacityError, match="capacity 16"):
        model.forward(patches, mask)


def test_too_many_variates():
    model = small_model(max_variates=2)
    rng = np.random.default_rng(17)
    patches, mask = rand_input(rng, v=3)
    with pytest.raises(CapacityError):
        model.forward(patches, mask)


def test_metadata_audit_empty_on_presets():
    for preset in ("64/4/1", "128/6/2", "256/12/4"):
        model = Model(config_from_preset(preset, context_length=512), seed=0)
        assert model.audit_metadata() == []


def test_every_matrix_carries_exactly_one_metadata_record():
    model = small_model()
    names = [n for n, p in model.params.items() if p.data.ndim == 2]
    assert len(names) == len(set(names))
    for n in names:
        assert model.params[n].meta is not None


def test_forward_pass_counter():
    model = small_model()
    rng = np.random.default_rng(18)
    patches, mask = rand_input(rng)
    before = model.forward_calls
    model.forward(patches, mask)
    model.forward(patches, mask)
    assert model.forward_calls == before + 2


def test_checkpoint_round_trip(tmp_path):
    model = small_model(seed=5)
    rng = np.random.default_rng(19)
    patches, mask = rand_input(rng)
    base = model.forward(patches, mask).data
    model.save(tmp_path / "ckpt")
    loaded = Model.load(tmp_path / "ckpt")
    out = loaded.forward(patches, mask).data
    # blob is float32; float64 model round-trips to f32 precision
    np.testing.assert_allclose(out, base, atol=1e-4)
    assert loaded.params["blocks.0.attn.q.w"].meta.kind == "hidden"


def test_gradients_match_finite_differences_through_model():
    # training-loss gradient wrt sampled weights of a tiny model (64-bit)
    from patchcast.harness import training_loss

    model = small_model()
    rng = np.random.default_rng(20)
    patches, mask = rand_input(rng, v=2, n=4)
    # keep targets away from predictions: pinball kinks excluded
    out0 = model.forward(patches, mask).data
    targets = out0[0, :, :, :, 4] + rng.uniform(0.5, 1.5, size=out0.shape[1:4])
    weights = np.ones_like(targets)

    for name in ("blocks.1.attn.q.w", "blocks.2.mlp1.w", "embed.proj.w", "head.mlp2.w",
                 "blocks.0.attn.qscale", "final_norm.g", "blocks.3.attn.o.b"):
        param = model.params[name]

        def fn(leaf):
            tensors = model.make_tensors(requires_grad=False)
            tensors[name] = leaf
            return training_loss(model, tensors, patches[None], mask[None],
                                 targets[None], weights[None])

        err = finite_diff_check(fn, param.data, step=1e-4, max_coords=3,
                                rng=np.random.default_rng(21))
        assert err <= 1e-4, f"{name}: fd error {err}"
