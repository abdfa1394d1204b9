"""Span masking and parallel decoding: sampler semantics, masking invariants,
single-pass/block equivalences, forward-pass counts, and KV-cache reuse."""

import numpy as np
import pytest

from patchcast.decoding import (
    KVCache,
    MaskPlan,
    apply_mask,
    block_decode,
    sample_mask,
    single_pass_forecast,
)
from patchcast.model import GEOMETRY_PRESETS, CapacityError, Model, ModelConfig
from patchcast.pipeline import PatchGrid


def _grid(rng, v=1, n=8, p=32, dtype=np.float64):
    vals = rng.standard_normal((v, n, p)).astype(dtype)
    return PatchGrid(patches=vals, mask=np.zeros_like(vals), patch_size=p)


def _model(n_ctx_patches=16, dtype="float64", seed=0, **kw):
    cfg = ModelConfig(context_length=n_ctx_patches * 32, dtype=dtype,
                      **GEOMETRY_PRESETS["64/4/1"], **kw)
    return Model(cfg, seed=seed)


# -- mask sampler ------------------------------------------------------------


def test_sample_mask_zero_probability():
    rng = np.random.default_rng(0)
    for _ in range(20):
        plan = sample_mask(64, rng, c_max=16, p_max=0.0)
        assert plan.masked_set == frozenset()


def test_sample_mask_unit_span_lengths():
    rng = np.random.default_rng(1)
    for _ in range(50):
        plan = sample_mask(32, rng, c_max=1, p_max=0.5)
        assert all(c == 1 for c in plan.span_lengths)


def test_sample_mask_reproducible():
    a = sample_mask(128, np.random.default_rng(42))
    b = sample_mask(128, np.random.default_rng(42))
    assert a == b


def test_sample_mask_spans_within_bounds_and_disjoint():
    rng = np.random.default_rng(2)
    for _ in range(200):
        plan = sample_mask(40, rng)
        covered = []
        for start, length in plan.spans:
            assert 0 <= start and start + length <= 40 and 1 <= length <= 16
            covered.extend(range(start, start + length))
        assert len(covered) == len(set(covered))
        assert plan.masked_set == frozenset(covered)


def _mask_fraction_oracle(n, c_max, p_max, draws, seed):
    """Independent Monte Carlo of the documented scan: a per-sequence masking
    probability, then each not-yet-masked position starts a uniform-length span."""
    rng = np.random.default_rng(seed)
    total = 0
    for _ in range(draws):
        p = rng.uniform(0, p_max)
        masked = np.zeros(n, bool)
        pos = 0
        while pos < n:
            if rng.uniform() < p:
                span = rng.integers(1, c_max + 1)
                masked[pos:pos + span] = True
                pos += span
            else:
                pos += 1
        total += masked.sum()
    return total / (draws * n)


def test_mask_fraction_matches_monte_carlo_oracle():
    draws = 20_000
    rng = np.random.default_rng(7)
    impl = np.mean([len(sample_mask(128, rng).masked_set) / 128 for _ in range(draws)])
    oracle = _mask_fraction_oracle(128, 16, 0.4, draws, seed=8)
    assert abs(impl - oracle) <= 0.01


# -- apply_mask ----------------------------------------------------------------


def test_apply_mask_empty_plan():
    rng = np.random.default_rng(3)
    grid = _grid(rng)
    out = apply_mask(grid, MaskPlan(spans=(), sampled_p=0.0, n_patches=8))
    np.testing.assert_array_equal(out.patches, grid.patches)
    np.testing.assert_array_equal(out.mask, grid.mask)


def test_apply_mask_full_plan():
    rng = np.random.default_rng(4)
    grid = _grid(rng)
    out = apply_mask(grid, MaskPlan(spans=((0, 8),), sampled_p=1.0, n_patches=8))
    assert np.all(out.mask == 1.0)
    assert np.all(out.patches == 0.0)


def test_masked_values_are_hidden_from_the_model():
    model = _model()
    rng = np.random.default_rng(5)
    grid = _grid(rng, v=2)
    plan = MaskPlan(spans=((2, 2),), sampled_p=0.3, n_patches=8)
    m1 = apply_mask(grid, plan)
    grid2 = PatchGrid(patches=grid.patches + np.where(grid.mask, 0, 0) + 0.0,
                      mask=grid.mask, patch_size=32)
    grid2.patches[:, 2:4] = 123.0  # different hidden truth under the mask
    m2 = apply_mask(grid2, plan)
    np.testing.assert_array_equal(model.forward(m1.patches, m1.mask).data,
                                  model.forward(m2.patches, m2.mask).data)


# -- single-pass --------------------------------------------------------------


def test_single_pass_one_forward_for_any_horizon():
    model = _model(64)
    rng = np.random.default_rng(6)
    grid = _grid(rng, n=8)
    for k in (1, 4, 32):
        before = model.forward_calls
        fc = single_pass_forecast(model, grid, k)
        assert model.forward_calls == before + 1
        assert fc.values.shape == (1, k * 32, 9)
        assert fc.space == "scaled"


def test_single_pass_capacity_error_mentions_block_mode():
    model = _model(16)
    rng = np.random.default_rng(7)
    grid = _grid(rng, n=10)
    with pytest.raises(CapacityError, match="block"):
        single_pass_forecast(model, grid, 7)


def test_context_outputs_unchanged_by_appended_mask_tokens():
    model = _model(32)
    rng = np.random.default_rng(8)
    grid = _grid(rng, v=2, n=6)
    base = model.forward(grid.patches, grid.mask).data
    from patchcast.decoding import _masked_extension
    ext = _masked_extension(grid, 4)
    out = model.forward(ext.patches, ext.mask).data
    # causality makes the appended keys carry exactly-zero attention weight;
    # only BLAS re-blocking over the longer key axis leaves one-ULP wiggle
    np.testing.assert_allclose(out[:, :, :6], base, rtol=0, atol=1e-12)


def test_k1_single_pass_equals_block_b1():
    model = _model()
    rng = np.random.default_rng(9)
    grid = _grid(rng)
    a = single_pass_forecast(model, grid, 1)
    b = block_decode(model, grid, 1, 1)
    np.testing.assert_array_equal(a.values, b.values)


# -- block decoding -------------------------------------------------------------


def test_block_equals_single_pass_when_b_is_k():
    model = _model(32)
    rng = np.random.default_rng(10)
    grid = _grid(rng, v=2)
    a = single_pass_forecast(model, grid, 6)
    b = block_decode(model, grid, 6, 6)
    np.testing.assert_array_equal(a.values, b.values)


def test_block_forward_pass_count():
    model = _model(64)
    rng = np.random.default_rng(11)
    grid = _grid(rng, n=8)
    for k, b in ((8, 2), (8, 3), (5, 5), (6, 1)):
        before = model.forward_calls
        block_decode(model, grid, k, b)
        assert model.forward_calls - before == -(-k // b)


def test_cached_matches_uncached_float32():
    model = _model(32, dtype="float32")
    rng = np.random.default_rng(12)
    grid = _grid(rng, v=2, n=8, dtype=np.float32)
    a = block_decode(model, grid, 8, 2, use_cache=True)
    b = block_decode(model, grid, 8, 2, use_cache=False)
    np.testing.assert_allclose(a.values, b.values, atol=1e-4)


def test_cached_matches_uncached_float64_tight():
    model = _model(32)
    rng = np.random.default_rng(13)
    grid = _grid(rng, n=6)
    a = block_decode(model, grid, 6, 2, use_cache=True)
    b = block_decode(model, grid, 6, 2, use_cache=False)
    np.testing.assert_allclose(a.values, b.values, atol=1e-10)


def test_block_decode_deterministic_across_sessions():
    model = _model(32)
    rng = np.random.default_rng(14)
    grid = _grid(rng)
    a = block_decode(model, grid, 6, 2)
    b = block_decode(model, grid, 6, 2)  # fresh session, fresh cache
    np.testing.assert_array_equal(a.values, b.values)


def test_cache_grows_linearly_with_committed_patches():
    model = _model(64)
    session = object()
    cache = KVCache(model, session)
    rng = np.random.default_rng(15)
    grid = _grid(rng, n=4)
    from patchcast.decoding import _masked_extension
    ext = _masked_extension(grid, 2)
    out, new_kv, missing = model.forward(ext.patches, ext.mask,
                                         positions=np.arange(6), kv_cache=cache)
    cache.append(new_kv, missing, np.arange(6), upto=4)
    assert cache.n_patches == 4
    out, new_kv, missing = model.forward(ext.patches[:, 4:], ext.mask[:, 4:],
                                         positions=np.arange(4, 6), kv_cache=cache)
    cache.append(new_kv, missing, np.arange(4, 6), upto=2)
    assert cache.n_patches == 6


def test_cached_keys_equal_recomputed_keys():
    model = _model(32)
    rng = np.random.default_rng(16)
    grid = _grid(rng, n=6)
    session = object()
    cache = KVCache(model, session)
    _, new_kv, missing = model.forward(grid.patches, grid.mask,
                                       positions=np.arange(6), kv_cache=cache)
    cache.append(new_kv, missing, np.arange(6), upto=6)
    _, new_kv2, _ = model.forward(grid.patches, grid.mask,
                                  positions=np.arange(6), kv_cache=KVCache(model, object()))
    for i in range(model.config.n_layers):
        if new_kv[i] is None:
            continue
        np.testing.assert_array_equal(cache.layer(i)["k"], new_kv2[i][0])


def test_cache_cross_session_reuse_fails():
    model = _model()
    cache = KVCache(model, object())
    with pytest.raises(RuntimeError, match="session"):
        cache.check_session(model, object())
    other = Model(model.config, seed=1)
    with pytest.raises(RuntimeError, match="session"):
        cache.check_session(other, cache.session)


def test_block_decode_slides_past_capacity():
    model = _model(8)  # tiny capacity: 8 patches
    rng = np.random.default_rng(17)
    grid = _grid(rng, n=6)
    fc = block_decode(model, grid, 12, 2)  # 12 horizon patches >> capacity
    assert fc.values.shape == (1, 12 * 32, 9)
    assert np.isfinite(fc.values).all()
    fc2 = block_decode(model, grid, 12, 2, use_cache=False)
    assert np.isfinite(fc2.values).all()


def test_block_size_validation():
    model = _model()
    rng = np.random.default_rng(18)
    grid = _grid(rng)
    with pytest.raises(ValueError):
        block_decode(model, grid, 4, 0)
    with pytest.raises(ValueError):
        block_decode(model, grid, 4, 5)
