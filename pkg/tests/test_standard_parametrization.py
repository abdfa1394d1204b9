"""The plain-parametrization contrast mode: scaled init, unit multipliers.
Used by the width-transfer check as the no-transfer baseline."""

import numpy as np

from patchcast.harness import RunConfig, train
from patchcast.model import GEOMETRY_PRESETS, Model, ModelConfig


def test_standard_mode_forward_and_training():
    cfg = ModelConfig(context_length=256, parametrization="standard",
                      **GEOMETRY_PRESETS["64/4/1"])
    model = Model(cfg, seed=0)
    # scaled init instead of unit leaves: hidden weights carry 1/sqrt(fan_in)
    w = model.params["blocks.0.attn.q.w"]
    assert w.meta.forward_multiplier == 1.0
    assert 0.8 / 8 < w.data.std() < 1.2 / 8  # std ~ 1/sqrt(64)

    rng = np.random.default_rng(0)
    patches = rng.standard_normal((2, 8, 32)).astype(np.float32)
    out = model.forward(patches, np.zeros_like(patches))
    assert np.isfinite(out.data).all()

    run = RunConfig(geometry="64/4/1", context_length=256, batch_size=2, steps=6,
                    seed=1, parametrization="standard", normuon_eta=0.02,
                    adamw_eta=0.001, out_dir="unused")
    result = train(run, save=False)
    assert np.isfinite(result.losses).all()


def test_standard_mode_metadata_audit_skips_ump_rules():
    cfg = ModelConfig(context_length=256, parametrization="standard",
                      **GEOMETRY_PRESETS["64/4/1"])
    assert Model(cfg, seed=0).audit_metadata() == []
