import time

import numpy as np
import pytest

from videotransunet.autodiff import Tensor, grad_check, no_grad
from videotransunet.decoder import DecoderConfig, MaskPair, decode, init_decoder_params
from videotransunet.encoder import EncoderConfig
from videotransunet.model import ModelConfig, adapt_length, cast_params, init_params, model_forward
from videotransunet.vit import VitConfig

TINY = dict(
    encoder=EncoderConfig(stage_channels=(4, 4, 8, 8), blocks_per_stage=(1, 1, 1, 1), norm_groups=2),
    vit=VitConfig(hidden_dim=16, num_layers=1, num_heads=2, mlp_dim=16),
    decoder=DecoderConfig(stage_channels=(8, 4, 4, 4), norm_groups=2),
)


def tiny(t=3, size=(16, 16), **kw):
    return ModelConfig(snippet_length=t, image_size=size, **{**TINY, **kw})


def test_decoder_output_shape_and_range(rng):
    cfg = DecoderConfig(stage_channels=(8, 8, 4, 4), norm_groups=2)
    p = {k: Tensor(v) for k, v in init_decoder_params(cfg, 16, 8, (4, 4, 8), rng).items()}
    skips = [rng.standard_normal(s) for s in [(4, 16, 16), (4, 8, 8), (8, 4, 4)]]
    out = decode(rng.standard_normal((4, 16)), skips, p, cfg, grid=(2, 2))
    assert isinstance(out, MaskPair)
    for m in out:
        assert m.shape == (32, 32) and np.all((m.data > 0) & (m.data < 1))
    assert out.as_array().shape == (2, 32, 32)


def test_decoder_constant_half_with_zero_heads(rng):
    cfg = DecoderConfig(stage_channels=(8, 8, 4, 4), norm_groups=2)
    raw = init_decoder_params(cfg, 16, 8, (4, 4, 8), rng)
    for h in ("bolus", "pharynx"):
        raw[f"decoder.head_{h}.weight"][:] = 0
    p = {k: Tensor(v) for k, v in raw.items()}
    skips = [rng.standard_normal(s) for s in [(4, 16, 16), (4, 8, 8), (8, 4, 4)]]
    out = decode(rng.standard_normal((4, 16)), skips, p, cfg, grid=(2, 2))
    np.testing.assert_array_equal(out.bolus.data, 0.5)
    np.testing.assert_array_equal(out.pharynx.data, 0.5)


@pytest.mark.parametrize("mode", ["bilinear", "transpose"])
def test_final_upsample_modes(mode, rng):
    cfg = tiny(decoder=DecoderConfig(stage_channels=(8, 4, 4, 4), norm_groups=2, final_upsample=mode))
    p = init_params(cfg, 0)
    assert ("decoder.final.up" in p) == (mode == "transpose")
    with no_grad():
        out = model_forward(rng.random((3, 16, 16)), p, cfg)
    assert out.bolus.shape == (16, 16)


def test_bad_upsample_mode():
    with pytest.raises(ValueError, match="final_upsample"):
        DecoderConfig(final_upsample="nearest")


def test_skip_shape_mismatch(rng):
    cfg = DecoderConfig(stage_channels=(8, 8, 4, 4), norm_groups=2)
    p = {k: Tensor(v) for k, v in init_decoder_params(cfg, 16, 8, (4, 4, 8), rng).items()}
    skips = [rng.standard_normal(s) for s in [(4, 16, 16), (4, 8, 8), (8, 6, 6)]]
    with pytest.raises(ValueError, match="skip"):
        decode(rng.standard_normal((4, 16)), skips, p, cfg, grid=(2, 2))


def test_model_config_validation():
    with pytest.raises(ValueError, match="odd"):
        ModelConfig(snippet_length=4)
    with pytest.raises(ValueError, match="multiple of 16"):
        ModelConfig(image_size=(60, 64))


def test_wrong_frame_size(rng):
    cfg = tiny()
    with pytest.raises(ValueError, match="configured"):
        model_forward(rng.random((3, 32, 32)), init_params(cfg), cfg)


@pytest.mark.parametrize("t,slots,expected", [(5, 1, [2]), (1, 3, [0, 0, 0]), (3, 5, [0, 0, 1, 2, 2]), (7, 3, [2, 3, 4])])
def test_adapt_length(t, slots, expected):
    np.testing.assert_array_equal(adapt_length(np.arange(t), slots), expected)


def test_batched_shapes(rng):
    cfg = tiny(size=(32, 16))
    with no_grad():
        out, attn = model_forward(rng.random((2, 3, 32, 16)), init_params(cfg), cfg, return_attn=True)
    assert out.bolus.shape == (2, 32, 16) and attn.shape == (2, 3, 2, 1)


@pytest.mark.parametrize("size", [(16, 16), (32, 48), (64, 64)])
@pytest.mark.parametrize("batch", [1, 2])
def test_zero_mixing_reduces_to_single_frame_model(size, batch):
    full, single = ModelConfig(snippet_length=5, image_size=size), ModelConfig(snippet_length=1, image_size=size)
    p5, p1 = init_params(full, 7), init_params(single, 7)
    np.testing.assert_array_equal(p5["tcm.w_star2"].data, 0)
    x = np.random.default_rng(batch).random((batch, 5) + size).astype(np.float32)
    with no_grad():
        a = model_forward(x, p5, full).as_array()
        b = model_forward(x[:, 2:3], p1, single).as_array()
    assert a.tobytes() == b.tobytes()


def test_shared_streams_between_lengths():
    a, b = init_params(tiny(t=5), 3), init_params(tiny(t=1), 3)
    assert {k for k in a if not k.startswith("tcm")} == {k for k in b if not k.startswith("tcm")}
    for k in b:
        if not k.startswith("tcm"):
            assert a[k].data.tobytes() == b[k].data.tobytes()


def test_gradient_reaches_all_stages(rng):
    cfg = tiny()
    p = init_params(cfg, 1)
    for h in ("bolus", "pharynx"):
        p[f"decoder.head_{h}.weight"] = Tensor(rng.standard_normal((1, 4, 1, 1)), requires_grad=True)
    p["tcm.w_star2"] = Tensor(np.full(3, 0.1), requires_grad=True)
    out = model_forward(rng.random((3, 16, 16)), p, cfg)
    (out.bolus.sum() + out.pharynx.sum()).backward()
    for name in ("vit.E_pat", "encoder.stage1.block0.conv1", "tcm.w", "decoder.up3.conv2"):
        assert np.abs(p[name].grad).sum() > 0, name


def test_full_model_gradcheck(rng):
    cfg = tiny(t=3, vit=VitConfig(hidden_dim=16, num_layers=1, num_heads=2, mlp_dim=16))
    p = cast_params(init_params(cfg, 2), np.float64)
    p["tcm.w_star2"] = Tensor(np.array([0.3, -0.2, 0.5]))
    names = ["tcm.w", "tcm.w_star", "tcm.w_star2", "vit.E_pat", "encoder.stage2.block0.conv1"]
    frames = rng.random((3, 16, 16))
    w = rng.standard_normal((2, 16, 16))

    def f(*vals):
        q = dict(p)
        q.update(zip(names, vals))
        out = model_forward(frames, q, cfg)
        return (out.bolus * Tensor(w[0]) + out.pharynx * Tensor(w[1])).sum()

    rep = grad_check(f, [p[k] for k in names], tol=1e-4, max_entries=25)
    assert rep.passed, rep


def test_default_model_forward_under_five_seconds(rng):
    cfg = ModelConfig()
    p = init_params(cfg, 0)
    x = rng.random((5, 64, 64)).astype(np.float32)
    start = time.perf_counter()
    with no_grad():
        out = model_forward(x, p, cfg)
    assert time.perf_counter() - start < 5.0
    assert out.bolus.shape == (64, 64) and out.bolus.dtype == np.float32
