"""Cascaded upsampling decoder with skip fusion and two sigmoid heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, conv2d, conv_transpose2d, group_norm, relu, sigmoid, upsample_bilinear
from .autodiff.tensor import as_tensor
from .encoder import he_normal

HEADS = ("bolus", "pharynx")


@dataclass
class MaskPair:
    bolus: object
    pharynx: object

    def __iter__(self):
        yield self.bolus
        yield self.pharynx

    def as_array(self) -> np.ndarray:
        """Stack into ``(2, H, W)`` (or ``(B, 2, H, W)``) in head order."""
        b = np.asarray(getattr(self.bolus, "data", self.bolus))
        p = np.asarray(getattr(self.pharynx, "data", self.pharynx))
        return np.stack([b, p], axis=-3)


@dataclass(frozen=True)
class DecoderConfig:
    """``stage_channels`` are the outputs of the three skip-fused stages
    (1/8, 1/4, 1/2 resolution) followed by the full-resolution stage."""

    stage_channels: tuple = (64, 32, 16, 16)
    final_upsample: str = "bilinear"  # or "transpose"
    norm_groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_channels) != 4 or min(self.stage_channels) <= 0:
            raise ValueError("decoder needs 4 positive stage channel counts")
        if self.final_upsample not in ("bilinear", "transpose"):
            raise ValueError(f"unknown final_upsample {self.final_upsample!r}")

    def groups(self, channels: int) -> int:
        g = min(self.norm_groups, channels)
        while channels % g:
            g -= 1
        return g


def _conv_pair(params, rng, name, cin, cout):
    params[f"{name}.conv1"] = he_normal(rng, (cout, cin, 3, 3), cin * 9)
    params[f"{name}.norm1.gain"] = np.ones(cout, np.float32)
    params[f"{name}.norm1.bias"] = np.zeros(cout, np.float32)
    params[f"{name}.conv2"] = he_normal(rng, (cout, cout, 3, 3), cout * 9)
    params[f"{name}.norm2.gain"] = np.ones(cout, np.float32)
    params[f"{name}.norm2.bias"] = np.zeros(cout, np.float32)


def init_decoder_params(
    config: DecoderConfig, hidden_dim: int, deep_channels: int, skip_channels: tuple, rng: np.random.Generator
) -> dict:
    """``skip_channels`` ordered shallow to deep (H/2, H/4, H/8)."""
    params = {
        "decoder.reproject.weight": he_normal(rng, (deep_channels, hidden_dim, 1, 1), hidden_dim),
        "decoder.reproject.bias": np.zeros(deep_channels, np.float32),
    }
    cin = deep_channels
    for stage, skip in enumerate(reversed(skip_channels)):
        cout = config.stage_channels[stage]
        _conv_pair(params, rng, f"decoder.up{stage + 1}", cin + skip, cout)
        cin = cout
    cout = config.stage_channels[3]
    if config.final_upsample == "transpose":
        params["decoder.final.up"] = he_normal(rng, (cin, cin, 2, 2), cin)
    params["decoder.final.conv"] = he_normal(rng, (cout, cin, 3, 3), cin * 9)
    params["decoder.final.norm.gain"] = np.ones(cout, np.float32)
    params["decoder.final.norm.bias"] = np.zeros(cout, np.float32)
    for head in HEADS:
        params[f"decoder.head_{head}.weight"] = (rng.standard_normal((1, cout, 1, 1)) / np.sqrt(cout)).astype(
            np.float32
        )
        params[f"decoder.head_{head}.bias"] = np.zeros(1, np.float32)
    return params


def _conv_norm_relu(x, params, name, suffix, groups):
    x = conv2d(x, params[f"{name}.conv{suffix}"], padding=1)
    g = params[f"{name}.norm{suffix}.gain"]
    return relu(group_norm(x, groups(x.shape[1]), g, params[f"{name}.norm{suffix}.bias"]))


def decode(z_l, skips, params: dict, config: DecoderConfig = DecoderConfig(), grid=None) -> MaskPair:
    """Tokens ``(N, D)`` / ``(B, N, D)`` plus centre-frame skips -> per-head probabilities.

    ``skips`` are ordered H/2, H/4, H/8 as produced by the encoder. ``grid``
    is the ``(h, w)`` token grid; it defaults to the 1/8 skip extent halved.
    """
    z = as_tensor(z_l)
    batched = z.ndim == 3
    if not batched:
        z = z.reshape((1,) + z.shape)
        skips = [as_tensor(s).reshape((1,) + s.shape) for s in skips]
    else:
        skips = [as_tensor(s) for s in skips]
    if len(skips) != 3:
        raise ValueError(f"decoder needs 3 skip maps, got {len(skips)}")
    b, n, d = z.shape
    if grid is None:
        grid = (skips[2].shape[-2] // 2, skips[2].shape[-1] // 2)
    h, w = grid
    if h * w != n:
        raise ValueError(f"{n} tokens do not fill a {h}x{w} grid")
    for level, s in enumerate(skips):
        expected = (h * 2 ** (3 - level), w * 2 ** (3 - level))
        if s.shape[-2:] != expected or s.shape[0] != b:
            raise ValueError(f"skip {level} has shape {s.shape}, expected spatial {expected} and batch {b}")
    x = z.transpose((0, 2, 1)).reshape((b, d, h, w))
    x = conv2d(x, params["decoder.reproject.weight"], params["decoder.reproject.bias"])
    for stage, skip in enumerate(reversed(skips)):
        name = f"decoder.up{stage + 1}"
        x = concat([upsample_bilinear(x, 2), skip], axis=1)
        x = _conv_norm_relu(x, params, name, 1, config.groups)
        x = _conv_norm_relu(x, params, name, 2, config.groups)
    if config.final_upsample == "transpose":
        x = conv_transpose2d(x, params["decoder.final.up"], stride=2)
    else:
        x = upsample_bilinear(x, 2)
    x = conv2d(x, params["decoder.final.conv"], padding=1)
    x = relu(group_norm(x, config.groups(x.shape[1]), params["decoder.final.norm.gain"], params["decoder.final.norm.bias"]))
    maps = []
    for head in HEADS:
        logit = conv2d(x, params[f"decoder.head_{head}.weight"], params[f"decoder.head_{head}.bias"])
        prob = sigmoid(logit).reshape((b,) + logit.shape[-2:])
        maps.append(prob if batched else prob.reshape(prob.shape[1:]))
    return MaskPair(*maps)
