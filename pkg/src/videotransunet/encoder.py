"""Per-frame residual CNN encoder.

Four stages, each halving the spatial extent, so a frame of H x W yields
skip features at 1/2, 1/4, 1/8 and a deep map at 1/16 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, conv2d, group_norm, relu
from .autodiff.tensor import as_tensor

DOWNSAMPLE = 16


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    norm_groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("encoder needs exactly 4 stages")
        if min(self.stage_channels) <= 0 or min(self.blocks_per_stage) <= 0:
            raise ValueError("stage channels and block counts must be positive")
        if self.in_channels <= 0:
            raise ValueError("in_channels must be positive")

    def groups(self, channels: int) -> int:
        g = min(self.norm_groups, channels)
        while channels % g:
            g -= 1
        return g


@dataclass
class EncoderOutput:
    deep: Tensor
    skips: list = field(default_factory=list)  # ordered H/2, H/4, H/8


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _block_names(config: EncoderConfig):
    cin = config.in_channels
    for s, (cout, nblocks) in enumerate(zip(config.stage_channels, config.blocks_per_stage)):
        for b in range(nblocks):
            stride = 2 if b == 0 else 1
            yield f"encoder.stage{s + 1}.block{b}", cin, cout, stride
            cin = cout


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator, zero_final_gain: bool = False) -> dict:
    params = {}
    for name, cin, cout, stride in _block_names(config):
        params[f"{name}.conv1"] = he_normal(rng, (cout, cin, 3, 3), cin * 9)
        params[f"{name}.norm1.gain"] = np.ones(cout, np.float32)
        params[f"{name}.norm1.bias"] = np.zeros(cout, np.float32)
        params[f"{name}.conv2"] = he_normal(rng, (cout, cout, 3, 3), cout * 9)
        final_gain = np.zeros if zero_final_gain else np.ones
        params[f"{name}.norm2.gain"] = final_gain(cout, np.float32)
        params[f"{name}.norm2.bias"] = np.zeros(cout, np.float32)
        if cin != cout or stride != 1:
            params[f"{name}.proj"] = he_normal(rng, (cout, cin, 1, 1), cin)
            params[f"{name}.proj_norm.gain"] = np.ones(cout, np.float32)
            params[f"{name}.proj_norm.bias"] = np.zeros(cout, np.float32)
    return params


def residual_block(x: Tensor, params: dict, name: str, stride: int, groups) -> Tensor:
    h = conv2d(x, params[f"{name}.conv1"], stride=stride, padding=1)
    h = relu(group_norm(h, groups(h.shape[1]), params[f"{name}.norm1.gain"], params[f"{name}.norm1.bias"]))
    h = conv2d(h, params[f"{name}.conv2"], padding=1)
    h = group_norm(h, groups(h.shape[1]), params[f"{name}.norm2.gain"], params[f"{name}.norm2.bias"])
    if f"{name}.proj" in params:
        short = conv2d(x, params[f"{name}.proj"], stride=stride)
        short = group_norm(
            short, groups(short.shape[1]), params[f"{name}.proj_norm.gain"], params[f"{name}.proj_norm.bias"]
        )
    else:
        short = x
    return relu(h + short)


def check_extent(h: int, w: int) -> None:
    if h % DOWNSAMPLE or w % DOWNSAMPLE or h <= 0 or w <= 0:
        raise ValueError(f"frame extent {h}x{w} must be a positive multiple of {DOWNSAMPLE}")


def encode_frame(frame, params: dict, config: EncoderConfig = EncoderConfig()) -> EncoderOutput:
    """Encode one frame ``(1, H, W)`` or a batch of frames ``(N, 1, H, W)``."""
    x = as_tensor(frame)
    batched = x.ndim == 4
    if not batched:
        x = x.reshape((1,) + x.shape)
    check_extent(*x.shape[-2:])
    stage_outputs = []
    blocks = list(_block_names(config))
    for s in range(4):
        for name, _, _, stride in blocks:
            if name.startswith(f"encoder.stage{s + 1}."):
                x = residual_block(x, params, name, stride, config.groups)
        stage_outputs.append(x)
    if not batched:
        stage_outputs = [t.reshape(t.shape[1:]) for t in stage_outputs]
    return EncoderOutput(deep=stage_outputs[3], skips=stage_outputs[:3])


def encode_stack(stack, params: dict, config: EncoderConfig = EncoderConfig()) -> list:
    """Encode every frame of a snippet with the same weights.

    ``stack`` is a FrameStack or a ``(t, H, W)`` array. Skip features are kept
    only for the centre frame; other entries carry an empty skip list.
    """
    frames = getattr(stack, "frames", stack)
    frames = as_tensor(frames)
    t = frames.shape[0]
    center = getattr(stack, "center", (t - 1) // 2)
    out = encode_frame(frames.reshape((t, 1) + frames.shape[1:]), params, config)
    results = []
    for k in range(t):
        skips = [s[k] for s in out.skips] if k == center else []
        results.append(EncoderOutput(deep=out.deep[k], skips=skips))
    return results
