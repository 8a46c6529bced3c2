"""Full pipeline: shared encoder -> temporal blending -> transformer -> decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat
from .autodiff.tensor import as_tensor
from .decoder import DecoderConfig, MaskPair, decode, init_decoder_params
from .encoder import DOWNSAMPLE, EncoderConfig, check_extent, encode_frame, init_encoder_params
from .tcm import init_tcm_params, tcm_forward
from .vit import VitConfig, init_vit_params, vit_forward


@dataclass(frozen=True)
class ModelConfig:
    snippet_length: int = 5
    image_size: tuple = (64, 64)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vit: VitConfig = field(default_factory=VitConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.snippet_length < 1 or self.snippet_length % 2 == 0:
            raise ValueError(f"snippet length must be odd and >= 1, got {self.snippet_length}")
        check_extent(*self.image_size)

    @property
    def center(self) -> int:
        return (self.snippet_length - 1) // 2

    @property
    def grid(self) -> tuple:
        return (self.image_size[0] // DOWNSAMPLE, self.image_size[1] // DOWNSAMPLE)


def init_params(config: ModelConfig, seed: int = 0, zero_final_gain: bool = False) -> dict:
    """Random parameters as gradient-tracking float32 tensors.

    Each sub-network draws from its own stream, so two configs differing
    only in snippet length share every non-temporal parameter for a seed.
    """
    enc = config.encoder
    h, w = config.grid
    raw = {}
    raw.update(init_encoder_params(enc, np.random.default_rng([seed, 0]), zero_final_gain))
    raw.update(init_tcm_params(config.snippet_length, enc.stage_channels[3], np.random.default_rng([seed, 1])))
    raw.update(init_vit_params(config.vit, enc.stage_channels[3], h * w, np.random.default_rng([seed, 2])))
    raw.update(
        init_decoder_params(
            config.decoder,
            config.vit.hidden_dim,
            enc.stage_channels[3],
            enc.stage_channels[:3],
            np.random.default_rng([seed, 3]),
        )
    )
    return {k: Tensor(v, requires_grad=True, dtype=np.float32) for k, v in sorted(raw.items())}


def cast_params(params: dict, dtype) -> dict:
    return {k: Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype) for k, v in params.items()}


def adapt_length(frames: np.ndarray, slots: int, axis: int = 0) -> np.ndarray:
    """Centre-align a snippet to ``slots`` frames by truncation or edge replication."""
    frames = np.asarray(frames)
    t = frames.shape[axis]
    if t == slots:
        return frames
    center = (t - 1) // 2
    idx = np.clip(np.arange(slots) - (slots - 1) // 2 + center, 0, t - 1)
    return np.take(frames, idx, axis=axis)


def model_forward(stack, params: dict, config: ModelConfig, return_attn: bool = False):
    """Segment the centre frame of one snippet ``(t, H, W)`` or a batch ``(B, t, H, W)``.

    ``stack`` may also be a FrameStack. Snippets of a different length are
    centre-aligned to the configured slot count first.
    """
    frames = getattr(stack, "frames", stack)
    raw = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    batched = raw.ndim == 4
    if not batched:
        raw = raw[None]
    if raw.ndim != 4:
        raise ValueError(f"expected (t, H, W) or (B, t, H, W) frames, got shape {raw.shape}")
    if tuple(raw.shape[-2:]) != config.image_size:
        raise ValueError(f"frames are {raw.shape[-2:]}, model configured for {config.image_size}")
    raw = adapt_length(raw, config.snippet_length, axis=1)
    b, t, h, w = raw.shape
    center = config.center
    # The centre frames get their own GEMM so their features do not depend on
    # how many context frames share the batch (keeps t=1 and t>1 bit-equal).
    enc_c = encode_frame(as_tensor(raw[:, center : center + 1]), params, config.encoder)
    skips = enc_c.skips
    if t > 1:
        ctx = np.concatenate([raw[:, :center], raw[:, center + 1 :]], axis=1)
        enc_o = encode_frame(as_tensor(ctx.reshape(b * (t - 1), 1, h, w)), params, config.encoder)
        other = enc_o.deep.reshape((b, t - 1) + enc_o.deep.shape[1:])
        centre = enc_c.deep.reshape((b, 1) + enc_c.deep.shape[1:])
        deep = concat([other[:, :center], centre, other[:, center:]], axis=1)
    else:
        deep = enc_c.deep.reshape((b, 1) + enc_c.deep.shape[1:])
    blended = tcm_forward(deep, params, center)
    z = vit_forward(blended.blended, params, config.vit)
    masks = decode(z, skips, params, config.decoder, grid=config.grid)
    if not batched:
        masks = MaskPair(masks.bolus[0], masks.pharynx[0])
    if return_attn:
        attn = blended.attn if batched else blended.attn[0]
        return masks, attn
    return masks
