"""Transformer bottleneck over the blended feature grid.

Each cell of the ``(C, h, w)`` feature map is one token (1x1 patches on
the 1/16 grid, i.e. 16x16 patches of the input image). Blocks are pre-norm:
``z* = MSA(LN(z)) + z`` then ``z' = MLP(LN(z*)) + z*``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gelu, layer_norm, linear, softmax
from .autodiff.tensor import as_tensor


@dataclass(frozen=True)
class VitConfig:
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_dim: int = 128
    patch_size: int = 16

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")
        if self.num_layers < 0 or self.mlp_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("invalid transformer dimensions")
        if self.patch_size != 16:
            raise ValueError("patch_size must equal the encoder downsampling factor (16)")


def _dense(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(np.float32)


def init_vit_params(config: VitConfig, in_channels: int, num_patches: int, rng: np.random.Generator) -> dict:
    d, m = config.hidden_dim, config.mlp_dim
    params = {
        "vit.E_pat": _dense(rng, in_channels, d),
        "vit.E_pos": np.zeros((num_patches, d), np.float32),
    }
    for layer in range(config.num_layers):
        p = f"vit.layer{layer}"
        params[f"{p}.ln1.gain"] = np.ones(d, np.float32)
        params[f"{p}.ln1.bias"] = np.zeros(d, np.float32)
        for proj in ("q", "k", "v", "out"):
            params[f"{p}.{proj}.weight"] = _dense(rng, d, d)
            params[f"{p}.{proj}.bias"] = np.zeros(d, np.float32)
        params[f"{p}.ln2.gain"] = np.ones(d, np.float32)
        params[f"{p}.ln2.bias"] = np.zeros(d, np.float32)
        params[f"{p}.mlp1.weight"] = _dense(rng, d, m)
        params[f"{p}.mlp1.bias"] = np.zeros(m, np.float32)
        params[f"{p}.mlp2.weight"] = _dense(rng, m, d)
        params[f"{p}.mlp2.bias"] = np.zeros(d, np.float32)
    return params


def patch_embed(feature, params: dict) -> Tensor:
    """``(C, h, w)`` or ``(B, C, h, w)`` -> tokens ``(N, D)`` / ``(B, N, D)``, row-major grid."""
    x = as_tensor(feature)
    lead = x.shape[:-3]
    c, h, w = x.shape[-3:]
    e_pos = as_tensor(params["vit.E_pos"])
    if e_pos.shape[0] != h * w:
        raise ValueError(f"feature grid has {h * w} patches but E_pos has {e_pos.shape[0]} rows")
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead) + 2, len(lead))
    tokens = x.transpose(axes).reshape(lead + (h * w, c))
    return tokens @ params["vit.E_pat"] + e_pos


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    scale = 1.0 / np.sqrt(q.shape[-1])
    return softmax((q @ k.transpose(_swap_last(k.ndim))) * scale, axis=-1)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., N, D) -> (..., heads, N, D/heads)
    lead, n, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    x = x.reshape(lead + (n, heads, d // heads))
    k = len(lead)
    return x.transpose(tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    lead, heads, n, dh = x.shape[:-3], x.shape[-3], x.shape[-2], x.shape[-1]
    k = len(lead)
    x = x.transpose(tuple(range(k)) + (k + 1, k, k + 2))
    return x.reshape(lead + (n, heads * dh))


def msa(x, params: dict, layer: int, num_heads: int, return_attn: bool = False):
    """Pre-norm multi-head self-attention with residual: ``MSA(LN(x)) + x``."""
    x = as_tensor(x)
    p = f"vit.layer{layer}"
    h = layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
    q = _split_heads(linear(h, params[f"{p}.q.weight"], params[f"{p}.q.bias"]), num_heads)
    k = _split_heads(linear(h, params[f"{p}.k.weight"], params[f"{p}.k.bias"]), num_heads)
    v = _split_heads(linear(h, params[f"{p}.v.weight"], params[f"{p}.v.bias"]), num_heads)
    attn = attention_weights(q, k)
    ctx = _merge_heads(attn @ v)
    out = linear(ctx, params[f"{p}.out.weight"], params[f"{p}.out.bias"]) + x
    return (out, attn) if return_attn else out


def mlp_block(x: Tensor, params: dict, layer: int) -> Tensor:
    p = f"vit.layer{layer}"
    h = layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
    h = gelu(linear(h, params[f"{p}.mlp1.weight"], params[f"{p}.mlp1.bias"]))
    return linear(h, params[f"{p}.mlp2.weight"], params[f"{p}.mlp2.bias"]) + x


def transformer_block(x, params: dict, layer: int, num_heads: int) -> Tensor:
    return mlp_block(msa(x, params, layer, num_heads), params, layer)


def vit_forward(feature, params: dict, config: VitConfig) -> Tensor:
    z = patch_embed(feature, params)
    for layer in range(config.num_layers):
        z = transformer_block(z, params, layer, config.num_heads)
    return z
