"""Structure-modulated decoder: gate the deep feature stream, then project.

The encoded map is compressed back to the pyramid width and half resolution
by a grouped stride-2 conv (the depthwise reading of the downsampling
block), normalized and passed through GELU to form a modulation map.  The
preservation gate rescales the deep layer multiplicatively around identity:

    out = base + gate_scale * (base (*) tanh(modulation))

with gate_scale learnable and initialized to zero, so the decoder starts as
the identity on the deep stream.  A 1x1 conv then projects into the text
embedding dimension.  Segmentation supervision is Dice + BCE on per-category
sigmoid logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, ValidationError
from .params import ParamStore
from .rng import SplitMix64
from .tensor import (
    ConvSpec,
    Tensor,
    bilinear_resize,
    clamp,
    conv2d,
    gelu,
    group_norm,
    log,
    sigmoid,
    tanh,
)


@dataclass(frozen=True)
class DecoderConfig:
    channels: int          # pyramid width (gate operates here)
    teacher_channels: int  # encoded-map width entering the decoder
    embed_dim: int         # text embedding dimension
    gn_eps: float = 1e-5
    dice_smooth: float = 1.0
    bce_clip: float = 1e-7

    @property
    def num_groups(self) -> int:
        return min(32, self.channels)

    @property
    def down_groups(self) -> int:
        return math.gcd(self.teacher_channels, self.channels)


def _uniform_init(rng: SplitMix64, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniforms(shape, -bound, bound)


def init_decoder_params(
    store: ParamStore, cfg: DecoderConfig, rng: SplitMix64, with_bypass: bool = False
) -> None:
    """Register decoder parameters (update group: core).

    ``with_bypass`` additionally registers the 1x1 conv used when the gate
    is ablated and the modulation map feeds the projector directly.
    """
    c, ct, d = cfg.channels, cfg.teacher_channels, cfg.embed_dim
    fan = (ct // cfg.down_groups) * 9
    store.register("smd.down.weight",
                   _uniform_init(rng, (c, ct // cfg.down_groups, 3, 3), fan), "core")
    store.register("smd.down.bias", _uniform_init(rng, (c,), fan), "core")
    store.register("smd.down.gn_gamma", np.ones(c), "core")
    store.register("smd.down.gn_beta", np.zeros(c), "core")
    store.register("smd.gate_scale", np.zeros(()), "core")
    store.register("smd.proj.weight", _uniform_init(rng, (d, c, 1, 1), c), "core")
    store.register("smd.proj.bias", _uniform_init(rng, (d,), c), "core")
    if with_bypass:
        store.register("smd.bypass.weight", _uniform_init(rng, (c, c, 1, 1), c), "core")
        store.register("smd.bypass.bias", _uniform_init(rng, (c,), c), "core")


def modulate(f_middle: Tensor, params: Mapping[str, Tensor], cfg: DecoderConfig) -> Tensor:
    """Stride-2 grouped conv + group norm + GELU; halves both spatial dims."""
    _, h, w = f_middle.shape
    if h % 2 or w % 2:
        raise ConfigError(f"modulate needs even spatial dims, got ({h}, {w})")
    spec = ConvSpec(
        cfg.teacher_channels, cfg.channels, kernel_size=3, stride=2, padding=1,
        groups=cfg.down_groups,
    )
    x = conv2d(f_middle, spec, params["smd.down.weight"], params["smd.down.bias"])
    x = group_norm(x, cfg.num_groups, params["smd.down.gn_gamma"],
                   params["smd.down.gn_beta"], eps=cfg.gn_eps)
    return gelu(x)


def preservation_gate(base: Tensor, modulation: Tensor, gate_scale: Tensor) -> Tensor:
    """Residual multiplicative gate around the (resized) deep feature stream."""
    _, h, w = modulation.shape
    resized = bilinear_resize(base, h, w)
    return resized + gate_scale * (resized * tanh(modulation))


def project(f_out: Tensor, params: Mapping[str, Tensor], cfg: DecoderConfig) -> Tensor:
    """Per-location linear map into the text embedding dimension."""
    if f_out.shape[0] != cfg.channels:
        raise ConfigError(
            f"projector expects {cfg.channels} channels, got {f_out.shape[0]}"
        )
    spec = ConvSpec(cfg.channels, cfg.embed_dim, kernel_size=1)
    return conv2d(f_out, spec, params["smd.proj.weight"], params["smd.proj.bias"])


def bypass_gate(modulation: Tensor, params: Mapping[str, Tensor], cfg: DecoderConfig) -> Tensor:
    """Gate-ablated path: a direct 1x1 conv of the modulation map."""
    spec = ConvSpec(cfg.channels, cfg.channels, kernel_size=1)
    return conv2d(modulation, spec, params["smd.bypass.weight"], params["smd.bypass.bias"])


@dataclass
class SegLossBreakdown:
    dice: float
    bce: float
    total: float


def seg_loss(logits: Tensor, masks: np.ndarray, smooth: float = 1.0,
             clip: float = 1e-7) -> tuple[Tensor, SegLossBreakdown]:
    """Dice + BCE between per-category logits and binary pseudo-masks."""
    masks = np.asarray(masks, dtype=np.float64)
    if logits.shape != masks.shape:
        raise ValidationError(
            f"logits {logits.shape} vs masks {masks.shape} shape mismatch"
        )
    if not np.all((masks == 0.0) | (masks == 1.0)):
        raise ValidationError("masks must be binary (0/1)")

    g = Tensor(masks)
    p = sigmoid(logits)

    inter = (p * g).sum(axis=(1, 2))
    p_sum = p.sum(axis=(1, 2))
    g_sum = masks.sum(axis=(1, 2))
    dice = (1.0 - (2.0 * inter + smooth) / (p_sum + Tensor(g_sum) + smooth)).mean()

    safe = clamp(p, clip, 1.0 - clip)
    bce = (-(g * log(safe) + (1.0 - g) * log(1.0 - safe))).mean()

    total = dice + bce
    breakdown = SegLossBreakdown(dice=dice.item(), bce=bce.item(), total=total.item())
    return total, breakdown
