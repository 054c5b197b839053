"""Structure-aware encoder: gated pyramid fusion into the teacher space.

The deepest pyramid layer is the residual base; each shallower layer in the
fusion set passes through its own 1x1 conv + group norm and is added in,
scaled by a learnable scalar gain initialized to zero, so training starts
from the pure deep-layer path.  Two depthwise 3x3 refinement layers
(GELU(GroupNorm(Conv))) preserve spatial structure, then a 2x bilinear
upsample and a standard 3x3 conv map into the teacher feature space.

The alignment objective compares the encoded map against a fixed teacher
map: mean per-location cosine distance plus elementwise mean squared error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError
from .params import ParamStore
from .rng import SplitMix64
from .tensor import ConvSpec, Tensor, bilinear_resize, conv2d, gelu, group_norm, sqrt


@dataclass(frozen=True)
class EncoderConfig:
    channels: int                  # pyramid feature width
    teacher_channels: int          # width of the alignment target
    fusion_layers: tuple[int, ...]  # shallow layers entering the gated sum
    base_layer: int                # deepest layer, the residual base
    gn_eps: float = 1e-5

    @property
    def num_groups(self) -> int:
        return min(32, self.channels)


def _uniform_init(rng: SplitMix64, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniforms(shape, -bound, bound)


def init_encoder_params(store: ParamStore, cfg: EncoderConfig, rng: SplitMix64) -> None:
    """Register all encoder parameters (update group: core)."""
    c, ct = cfg.channels, cfg.teacher_channels
    for layer in cfg.fusion_layers:
        fan = c  # 1x1 conv
        store.register(f"sae.fuse{layer}.weight", _uniform_init(rng, (c, c, 1, 1), fan), "core")
        store.register(f"sae.fuse{layer}.bias", _uniform_init(rng, (c,), fan), "core")
        store.register(f"sae.fuse{layer}.gn_gamma", np.ones(c), "core")
        store.register(f"sae.fuse{layer}.gn_beta", np.zeros(c), "core")
        store.register(f"sae.gain{layer}", np.zeros(()), "core")
    for name in ("sae.refine1", "sae.refine2"):
        fan = 9  # depthwise 3x3
        store.register(f"{name}.weight", _uniform_init(rng, (c, 1, 3, 3), fan), "core")
        store.register(f"{name}.bias", _uniform_init(rng, (c,), fan), "core")
        store.register(f"{name}.gn_gamma", np.ones(c), "core")
        store.register(f"{name}.gn_beta", np.zeros(c), "core")
    fan = c * 9
    store.register("sae.out.weight", _uniform_init(rng, (ct, c, 3, 3), fan), "core")
    store.register("sae.out.bias", _uniform_init(rng, (ct,), fan), "core")


def gated_fusion(
    pyramid: Mapping[int, Tensor], params: Mapping[str, Tensor], cfg: EncoderConfig
) -> Tensor:
    """Deep base plus gain-weighted normalized contributions of shallow layers."""
    if cfg.base_layer not in pyramid:
        raise ConfigError(f"pyramid is missing the base layer {cfg.base_layer}")
    base = pyramid[cfg.base_layer]
    c = cfg.channels
    if base.shape[0] != c:
        raise DimensionError(
            f"base layer channel axis: expected {c}, got {base.shape[0]}"
        )
    spec_1x1 = ConvSpec(c, c, kernel_size=1)
    fused = base
    for layer in cfg.fusion_layers:
        if layer not in pyramid:
            raise ConfigError(f"pyramid is missing fusion layer {layer}")
        if pyramid[layer].shape != base.shape:
            raise DimensionError(
                f"fusion layer {layer} shape {pyramid[layer].shape} differs "
                f"from base {base.shape}"
            )
        transformed = conv2d(
            pyramid[layer],
            spec_1x1,
            params[f"sae.fuse{layer}.weight"],
            params[f"sae.fuse{layer}.bias"],
        )
        transformed = group_norm(
            transformed,
            cfg.num_groups,
            params[f"sae.fuse{layer}.gn_gamma"],
            params[f"sae.fuse{layer}.gn_beta"],
            eps=cfg.gn_eps,
        )
        fused = fused + params[f"sae.gain{layer}"] * transformed
    return fused


def _refine(x: Tensor, prefix: str, params: Mapping[str, Tensor],
            cfg: EncoderConfig) -> Tensor:
    c = cfg.channels
    spec = ConvSpec(c, c, kernel_size=3, padding=1, groups=c)
    out = conv2d(x, spec, params[f"{prefix}.weight"], params[f"{prefix}.bias"])
    out = group_norm(out, cfg.num_groups, params[f"{prefix}.gn_gamma"],
                     params[f"{prefix}.gn_beta"], eps=cfg.gn_eps)
    return gelu(out)


def encode(f_hat: Tensor, params: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Two depthwise refinements, 2x upsample, then a standard conv into the
    teacher width.  Output is [teacher_channels, 2H, 2W]."""
    x = _refine(f_hat, "sae.refine1", params, cfg)
    x = _refine(x, "sae.refine2", params, cfg)
    _, h, w = x.shape
    x = bilinear_resize(x, 2 * h, 2 * w)
    spec = ConvSpec(cfg.channels, cfg.teacher_channels, kernel_size=3, padding=1)
    return conv2d(x, spec, params["sae.out.weight"], params["sae.out.bias"])


@dataclass
class AlignLossBreakdown:
    cosine: float
    mse: float
    total: float


def align_loss(f_middle: Tensor, teacher: np.ndarray
               ) -> tuple[Tensor, AlignLossBreakdown]:
    """Cosine-distance + MSE alignment against a constant teacher map.

    Returns the graph-carrying total plus a plain-float breakdown.  No
    gradient flows into the teacher.
    """
    teacher = np.asarray(teacher, dtype=np.float64)
    if f_middle.shape != teacher.shape:
        raise ConfigError(
            f"encoded map {f_middle.shape} does not match teacher {teacher.shape}"
        )
    m_norms = np.sqrt(np.sum(f_middle.data**2, axis=0))
    t_norms = np.sqrt(np.sum(teacher**2, axis=0))
    for label, norms in (("encoded", m_norms), ("teacher", t_norms)):
        zero = np.argwhere(norms == 0.0)
        if zero.size:
            h, w = zero[0]
            raise DegenerateInputError(
                f"zero-norm {label} feature vector at location ({h}, {w})"
            )

    t = Tensor(teacher)
    dot = (f_middle * t).sum(axis=0)
    m_norm = sqrt((f_middle * f_middle).sum(axis=0))
    cos_map = dot / (m_norm * Tensor(t_norms))
    cosine = (1.0 - cos_map).mean()
    diff = f_middle - t
    mse = (diff * diff).mean()
    total = cosine + mse
    breakdown = AlignLossBreakdown(
        cosine=cosine.item(), mse=mse.item(), total=total.item()
    )
    return total, breakdown
