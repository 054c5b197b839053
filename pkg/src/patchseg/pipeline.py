"""Full-model assembly: parameters, forward paths, and the two-loss objective.

The model is a fixed composition over one scene:

    pyramid -> backbone adapters -> gated fusion -> encoder -> encoded map
    encoded map vs teacher -> alignment loss
    encoded map -> modulation -> preservation gate(deep stream) -> projector
    projector output -> upsample to image grid -> temperature-scaled cosine
    logits vs pseudo-masks -> segmentation loss

Backbone adapters are identity-initialized channel affines on the last
three pyramid layers; their update-group tag ("backbone") is what the
gradient router keys on.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .decoder import (
    DecoderConfig,
    SegLossBreakdown,
    bypass_gate,
    init_decoder_params,
    modulate,
    preservation_gate,
    project,
    seg_loss,
)
from .encoder import (
    AlignLossBreakdown,
    EncoderConfig,
    align_loss,
    encode,
    gated_fusion,
    init_encoder_params,
)
from .errors import ConfigError, DegenerateInputError, PatchsegError
from .params import ParamStore
from .rng import SplitMix64
from .seghead import TextEmbeddingBank
from .storage import SceneSample
from .tensor import Tensor, bilinear_resize, channel_project, sqrt


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    teacher_channels: int
    embed_dim: int
    image_h: int
    image_w: int
    layers: tuple[int, ...]
    tau: float = 10.0
    gn_eps: float = 1e-5
    use_gate: bool = True
    use_encoder: bool = True

    @property
    def base_layer(self) -> int:
        return self.layers[-1]

    @property
    def fusion_layers(self) -> tuple[int, ...]:
        return self.layers[:-1]

    @property
    def adapter_layers(self) -> tuple[int, ...]:
        return self.layers[-3:]

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            channels=self.channels,
            teacher_channels=self.teacher_channels,
            fusion_layers=self.fusion_layers,
            base_layer=self.base_layer,
            gn_eps=self.gn_eps,
        )

    @property
    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            channels=self.channels,
            teacher_channels=self.teacher_channels,
            embed_dim=self.embed_dim,
            gn_eps=self.gn_eps,
        )

    @staticmethod
    def from_spec_dict(spec: dict, tau: float = 10.0, use_gate: bool = True,
                       use_encoder: bool = True) -> "ModelConfig":
        return ModelConfig(
            channels=spec["channels"],
            teacher_channels=spec["teacher_channels"],
            embed_dim=spec["embed_dim"],
            image_h=spec["image_h"],
            image_w=spec["image_w"],
            layers=tuple(spec["layers"]),
            tau=tau,
            use_gate=use_gate,
            use_encoder=use_encoder,
        )


def init_model_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """All learnable parameters; adapters carry the backbone group tag."""
    store = ParamStore()
    for layer in cfg.adapter_layers:
        store.register(f"adapter.{layer:02d}.scale",
                       np.ones((cfg.channels, 1, 1)), "backbone")
        store.register(f"adapter.{layer:02d}.shift",
                       np.zeros((cfg.channels, 1, 1)), "backbone")
    rng = SplitMix64(seed).split(7)
    init_encoder_params(store, cfg.encoder_config, rng)
    init_decoder_params(store, cfg.decoder_config, rng, with_bypass=True)
    return store


@contextmanager
def _stage(name: str):
    """Attach the pipeline stage name to propagated package errors."""
    try:
        yield
    except PatchsegError as exc:
        exc.args = (f"[stage {name}] {exc.args[0]}",) + exc.args[1:]
        raise


def apply_adapters(
    pyramid: Mapping[int, np.ndarray], params: Mapping[str, Tensor], cfg: ModelConfig
) -> dict[int, Tensor]:
    out: dict[int, Tensor] = {}
    for layer, fmap in pyramid.items():
        x = Tensor(fmap)
        if layer in cfg.adapter_layers:
            x = x * params[f"adapter.{layer:02d}.scale"] + params[
                f"adapter.{layer:02d}.shift"
            ]
        out[layer] = x
    return out


def encoded_map(
    sample: SceneSample, params: Mapping[str, Tensor], cfg: ModelConfig
) -> tuple[dict[int, Tensor], Tensor]:
    """Adapter-corrected pyramid plus the encoded (teacher-space) map.

    With the encoder ablated the teacher features themselves stand in as
    the decoder input.
    """
    with _stage("adapter"):
        pyramid = apply_adapters(sample.pyramid, params, cfg)
    if not cfg.use_encoder:
        return pyramid, Tensor(sample.teacher)
    with _stage("fusion"):
        fused = gated_fusion(pyramid, params, cfg.encoder_config)
    with _stage("encode"):
        middle = encode(fused, params, cfg.encoder_config)
    return pyramid, middle


def decoded_embedding(
    pyramid: Mapping[int, Tensor],
    middle: Tensor,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
) -> Tensor:
    """Modulation, gating (or its ablation), and projection to [D, H, W]."""
    with _stage("modulate"):
        modulation = modulate(middle, params, cfg.decoder_config)
    if cfg.use_gate:
        with _stage("gate"):
            gated = preservation_gate(
                pyramid[cfg.base_layer], modulation, params["smd.gate_scale"]
            )
    else:
        with _stage("gate-bypass"):
            gated = bypass_gate(modulation, params, cfg.decoder_config)
    with _stage("project"):
        return project(gated, params, cfg.decoder_config)


def image_logits(embedding: Tensor, bank: TextEmbeddingBank, cfg: ModelConfig) -> Tensor:
    """Upsample to the image grid, normalize, and score against the bank."""
    with _stage("logits"):
        up = bilinear_resize(embedding, cfg.image_h, cfg.image_w)
        sq_norm = (up * up).sum(axis=0, keepdims=True)
        zero = np.argwhere(sq_norm.data[0] == 0.0)
        if zero.size:
            h, w = zero[0]
            raise DegenerateInputError(
                f"zero-norm projected vector at image location ({h}, {w})"
            )
        normalized = up / sqrt(sq_norm)
        return cfg.tau * channel_project(normalized, bank.embeddings)


@dataclass
class LossBreakdown:
    align: AlignLossBreakdown | None
    seg: SegLossBreakdown | None

    @property
    def total(self) -> float:
        value = 0.0
        if self.align is not None:
            value += self.align.total
        if self.seg is not None:
            value += self.seg.total
        return value


def total_loss(
    sample: SceneSample,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    bank: TextEmbeddingBank,
    align_on: bool = True,
    seg_on: bool = True,
    middle_override: np.ndarray | None = None,
) -> tuple[Tensor | None, Tensor | None, LossBreakdown]:
    """The two loss roots (either may be None when toggled off) plus values.

    ``middle_override`` feeds an external map (e.g. the teacher) into the
    decoder in place of the encoder output; the alignment term still scores
    the real encoder output when enabled.
    """
    pyramid, middle = encoded_map(sample, params, cfg)

    align_total = None
    align_break = None
    if align_on and cfg.use_encoder:
        with _stage("align-loss"):
            align_total, align_break = align_loss(middle, sample.teacher)

    seg_total = None
    seg_break = None
    if seg_on:
        decoder_input = middle if middle_override is None else Tensor(middle_override)
        if decoder_input.shape != (cfg.teacher_channels,
                                   2 * sample.pyramid[cfg.base_layer].shape[1],
                                   2 * sample.pyramid[cfg.base_layer].shape[2]):
            raise ConfigError(
                f"decoder input {decoder_input.shape} does not match the "
                "teacher-space geometry"
            )
        embedding = decoded_embedding(pyramid, decoder_input, params, cfg)
        logits = image_logits(embedding, bank, cfg)
        with _stage("seg-loss"):
            seg_total, seg_break = seg_loss(logits, sample.masks)

    return align_total, seg_total, LossBreakdown(align=align_break, seg=seg_break)


def infer_scores(
    sample: SceneSample,
    store: ParamStore,
    cfg: ModelConfig,
    bank: TextEmbeddingBank,
    window: int,
    stride: int,
    middle_override: np.ndarray | None = None,
) -> np.ndarray:
    """Eval-path score volume on the image grid (bilinear score upsampling).

    Scores are computed on the feature grid with sliding-window coverage
    and then bilinearly upsampled, so window/stride behave in patch units.
    """
    from .seghead import sliding_window_infer

    params = {name: Tensor(store[name].value) for name in store.names()}
    pyramid, middle = encoded_map(sample, params, cfg)
    decoder_input = middle if middle_override is None else Tensor(middle_override)
    embedding = decoded_embedding(pyramid, decoder_input, params, cfg)
    volume = sliding_window_infer(embedding.data, bank, window, stride)
    up = bilinear_resize(Tensor(volume.values), cfg.image_h, cfg.image_w)
    return up.data
