"""Two-loss training with gradient routing, AdamW, and warmup+cosine decay.

Routing rule: the alignment loss updates only the core group (encoder,
decoder, projector); the segmentation loss additionally updates the
backbone adapters.  Both losses are backpropagated separately through one
recorded graph per sample and the router assembles per-group gradients, so
"align-only" runs produce exactly-zero adapter gradients by construction.

Learning rates: desk-scale defaults are 1e-2 (core) and 1e-3 (backbone),
preserving the 10x core:backbone ratio of the full-scale recipe
(1e-4 / 1e-5); at ~200 optimizer steps the full-scale values cannot move
any parameter beyond ~2e-3, so they are exposed in the config rather than
used as defaults.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, NumericError
from .params import GROUP_BACKBONE, GROUP_CORE, ParamStore
from .pipeline import ModelConfig, LossBreakdown, infer_scores, init_model_params, total_loss
from .rng import SplitMix64
from .seghead import ScoreVolume, SegmentationMap, TextEmbeddingBank, assign_labels, miou
from .spectral import channel_collapse, freq_ratio, radial_profile
from .storage import Checkpoint, Dataset, SceneSample, save_checkpoint
from .tensor import Tensor


@dataclass
class TrainConfig:
    """Hyperparameters and ablation switches for one run.

    The full-scale recipe this mirrors trains with lr 1e-4 / 1e-5 and batch
    64; desk-scale defaults keep the ratios but are sized for ~200 steps.
    """

    lr_main: float = 1e-2
    lr_backbone: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 25
    warmup_epochs: int = 1
    batch_size: int = 8
    align_enabled: bool = True
    seg_enabled: bool = True
    freeze_backbone: bool = False
    use_gate: bool = True
    use_encoder: bool = True
    tau: float = 10.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # divergence fallback; 10.0 is the documented value
    eval_window: int = 8
    eval_stride: int = 4

    def validate(self) -> None:
        if self.lr_main <= 0 or self.lr_backbone <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"need warmup_epochs < epochs >= 1, got {self.warmup_epochs} "
                f"vs {self.epochs}"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.align_enabled and not self.seg_enabled:
            raise ConfigError("at least one loss must stay enabled")

    def resolved(self) -> "TrainConfig":
        """Apply cross-field rules (encoder ablation disables alignment)."""
        cfg = TrainConfig(**asdict(self))
        if not cfg.use_encoder:
            cfg.align_enabled = False
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizer ----------------------------------------------------------------------


@dataclass
class AdamState:
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float | dict[str, float],
    weight_decay: float,
    state: AdamState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``lr`` may be a single rate or a per-parameter mapping.  The decay term
    uses the same rate as the adaptive step and is applied separately from
    it.  A non-finite gradient refuses the whole step.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for {name!r}; step refused")

    state.step += 1
    t = state.step
    correct1 = 1.0 - beta1**t
    correct2 = 1.0 - beta2**t
    for name in store.names():
        grad = grads[name]
        rate = lr[name] if isinstance(lr, dict) else lr
        if name not in state.first:
            state.first[name] = np.zeros_like(grad)
            state.second[name] = np.zeros_like(grad)
        m = state.first[name]
        v = state.second[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correct1
        v_hat = v / correct2
        param = store[name].value
        param -= rate * weight_decay * param
        param -= rate * m_hat / (np.sqrt(v_hat) + eps)


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- gradient routing ----------------------------------------------------------------


def collect_gradients(
    sample: SceneSample,
    store: ParamStore,
    model_cfg: ModelConfig,
    bank: TextEmbeddingBank,
    align_on: bool,
    seg_on: bool,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], LossBreakdown]:
    """Per-loss gradients from one recorded graph, plus the loss values."""
    leaves = store.leaves()
    align_total, seg_total, breakdown = total_loss(
        sample, leaves, model_cfg, bank, align_on=align_on, seg_on=seg_on
    )

    def drain() -> dict[str, np.ndarray]:
        grads = {}
        for name, leaf in leaves.items():
            grads[name] = (
                leaf.grad.copy() if leaf.grad is not None
                else np.zeros_like(leaf.data)
            )
            leaf.zero_grad()
        return grads

    zero = {name: np.zeros_like(store[name].value) for name in store.names()}
    align_grads = zero
    if align_total is not None:
        align_total.backward()
        align_grads = drain()
    seg_grads = dict(zero)
    if seg_total is not None:
        seg_total.backward()
        seg_grads = drain()
    return align_grads, seg_grads, breakdown


def route_gradients(
    align_grads: dict[str, np.ndarray],
    seg_grads: dict[str, np.ndarray],
    store: ParamStore,
    freeze_backbone: bool = False,
) -> dict[str, np.ndarray]:
    """Core gets align+seg; backbone gets seg only (or zero when frozen)."""
    routed: dict[str, np.ndarray] = {}
    for name in store.names():
        group = store.group_of(name)
        if group == GROUP_CORE:
            routed[name] = align_grads[name] + seg_grads[name]
        elif group == GROUP_BACKBONE:
            if freeze_backbone:
                routed[name] = np.zeros_like(seg_grads[name])
            else:
                routed[name] = seg_grads[name].copy()
        else:  # pragma: no cover - ParamStore blocks unknown groups at register
            raise ConfigError(f"parameter {name!r} has no routable group")
    return routed


# -- evaluation ----------------------------------------------------------------------


def evaluate_split(
    store: ParamStore,
    dataset: Dataset,
    model_cfg: ModelConfig,
    split: str,
    window: int = 8,
    stride: int = 4,
    substitute_teacher: bool = False,
) -> tuple[float, dict[int, float]]:
    """Aggregate mIoU over a split (confusion pooled across scenes)."""
    scenes = dataset.split(split)
    preds, gts = [], []
    for sample in scenes:
        override = sample.teacher if substitute_teacher else None
        scores = infer_scores(
            sample, store, model_cfg, dataset.bank, window, stride,
            middle_override=override,
        )
        labels = assign_labels(ScoreVolume(values=np.clip(scores, -1.0, 1.0)))
        preds.append(labels.labels)
        gts.append(sample.gt.labels)
    pred_map = SegmentationMap(labels=np.vstack(preds))
    gt_map = SegmentationMap(labels=np.vstack(gts))
    return miou(pred_map, gt_map, dataset.bank.num_categories)


def encoded_band_ratio(
    store: ParamStore, sample: SceneSample, model_cfg: ModelConfig,
    n_bins: int = 8, r_c: float = 0.25,
) -> tuple[float, float]:
    """Band ratio of the encoded map and its change vs the deep input layer."""
    from .pipeline import encoded_map

    params = {name: Tensor(store[name].value) for name in store.names()}
    _, middle = encoded_map(sample, params, model_cfg)
    ratio_encoded = freq_ratio(
        radial_profile(channel_collapse(middle.data), n_bins), r_c
    )
    ratio_deep = freq_ratio(
        radial_profile(
            channel_collapse(sample.pyramid[model_cfg.base_layer]), n_bins
        ),
        r_c,
    )
    return ratio_encoded, ratio_encoded - ratio_deep


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    final_eval_miou: float


def _mean_breakdown(breakdowns: list[LossBreakdown]) -> dict[str, float]:
    def mean(getter) -> float:
        vals = [getter(b) for b in breakdowns if getter(b) is not None]
        return float(np.mean(vals)) if vals else 0.0

    return {
        "align": mean(lambda b: b.align.total if b.align else None),
        "dice": mean(lambda b: b.seg.dice if b.seg else None),
        "bce": mean(lambda b: b.seg.bce if b.seg else None),
        "total": mean(lambda b: b.total),
    }


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Deterministic training run; returns the checkpoint and metric history."""
    cfg = cfg.resolved()
    cfg.validate()
    if not dataset.scenes:
        raise ConfigError("dataset is empty")

    model_cfg = ModelConfig.from_spec_dict(
        dataset.spec_dict, tau=cfg.tau, use_gate=cfg.use_gate,
        use_encoder=cfg.use_encoder,
    )
    store = init_model_params(model_cfg, cfg.seed)
    state = AdamState()

    train_scenes = dataset.split("train")
    steps_per_epoch = math.ceil(len(train_scenes) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    lr_ratio = cfg.lr_backbone / cfg.lr_main

    config_snapshot = {
        "train": cfg.to_dict(),
        "model": {
            "channels": model_cfg.channels,
            "teacher_channels": model_cfg.teacher_channels,
            "embed_dim": model_cfg.embed_dim,
            "image_h": model_cfg.image_h,
            "image_w": model_cfg.image_w,
            "layers": list(model_cfg.layers),
            "tau": model_cfg.tau,
            "use_gate": model_cfg.use_gate,
            "use_encoder": model_cfg.use_encoder,
        },
        "dataset_spec": dataset.spec_dict,
    }

    history: list[dict] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def checkpoint() -> Checkpoint:
        return Checkpoint(params=store, step=state.step, config=config_snapshot)

    def persist(metrics_final: bool = False) -> None:
        if out_path is None:
            return
        save_checkpoint(out_path / "checkpoint", checkpoint())
        lines = [json.dumps(rec, sort_keys=True) for rec in history]
        (out_path / "metrics.jsonl").write_text("\n".join(lines) + "\n")

    shuffle_rng = SplitMix64(cfg.seed).split(11)
    global_step = 0
    eval_score = 0.0
    for epoch in range(cfg.epochs):
        order = list(range(len(train_scenes)))
        shuffle_rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_scenes[i] for i in order[start : start + cfg.batch_size]]
            accum_align = {n: np.zeros_like(store[n].value) for n in store.names()}
            accum_seg = {n: np.zeros_like(store[n].value) for n in store.names()}
            breakdowns = []
            for sample in batch:
                a_grads, s_grads, breakdown = collect_gradients(
                    sample, store, model_cfg, dataset.bank,
                    align_on=cfg.align_enabled, seg_on=cfg.seg_enabled,
                )
                for name in accum_align:
                    accum_align[name] += a_grads[name]
                    accum_seg[name] += s_grads[name]
                breakdowns.append(breakdown)
            scale = 1.0 / len(batch)
            for name in accum_align:
                accum_align[name] *= scale
                accum_seg[name] *= scale

            losses = _mean_breakdown(breakdowns)
            if not math.isfinite(losses["total"]):
                persist()
                raise DivergenceError(
                    "non-finite training loss", epoch=epoch, step=global_step
                )

            routed = route_gradients(
                accum_align, accum_seg, store, freeze_backbone=cfg.freeze_backbone
            )
            if cfg.grad_clip > 0.0:
                for name, grad in routed.items():
                    np.clip(grad, -cfg.grad_clip, cfg.grad_clip, out=grad)

            lr_main = lr_at(global_step, cfg.lr_main, warmup_steps, total_steps)
            rates = {
                name: lr_main * (lr_ratio if store.group_of(name) == GROUP_BACKBONE
                                 else 1.0)
                for name in store.names()
            }
            adamw_step(store, routed, rates, cfg.weight_decay, state,
                       beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)

            history.append(
                {
                    "kind": "step",
                    "epoch": epoch,
                    "step": global_step,
                    "lr": lr_main,
                    "align": losses["align"],
                    "dice": losses["dice"],
                    "bce": losses["bce"],
                    "total": losses["total"],
                    "eval_miou": None,
                }
            )
            global_step += 1

        eval_score, _ = evaluate_split(
            store, dataset, model_cfg, "eval",
            window=cfg.eval_window, stride=cfg.eval_stride,
        ) if dataset.eval_ids else (0.0, {})
        probe = dataset.scenes[dataset.eval_ids[0]] if dataset.eval_ids else \
            train_scenes[0]
        ratio_encoded, ratio_change = (
            encoded_band_ratio(store, probe, model_cfg)
            if cfg.use_encoder else (0.0, 0.0)
        )
        history.append(
            {
                "kind": "epoch",
                "epoch": epoch,
                "step": global_step - 1,
                "lr": lr_at(global_step - 1, cfg.lr_main, warmup_steps, total_steps),
                "align": None,
                "dice": None,
                "bce": None,
                "total": None,
                "eval_miou": eval_score,
                "ratio_encoded": ratio_encoded,
                "ratio_change": ratio_change,
            }
        )

    persist(metrics_final=True)
    return TrainResult(checkpoint=checkpoint(), history=history,
                       final_eval_miou=eval_score)


# -- decoder-input substitution ------------------------------------------------------


@dataclass
class SubstitutionReport:
    miou_encoded: float
    miou_teacher: float

    @property
    def delta(self) -> float:
        return abs(self.miou_encoded - self.miou_teacher)


def substitution_test(
    store: ParamStore,
    dataset: Dataset,
    model_cfg: ModelConfig,
    window: int = 8,
    stride: int = 4,
) -> SubstitutionReport:
    """Eval mIoU with the encoder output vs the teacher map as decoder input."""
    encoded_score, _ = evaluate_split(
        store, dataset, model_cfg, "eval", window, stride,
        substitute_teacher=False,
    )
    teacher_score, _ = evaluate_split(
        store, dataset, model_cfg, "eval", window, stride,
        substitute_teacher=True,
    )
    return SubstitutionReport(miou_encoded=encoded_score, miou_teacher=teacher_score)
