"""Text-conditioned mask prediction and evaluation.

Scores are plain cosine similarities between per-location feature vectors
and a bank of unit-norm category embeddings; labels are the per-location
argmax with ties resolved to the lowest category index.  Sliding-window
inference accumulates per-window score volumes and averages by coverage,
and mIoU follows the usual confusion-matrix bookkeeping with an ignore
label and classes absent from both maps excluded from the mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, FormatError, ValidationError


@dataclass
class TextEmbeddingBank:
    """Category names with matching unit-norm embedding rows."""

    names: list[str]
    embeddings: np.ndarray  # [M, D]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if len(self.names) != self.embeddings.shape[0]:
            raise ValidationError(
                f"{len(self.names)} names vs {self.embeddings.shape[0]} embeddings"
            )
        if len(set(self.names)) != len(self.names):
            raise ValidationError("duplicate category names in text bank")
        norms = np.linalg.norm(self.embeddings, axis=1)
        bad = np.where(np.abs(norms - 1.0) > 1e-6)[0]
        if bad.size:
            raise ValidationError(
                f"embedding row {bad[0]} has norm {norms[bad[0]]:.8f}, expected 1"
            )

    @property
    def num_categories(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class ScoreVolume:
    """Per-category cosine similarity map, entries in [-1, 1]."""

    values: np.ndarray  # [M, H, W]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValidationError(f"score volume must be [M, H, W], got {self.values.shape}")
        if np.any(self.values < -1.0 - 1e-9) or np.any(self.values > 1.0 + 1e-9):
            raise ValidationError("cosine scores out of [-1, 1] range")


@dataclass
class SegmentationMap:
    """Integer label per pixel, labels in [0, num_categories)."""

    labels: np.ndarray  # [H, W] integer
    num_categories: int = field(default=0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValidationError(f"label map must be 2D, got {self.labels.shape}")
        if self.num_categories:
            if self.labels.min() < 0 or self.labels.max() >= self.num_categories:
                raise ValidationError(
                    f"labels outside [0, {self.num_categories}): "
                    f"range [{self.labels.min()}, {self.labels.max()}]"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def patch_text_similarity(features: np.ndarray, bank: TextEmbeddingBank) -> ScoreVolume:
    """Cosine similarity between every [D] feature column and every bank row."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[0] != bank.dim:
        raise ConfigError(
            f"features must be [{bank.dim}, H, W] to match the bank, got {features.shape}"
        )
    norms = np.sqrt(np.sum(features * features, axis=0))
    zero = np.argwhere(norms == 0.0)
    if zero.size:
        h, w = zero[0]
        raise DegenerateInputError(f"zero-norm feature vector at location ({h}, {w})")
    normalized = features / norms[None]
    scores = np.einsum("md,dhw->mhw", bank.embeddings, normalized)
    return ScoreVolume(values=np.clip(scores, -1.0, 1.0))


def assign_labels(scores: ScoreVolume) -> SegmentationMap:
    """Per-location argmax over categories; ties go to the lowest index."""
    labels = np.argmax(scores.values, axis=0)
    return SegmentationMap(labels=labels, num_categories=scores.values.shape[0])


def _window_starts(extent: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def sliding_window_infer(
    features: np.ndarray,
    bank: TextEmbeddingBank,
    window: int,
    stride: int,
) -> ScoreVolume:
    """Score overlapping windows and average each location by its coverage.

    The last window along each axis is clamped to the boundary so every
    location is covered at least once.
    """
    features = np.asarray(features, dtype=np.float64)
    _, h, w = features.shape
    if window > min(h, w):
        raise ConfigError(f"window {window} exceeds feature dims ({h}, {w})")
    if not 1 <= stride <= window:
        raise ConfigError(f"stride must be in [1, window], got {stride}")

    acc = np.zeros((bank.num_categories, h, w))
    coverage = np.zeros((h, w))
    for ys in _window_starts(h, window, stride):
        for xs in _window_starts(w, window, stride):
            patch = features[:, ys : ys + window, xs : xs + window]
            scores = patch_text_similarity(patch, bank)
            acc[:, ys : ys + window, xs : xs + window] += scores.values
            coverage[ys : ys + window, xs : xs + window] += 1.0
    acc /= coverage[None]
    return ScoreVolume(values=np.clip(acc, -1.0, 1.0))


def miou(
    pred: SegmentationMap,
    gt: SegmentationMap,
    num_classes: int,
    ignore_label: int = -1,
) -> tuple[float, dict[int, float]]:
    """Mean IoU over classes present in either map, skipping ignored pixels."""
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    keep = gt.labels != ignore_label
    p = pred.labels[keep]
    g = gt.labels[keep]
    if np.any((g < 0) | (g >= num_classes)):
        raise ValidationError("gt labels outside the class universe")
    if np.any((p < 0) | (p >= num_classes)):
        raise ValidationError("pred labels outside the class universe")

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (p, g), 1)
    inter = np.diag(confusion)
    pred_count = confusion.sum(axis=1)
    gt_count = confusion.sum(axis=0)
    union = pred_count + gt_count - inter

    table: dict[int, float] = {}
    for k in range(num_classes):
        if union[k] > 0:
            table[k] = float(inter[k] / union[k])
    mean = float(np.mean(list(table.values()))) if table else 0.0
    return mean, table


# -- serialization ----------------------------------------------------------------

_SEGMAP_MAGIC = "SEGMAP1"


def write_segmap(path, seg: SegmentationMap) -> None:
    """Plain-text map: magic line, 'H W' line, then one row of labels per line."""
    h, w = seg.shape
    lines = [_SEGMAP_MAGIC, f"{h} {w}"]
    for row in seg.labels:
        lines.append(" ".join(str(int(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_segmap(path) -> SegmentationMap:
    with open(path) as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0] != _SEGMAP_MAGIC:
        raise FormatError(f"bad segmap magic in {path}", offset=0)
    try:
        h, w = (int(v) for v in lines[1].split())
        rows = [[int(v) for v in line.split()] for line in lines[2 : 2 + h]]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed segmap body in {path}") from exc
    labels = np.array(rows, dtype=np.int64)
    if labels.shape != (h, w):
        raise FormatError(f"segmap body {labels.shape} does not match header ({h}, {w})")
    return SegmentationMap(labels=labels)


def segmap_to_json(seg: SegmentationMap) -> str:
    return json.dumps(
        {"height": seg.shape[0], "width": seg.shape[1],
         "labels": seg.labels.tolist()},
        sort_keys=True,
        separators=(",", ":"),
    )


def iou_table_to_csv_rows(table: dict[int, float], names: list[str] | None = None
                          ) -> list[list[str]]:
    rows = [["class", "name", "iou"]]
    for k in sorted(table):
        name = names[k] if names and k < len(names) else ""
        rows.append([str(k), name, repr(table[k])])
    return rows
