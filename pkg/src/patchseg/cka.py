"""Linear centered kernel alignment between feature matrices.

Operates on [N, D] matrices whose rows are samples (flattened spatial
positions) and columns are features.  Both inputs are column-centered;
the similarity is ||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F), which lands
in [0, 1] and is invariant to orthogonal transforms and isotropic scaling
of either argument.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .tensor import Tensor, bilinear_resize


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ConfigError("linear_cka expects [N, D] matrices")
    if x.shape[0] != y.shape[0]:
        raise ConfigError(
            f"sample counts differ: {x.shape[0]} vs {y.shape[0]}"
        )
    if x.shape[0] < 2:
        raise ConfigError("linear_cka needs at least 2 samples")

    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    cross = np.linalg.norm(yc.T @ xc, "fro") ** 2
    norm_x = np.linalg.norm(xc.T @ xc, "fro")
    norm_y = np.linalg.norm(yc.T @ yc, "fro")
    if norm_x == 0.0 or norm_y == 0.0:
        raise DegenerateInputError(
            "zero-variance input: all rows identical on one side"
        )
    return float(cross / (norm_x * norm_y))


def _flatten_layer(layer: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """[C, H, W] -> [H*W, C], resampling to the target grid if needed."""
    layer = np.asarray(layer, dtype=np.float64)
    if layer.ndim != 3:
        raise ConfigError(f"expected [C, H, W] layer, got {layer.shape}")
    if layer.shape[1:] != target_hw:
        layer = bilinear_resize(Tensor(layer), *target_hw).data
    c = layer.shape[0]
    return layer.reshape(c, -1).T


def cka_heatmap(layers_a: list[np.ndarray], layers_b: list[np.ndarray]) -> np.ndarray:
    """Pairwise CKA matrix between two lists of [C, H, W] feature maps.

    Layers in ``layers_b`` are bilinearly resampled to the grid of the first
    ``layers_a`` entry so that all flattened matrices share a sample count.
    """
    if not layers_a or not layers_b:
        raise ConfigError("cka_heatmap needs non-empty layer lists")
    target_hw = tuple(np.asarray(layers_a[0]).shape[1:])
    flat_a = [_flatten_layer(layer, target_hw) for layer in layers_a]
    flat_b = [_flatten_layer(layer, target_hw) for layer in layers_b]
    out = np.zeros((len(flat_a), len(flat_b)))
    for i, xa in enumerate(flat_a):
        for j, xb in enumerate(flat_b):
            try:
                out[i, j] = linear_cka(xa, xb)
            except DegenerateInputError as exc:
                raise DegenerateInputError(f"pair ({i}, {j}): {exc}") from exc
    return out


def heatmap_to_csv_rows(matrix: np.ndarray) -> list[list[str]]:
    rows = [["i", "j", "cka"]]
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            rows.append([str(i), str(j), repr(float(matrix[i, j]))])
    return rows
