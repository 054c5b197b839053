"""Synthetic scene generation: feature pyramids with oracle pseudo-masks.

Everything derives from one SplitMix64 stream per (seed, scene index), so
generation is a pure function of the spec and bit-identical across
platforms (only +, -, * on float64; "normal" draws are Irwin-Hall sums).

Construction, in order:

1. Category prototypes: rows of a normal-ish matrix orthonormalized by
   modified Gram-Schmidt, scaled by ``proto_scale``.  Category M-1 is the
   background.
2. Scene geometry: rectangular/elliptical blobs for categories M-2..0 on
   the patch lattice (so patch cells and teacher cells are category-pure),
   drawn in decreasing category order.  Ground truth paints blobs in draw
   order onto the background; the later-drawn (lower-index) category wins
   overlaps, which makes a plain argmax over mask channels reproduce the
   ground truth exactly.  Foreground masks keep their full footprints
   (overlaps included); the background mask is the uncovered remainder.
3. Deep features: the deepest layer holds the patch's category prototype
   plus isotropic noise.  Shallower layers add checkerboard-modulated
   high-frequency noise whose amplitude grows toward the input, which is
   what makes the high/low-band energy ratio decrease with depth.
4. The last three pyramid layers get a fixed per-channel gain/shift
   corruption (drawn once per dataset seed) that the backbone adapters can
   learn to undo; everything downstream of the backbone sees it.
5. Teacher features: a fixed random projection of the prototypes, laid out
   on the 2x patch grid with step edges exactly on mask boundaries, and a
   small amount of noise so alignment has a well-defined nontrivial target.
6. The text bank is a second fixed projection of the same prototypes,
   row-normalized, so the patch-to-text problem is solvable by a 1x1
   projector.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GenerationError
from .rng import SplitMix64
from .seghead import SegmentationMap, TextEmbeddingBank
from .storage import SceneSample
from .tensor import Tensor, bilinear_resize

_STREAM_PROTO = 1
_STREAM_BANK = 2
_STREAM_TEACHER = 3
_STREAM_CORRUPTION = 4
_STREAM_SCENE = 1000


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for one generated scene (and the dataset-wide prototypes)."""

    seed: int = 0
    scene_index: int = 0
    patch_h: int = 8
    patch_w: int = 8
    image_h: int = 32
    image_w: int = 32
    channels: int = 16
    teacher_channels: int = 8
    embed_dim: int = 12
    categories: int = 4
    blob_count: tuple[int, int] = (3, 6)
    noise_level: float = 0.4
    hf_noise: float = 1.2
    teacher_noise: float = 0.05
    proto_scale: float = 2.0
    corrupt_gain: float = 0.5
    corrupt_shift: float = 0.4
    layers: tuple[int, ...] = (2, 4, 6, 8, 10, 12)

    def validate(self) -> None:
        if min(self.patch_h, self.patch_w, self.channels, self.teacher_channels,
               self.embed_dim) < 2:
            raise GenerationError("all extents must be >= 2")
        if self.categories < 2:
            raise GenerationError("need at least 2 categories")
        if self.image_h % (2 * self.patch_h) or self.image_w % (2 * self.patch_w):
            raise GenerationError(
                "image dims must be multiples of twice the patch dims "
                f"(got image {self.image_h}x{self.image_w}, patch "
                f"{self.patch_h}x{self.patch_w})"
            )
        if len(self.layers) < 2 or list(self.layers) != sorted(set(self.layers)):
            raise GenerationError(f"layers must be sorted and unique: {self.layers}")
        if self.blob_count[0] > self.blob_count[1] or self.blob_count[0] < 1:
            raise GenerationError(f"bad blob count range {self.blob_count}")
        if self.blob_count[1] < self.categories - 1:
            raise GenerationError(
                f"{self.categories} categories exceed blob capacity "
                f"{self.blob_count[1]}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blob_count"] = list(self.blob_count)
        d["layers"] = list(self.layers)
        return d

    @staticmethod
    def from_dict(d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["blob_count"] = tuple(d["blob_count"])
        d["layers"] = tuple(d["layers"])
        return SyntheticSpec(**d)

    @property
    def adapter_layers(self) -> tuple[int, ...]:
        return tuple(self.layers[-3:])


def _gram_schmidt_rows(rows: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt orthonormalization of matrix rows."""
    out = rows.copy()
    for i in range(out.shape[0]):
        for j in range(i):
            out[i] -= (out[i] @ out[j]) * out[j]
        norm = np.sqrt(out[i] @ out[i])
        if norm < 1e-9:
            raise GenerationError("degenerate prototype draw")
        out[i] /= norm
    return out


def category_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """[M, C] orthonormal prototype rows scaled by proto_scale."""
    rng = SplitMix64(spec.seed).split(_STREAM_PROTO)
    raw = rng.normals((spec.categories, spec.channels))
    return _gram_schmidt_rows(raw) * spec.proto_scale


def channel_corruption(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Dataset-wide per-channel (gain, shift), the same for every layer.

    Sharing one corruption across layers keeps the depthwise spectral
    ordering intact (every layer's spectrum is reweighted identically up to
    its own noise realization) while still giving the backbone adapters a
    systematic error to undo on the layers they cover.
    """
    rng = SplitMix64(spec.seed).split(_STREAM_CORRUPTION)
    gain = 1.0 + rng.uniforms((spec.channels,), -spec.corrupt_gain,
                              spec.corrupt_gain)
    shift = rng.uniforms((spec.channels,), -spec.corrupt_shift,
                         spec.corrupt_shift)
    return gain, shift


@dataclass
class _Blob:
    category: int
    center_y: float
    center_x: float
    radius_y: float
    radius_x: float
    elliptical: bool

    def patch_footprint(self, patch_h: int, patch_w: int) -> np.ndarray:
        ys = np.arange(patch_h)[:, None]
        xs = np.arange(patch_w)[None, :]
        if self.elliptical:
            return ((ys - self.center_y) / self.radius_y) ** 2 + (
                (xs - self.center_x) / self.radius_x
            ) ** 2 <= 1.0
        return (np.abs(ys - self.center_y) <= self.radius_y) & (
            np.abs(xs - self.center_x) <= self.radius_x
        )


def _draw_blobs(spec: SyntheticSpec, rng: SplitMix64) -> list[_Blob]:
    """Foreground blobs, ordered so lower category indices are drawn later."""
    count = rng.randint(spec.blob_count[0], spec.blob_count[1] + 1)
    count = max(count, spec.categories - 1)
    cats = list(range(spec.categories - 1))
    for _ in range(count - len(cats)):
        cats.append(rng.randint(0, spec.categories - 1))
    blobs = []
    for cat in cats:
        blobs.append(
            _Blob(
                category=cat,
                center_y=rng.uniform(1.0, spec.patch_h - 1.0),
                center_x=rng.uniform(1.0, spec.patch_w - 1.0),
                radius_y=rng.uniform(1.0, spec.patch_h / 2.5),
                radius_x=rng.uniform(1.0, spec.patch_w / 2.5),
                elliptical=rng.uniform() < 0.5,
            )
        )
    blobs.sort(key=lambda b: -b.category)
    return blobs


def gen_scene(spec: SyntheticSpec) -> SceneSample:
    """Deterministic scene: pyramid, teacher map, pseudo-masks, ground truth."""
    spec.validate()
    rng = SplitMix64(spec.seed).split(_STREAM_SCENE + spec.scene_index)
    protos = category_prototypes(spec)
    background = spec.categories - 1

    # patch-lattice geometry; every image pixel of a patch shares a category
    patch_gt = np.full((spec.patch_h, spec.patch_w), background, dtype=np.int64)
    patch_masks = np.zeros((spec.categories, spec.patch_h, spec.patch_w), dtype=bool)
    for blob in _draw_blobs(spec, rng):
        footprint = blob.patch_footprint(spec.patch_h, spec.patch_w)
        patch_gt[footprint] = blob.category
        patch_masks[blob.category] |= footprint
    patch_masks[background] = patch_gt == background

    scale_y = spec.image_h // spec.patch_h
    scale_x = spec.image_w // spec.patch_w
    gt = np.repeat(np.repeat(patch_gt, scale_y, axis=0), scale_x, axis=1)
    masks = np.repeat(
        np.repeat(patch_masks.astype(np.float64), scale_y, axis=1), scale_x, axis=2
    )

    # deepest layer: prototype of the patch category plus smooth noise.  The
    # noise is drawn at half resolution and bilinearly upsampled so its energy
    # sits in the low band, leaving the high band to the explicit
    # perturbation ladder below.
    deep = protos[patch_gt].transpose(2, 0, 1).astype(np.float64).copy()
    coarse = rng.normals((spec.channels, spec.patch_h // 2, spec.patch_w // 2))
    deep += spec.noise_level * bilinear_resize(
        Tensor(coarse), spec.patch_h, spec.patch_w
    ).data

    # One shared high-pass noise field (white minus its down-up smoothing)
    # with geometrically decaying amplitude toward depth: adjacent layers
    # then differ by a fixed high-band power ratio instead of a
    # realization-dependent one, keeping the band ratio strictly monotone.
    white = rng.normals(deep.shape)
    smooth = bilinear_resize(
        bilinear_resize(Tensor(white), spec.patch_h // 2, spec.patch_w // 2),
        spec.patch_h,
        spec.patch_w,
    ).data
    hf_field = white - smooth
    pyramid: dict[int, np.ndarray] = {}
    for position, layer in enumerate(reversed(spec.layers)):
        if position == 0:
            pyramid[layer] = deep.copy()
        else:
            amplitude = spec.hf_noise * 0.65 ** (len(spec.layers) - 1 - position)
            pyramid[layer] = deep + amplitude * hf_field

    gain, shift = channel_corruption(spec)
    for layer in spec.layers:
        pyramid[layer] = pyramid[layer] * gain[:, None, None] + shift[:, None, None]

    # teacher: fixed projection of prototypes on the 2x grid, sharp edges
    teacher_proj = SplitMix64(spec.seed).split(_STREAM_TEACHER).normals(
        (spec.teacher_channels, spec.channels)
    ) / np.sqrt(spec.channels)
    teacher_gt = np.repeat(np.repeat(patch_gt, 2, axis=0), 2, axis=1)
    teacher = (protos[teacher_gt] @ teacher_proj.T).transpose(2, 0, 1).copy()
    if spec.teacher_noise > 0.0:
        teacher += spec.teacher_noise * rng.normals(teacher.shape)

    return SceneSample(
        pyramid=pyramid,
        teacher=teacher,
        masks=masks,
        gt=SegmentationMap(labels=gt, num_categories=spec.categories),
        names=category_names(spec.categories),
    )


def category_names(count: int) -> list[str]:
    return [f"class_{i:02d}" for i in range(count)]


def gen_text_bank(spec: SyntheticSpec) -> TextEmbeddingBank:
    """Unit-norm projections of the category prototypes into the text space."""
    spec.validate()
    protos = category_prototypes(spec)
    proj = SplitMix64(spec.seed).split(_STREAM_BANK).normals(
        (spec.embed_dim, spec.channels)
    ) / np.sqrt(spec.channels)
    embedded = protos @ proj.T
    embedded /= np.sqrt((embedded * embedded).sum(axis=1, keepdims=True))
    return TextEmbeddingBank(names=category_names(spec.categories),
                             embeddings=embedded)


def gen_dataset(spec: SyntheticSpec, train_scenes: int, eval_scenes: int) -> "Dataset":
    """Train/eval scene lists sharing one prototype set and text bank."""
    from dataclasses import replace

    from .storage import Dataset

    if train_scenes < 1 or eval_scenes < 0:
        raise GenerationError("need at least one training scene")
    total = train_scenes + eval_scenes
    scenes = [gen_scene(replace(spec, scene_index=i)) for i in range(total)]
    return Dataset(
        scenes=scenes,
        bank=gen_text_bank(spec),
        train_ids=list(range(train_scenes)),
        eval_ids=list(range(train_scenes, total)),
        spec_dict=spec.to_dict(),
    )
