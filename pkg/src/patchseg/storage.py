"""Binary tensor format, checkpoints, and the dataset directory layout.

Tensor files ("STNS1") are:

    magic "STNS1" (5 bytes) | u8 rank | rank x u32 little-endian extents |
    row-major float64 little-endian payload

Checkpoints are directories holding a ``manifest.json`` plus one STNS1 file
per parameter; datasets are directories of per-scene subdirectories with
fixed file names plus a root manifest and the shared text-embedding bank.
Round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError, ValidationError
from .params import ParamStore
from .seghead import SegmentationMap, TextEmbeddingBank, read_segmap, write_segmap

_MAGIC = b"STNS1"
_MAX_RANK = 4

CHECKPOINT_VERSION = 1
DATASET_VERSION = 1


def write_tensor(path, array: np.ndarray) -> None:
    """Write a rank 1-4 float64 array in the STNS1 layout."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1)
    if not 1 <= array.ndim <= _MAX_RANK:
        raise ValidationError(f"tensor rank must be 1..{_MAX_RANK}, got {array.ndim}")
    if any(extent <= 0 for extent in array.shape):
        raise ValidationError(f"empty extents are not writable: shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValidationError("refusing to write non-finite values")
    header = _MAGIC + struct.pack("<B", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = array.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 6 or blob[:5] != _MAGIC:
        raise FormatError(f"bad tensor magic in {path}", offset=0)
    rank = blob[5]
    if not 1 <= rank <= _MAX_RANK:
        raise FormatError(f"unsupported rank {rank} in {path}", offset=5)
    header_end = 6 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"truncated extent table in {path}", offset=len(blob))
    shape = struct.unpack(f"<{rank}I", blob[6:header_end])
    expected = int(np.prod(shape)) * 8
    if len(blob) - header_end != expected:
        raise FormatError(
            f"payload of {len(blob) - header_end} bytes does not match shape "
            f"{shape} in {path}",
            offset=header_end,
        )
    data = np.frombuffer(blob, dtype="<f8", offset=header_end).copy()
    return data.reshape(shape)


# -- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ParamStore
    step: int
    config: dict
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, name in enumerate(ckpt.params.names()):
        param = ckpt.params[name]
        filename = f"param_{i:04d}.stns"
        value = param.value if param.value.ndim else param.value.reshape(1)
        write_tensor(root / filename, value)
        entries.append(
            {
                "name": name,
                "file": filename,
                "shape": list(param.value.shape),
                "group": param.group,
            }
        )
    manifest = {
        "format_version": ckpt.version,
        "step": ckpt.step,
        "config": ckpt.config,
        "params": entries,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    )


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise IntegrityError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(
            f"checkpoint format version {version} != supported {CHECKPOINT_VERSION}"
        )
    store = ParamStore()
    for entry in manifest["params"]:
        payload = root / entry["file"]
        if not payload.exists():
            raise IntegrityError(
                f"manifest lists {entry['name']!r} but {entry['file']} is missing"
            )
        value = read_tensor(payload).reshape(entry["shape"])
        store.register(entry["name"], value, entry["group"])
    return Checkpoint(
        params=store, step=manifest["step"], config=manifest["config"],
        version=version,
    )


def load_params_into(store: ParamStore, ckpt: Checkpoint) -> None:
    """Copy checkpoint values into an existing model store, shape-checked."""
    state = {name: ckpt.params[name].value for name in ckpt.params.names()}
    store.load_state(state)


# -- dataset layout -----------------------------------------------------------------


@dataclass
class SceneSample:
    """One training/eval example."""

    pyramid: dict[int, np.ndarray]      # layer -> [C, H, W]
    teacher: np.ndarray                 # [C_t, 2H, 2W]
    masks: np.ndarray                   # [M, H_img, W_img] binary
    gt: SegmentationMap                 # [H_img, W_img]
    names: list[str] = field(default_factory=list)


def scene_dir_name(index: int) -> str:
    return f"scene_{index:04d}"


def write_scene(root, sample: SceneSample) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for layer, fmap in sorted(sample.pyramid.items()):
        write_tensor(root / f"pyramid_{layer:02d}.stns", fmap)
    write_tensor(root / "teacher.stns", sample.teacher)
    write_tensor(root / "masks.stns", sample.masks)
    write_segmap(root / "gt.segmap", sample.gt)
    (root / "names.json").write_text(
        json.dumps(sample.names, sort_keys=True) + "\n"
    )


def read_scene(root, layers: list[int]) -> SceneSample:
    root = Path(root)
    pyramid = {}
    for layer in layers:
        payload = root / f"pyramid_{layer:02d}.stns"
        if not payload.exists():
            raise IntegrityError(f"scene {root.name} is missing layer {layer}")
        pyramid[layer] = read_tensor(payload)
    masks = read_tensor(root / "masks.stns")
    names = json.loads((root / "names.json").read_text())
    return SceneSample(
        pyramid=pyramid,
        teacher=read_tensor(root / "teacher.stns"),
        masks=masks,
        gt=read_segmap(root / "gt.segmap"),
        names=names,
    )


@dataclass
class Dataset:
    """In-memory dataset with its split lists and shared text bank."""

    scenes: list[SceneSample]
    bank: TextEmbeddingBank
    train_ids: list[int]
    eval_ids: list[int]
    spec_dict: dict

    @property
    def layers(self) -> list[int]:
        return sorted(self.scenes[0].pyramid)

    def split(self, name: str) -> list[SceneSample]:
        if name == "train":
            return [self.scenes[i] for i in self.train_ids]
        if name == "eval":
            return [self.scenes[i] for i in self.eval_ids]
        raise ConfigError(f"unknown split {name!r} (use 'train' or 'eval')")


def write_dataset(root, dataset: Dataset, seed: int) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(dataset.scenes):
        write_scene(root / scene_dir_name(i), scene)
    write_tensor(root / "text_bank.stns", dataset.bank.embeddings)
    manifest = {
        "format_version": DATASET_VERSION,
        "seed": seed,
        "spec": dataset.spec_dict,
        "scenes": len(dataset.scenes),
        "train": dataset.train_ids,
        "eval": dataset.eval_ids,
        "names": dataset.bank.names,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    )


def read_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise IntegrityError(f"no dataset manifest under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != DATASET_VERSION:
        raise IntegrityError(
            f"dataset format version {manifest.get('format_version')} != "
            f"supported {DATASET_VERSION}"
        )
    layers = manifest["spec"]["layers"]
    scenes = [
        read_scene(root / scene_dir_name(i), layers)
        for i in range(manifest["scenes"])
    ]
    bank = TextEmbeddingBank(
        names=list(manifest["names"]),
        embeddings=read_tensor(root / "text_bank.stns"),
    )
    return Dataset(
        scenes=scenes,
        bank=bank,
        train_ids=list(manifest["train"]),
        eval_ids=list(manifest["eval"]),
        spec_dict=manifest["spec"],
    )
