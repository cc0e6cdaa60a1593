"""Coloured multi-sprite scenes with per-instance ground-truth masks.

Scenes contain 1-4 sprites (square, ellipse, heart) over a flat background.
Every colour channel is drawn from a 5-value grid, sprites are rasterised
back-to-front so occlusion is resolved in the instance masks, and the whole
dataset is a pure function of (manifest, seed): record i draws from its own
generator seeded with (seed, i).

On-disk layout (one directory per split):

    out/
      manifest.json
      train/images/{index:06}.png   8-bit RGB
      train/masks/{index:06}.png    8-bit label map, 0 = background,
                                    1..4 = instances, frontmost label wins
      val/..., test/...
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

SHAPES = ("square", "ellipse", "heart")
COLOR_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
MAX_SPRITES = 4
SPLITS = ("train", "val", "test")

# Base sprite extent as a fraction of min(H, W); SpriteSpec.scale multiplies it.
BASE_SIZE_FRACTION = 0.4

# Implicit heart curve (x^2 + y^2 - 1)^3 <= x^2 y^3 spans x in [-1.139, 1.139],
# y in [-1.0, 1.236]; these constants map it into the unit box, lobes up.
_HEART_SCALE = 2.278
_HEART_Y_OFFSET = 0.118

FORMAT_VERSION = 1


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpriteSpec:
    shape: str
    scale: float  # in [0.5, 1.0], fraction of the base sprite size
    orientation: float  # radians in [0, 2*pi)
    position: tuple[float, float]  # sprite centre in normalised [0,1]^2 coords
    color: tuple[float, float, float]  # each channel from COLOR_GRID


@dataclass
class SceneRecord:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    instance_masks: list[np.ndarray]  # (H, W) bool, back-to-front, visible pixels only
    background_color: tuple[float, float, float]
    sprite_count: int

    @property
    def label_map(self) -> np.ndarray:
        """(H, W) uint8 map: 0 = background, i+1 = sprite i (frontmost wins)."""
        labels = np.zeros(self.image.shape[:2], dtype=np.uint8)
        for i, mask in enumerate(self.instance_masks):
            labels[mask] = i + 1
        return labels


@dataclass
class DatasetManifest:
    n_train: int = 50_000
    n_val: int = 10_000
    n_test: int = 10_000
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0
    format_version: int = FORMAT_VERSION

    @property
    def total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def split_counts(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def validate(self) -> None:
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.total < 1:
            raise DatasetError("manifest: split counts must be non-negative, total >= 1")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise DatasetError("manifest: image size too small to rasterise sprites")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        kwargs["image_size"] = tuple(kwargs["image_size"])
        return cls(**kwargs)


def sample_color(rng: np.random.Generator, forced_index: tuple[int, int, int] | None = None):
    idx = forced_index if forced_index is not None else rng.integers(0, len(COLOR_GRID), size=3)
    return tuple(COLOR_GRID[i] for i in idx)


def sample_sprite(rng: np.random.Generator, forced_color_index=None) -> SpriteSpec:
    shape = SHAPES[rng.integers(0, len(SHAPES))]
    scale = float(rng.uniform(0.5, 1.0))
    orientation = float(rng.uniform(0.0, 2.0 * math.pi))
    position = (float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.0)))
    color = sample_color(rng, forced_color_index)
    return SpriteSpec(shape, scale, orientation, position, color)


def _inside_unit_shape(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inside-test for the unit-sized shape in sprite-local coordinates.

    (u, v) are in sprite units where the shape fits the box [-0.5, 0.5]^2;
    v follows image rows (points down).
    """
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.5
    if shape == "ellipse":
        return (u / 0.5) ** 2 + (v / 0.3) ** 2 <= 1.0
    if shape == "heart":
        x = _HEART_SCALE * u
        y = -_HEART_SCALE * v + _HEART_Y_OFFSET
        return (x**2 + y**2 - 1.0) ** 3 - x**2 * y**3 <= 0.0
    raise DatasetError(f"unknown shape {shape!r}")


def rasterize_sprite(spec: SpriteSpec, image_size: tuple[int, int]) -> np.ndarray:
    """Full (unoccluded) coverage mask of one sprite, (H, W) bool."""
    h, w = image_size
    base = BASE_SIZE_FRACTION * min(h, w)
    size = spec.scale * base
    cy = spec.position[1] * h
    cx = spec.position[0] * w
    ys = (np.arange(h, dtype=np.float64) + 0.5)[:, None] - cy
    xs = (np.arange(w, dtype=np.float64) + 0.5)[None, :] - cx
    cos_t, sin_t = math.cos(spec.orientation), math.sin(spec.orientation)
    # rotate pixel offsets by -orientation into the sprite frame
    u = (xs * cos_t + ys * sin_t) / size
    v = (-xs * sin_t + ys * cos_t) / size
    return _inside_unit_shape(spec.shape, u, v)


def render_scene(
    sprites: list[SpriteSpec],
    background: tuple[float, float, float],
    image_size: tuple[int, int] = (64, 64),
) -> SceneRecord:
    """Rasterise sprites back-to-front; later sprites occlude earlier ones."""
    if not 1 <= len(sprites) <= MAX_SPRITES:
        raise DatasetError(f"scene must contain 1..{MAX_SPRITES} sprites, got {len(sprites)}")
    h, w = image_size
    image = np.empty((h, w, 3), dtype=np.float32)
    image[:] = np.asarray(background, dtype=np.float32)
    labels = np.zeros((h, w), dtype=np.int32)
    for i, spec in enumerate(sprites):
        raster = rasterize_sprite(spec, image_size)
        if not raster.any():
            raise DatasetError(f"sprite {i} rasterised to nothing (outside canvas?): {spec}")
        image[raster] = np.asarray(spec.color, dtype=np.float32)
        labels[raster] = i + 1
    instance_masks = [labels == i + 1 for i in range(len(sprites))]
    return SceneRecord(image, instance_masks, tuple(background), len(sprites))


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Per-record stream; generation is parallelisable across records."""
    return np.random.default_rng([seed, index])


def generate_record(seed: int, index: int, image_size: tuple[int, int]) -> SceneRecord:
    rng = record_rng(seed, index)
    count = int(rng.integers(1, MAX_SPRITES + 1))
    sprites = [sample_sprite(rng) for _ in range(count)]
    background = sample_color(rng)
    return render_scene(sprites, background, image_size)


def _save_png(path: str, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


def build_dataset(manifest: DatasetManifest, out_dir: str, extra_meta: dict | None = None) -> str:
    """Generate the full dataset under out_dir and write manifest.json."""
    manifest.validate()
    os.makedirs(out_dir, exist_ok=True)
    global_index = 0
    for split in SPLITS:
        n = manifest.split_counts()[split]
        img_dir = os.path.join(out_dir, split, "images")
        mask_dir = os.path.join(out_dir, split, "masks")
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(mask_dir, exist_ok=True)
        for i in range(n):
            record = generate_record(manifest.seed, global_index, manifest.image_size)
            img8 = np.clip(np.round(record.image * 255.0), 0, 255).astype(np.uint8)
            _save_png(os.path.join(img_dir, f"{i:06}.png"), img8)
            _save_png(os.path.join(mask_dir, f"{i:06}.png"), record.label_map)
            global_index += 1
    meta = manifest.to_json()
    if extra_meta:
        meta.update(extra_meta)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    return out_dir


def load_manifest(root: str) -> DatasetManifest:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise DatasetError(f"{root}: no manifest.json (not a dataset directory)")
    with open(path) as f:
        manifest = DatasetManifest.from_json(json.load(f))
    if manifest.format_version != FORMAT_VERSION:
        raise DatasetError(
            f"{root}: format version {manifest.format_version}, expected {FORMAT_VERSION}"
        )
    counts = manifest.split_counts()
    for split in SPLITS:
        img_dir = os.path.join(root, split, "images")
        if not os.path.isdir(img_dir):
            raise DatasetError(f"{root}: missing split directory {split}/images")
        n_found = len([p for p in os.listdir(img_dir) if p.endswith(".png")])
        if n_found != counts[split]:
            raise DatasetError(
                f"{root}: split {split} has {n_found} images, manifest says {counts[split]}"
            )
    return manifest


class SpriteDataset:
    """Read access to one split of a generated dataset.

    Images are cached eagerly as uint8; batches are served as float32 in [0, 1].
    """

    def __init__(self, root: str, split: str, load_masks: bool = True):
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        self.manifest = load_manifest(root)
        self.root = root
        self.split = split
        self.size = self.manifest.split_counts()[split]
        self._images = None
        self._masks = None
        self._load_masks = load_masks

    def __len__(self) -> int:
        return self.size

    def _read_png(self, kind: str, index: int) -> np.ndarray:
        path = os.path.join(self.root, self.split, kind, f"{index:06}.png")
        try:
            with Image.open(path) as im:
                return np.asarray(im)
        except Exception as e:  # corrupt record is a hard error with the index
            raise DatasetError(f"{self.split}[{index}]: failed to read {kind} ({e})") from e

    def _ensure_cache(self) -> None:
        if self._images is not None:
            return
        h, w = self.manifest.image_size
        images = np.empty((self.size, h, w, 3), dtype=np.uint8)
        masks = np.empty((self.size, h, w), dtype=np.uint8) if self._load_masks else None
        for i in range(self.size):
            img = self._read_png("images", i)
            if img.shape != (h, w, 3):
                raise DatasetError(f"{self.split}[{i}]: image shape {img.shape} != {(h, w, 3)}")
            images[i] = img
            if masks is not None:
                masks[i] = self._read_png("masks", i)
        self._images = images
        self._masks = masks

    def images(self, indices) -> np.ndarray:
        """(B, H, W, 3) float32 in [0, 1]."""
        self._ensure_cache()
        return self._images[indices].astype(np.float32) / 255.0

    def label_maps(self, indices) -> np.ndarray:
        self._ensure_cache()
        if self._masks is None:
            raise DatasetError("dataset opened with load_masks=False")
        return self._masks[indices]

    def sprite_counts(self, indices) -> np.ndarray:
        maps = self.label_maps(indices)
        return maps.reshape(maps.shape[0], -1).max(axis=1).astype(np.int64)


class BatchLoader:
    """Shuffled without-replacement batches within an epoch; reshuffles when the
    split cannot serve a full batch. Deterministic for a fixed seed."""

    def __init__(
        self,
        dataset: SpriteDataset,
        batch_size: int,
        seed: int = 0,
        shuffle: bool = True,
        with_annotations: bool = False,
    ):
        if batch_size < 1 or batch_size > len(dataset):
            raise DatasetError(f"batch_size {batch_size} not in [1, {len(dataset)}]")
        self.dataset = dataset
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.with_annotations = with_annotations
        self._rng = np.random.default_rng(seed)
        self.epoch = 0
        self._perm = self._new_perm()
        self._cursor = 0

    def _new_perm(self) -> np.ndarray:
        n = len(self.dataset)
        return self._rng.permutation(n) if self.shuffle else np.arange(n)

    def next_batch(self):
        if self._cursor + self.batch_size > len(self.dataset):
            self.epoch += 1
            self._perm = self._new_perm()
            self._cursor = 0
        idx = self._perm[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        images = self.dataset.images(idx)
        if not self.with_annotations:
            return images
        return images, self.dataset.label_maps(idx), self.dataset.sprite_counts(idx)

    # state round-trips through checkpoints so resumed runs replay exactly
    def get_state(self) -> dict:
        return {
            "epoch": self.epoch,
            "cursor": int(self._cursor),
            "perm": self._perm.tolist(),
            "rng": self._rng.bit_generator.state,
        }

    def set_state(self, state: dict) -> None:
        self.epoch = state["epoch"]
        self._cursor = state["cursor"]
        self._perm = np.asarray(state["perm"], dtype=np.int64)
        self._rng.bit_generator.state = state["rng"]
