"""SyntheticShapes: procedurally rendered segmentation scenes.

Foreground classes are textured shapes.  Classes listed together in
``shared_texture_pairs`` are drawn with the same colour and stripe pattern,
so only the global outline of the object tells them apart.  With
probability ``small_object_prob`` a small object of the last class is
placed on top of one of the large shapes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .imageio import ensure_dir, image_to_u8, read_pgm, read_ppm, u8_to_image, write_pgm, write_ppm
from .rng import stream
from .tensor import Tensor

MANIFEST_FORMAT = "dignet-synthetic-v1"
VAL_SEED_OFFSET = 1_000_000

SHAPE_KINDS = ("square", "disc", "triangle", "ellipse")


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    num_classes: int = 6
    shapes_per_image: tuple = (1, 3)
    shared_texture_pairs: tuple = ((1, 2), (3, 4))
    small_object_prob: float = 0.5
    noise: float = 0.06
    large_size: tuple = (0.22, 0.38)  # shape radius as a fraction of image size
    small_size: tuple = (0.05, 0.08)
    foreground_classes: Optional[tuple] = None  # restrict the large-shape classes

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(self.shapes_per_image))
        object.__setattr__(self, "shared_texture_pairs",
                           tuple(tuple(p) for p in self.shared_texture_pairs))
        object.__setattr__(self, "large_size", tuple(self.large_size))
        object.__setattr__(self, "small_size", tuple(self.small_size))
        if self.foreground_classes is not None:
            object.__setattr__(self, "foreground_classes", tuple(self.foreground_classes))
        if self.num_classes < 2:
            raise ValueError("need background plus at least one foreground class")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError("shapes_per_image must satisfy 1 <= min <= max")
        for pair in self.shared_texture_pairs:
            if any(not 1 <= c < self.num_classes for c in pair):
                raise ValueError(f"texture pair {pair} names an invalid class")
        for c in self.large_classes:
            if not 1 <= c < self.num_classes:
                raise ValueError(f"foreground class {c} out of range")
        if self.image_size < 8:
            raise ValueError("image_size too small")

    @property
    def small_class(self) -> Optional[int]:
        return self.num_classes - 1 if self.num_classes >= 3 else None

    @property
    def large_classes(self) -> tuple:
        if self.foreground_classes is not None:
            return self.foreground_classes
        small = self.small_class
        return tuple(c for c in range(1, self.num_classes) if c != small)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k == "shared_texture_pairs" else
                    list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


def shape_kind(cls_id: int) -> str:
    return SHAPE_KINDS[(cls_id - 1) % len(SHAPE_KINDS)]


def _texture_table(spec: SyntheticSpec) -> dict:
    """Fixed (colour, angle, period) per class; texture-shared pairs coincide."""
    owner = {c: c for c in range(1, spec.num_classes)}
    for pair in spec.shared_texture_pairs:
        for c in pair[1:]:
            owner[c] = pair[0]
    table = {}
    for c in range(1, spec.num_classes):
        o = owner[c]
        hue = (0.13 + 0.61803398875 * o) % 1.0
        table[c] = (_hue_to_rgb(hue), (o * 0.7) % math.pi, 3.0 + (o % 3))
    return table


def _hue_to_rgb(h: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return 0.9 - 0.7 * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def _shape_mask(kind: str, xx, yy, cx, cy, r, angle) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    if kind == "disc":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        s = r * 0.85
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if kind == "ellipse":
        return (u / r) ** 2 + (v / (0.55 * r)) ** 2 <= 1.0
    if kind == "triangle":
        inside = np.ones_like(dx, dtype=bool)
        for k in range(3):
            a = angle + 2 * math.pi * k / 3
            inside &= (math.cos(a) * dx + math.sin(a) * dy) <= 0.5 * r * 1.2
        return inside
    raise ValueError(kind)


def render(spec: SyntheticSpec, objects: list, rng: np.random.Generator):
    """Rasterize ``objects`` (cls, cx, cy, r, angle) in order; later ones occlude."""
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    textures = _texture_table(spec)
    bg = 0.35 + 0.2 * rng.random(3)
    bg_grain = rng.standard_normal((n // 8 + 1, n // 8 + 1))
    grain = np.kron(bg_grain, np.ones((8, 8)))[:n, :n]
    image = bg[:, None, None] * (1.0 + 0.08 * grain)[None]
    labels = np.zeros((n, n), dtype=np.int64)
    for cls_id, cx, cy, r, angle in objects:
        mask = _shape_mask(shape_kind(cls_id), xx, yy, cx, cy, r, angle)
        colour, stripe_angle, period = textures[cls_id]
        phase = (math.cos(stripe_angle) * xx + math.sin(stripe_angle) * yy) * (2 * math.pi / period)
        pattern = 0.8 + 0.2 * np.sign(np.sin(phase))
        tex = colour[:, None, None] * pattern[None]
        image = np.where(mask[None], tex, image)
        labels[mask] = cls_id
    if spec.noise > 0:
        image = image + spec.noise * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)
    # quantize so that images survive 8-bit PPM storage unchanged
    image = np.rint(image * 255.0).astype(np.float32) / np.float32(255.0)
    return image, labels


def sample_objects(spec: SyntheticSpec, rng: np.random.Generator) -> list:
    n = spec.image_size
    lo, hi = spec.shapes_per_image
    count = int(rng.integers(lo, hi + 1))
    objects = []
    classes = spec.large_classes
    for _ in range(count):
        c = int(classes[rng.integers(len(classes))])
        r = n * rng.uniform(*spec.large_size)
        cx, cy = rng.uniform(0.2 * n, 0.8 * n, size=2)
        objects.append((c, float(cx), float(cy), float(r), float(rng.uniform(0, math.pi))))
    small = spec.small_class
    if small is not None and spec.foreground_classes is None \
            and rng.random() < spec.small_object_prob:
        host = objects[int(rng.integers(len(objects)))]
        r = n * rng.uniform(*spec.small_size)
        off = rng.uniform(-0.5, 0.5, size=2) * host[3]
        objects.append((small, host[1] + float(off[0]), host[2] + float(off[1]), float(r), 0.0))
    return objects


def generate_sample(spec: SyntheticSpec, seed: int):
    """Return ``(image, labels)``: a 1x3xHxW tensor in [0, 1] and an HxW int map."""
    rng = stream(seed, "data.sample")
    objects = sample_objects(spec, rng)
    image, labels = render(spec, objects, rng)
    return Tensor(image[None]), labels


@dataclass
class Split:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N, H, W) int64
    seeds: tuple = ()

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Dataset:
    train: Split
    val: Split
    num_classes: int
    spec: Optional[SyntheticSpec] = None
    meta: dict = field(default_factory=dict)


def make_split(spec: SyntheticSpec, seeds) -> Split:
    seeds = tuple(int(s) for s in seeds)
    n = spec.image_size
    images = np.empty((len(seeds), 3, n, n), dtype=np.float32)
    labels = np.empty((len(seeds), n, n), dtype=np.int64)
    for k, s in enumerate(seeds):
        img, lab = generate_sample(spec, s)
        images[k] = img.data[0]
        labels[k] = lab
    return Split(images, labels, seeds)


def split_seeds(n_train: int, n_val: int, train_start: int = 0,
                val_start: int = VAL_SEED_OFFSET) -> tuple[range, range]:
    train = range(train_start, train_start + n_train)
    val = range(val_start, val_start + n_val)
    if set(train) & set(val):
        raise ValueError("train and validation seed ranges overlap")
    return train, val


def make_dataset(spec: SyntheticSpec, n_train: int, n_val: int, train_start: int = 0,
                 val_start: int = VAL_SEED_OFFSET) -> Dataset:
    tr, va = split_seeds(n_train, n_val, train_start, val_start)
    return Dataset(make_split(spec, tr), make_split(spec, va), spec.num_classes, spec)


def write_dataset(out_dir, spec: SyntheticSpec, n_train: int, n_val: int,
                  train_start: int = 0, val_start: int = VAL_SEED_OFFSET) -> dict:
    """Write ``images/NNNNNN.ppm``, ``labels/NNNNNN.pgm`` and ``manifest.json``."""
    if spec.num_classes > 255:
        raise ValueError("PGM label maps hold at most 255 classes")
    tr, va = split_seeds(n_train, n_val, train_start, val_start)
    ensure_dir(os.path.join(out_dir, "images"))
    ensure_dir(os.path.join(out_dir, "labels"))
    index = 0
    for seeds in (tr, va):
        for s in seeds:
            img, lab = generate_sample(spec, s)
            write_ppm(os.path.join(out_dir, "images", f"{index:06d}.ppm"), image_to_u8(img.data[0]))
            write_pgm(os.path.join(out_dir, "labels", f"{index:06d}.pgm"), lab.astype(np.uint8))
            index += 1
    manifest = {
        "format": MANIFEST_FORMAT,
        "spec": spec.to_dict(),
        "num_classes": spec.num_classes,
        "image_size": spec.image_size,
        "splits": {
            "train": {"indices": [0, n_train], "seeds": [tr.start, tr.stop]},
            "val": {"indices": [n_train, n_train + n_val], "seeds": [va.start, va.stop]},
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(path) -> Dataset:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: unsupported dataset format {manifest.get('format')!r}")
    splits = {}
    for name in ("train", "val"):
        lo, hi = manifest["splits"][name]["indices"]
        s0, s1 = manifest["splits"][name]["seeds"]
        imgs, labs = [], []
        for idx in range(lo, hi):
            imgs.append(u8_to_image(read_ppm(os.path.join(path, "images", f"{idx:06d}.ppm"))))
            labs.append(read_pgm(os.path.join(path, "labels", f"{idx:06d}.pgm")).astype(np.int64))
        size = manifest["image_size"]
        splits[name] = Split(
            np.stack(imgs) if imgs else np.empty((0, 3, size, size), np.float32),
            np.stack(labs) if labs else np.empty((0, size, size), np.int64),
            tuple(range(s0, s1)))
    spec = SyntheticSpec.from_dict(manifest["spec"])
    return Dataset(splits["train"], splits["val"], manifest["num_classes"], spec, manifest)
