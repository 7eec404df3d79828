"""Labelled image datasets and the seeded synthetic benchmark generator.

Synthetic images
----------------
Every class c owns a fixed recipe drawn from the generator's rng:

* a sinusoidal grating with orientation ``theta_c`` and spatial frequency
  ``freq_c`` (cycles per image), rendered with a fresh uniform phase per
  sample so its mean over positions carries almost no class signal;
* a Gaussian blob whose centre is jittered per sample around ``centre_c``;
* a weak colour tint ``tint_c`` (3-vector), the only linearly obvious cue.

A sample is ``texture_amp * grating * colour_mix + blob_amp * blob
+ tint_amp * tint_c + noise * N(0, 1)`` clipped to [-1, 1]. Pixels are
stored already centred, i.e. in the usual ViT input range after
``(x - 0.5) / 0.5`` normalisation; uncentred inputs leave the frozen
class-token features dominated by a constant offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import container
from .errors import ConfigError, ContractError, MissingTensorError
from .rng import Rng
from .vit import VitConfig

TRAIN, VAL = 0, 1


@dataclass
class Dataset:
    images: np.ndarray  # [S, C, H, W] float32, centred pixels in [-1, 1]
    labels: np.ndarray  # [S] uint32
    split: np.ndarray  # [S] uint32, 0 = train, 1 = val
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        self.split = np.asarray(self.split, dtype=np.uint32)
        s = self.images.shape[0]
        if self.images.ndim != 4 or self.labels.shape != (s,) or self.split.shape != (s,):
            raise ContractError("images [S,C,H,W], labels [S] and split [S] must agree on S")
        if s and int(self.labels.max()) >= self.num_classes:
            raise ContractError(f"label {int(self.labels.max())} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return int(self.labels.size)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.images[mask], self.labels[mask], self.split[mask], self.num_classes)

    def train(self) -> "Dataset":
        return self.subset(self.split == TRAIN)

    def val(self) -> "Dataset":
        return self.subset(self.split == VAL)

    def check_classes_present(self) -> None:
        """Every class must appear in the train split."""
        present = np.bincount(self.train().labels, minlength=self.num_classes)
        missing = np.flatnonzero(present == 0)
        if missing.size:
            raise ContractError(f"classes {missing.tolist()} missing from the train split")

    def to_tensors(self) -> dict:
        return {
            "images": self.images,
            "labels": self.labels,
            "split": self.split,
            "num_classes": np.asarray([self.num_classes], dtype=np.uint32),
        }


def save_dataset(path, ds: Dataset) -> None:
    container.save(path, ds.to_tensors())


def load_dataset(path) -> Dataset:
    t = container.load(path)
    for name in ("images", "labels"):
        if name not in t:
            raise MissingTensorError(name)
    labels = t["labels"]
    split = t.get("split", np.zeros_like(labels))
    m = int(t["num_classes"][0]) if "num_classes" in t else int(labels.max()) + 1
    return Dataset(t["images"], labels, split, m)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    train_per_class: int = 100
    val_per_class: int = 25
    texture_amp: float = 0.5
    blob_amp: float = 0.0
    tint_amp: float = 0.0
    noise: float = 0.5


def make_synthetic_dataset(spec: SyntheticSpec, cfg: VitConfig, rng: Rng) -> Dataset:
    """Class-balanced synthetic images; samples are class-major, train block then val block per class."""
    if spec.num_classes < 2:
        raise ConfigError("synthetic dataset needs at least 2 classes")
    if spec.train_per_class < 1 or spec.val_per_class < 0:
        raise ConfigError("per-class sample counts must be positive")
    c_in, h = cfg.channels_in, cfg.image_size
    m = spec.num_classes
    recipe = rng.spawn(0)
    # orientation spread evenly with jitter, frequency from a small set
    thetas = (np.arange(m) + recipe.uniform(m)) * (math.pi / m)
    freqs = np.asarray([2.0 + recipe.below(6) for _ in range(m)], dtype=np.float64)
    mixes = 0.5 + 0.5 * recipe.uniform((m, c_in))
    centres = 0.25 + 0.5 * recipe.uniform((m, 2))
    tints = recipe.uniform((m, c_in)) * 2.0 - 1.0

    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(h) / h, indexing="ij")
    per_class = spec.train_per_class + spec.val_per_class
    images = np.empty((m * per_class, c_in, h, h), dtype=np.float32)
    labels = np.repeat(np.arange(m, dtype=np.uint32), per_class)
    split = np.tile(np.r_[np.zeros(spec.train_per_class), np.ones(spec.val_per_class)].astype(np.uint32), m)
    draws = rng.spawn(1)
    for c in range(m):
        for j in range(per_class):
            i = c * per_class + j
            phase = 2 * math.pi * draws.uniform(1)[0]
            u = xx * math.cos(thetas[c]) + yy * math.sin(thetas[c])
            grating = np.sin(2 * math.pi * freqs[c] * u + phase)
            img = spec.texture_amp * grating[None] * mixes[c][:, None, None]
            if spec.blob_amp:
                cy, cx = centres[c] + 0.08 * (draws.uniform(2) - 0.5)
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.08**2))
                img = img + spec.blob_amp * blob[None]
            img = img + spec.tint_amp * tints[c][:, None, None]
            img = img + spec.noise * draws.normal((c_in, h, h))
            images[i] = np.clip(img, -1.0, 1.0)
    return Dataset(images, labels, split, m)
