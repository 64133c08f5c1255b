"""Dataset adapters: an in-memory Gaussian-mixture task and an image-folder reader."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ClassProfile

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class ArrayDataset:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ArrayDataset":
        return ArrayDataset(self.inputs[idx], self.labels[idx])


class GaussianMixtureTask:
    """C isotropic Gaussians in ``dim`` dimensions, means on a sphere.

    Samples are reshaped to ``shape`` (default ``(1, 4, 8)``) so that CutMix
    has two spatial axes to cut along; the encoder flattens them again.
    """

    def __init__(
        self,
        num_classes: int = 10,
        dim: int = 32,
        radius: float = 3.0,
        noise: float = 1.0,
        shape: tuple[int, ...] = (1, 4, 8),
        seed: int = 0,
        num_ood_blobs: int = 4,
    ):
        if int(np.prod(shape)) != dim:
            raise ValueError(f"shape {shape} does not hold {dim} values")
        self.num_classes = num_classes
        self.dim = dim
        self.radius = radius
        self.noise = noise
        self.shape = tuple(shape)
        rng = np.random.default_rng(seed)
        directions = rng.standard_normal((num_classes + num_ood_blobs, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        self.means = radius * directions[:num_classes]
        # held-out directions, never used as a class
        self.ood_means = radius * directions[num_classes:]

    def _draw(self, means: np.ndarray, which: np.ndarray, rng) -> np.ndarray:
        x = means[which] + self.noise * rng.standard_normal((len(which), self.dim))
        return x.reshape((len(which),) + self.shape)

    def sample(self, counts, seed: int) -> ArrayDataset:
        """Class-contiguous sample: class 0 block first, then class 1, ..."""
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(self.num_classes), counts)
        return ArrayDataset(self._draw(self.means, labels, rng), labels)

    def train_set(self, profile: ClassProfile, seed: int) -> ArrayDataset:
        return self.sample(profile.counts, seed)

    def test_set(self, per_class: int, seed: int) -> ArrayDataset:
        return self.sample([per_class] * self.num_classes, seed)

    def ood_blobs(self, n: int, seed: int) -> np.ndarray:
        """Gaussian blobs around held-out sphere directions."""
        rng = np.random.default_rng(seed)
        which = rng.integers(len(self.ood_means), size=n)
        return self._draw(self.ood_means, which, rng)

    def ood_noise(self, n: int, seed: int, scale: float | None = None) -> np.ndarray:
        """Isotropic noise centred at the origin with the data's overall spread."""
        rng = np.random.default_rng(seed)
        scale = scale if scale is not None else float(np.sqrt(self.noise**2 + self.radius**2 / self.dim))
        return (scale * rng.standard_normal((n, self.dim))).reshape((n,) + self.shape)

    def ood_far(self, n: int, seed: int, factor: float = 2.0) -> np.ndarray:
        """Class samples pushed radially outward, off the training shell."""
        rng = np.random.default_rng(seed)
        which = rng.integers(self.num_classes, size=n)
        x = factor * self.means[which] + self.noise * rng.standard_normal((n, self.dim))
        return x.reshape((n,) + self.shape)

    def ood(self, kind: str, n: int, seed: int) -> np.ndarray:
        generators = {"blobs": self.ood_blobs, "noise": self.ood_noise, "far": self.ood_far}
        if kind not in generators:
            raise ValueError(f"unknown synthetic OOD kind {kind!r}; choose from {sorted(generators)}")
        return generators[kind](n, seed)


def longtail_subset(data: ArrayDataset, profile: ClassProfile, seed: int) -> ArrayDataset:
    """Subsample a balanced dataset down to ``profile`` counts, class-contiguous."""
    rng = np.random.default_rng(seed)
    idx = []
    for c, n in enumerate(profile.counts):
        members = np.flatnonzero(data.labels == c)
        if len(members) < n:
            raise ValueError(f"class {c} has {len(members)} samples, profile asks {n}")
        idx.append(np.sort(rng.choice(members, size=n, replace=False)))
    return data.subset(np.concatenate(idx))


def load_image_folder(root, class_names: list[str] | None = None) -> tuple[ArrayDataset, list[str]]:
    """Read ``root/<class>/<image>`` into float32 arrays (N, C, H, W) in [0, 1]."""
    from PIL import Image

    root = Path(root)
    if class_names is None:
        class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for label, name in enumerate(class_names):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
    if not images:
        raise ValueError(f"no images found under {root}")
    return ArrayDataset(np.stack(images), np.asarray(labels, dtype=np.int64)), class_names


def load_image_dir(root) -> np.ndarray:
    """Unlabelled images directly under ``root`` (e.g. an OOD set)."""
    from PIL import Image

    paths = sorted(p for p in Path(root).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ValueError(f"no images found under {root}")
    return np.stack(
        [np.asarray(Image.open(p).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0 for p in paths]
    )
