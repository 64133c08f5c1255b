"""Long-tailed class profiles, anti-long-tailed sampling and Mixup/CutMix batches.

Everything here is plain numpy and deterministic given a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

MIX_METHODS = ("mixup", "cutmix")


@dataclass(frozen=True)
class ClassProfile:
    counts: tuple[int, ...]
    priors: tuple[float, ...]
    num_classes: int
    imbalance_ratio: float

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "ClassProfile":
        counts = tuple(int(c) for c in counts)
        if not counts:
            raise ValueError("counts must be non-empty")
        if min(counts) < 1:
            raise ValueError(f"every class needs at least one sample, got {counts}")
        return cls(
            counts=counts,
            priors=tuple(compute_prior(counts)),
            num_classes=len(counts),
            imbalance_ratio=max(counts) / min(counts),
        )

    @property
    def total(self) -> int:
        return sum(self.counts)

    def offsets(self) -> np.ndarray:
        """Start index of each class block in a class-contiguous layout."""
        return np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64)

    def labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_classes), self.counts)

    def to_manifest(self, seed: int | None = None) -> dict:
        return {
            "counts": {str(c): n for c, n in enumerate(self.counts)},
            "imbalance_ratio": self.imbalance_ratio,
            "seed": seed,
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "ClassProfile":
        counts = manifest["counts"]
        return cls.from_counts([counts[str(c)] for c in range(len(counts))])


def make_longtail_profile(num_classes: int, n_max: int, imbalance_ratio: float) -> ClassProfile:
    """Exponential long-tail profile: ``n_j = round(n_max * IR^(-j/(C-1)))``."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if imbalance_ratio < 1:
        raise ValueError("imbalance_ratio must be >= 1")
    counts = [
        int(round(n_max * imbalance_ratio ** (-j / (num_classes - 1))))
        for j in range(num_classes)
    ]
    if min(counts) < 1:
        raise ValueError(
            f"n_max={n_max} with IR={imbalance_ratio} rounds the tail class to 0 samples"
        )
    return ClassProfile.from_counts(counts)


def compute_prior(counts: Sequence[int]) -> np.ndarray:
    counts = list(counts)
    if not counts:
        raise ValueError("counts must be non-empty")
    if any(c <= 0 for c in counts):
        raise ValueError("counts must all be positive")
    total = sum(int(c) for c in counts)
    # exact rationals, then a single rounding per entry
    return np.array([float(Fraction(int(c), total)) for c in counts])


class AntiLongTailSampler:
    """Infinite stream of sample indices drawn with class probability ~ 1/n_c.

    Within a class the index is uniform. By default indices address a
    class-contiguous layout (class 0 first); pass ``labels`` to sample from an
    arbitrary dataset instead.
    """

    def __init__(self, profile: ClassProfile, seed: int, labels: np.ndarray | None = None):
        self.profile = profile
        counts = np.asarray(profile.counts, dtype=np.float64)
        inv = 1.0 / counts
        self.class_probs = inv / inv.sum()
        self.rng = np.random.default_rng(seed)
        if labels is None:
            self._members = None
            self._offsets = profile.offsets()
        else:
            labels = np.asarray(labels)
            self._members = [np.flatnonzero(labels == c) for c in range(profile.num_classes)]
            if any(len(m) != n for m, n in zip(self._members, profile.counts)):
                raise ValueError("labels do not match the profile counts")

    def draw_classes(self, n: int) -> np.ndarray:
        return self.rng.choice(self.profile.num_classes, size=n, p=self.class_probs)

    def draw(self, n: int) -> np.ndarray:
        classes = self.draw_classes(n)
        counts = np.asarray(self.profile.counts)
        within = (self.rng.random(n) * counts[classes]).astype(np.int64)
        if self._members is None:
            return self._offsets[classes] + within
        return np.array([self._members[c][w] for c, w in zip(classes, within)], dtype=np.int64)

    def __iter__(self) -> Iterator[int]:
        while True:
            yield int(self.draw(1)[0])


def anti_longtail_sampler(
    profile: ClassProfile, seed: int, labels: np.ndarray | None = None
) -> AntiLongTailSampler:
    return AntiLongTailSampler(profile, seed, labels)


@dataclass
class MixedSample:
    input: np.ndarray
    soft_label: np.ndarray
    lam: float
    src_i: int
    src_j: int
    method: str
    # (y1, y2, x1, x2) of the pasted region, cutmix only
    box: tuple[int, int, int, int] | None = None


def two_hot(y_i: int, y_j: int, lam: float, num_classes: int) -> np.ndarray:
    label = np.zeros(num_classes)
    label[y_i] += lam
    label[y_j] += 1.0 - lam
    return label


def _check_lam(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    return lam


def mixup(x_i, y_i, x_j, y_j, lam, num_classes, src_i=0, src_j=0) -> MixedSample:
    lam = _check_lam(lam)
    x_i, x_j = np.asarray(x_i), np.asarray(x_j)
    if x_i.shape != x_j.shape:
        raise ValueError(f"shape mismatch: {x_i.shape} vs {x_j.shape}")
    return MixedSample(
        input=lam * x_i + (1.0 - lam) * x_j,
        soft_label=two_hot(y_i, y_j, lam, num_classes),
        lam=lam,
        src_i=src_i,
        src_j=src_j,
        method="mixup",
    )


def cutmix_box(height, width, lam_target, rng, center=None):
    """Square-root rule box, clipped to the image. Returns (y1, y2, x1, x2)."""
    cut_rat = math.sqrt(1.0 - lam_target)
    cut_h, cut_w = int(height * cut_rat), int(width * cut_rat)
    if center is None:
        cy, cx = int(rng.integers(height)), int(rng.integers(width))
    else:
        cy, cx = center
    y1 = int(np.clip(cy - cut_h // 2, 0, height))
    y2 = int(np.clip(cy + cut_h // 2 + cut_h % 2, 0, height))
    x1 = int(np.clip(cx - cut_w // 2, 0, width))
    x2 = int(np.clip(cx + cut_w // 2 + cut_w % 2, 0, width))
    return y1, y2, x1, x2


def cutmix(
    x_i, y_i, x_j, y_j, lam_target, num_classes, seed=None, src_i=0, src_j=0, center=None, rng=None
) -> MixedSample:
    """Paste a box of ``x_j`` into ``x_i``; the last two axes are spatial.

    The stored ``lam`` is recomputed from the clipped box, so it can differ
    from ``lam_target`` near the border.
    """
    lam_target = _check_lam(lam_target)
    x_i, x_j = np.asarray(x_i), np.asarray(x_j)
    if x_i.ndim < 2:
        raise ValueError("cutmix needs spatial inputs (at least 2 dims, H and W last)")
    if x_i.shape != x_j.shape:
        raise ValueError(f"shape mismatch: {x_i.shape} vs {x_j.shape}")
    if rng is None:
        rng = np.random.default_rng(seed)
    height, width = x_i.shape[-2:]
    y1, y2, x1, x2 = cutmix_box(height, width, lam_target, rng, center)
    out = x_i.copy()
    out[..., y1:y2, x1:x2] = x_j[..., y1:y2, x1:x2]
    lam = 1.0 - (y2 - y1) * (x2 - x1) / (height * width)
    return MixedSample(
        input=out,
        soft_label=two_hot(y_i, y_j, lam, num_classes),
        lam=lam,
        src_i=src_i,
        src_j=src_j,
        method="cutmix",
        box=(y1, y2, x1, x2),
    )


@dataclass
class TrainBatch:
    id_inputs: np.ndarray
    id_labels: np.ndarray
    anti_inputs: np.ndarray
    anti_labels: np.ndarray
    mixed_mixup: list[MixedSample] = field(default_factory=list)
    mixed_cutmix: list[MixedSample] = field(default_factory=list)
    pairing: list[tuple[int, int]] = field(default_factory=list)
    num_classes: int = 0

    def __len__(self) -> int:
        return len(self.id_labels)

    @property
    def has_mixed(self) -> bool:
        return bool(self.mixed_mixup)

    def stacked_inputs(self, with_mixed: bool = True) -> np.ndarray:
        """Forward layout: ``[ID, anti, mixup, cutmix]`` (or ``[ID]`` only)."""
        if not with_mixed:
            return self.id_inputs
        return np.concatenate(
            [
                self.id_inputs,
                self.anti_inputs,
                np.stack([m.input for m in self.mixed_mixup]),
                np.stack([m.input for m in self.mixed_cutmix]),
            ]
        )

    def stacked_targets(self, with_mixed: bool = True) -> np.ndarray:
        eye = np.eye(self.num_classes)
        id_t = eye[self.id_labels]
        if not with_mixed:
            return id_t
        return np.concatenate(
            [
                id_t,
                eye[self.anti_labels],
                np.stack([m.soft_label for m in self.mixed_mixup]),
                np.stack([m.soft_label for m in self.mixed_cutmix]),
            ]
        )


def build_training_batch(
    id_batch: tuple[np.ndarray, np.ndarray],
    anti_batch: tuple[np.ndarray, np.ndarray],
    alpha: float,
    seed,
    num_classes: int,
    with_mixed: bool = True,
) -> TrainBatch:
    """Pair ID position p with anti position p and mix each pair both ways.

    One ``lam`` per pair is drawn from Beta(alpha, alpha); the same value is
    the mixup coefficient and the cutmix target area.
    """
    x_in, y_in = (np.asarray(a) for a in id_batch)
    x_anti, y_anti = (np.asarray(a) for a in anti_batch)
    if len(x_in) != len(x_anti) or len(y_in) != len(y_anti) or len(x_in) != len(y_in):
        raise ValueError(f"batch lengths differ: {len(x_in)} ID vs {len(x_anti)} anti")
    batch = TrainBatch(
        id_inputs=x_in,
        id_labels=y_in.astype(np.int64),
        anti_inputs=x_anti,
        anti_labels=y_anti.astype(np.int64),
        num_classes=num_classes,
    )
    if not with_mixed:
        return batch
    rng = np.random.default_rng(seed)
    lams = rng.beta(alpha, alpha, size=len(x_in))
    for p, lam in enumerate(lams):
        yi, yj = int(y_in[p]), int(y_anti[p])
        batch.mixed_mixup.append(mixup(x_in[p], yi, x_anti[p], yj, lam, num_classes, p, p))
        batch.mixed_cutmix.append(
            cutmix(x_in[p], yi, x_anti[p], yj, lam, num_classes, src_i=p, src_j=p, rng=rng)
        )
        batch.pairing.append((p, p))
    return batch
