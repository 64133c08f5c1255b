"""Mixture-of-experts classifier, expert class groups and per-expert priors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ClassProfile


@dataclass(frozen=True)
class ExpertAssignment:
    num_experts: int
    groups: tuple[tuple[int, ...], ...]
    tau: float = 1.0

    @property
    def global_index(self) -> int:
        return self.num_experts - 1

    def to_dict(self) -> dict:
        return {"num_experts": self.num_experts, "groups": [list(g) for g in self.groups], "tau": self.tau}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertAssignment":
        return cls(d["num_experts"], tuple(tuple(g) for g in d["groups"]), d["tau"])


def assign_experts(profile: ClassProfile, num_local: int, tau: float = 1.0) -> ExpertAssignment:
    """Split classes (most frequent first) into ``num_local`` contiguous groups.

    A global expert covering every class is appended as the last expert.
    """
    C = profile.num_classes
    if num_local < 1:
        raise ValueError("num_local must be >= 1")
    if num_local > C:
        raise ValueError(f"num_local={num_local} exceeds the number of classes {C}")
    # stable sort keeps index order among equal counts
    order = sorted(range(C), key=lambda c: -profile.counts[c])
    groups = [tuple(int(c) for c in chunk) for chunk in np.array_split(order, num_local)]
    groups.append(tuple(range(C)))
    return ExpertAssignment(num_local + 1, tuple(groups), tau)


def expert_prior(priors, assignment: ExpertAssignment) -> np.ndarray:
    """Per-expert priors, shape (K, C).

    Local expert k keeps the class prior inside its group and uses the largest
    prior outside it; the global expert scales every prior by ``exp(tau)``.
    """
    priors = np.asarray(priors, dtype=np.float64)
    out = np.empty((assignment.num_experts, len(priors)))
    top = priors.max()
    for k, group in enumerate(assignment.groups):
        if k == assignment.global_index:
            out[k] = math.exp(assignment.tau) * priors
        else:
            out[k] = top
            idx = list(group)
            out[k, idx] = priors[idx]
    return out


@dataclass
class ExpertEnsembleOutput:
    features: torch.Tensor  # (B, K, d)
    logits: torch.Tensor  # (B, K, C)
    ensemble_logits: torch.Tensor  # (B, C)
    proj: torch.Tensor | None = None  # rows selected by head_rows
    pred: torch.Tensor | None = None

    @classmethod
    def from_expert_logits(cls, features, logits, proj=None, pred=None) -> "ExpertEnsembleOutput":
        return cls(features, logits, logits.mean(dim=1), proj, pred)

    def rows(self, sl) -> "ExpertEnsembleOutput":
        return ExpertEnsembleOutput(self.features[sl], self.logits[sl], self.ensemble_logits[sl])


def _norm1d(kind: str, width: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm1d(width)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


class MLPEncoder(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 128, depth: int = 2, norm: str = "none"):
        super().__init__()
        layers: list[nn.Module] = [nn.Flatten()]
        d = in_dim
        for _ in range(depth):
            layers += [nn.Linear(d, hidden), _norm1d(norm, hidden), nn.ReLU()]
            d = hidden
        self.net = nn.Sequential(*layers)
        self.out_dim = hidden

    def forward(self, x):
        return self.net(x)


class _ResBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ConvEncoder(nn.Module):
    """Compact residual CNN for small RGB images."""

    def __init__(self, in_channels: int = 3, width: int = 16):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.blocks = nn.Sequential(_ResBlock(width, width, 1), _ResBlock(width, 2 * width, 2), _ResBlock(2 * width, 4 * width, 2))
        self.out_dim = 4 * width

    def forward(self, x):
        x = self.blocks(self.stem(x))
        return F.adaptive_avg_pool2d(x, 1).flatten(1)


class MoEClassifier(nn.Module):
    """Shared encoder followed by K expert branches, each with its own classifier.

    The projection and prediction heads for representation consistency sit on
    top of the global (last) expert's features.
    """

    def __init__(
        self,
        encoder: nn.Module,
        num_classes: int,
        num_experts: int,
        feat_dim: int = 64,
        proj_dim: int = 128,
        pred_hidden: int = 64,
        norm: str = "none",
    ):
        super().__init__()
        self.encoder = encoder
        self.num_classes = num_classes
        self.num_experts = num_experts
        self.feat_dim = feat_dim
        trunk = encoder.out_dim
        self.experts = nn.ModuleList(
            nn.Sequential(nn.Linear(trunk, feat_dim), _norm1d(norm, feat_dim), nn.ReLU()) for _ in range(num_experts)
        )
        self.classifiers = nn.ModuleList(nn.Linear(feat_dim, num_classes) for _ in range(num_experts))
        self.projector = nn.Sequential(nn.Linear(feat_dim, feat_dim), nn.ReLU(), nn.Linear(feat_dim, proj_dim))
        self.predictor = nn.Sequential(nn.Linear(proj_dim, pred_hidden), nn.ReLU(), nn.Linear(pred_hidden, proj_dim))

    def forward(self, x: torch.Tensor, head_rows: slice | None = None) -> ExpertEnsembleOutput:
        trunk = self.encoder(x)
        feats = [expert(trunk) for expert in self.experts]
        logits = [clf(z) for clf, z in zip(self.classifiers, feats)]
        features = torch.stack(feats, dim=1)
        logits = torch.stack(logits, dim=1)
        proj = pred = None
        if head_rows is not None:
            proj = self.projector(features[head_rows, -1])
            pred = self.predictor(proj)
        return ExpertEnsembleOutput.from_expert_logits(features, logits, proj, pred)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x).ensemble_logits


def forward(model: MoEClassifier | None, inputs, head_rows: slice | None = None) -> ExpertEnsembleOutput:
    if model is None or not isinstance(model, MoEClassifier):
        raise RuntimeError("forward needs an initialised MoEClassifier")
    inputs = torch.as_tensor(inputs, dtype=next(model.parameters()).dtype)
    return model(inputs, head_rows=head_rows)


def build_model(
    input_shape: tuple[int, ...],
    num_classes: int,
    num_experts: int,
    encoder: str = "mlp",
    hidden: int = 128,
    feat_dim: int = 64,
    norm: str = "none",
) -> MoEClassifier:
    """``norm`` ("none" or "batch") controls the 1-d layers; the CNN always uses batch norm."""
    if encoder == "mlp":
        enc = MLPEncoder(int(np.prod(input_shape)), hidden=hidden, norm=norm)
    elif encoder == "cnn":
        enc = ConvEncoder(input_shape[0], width=max(8, hidden // 8))
    else:
        raise ValueError(f"unknown encoder {encoder!r}")
    return MoEClassifier(enc, num_classes, num_experts, feat_dim=feat_dim, norm=norm)


@dataclass
class ClassCenters:
    centers: torch.Tensor  # (K, C, d)
    momentum: float = 0.1
    counts_seen: torch.Tensor | None = None  # (K, C)

    def __post_init__(self):
        if not 0 < self.momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        if self.counts_seen is None:
            self.counts_seen = torch.zeros(self.centers.shape[:2], dtype=torch.long)

    @classmethod
    def zeros(cls, num_experts, num_classes, feat_dim, momentum=0.1, dtype=torch.float32) -> "ClassCenters":
        return cls(torch.zeros(num_experts, num_classes, feat_dim, dtype=dtype), momentum)

    def seen(self, k: int) -> torch.Tensor:
        return self.counts_seen[k] > 0


def update_centers(centers: ClassCenters, features, labels, k: int) -> ClassCenters:
    """EMA step toward each present class's batch mean for expert ``k``.

    Only unmixed (ID) samples should be passed. Returns a new object.
    """
    features = torch.as_tensor(features).detach().to(centers.centers.dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if not torch.isfinite(features).all():
        raise ValueError("non-finite features cannot update class centers")
    new = centers.centers.clone()
    seen = centers.counts_seen.clone()
    m = centers.momentum
    for c in labels.unique().tolist():
        mask = labels == c
        mean = features[mask].mean(dim=0)
        new[k, c] = (1 - m) * new[k, c] + m * mean
        seen[k, c] += int(mask.sum())
    return ClassCenters(new, m, seen)
