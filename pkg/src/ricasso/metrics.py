"""Post-hoc OOD scores (MSP, energy, ODIN) and evaluation metrics.

Score polarity is "higher = more in-distribution" everywhere; energy scores
are negated when they are turned into detector scores.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .data import ClassProfile

SCORE_KINDS = ("msp", "energy", "odin")


@dataclass
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray
    score_kind: str = "msp"

    def __post_init__(self):
        self.id_scores = np.asarray(self.id_scores, dtype=np.float64).ravel()
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64).ravel()
        if self.score_kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.score_kind!r}")
        if not (np.isfinite(self.id_scores).all() and np.isfinite(self.ood_scores).all()):
            raise ValueError("scores must be finite")

    def _require_both(self):
        if len(self.id_scores) == 0 or len(self.ood_scores) == 0:
            raise ValueError("both ID and OOD scores must be non-empty")


@dataclass
class OODReport:
    dataset: str
    score_kind: str
    auroc: float
    fpr95: float
    acc: float
    group_acc: dict = field(default_factory=dict)
    num_id: int = 0
    num_ood: int = 0
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OODReport":
        return cls(**d)


def _logits(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def msp_score(ensemble_logits) -> np.ndarray | float:
    logits = _logits(ensemble_logits)
    out = torch.softmax(logits, dim=-1).max(dim=-1).values
    return out.item() if out.dim() == 0 else out.detach().cpu().numpy()


def energy_ood_score(ensemble_logits, tau: float = 1.0) -> np.ndarray | float:
    """Negative energy, ``tau * logsumexp(logits / tau)``; higher means more ID."""
    logits = _logits(ensemble_logits)
    out = tau * torch.logsumexp(logits / tau, dim=-1)
    return out.item() if out.dim() == 0 else out.detach().cpu().numpy()


def odin_score(model, inputs, temperature: float = 1000.0, epsilon: float = 0.0014) -> np.ndarray:
    """Temperature scaling plus a signed input-gradient step.

    ``model`` maps inputs to logits (an MoEClassifier's ensemble logits are
    used when it exposes ``.logits``). Inputs move by
    ``epsilon * sign(grad log max softmax(logits / T))`` and are scored again.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    fn = model.logits if hasattr(model, "logits") and callable(model.logits) else model
    x = torch.as_tensor(inputs).detach().clone().requires_grad_(True)
    log_msp = torch.log_softmax(fn(x) / temperature, dim=-1).max(dim=-1).values
    (grad,) = torch.autograd.grad(log_msp.sum(), x, allow_unused=True)
    if grad is None:
        raise RuntimeError("logits do not depend on the input; ODIN needs an input gradient")
    with torch.no_grad():
        x_pert = x + epsilon * torch.sign(grad)
        scores = torch.softmax(fn(x_pert) / temperature, dim=-1).max(dim=-1).values
    return scores.cpu().numpy()


def auroc(scores: ScoreSet) -> float:
    """P(random ID score > random OOD score), ties counted one half."""
    scores._require_both()
    n, m = len(scores.id_scores), len(scores.ood_scores)
    ranks = rankdata(np.concatenate([scores.id_scores, scores.ood_scores]))
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def fpr_at_tpr(scores: ScoreSet, tpr_target: float = 0.95) -> float:
    """Fraction of OOD scores >= the largest threshold keeping TPR >= target."""
    scores._require_both()
    if not 0 < tpr_target <= 1:
        raise ValueError("tpr_target must lie in (0, 1]")
    id_sorted = np.sort(scores.id_scores)[::-1]
    n = len(id_sorted)
    # tolerance guards products like 0.95 * 100 landing a hair above 95
    k = max(1, math.ceil(tpr_target * n - 1e-9))
    theta = id_sorted[k - 1]
    return float(np.mean(scores.ood_scores >= theta))


def group_assignment(profile: ClassProfile) -> dict[str, list[int]]:
    """Head/medium/tail terciles of classes sorted by training count."""
    order = sorted(range(profile.num_classes), key=lambda c: -profile.counts[c])
    head, medium, tail = (list(map(int, g)) for g in np.array_split(order, 3))
    return {"head": head, "medium": medium, "tail": tail}


def group_accuracy(predictions, labels, profile: ClassProfile) -> dict[str, float]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    out = {}
    for name, classes in group_assignment(profile).items():
        mask = np.isin(labels, classes)
        out[name] = float(np.mean(predictions[mask] == labels[mask])) if mask.any() else float("nan")
    return out


def per_class_accuracy(predictions, labels, num_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    acc = np.full(num_classes, np.nan)
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            acc[c] = np.mean(predictions[mask] == c)
    return acc


def roc_curve_points(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) at every distinct threshold, ID as the positive class."""
    scores._require_both()
    thresholds = np.unique(np.concatenate([scores.id_scores, scores.ood_scores]))[::-1]
    tpr = np.array([0.0] + [np.mean(scores.id_scores >= t) for t in thresholds])
    fpr = np.array([0.0] + [np.mean(scores.ood_scores >= t) for t in thresholds])
    return fpr, tpr


def read_scores(path) -> np.ndarray:
    """One decimal score per line; blank lines are skipped."""
    values = [float(line) for line in Path(path).read_text().splitlines() if line.strip()]
    return np.asarray(values, dtype=np.float64)


def write_scores(path, scores) -> None:
    Path(path).write_text("".join(f"{float(s)!r}\n" for s in np.asarray(scores).ravel()))


def mean_report(reports: list[OODReport], name: str = "mean") -> OODReport:
    """Unweighted mean over OOD datasets (each dataset counts once)."""
    if not reports:
        raise ValueError("no reports to average")
    first = reports[0]
    return OODReport(
        dataset=name,
        score_kind=first.score_kind,
        auroc=float(np.mean([r.auroc for r in reports])),
        fpr95=float(np.mean([r.fpr95 for r in reports])),
        acc=first.acc,
        group_acc=dict(first.group_acc),
        num_id=first.num_id,
        num_ood=int(sum(r.num_ood for r in reports)),
        config_hash=first.config_hash,
    )
