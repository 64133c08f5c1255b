"""Loss terms: energy score, ambiguity-aware logit adjustment, NOD, CBCL, RCL.

All functions accept torch tensors (or array-likes) of any float dtype and are
differentiable end to end, so gradients can be checked in float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import torch
import torch.nn.functional as F

from .data import TrainBatch
from .model import ClassCenters, ExpertAssignment, ExpertEnsembleOutput

log = logging.getLogger(__name__)
_clamp_warned = False


@dataclass
class LossConfig:
    tau_energy: float = 1.0
    gamma0: float = 1.0
    gamma1: float = 1.0
    eps0: float = 0.0
    eps1: float = 1e-6
    lambda0: float = 0.5
    lambda1: float = 1.0
    aala_enabled: bool = True
    cbcl_enabled: bool = True
    rcl_enabled: bool = True
    nod_enabled: bool = True
    prob_floor: float = 1e-8
    # "logits" or "feature": what the energy score is computed on
    energy_input: str = "logits"
    # surrogate re-weighting of out-of-group samples for local experts
    w_out: float = 0.1
    dec_include_mixed: bool = False
    # "global" (last expert only) or "all" (CBCL per expert, averaged)
    feature_source: str = "global"
    exp_clamp: float = 80.0

    def __post_init__(self):
        if self.tau_energy <= 0:
            raise ValueError("tau_energy must be > 0")
        if self.eps1 <= 0:
            raise ValueError("eps1 must be > 0")
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("lambda0 and lambda1 must be >= 0")
        if not 0 < self.prob_floor <= 1e-3:
            raise ValueError("prob_floor must lie in (0, 1e-3]")
        if self.energy_input not in ("logits", "feature"):
            raise ValueError("energy_input must be 'logits' or 'feature'")
        if self.feature_source not in ("global", "all"):
            raise ValueError("feature_source must be 'global' or 'all'")

    @property
    def needs_mixing(self) -> bool:
        return self.nod_enabled or self.cbcl_enabled or self.rcl_enabled

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss field(s): {sorted(unknown)}")
        return cls(**d)


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def energy_score(logits, tau: float = 1.0) -> torch.Tensor:
    """``-tau * logsumexp(logits / tau)`` over the last axis."""
    logits = _t(logits)
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if not torch.isfinite(logits).all():
        raise ValueError("energy_score needs finite logits")
    return -tau * torch.logsumexp(logits / tau, dim=-1)


def aala_factor(energies, dim: int = 0) -> torch.Tensor:
    """``1 + softmax(energies)`` across the batch axis; each value is in (1, 2]."""
    energies = _t(energies)
    if energies.numel() == 0 or energies.shape[dim] == 0:
        raise ValueError("aala_factor needs a non-empty batch")
    if not torch.isfinite(energies).all():
        raise ValueError("aala_factor needs finite energies")
    return 1.0 + torch.softmax(energies, dim=dim)


def recalibrated_margins(expert_priors, factors) -> torch.Tensor:
    """Scale the log-prior margins per sample.

    expert_priors: (K, C) or (C,). factors: (N, K) or (N,).
    Returns margins of shape (N, K, C) (or (N, C) for the 1-expert forms).
    """
    expert_priors = _t(expert_priors)
    factors = _t(factors, expert_priors)
    if (expert_priors <= 0).any():
        raise ValueError("priors must be positive to take their log")
    base = torch.log(expert_priors.to(factors.dtype))
    return factors.unsqueeze(-1) * base


def adjusted_softmax(logits, margins) -> torch.Tensor:
    logits = _t(logits)
    margins = _t(margins, logits)
    if logits.shape != margins.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and margins {tuple(margins.shape)} differ")
    return torch.softmax(logits + margins, dim=-1)


def soft_cross_entropy(logits, margins, targets) -> torch.Tensor:
    return -(targets * torch.log_softmax(logits + margins, dim=-1)).sum(dim=-1)


def lgla_surrogate_weights(targets, assignment: ExpertAssignment | None, w_out: float = 0.1) -> torch.Tensor:
    """Stand-in for LGLA's re-weighting factor, shape (N, K).

    The global expert weighs every sample 1; a local expert weighs samples
    whose primary label lies in its group 1 and the rest ``w_out``.
    """
    targets = _t(targets)
    n = targets.shape[0]
    if assignment is None:
        return torch.ones(n, 1, dtype=targets.dtype)
    primary = targets.argmax(dim=-1)
    w = torch.full((n, assignment.num_experts), float(w_out), dtype=targets.dtype)
    for k, group in enumerate(assignment.groups):
        if k == assignment.global_index:
            w[:, k] = 1.0
        else:
            inside = torch.isin(primary, torch.tensor(group))
            w[inside, k] = 1.0
    return w


@dataclass
class ClsTerms:
    loss: torch.Tensor
    per_sample: torch.Tensor  # (N,)
    margins: torch.Tensor  # (N, K, C)
    factors: torch.Tensor  # (N, K)
    energies: torch.Tensor  # (N, K)


def _check_targets(targets):
    sums = targets.sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-6):
        raise ValueError("every target row must sum to 1")


def cls_loss_terms(logits, soft_targets, expert_priors, config: LossConfig, weights=None, features=None) -> ClsTerms:
    logits = _t(logits)
    if logits.dim() == 2:
        logits = logits.unsqueeze(1)
    targets = _t(soft_targets, logits)
    _check_targets(targets)
    priors = _t(expert_priors, logits)
    if priors.dim() == 1:
        priors = priors.unsqueeze(0)
    if config.energy_input == "feature":
        if features is None:
            raise ValueError("energy_input='feature' needs the expert features")
        source = _t(features)
    else:
        source = logits
    energies = energy_score(source, config.tau_energy)
    if config.aala_enabled:
        factors = aala_factor(energies, dim=0)
    else:
        factors = torch.ones_like(energies)
    margins = recalibrated_margins(priors, factors)
    ce = soft_cross_entropy(logits, margins, targets.unsqueeze(1))  # (N, K)
    if weights is None:
        weights = torch.ones_like(ce)
    per_sample = (_t(weights, ce) * ce).sum(dim=1)
    return ClsTerms(per_sample.mean(), per_sample, margins, factors, energies)


def cls_loss(outputs, soft_targets, expert_priors, config: LossConfig, weights=None) -> torch.Tensor:
    """Logit-adjusted soft cross-entropy, summed over experts, batch-averaged.

    ``outputs`` is an ExpertEnsembleOutput or a raw (N, K, C) logit tensor.
    """
    if isinstance(outputs, ExpertEnsembleOutput):
        return cls_loss_terms(outputs.logits, soft_targets, expert_priors, config, weights, outputs.features).loss
    return cls_loss_terms(outputs, soft_targets, expert_priors, config, weights).loss


def nod_rows(batch: TrainBatch, config: LossConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward-row indices used by the classification term, and their targets.

    With NOD on these are the ID rows (one-hot) followed by the mixup and
    cutmix rows (two-hot); anti-sampled rows only serve as mixing partners.
    With NOD off, or no mixed samples, only the ID rows are used.
    """
    B = len(batch)
    targets = batch.stacked_targets(with_mixed=batch.has_mixed)
    if config.nod_enabled and batch.has_mixed:
        idx = torch.cat([torch.arange(B), torch.arange(2 * B, 4 * B)])
    else:
        idx = torch.arange(B)
    return idx, torch.as_tensor(targets)[idx]


def nod_loss(
    batch: TrainBatch,
    outputs: ExpertEnsembleOutput,
    expert_priors,
    config: LossConfig,
    assignment: ExpertAssignment | None = None,
) -> torch.Tensor:
    """Classification loss over ID (one-hot) and mixed (two-hot) rows as one expectation.

    Row layout of ``outputs`` follows ``TrainBatch.stacked_inputs``.
    """
    return _nod_terms(batch, outputs, expert_priors, config, assignment).loss


def _nod_terms(batch, outputs, expert_priors, config, assignment) -> ClsTerms:
    idx, targets = nod_rows(batch, config)
    targets = targets.to(outputs.logits.dtype)
    weights = lgla_surrogate_weights(targets, assignment, config.w_out) if assignment is not None else None
    return cls_loss_terms(outputs.logits[idx], targets, expert_priors, config, weights, outputs.features[idx])


def vbl_distance(z_i, z_j, z_mix) -> torch.Tensor:
    """Mean over pairs of the squared distances from both sources to the mix."""
    if z_i is None or z_j is None or z_mix is None:
        raise ValueError("VBL needs features for both sources and the mixed sample")
    z_i, z_j, z_mix = _t(z_i), _t(z_j), _t(z_mix)
    if not (z_i.shape == z_j.shape == z_mix.shape):
        raise ValueError("source and mixed feature shapes differ")
    return (((z_i - z_mix) ** 2).sum(-1) + ((z_j - z_mix) ** 2).sum(-1)).mean()


def dual_entropy_weight(probs, target, prob_floor: float = 1e-8) -> torch.Tensor:
    """Self-entropy plus cross-entropy of ``probs`` against ``target`` (last axis)."""
    probs = _t(probs)
    target = _t(target, probs)
    return ((probs + target) * -torch.log(probs.clamp_min(prob_floor))).sum(dim=-1)


def dec_distance(features, probs, targets, centers, prob_floor: float = 1e-8) -> torch.Tensor:
    """Half the batch mean of dual-entropy-weighted squared distances to class centers.

    For a one-hot target the distance is to that class's center; a soft target
    weighs the distance to each center by its mass.
    """
    features = _t(features)
    probs = _t(probs, features)
    targets = _t(targets, features)
    centers = _t(centers, features)
    omega = dual_entropy_weight(probs, targets, prob_floor)
    dist = ((features.unsqueeze(1) - centers.unsqueeze(0)) ** 2).sum(-1)  # (N, C)
    return 0.5 * (omega * (targets * dist).sum(-1)).mean()


def cbcl_loss(d_plus, d_minus, config: LossConfig) -> torch.Tensor:
    d_plus, d_minus = _t(d_plus), _t(d_minus)
    if (d_plus < 0).any() or (d_minus < 0).any():
        raise ValueError("distances must be non-negative")
    if config.gamma0 <= 0 or config.gamma1 <= 0:
        raise ValueError("gamma0 and gamma1 must be > 0")
    a = config.gamma0 * d_plus
    b = config.gamma1 * d_minus
    if (a > config.exp_clamp).any() or (b > config.exp_clamp).any():
        global _clamp_warned
        # saturation is routine late in training; say so once per process
        log.log(logging.DEBUG if _clamp_warned else logging.WARNING, "CBCL exponent clamped at %s", config.exp_clamp)
        _clamp_warned = True
        a = a.clamp_max(config.exp_clamp)
        b = b.clamp_max(config.exp_clamp)
    ea, eb = torch.exp(a), torch.exp(b)
    return (ea - eb + config.eps0) / (ea + eb + config.eps1)


def rcl_loss(h_m, h_c, u_m, u_c) -> torch.Tensor:
    """Symmetric negative cosine between predictions and stop-gradient projections.

    Rows are pairs; the result is averaged over pairs.
    """
    h_m, h_c, u_m, u_c = (_t(v) for v in (h_m, h_c, u_m, u_c))
    for name, v in (("h_m", h_m), ("h_c", h_c), ("u_m", u_m), ("u_c", u_c)):
        if (v.norm(dim=-1) == 0).any():
            raise ValueError(f"{name} has a zero-norm row")
    h_m, h_c = h_m.detach(), h_c.detach()
    loss = -(F.normalize(u_m, dim=-1) * F.normalize(h_c, dim=-1)).sum(-1) - (
        F.normalize(u_c, dim=-1) * F.normalize(h_m, dim=-1)
    ).sum(-1)
    return loss.mean()


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@dataclass
class LossBreakdown:
    nod: torch.Tensor
    cbcl: torch.Tensor | None
    rcl: torch.Tensor | None
    total: torch.Tensor
    lambda0: float
    lambda1: float
    per_sample_margins: torch.Tensor | None = None
    mean_factor: float = float("nan")
    mean_energy: float = float("nan")
    warnings: list[str] = field(default_factory=list)

    def recomposed(self) -> float:
        total = _scalar(self.nod)
        if self.cbcl is not None:
            total += self.lambda0 * _scalar(self.cbcl)
        if self.rcl is not None:
            total += self.lambda1 * _scalar(self.rcl)
        return total

    def row(self, step: int | None = None) -> dict:
        """Flat record for the per-step log; absent components are None."""
        out = {
            "nod": _scalar(self.nod),
            "cbcl": None if self.cbcl is None else _scalar(self.cbcl),
            "rcl": None if self.rcl is None else _scalar(self.rcl),
            "total": _scalar(self.total),
            "mean_factor": self.mean_factor,
            "mean_energy": self.mean_energy,
        }
        if step is not None:
            out = {"step": step, **out}
        return out


def _cbcl_for_expert(k, batch_size, outputs, id_probs, id_targets, centers, config, mixed_targets=None, mixed_probs=None):
    B = batch_size
    z = outputs.features[:, k]
    z_in, z_anti = z[:B], z[B : 2 * B]
    z_mix = z[2 * B : 4 * B]
    d_minus = vbl_distance(torch.cat([z_in, z_in]), torch.cat([z_anti, z_anti]), z_mix)
    c = centers.centers[k].to(z.dtype)
    feats, probs, targets = z_in, id_probs, id_targets
    if config.dec_include_mixed and mixed_targets is not None:
        feats = torch.cat([feats, z_mix])
        probs = torch.cat([probs, mixed_probs])
        targets = torch.cat([targets, mixed_targets])
    d_plus = dec_distance(feats, probs, targets, c, config.prob_floor)
    return cbcl_loss(d_plus, d_minus, config)


def total_loss(
    batch: TrainBatch,
    outputs: ExpertEnsembleOutput,
    centers: ClassCenters | None,
    expert_priors,
    config: LossConfig,
    assignment: ExpertAssignment | None = None,
) -> LossBreakdown:
    """``nod + lambda0 * cbcl + lambda1 * rcl`` with ablation switches.

    ``outputs`` rows follow ``[ID, anti, mixup, cutmix]`` (ID only when the
    batch carries no mixed samples); ``outputs.proj``/``pred`` hold the
    mixup rows followed by the cutmix rows.
    """
    B = len(batch)
    warnings: list[str] = []
    terms = _nod_terms(batch, outputs, expert_priors, config, assignment)
    total = terms.loss

    cbcl = None
    if config.cbcl_enabled and batch.has_mixed:
        if centers is None:
            raise ValueError("CBCL needs class centers")
        id_probs = adjusted_softmax(outputs.logits[:B], terms.margins[:B]).mean(dim=1)
        id_targets = torch.as_tensor(batch.stacked_targets(with_mixed=False), dtype=outputs.logits.dtype)
        mixed_targets = mixed_probs = None
        if config.dec_include_mixed:
            mixed_targets = torch.as_tensor(batch.stacked_targets()[2 * B :], dtype=outputs.logits.dtype)
            mixed_probs = torch.softmax(outputs.ensemble_logits[2 * B : 4 * B], dim=-1)
        experts = [outputs.logits.shape[1] - 1] if config.feature_source == "global" else range(outputs.logits.shape[1])
        for k in experts:
            unseen = sorted(set(batch.id_labels.tolist()) - set(torch.nonzero(centers.seen(k)).flatten().tolist()))
            if unseen:
                warnings.append(f"expert {k}: centers for classes {unseen} not yet observed")
        parts = [
            _cbcl_for_expert(k, B, outputs, id_probs, id_targets, centers, config, mixed_targets, mixed_probs)
            for k in experts
        ]
        cbcl = torch.stack(parts).mean()
        total = total + config.lambda0 * cbcl

    rcl = None
    if config.rcl_enabled and batch.has_mixed:
        if outputs.proj is None or outputs.pred is None:
            raise ValueError("RCL needs projection and prediction outputs for the mixed rows")
        h_m, h_c = outputs.proj[:B], outputs.proj[B : 2 * B]
        u_m, u_c = outputs.pred[:B], outputs.pred[B : 2 * B]
        rcl = rcl_loss(h_m, h_c, u_m, u_c)
        total = total + config.lambda1 * rcl

    return LossBreakdown(
        nod=terms.loss,
        cbcl=cbcl,
        rcl=rcl,
        total=total,
        lambda0=config.lambda0,
        lambda1=config.lambda1,
        per_sample_margins=terms.margins.detach(),
        mean_factor=float(terms.factors.detach().mean()),
        mean_energy=float(terms.energies.detach().mean()),
        warnings=warnings,
    )

