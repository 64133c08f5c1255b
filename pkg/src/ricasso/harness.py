"""Training loop, learning-rate schedule, ablation runner and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .config import RunConfig, OptimSpec, config_from_dict, config_hash
from .data import AntiLongTailSampler, ClassProfile, build_training_batch, make_longtail_profile
from .datasets import ArrayDataset, GaussianMixtureTask, load_image_dir, load_image_folder, longtail_subset
from .losses import LossBreakdown, total_loss
from .metrics import (
    OODReport,
    ScoreSet,
    auroc,
    energy_ood_score,
    fpr_at_tpr,
    group_accuracy,
    mean_report,
    msp_score,
    odin_score,
    read_scores,
)
from .model import ClassCenters, ExpertAssignment, MoEClassifier, assign_experts, build_model, expert_prior, update_centers

log = logging.getLogger(__name__)

# row order, each tuple is (NOD, RCL, AALA, CBCL)
ABLATION_GRID = [
    (False, False, False, False),
    (False, False, True, False),
    (False, False, False, True),
    (False, False, True, True),
    (True, True, False, False),
    (True, True, False, True),
    (True, True, True, False),
    (True, True, True, True),
]
TOGGLE_NAMES = ("NOD", "RCL", "AALA", "CBCL")


class DivergenceError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def lr_at(epoch: int, optim: OptimSpec) -> float:
    """Warm-up at ``base_lr * warmup_scale``, then cosine/step/constant decay."""
    if not 0 <= epoch < optim.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {optim.epochs})")
    if epoch < optim.warmup_epochs:
        return optim.base_lr * optim.warmup_scale
    if optim.decay == "constant":
        return optim.base_lr
    if optim.decay == "step":
        milestones = optim.step_milestones or [int(0.8 * optim.epochs), int(0.9 * optim.epochs)]
        return optim.base_lr * 0.1 ** sum(epoch >= m for m in milestones)
    span = optim.epochs - optim.warmup_epochs
    t = (epoch - optim.warmup_epochs) / span
    return optim.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def _dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.precision == "float64" else torch.float32


@dataclass
class RunData:
    profile: ClassProfile
    train: ArrayDataset
    test: ArrayDataset
    val_ood: dict[str, np.ndarray]
    input_shape: tuple[int, ...]


def build_data(cfg: RunConfig) -> RunData:
    ds, prof = cfg.dataset, cfg.profile
    profile = make_longtail_profile(prof.num_classes, prof.n_max, prof.imbalance_ratio)
    if ds.kind == "synthetic":
        task = synthetic_task(cfg)
        train = task.train_set(profile, seed=ds.data_seed + 1)
        test = task.test_set(ds.test_per_class, seed=ds.data_seed + 2)
        val_ood = {kind: task.ood(kind, ds.val_ood_size, seed=ds.data_seed + 3 + i) for i, kind in enumerate(ds.val_ood)}
    else:
        root = Path(ds.root)
        full, names = load_image_folder(root / "train")
        if len(names) != prof.num_classes:
            raise ValueError(f"found {len(names)} classes under {root / 'train'}, profile says {prof.num_classes}")
        train = longtail_subset(full, profile, seed=ds.data_seed)
        test, _ = load_image_folder(root / "test", names)
        val_ood = {}
        for i, src in enumerate(ds.val_ood):
            if Path(src).is_dir():
                val_ood[Path(src).name] = load_image_dir(src)
            else:
                rng = np.random.default_rng(ds.data_seed + 3 + i)
                val_ood[f"uniform-noise-{i}"] = rng.random((ds.val_ood_size,) + test.inputs.shape[1:], dtype=np.float32)
    return RunData(profile, train, test, val_ood, tuple(train.inputs.shape[1:]))


def synthetic_task(cfg: RunConfig) -> GaussianMixtureTask:
    ds = cfg.dataset
    return GaussianMixtureTask(
        num_classes=cfg.profile.num_classes,
        dim=ds.dim,
        radius=ds.radius,
        noise=ds.noise,
        shape=tuple(ds.shape),
        seed=ds.data_seed,
    )


def seed_everything(seed: int) -> None:
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class RunRecord:
    config: dict
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None
    run_dir: str | None = None
    final: dict = field(default_factory=dict)
    model: MoEClassifier | None = field(default=None, repr=False, compare=False)
    centers: ClassCenters | None = field(default=None, repr=False, compare=False)

    def loss_trace(self, key: str = "total") -> list[float]:
        return [row[key] for row in self.steps]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "epochs": self.epochs,
            "lr_trace": self.lr_trace,
            "checkpoint_path": self.checkpoint_path,
            "final": self.final,
        }


Criterion = Callable[..., LossBreakdown]


def _predict(model: MoEClassifier, inputs: np.ndarray, dtype, batch: int = 1024) -> torch.Tensor:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(inputs), batch):
            out.append(model.logits(torch.as_tensor(inputs[i : i + batch], dtype=dtype)))
    return torch.cat(out)


def score_inputs(model, inputs, detector: str, dtype, tau: float = 1.0, odin_T: float = 1000.0, odin_eps: float = 0.0014) -> np.ndarray:
    if detector == "odin":
        model.eval()
        chunks = [
            odin_score(model, torch.as_tensor(inputs[i : i + 512], dtype=dtype), odin_T, odin_eps)
            for i in range(0, len(inputs), 512)
        ]
        return np.concatenate(chunks)
    logits = _predict(model, inputs, dtype)
    if detector == "msp":
        return np.atleast_1d(msp_score(logits))
    if detector == "energy":
        return np.atleast_1d(energy_ood_score(logits, tau))
    raise ValueError(f"unknown detector {detector!r}")


def validate_model(model, data: RunData, dtype, detector: str = "energy") -> dict:
    logits = _predict(model, data.test.inputs, dtype)
    preds = logits.argmax(dim=-1).numpy()
    acc = float(np.mean(preds == data.test.labels))
    out = {"acc": acc, **{f"acc_{k}": v for k, v in group_accuracy(preds, data.test.labels, data.profile).items()}}
    if data.val_ood:
        id_scores = score_inputs(model, data.test.inputs, detector, dtype)
        aurocs, fprs = [], []
        for name, inputs in data.val_ood.items():
            s = ScoreSet(id_scores, score_inputs(model, inputs, detector, dtype), detector)
            aurocs.append(auroc(s))
            fprs.append(fpr_at_tpr(s))
            out[f"auroc_{name}"] = aurocs[-1]
        out["auroc"] = float(np.mean(aurocs))
        out["fpr95"] = float(np.mean(fprs))
    model.train()
    return out


def train(
    config: RunConfig,
    criterion: Criterion | None = None,
    write: bool = True,
    run_dir: str | Path | None = None,
    echo: Callable[[str], None] | None = None,
) -> RunRecord:
    """Train the mixture-of-experts model under ``config``.

    ``criterion`` replaces ``total_loss`` (same signature); it exists so a
    reference loss can be run through the identical data path.
    """
    criterion = criterion or total_loss
    cfg = config
    dtype = _dtype(cfg)
    seed_everything(cfg.seed)
    data = build_data(cfg)
    profile = data.profile
    assignment = assign_experts(profile, cfg.model.num_local, cfg.model.tau)
    priors = torch.as_tensor(expert_prior(profile.priors, assignment), dtype=dtype)
    model = build_model(data.input_shape, profile.num_classes, assignment.num_experts, cfg.model.encoder, cfg.model.hidden, cfg.model.feat_dim, cfg.model.norm).to(dtype)
    centers = ClassCenters.zeros(assignment.num_experts, profile.num_classes, cfg.model.feat_dim, cfg.model.center_momentum, dtype)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.optim.base_lr, momentum=cfg.optim.momentum, weight_decay=cfg.optim.weight_decay)
    sampler = AntiLongTailSampler(profile, seed=cfg.seed + 7919, labels=data.train.labels)
    order_rng = np.random.default_rng(cfg.seed)
    loss_cfg = cfg.loss
    mixing = loss_cfg.needs_mixing
    B = cfg.optim.batch_size
    N = len(data.train)
    steps_per_epoch = max(1, N // B)
    center_experts = [assignment.global_index] if loss_cfg.feature_source == "global" else list(range(assignment.num_experts))

    record = RunRecord(config=cfg.to_dict())
    if write:
        run_dir = Path(run_dir) if run_dir else _new_run_dir(cfg)
        run_dir.mkdir(parents=True, exist_ok=True)
        record.run_dir = str(run_dir)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        (run_dir / "manifest.json").write_text(json.dumps(profile.to_manifest(cfg.seed), indent=2))

    model.train()
    step = 0
    for epoch in range(cfg.optim.epochs):
        lr = lr_at(epoch, cfg.optim)
        for group in opt.param_groups:
            group["lr"] = lr
        record.lr_trace.append(lr)
        perm = order_rng.permutation(N)
        epoch_rows = []
        for s in range(steps_per_epoch):
            idx = perm[s * B : (s + 1) * B]
            if len(idx) < B:  # N < B: wrap around
                idx = np.resize(perm, B)
            anti_idx = sampler.draw(B)
            batch = build_training_batch(
                (data.train.inputs[idx], data.train.labels[idx]),
                (data.train.inputs[anti_idx], data.train.labels[anti_idx]),
                cfg.alpha,
                seed=np.random.SeedSequence([cfg.seed, epoch, s]),
                num_classes=profile.num_classes,
                with_mixed=mixing,
            )
            x = torch.as_tensor(batch.stacked_inputs(with_mixed=mixing), dtype=dtype)
            heads = slice(2 * B, 4 * B) if (mixing and loss_cfg.rcl_enabled) else None
            outputs = model(x, head_rows=heads)
            if not (torch.isfinite(outputs.logits).all() and torch.isfinite(outputs.features).all()):
                raise DivergenceError(f"non-finite network outputs at epoch {epoch}, step {s}")
            bd = criterion(batch, outputs, centers, priors, loss_cfg, assignment)
            if not torch.isfinite(bd.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {s}")
            opt.zero_grad(set_to_none=True)
            bd.total.backward()
            opt.step()
            if loss_cfg.cbcl_enabled and mixing:
                for k in center_experts:
                    centers = update_centers(centers, outputs.features[:B, k], batch.id_labels, k)
            row = bd.row(step)
            row["epoch"] = epoch
            row["lr"] = lr
            record.steps.append(row)
            epoch_rows.append(row)
            step += 1
        summary = {"epoch": epoch, "lr": lr}
        for key in ("nod", "cbcl", "rcl", "total", "mean_factor"):
            vals = [r[key] for r in epoch_rows if r[key] is not None]
            summary[key] = float(np.mean(vals)) if vals else None
        summary.update(validate_model(model, data, dtype))
        record.epochs.append(summary)
        if echo:
            echo(_epoch_line(summary))

    record.final = dict(record.epochs[-1])
    record.model, record.centers = model, centers
    if write:
        ckpt = Path(run_dir) / "checkpoint.pt"
        save_checkpoint(ckpt, model, centers, assignment, profile, cfg, data.input_shape)
        record.checkpoint_path = str(ckpt)
        _write_rows(Path(run_dir) / "steps.csv", record.steps)
        _write_rows(Path(run_dir) / "epochs.csv", record.epochs)
        (Path(run_dir) / "record.json").write_text(json.dumps(record.to_dict(), indent=2))
    return record


def _epoch_line(s: dict) -> str:
    parts = [f"epoch {s['epoch']:3d}", f"lr {s['lr']:.4g}", f"loss {s['total']:.4f}", f"acc {s['acc']:.4f}"]
    if "auroc" in s:
        parts += [f"auroc {s['auroc']:.4f}", f"fpr95 {s['fpr95']:.4f}"]
    return "  ".join(parts)


def _new_run_dir(cfg: RunConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(cfg.output_dir) / f"run-{stamp}-{cfg.hash()[:8]}"
    path, n = base, 1
    while path.exists():
        path = Path(f"{base}-{n}")
        n += 1
    return path


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    for row in rows[1:]:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row.get(k), float) else row[k]) for k in keys})


def save_checkpoint(path, model, centers: ClassCenters, assignment: ExpertAssignment, profile: ClassProfile, cfg: RunConfig, input_shape) -> None:
    torch.save(
        {
            "format": "ricasso-checkpoint/1",
            "state_dict": model.state_dict(),
            "centers": centers.centers,
            "centers_seen": centers.counts_seen,
            "center_momentum": centers.momentum,
            "assignment": assignment.to_dict(),
            "profile": list(profile.counts),
            "config": cfg.to_dict(),
            "config_hash": cfg.hash(),
            "input_shape": list(input_shape),
        },
        path,
    )


@dataclass
class LoadedCheckpoint:
    model: MoEClassifier
    centers: ClassCenters
    assignment: ExpertAssignment
    profile: ClassProfile
    config: RunConfig
    config_hash: str


def load_checkpoint(path, expected_hash: str | None = None) -> LoadedCheckpoint:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types for bad files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != "ricasso-checkpoint/1":
        raise CheckpointError(f"{path} is not a ricasso checkpoint")
    cfg = config_from_dict(blob["config"], require=False)
    if config_hash(blob["config"]) != blob["config_hash"]:
        raise CheckpointError("stored config does not match its recorded hash")
    if expected_hash is not None and expected_hash != blob["config_hash"]:
        raise CheckpointError(f"config hash mismatch: checkpoint {blob['config_hash'][:12]}, expected {expected_hash[:12]}")
    profile = ClassProfile.from_counts(blob["profile"])
    assignment = ExpertAssignment.from_dict(blob["assignment"])
    dtype = _dtype(cfg)
    model = build_model(tuple(blob["input_shape"]), profile.num_classes, assignment.num_experts, cfg.model.encoder, cfg.model.hidden, cfg.model.feat_dim, cfg.model.norm).to(dtype)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    centers = ClassCenters(blob["centers"], blob["center_momentum"], blob["centers_seen"])
    return LoadedCheckpoint(model, centers, assignment, profile, cfg, blob["config_hash"])


@dataclass
class OODSource:
    """Either raw inputs to score with the model, or precomputed scores."""

    name: str
    inputs: np.ndarray | None = None
    scores: np.ndarray | None = None


def parse_ood_source(spec: str, cfg: RunConfig, size: int | None = None, seed: int = 12345) -> OODSource:
    """``synthetic:<kind>``, ``id-test``, a score file, or an image directory."""
    size = size or cfg.dataset.val_ood_size
    if spec.startswith("synthetic:"):
        kind = spec.split(":", 1)[1]
        return OODSource(spec, inputs=synthetic_task(cfg).ood(kind, size, seed))
    path = Path(spec)
    if path.is_dir():
        return OODSource(path.name, inputs=load_image_dir(path))
    if path.is_file():
        return OODSource(path.stem, scores=read_scores(path))
    raise ValueError(f"cannot interpret OOD source {spec!r}")


def evaluate(
    checkpoint,
    id_test: ArrayDataset | None = None,
    ood_sources: Iterable[OODSource | str] = (),
    detector: str = "energy",
    expected_hash: str | None = None,
    odin_T: float = 1000.0,
    odin_eps: float = 0.0014,
) -> list[OODReport]:
    """One OODReport per OOD source plus an unweighted ``mean`` row."""
    ck = checkpoint if isinstance(checkpoint, LoadedCheckpoint) else load_checkpoint(checkpoint, expected_hash)
    cfg = ck.config
    dtype = _dtype(cfg)
    if id_test is None:
        id_test = build_data(cfg).test
    sources = [parse_ood_source(s, cfg) if isinstance(s, str) else s for s in ood_sources]
    if not sources:
        raise ValueError("at least one OOD source is required")
    logits = _predict(ck.model, id_test.inputs, dtype)
    preds = logits.argmax(dim=-1).numpy()
    acc = float(np.mean(preds == id_test.labels))
    groups = group_accuracy(preds, id_test.labels, ck.profile)
    kw = dict(tau=cfg.loss.tau_energy, odin_T=odin_T, odin_eps=odin_eps)
    id_scores = score_inputs(ck.model, id_test.inputs, detector, dtype, **kw)
    reports = []
    for src in sources:
        ood = src.scores if src.scores is not None else score_inputs(ck.model, src.inputs, detector, dtype, **kw)
        s = ScoreSet(id_scores, ood, detector)
        reports.append(
            OODReport(src.name, detector, auroc(s), fpr_at_tpr(s), acc, groups, len(id_scores), len(ood), ck.config_hash)
        )
    reports.append(mean_report(reports))
    return reports


def evaluate_scores(ck: LoadedCheckpoint, id_test: ArrayDataset, source: OODSource, detector: str = "energy") -> ScoreSet:
    """Raw ID/OOD detector scores for one source (used for figures)."""
    dtype = _dtype(ck.config)
    id_scores = score_inputs(ck.model, id_test.inputs, detector, dtype, tau=ck.config.loss.tau_energy)
    ood = source.scores if source.scores is not None else score_inputs(ck.model, source.inputs, detector, dtype, tau=ck.config.loss.tau_energy)
    return ScoreSet(id_scores, ood, detector)


@dataclass
class AblationResult:
    rows: list[dict]
    records: list[RunRecord]


def run_ablation_grid(
    base: RunConfig,
    toggles: list[tuple[bool, bool, bool, bool]] | None = None,
    write: bool = False,
    echo: Callable[[str], None] | None = None,
) -> AblationResult:
    """One run per (NOD, RCL, AALA, CBCL) row, all with the base seed."""
    toggles = ABLATION_GRID if toggles is None else toggles
    rows, records = [], []
    for nod, rcl, aala, cbcl in toggles:
        cfg = base.replace(loss={"nod_enabled": nod, "rcl_enabled": rcl, "aala_enabled": aala, "cbcl_enabled": cbcl})
        rec = train(cfg, write=write)
        records.append(rec)
        row = dict(zip(TOGGLE_NAMES, (nod, rcl, aala, cbcl)))
        row.update({"ACC": rec.final["acc"], "AUROC": rec.final.get("auroc"), "FPR95": rec.final.get("fpr95")})
        rows.append(row)
        if echo:
            echo(" ".join(f"{k}={v}" for k, v in row.items()))
    return AblationResult(rows, records)
