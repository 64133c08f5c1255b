"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
"acceptance criteria" section of the terminal summary.
"""

import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oracles import auroc_pairs, central_fd, fpr_scan, grad_rel_error, random_simplex
from ricasso.cli import cmd_ablate
from ricasso.config import RunConfig
from ricasso.data import build_training_batch, make_longtail_profile
from ricasso.harness import ABLATION_GRID, TOGGLE_NAMES, train
from ricasso.losses import (
    LossBreakdown,
    LossConfig,
    aala_factor,
    adjusted_softmax,
    cbcl_loss,
    cls_loss,
    cls_loss_terms,
    dec_distance,
    dual_entropy_weight,
    energy_score,
    nod_loss,
    rcl_loss,
    total_loss,
    vbl_distance,
)
from ricasso.metrics import ScoreSet, auroc, fpr_at_tpr
from ricasso.model import ClassCenters, ExpertAssignment, ExpertEnsembleOutput, assign_experts, build_model, expert_prior

INSTANCES = 20
GRAD_TOL = 1e-4


def _d(rng, *shape, scale=1.0):
    return torch.as_tensor(rng.standard_normal(shape) * scale, dtype=torch.float64)


def _batch(rng, B, C, seed):
    xi = rng.standard_normal((B, 1, 2, 2))
    xa = rng.standard_normal((B, 1, 2, 2))
    return build_training_batch((xi, rng.integers(C, size=B)), (xa, rng.integers(C, size=B)), 1.0, seed, C)


# ------------------------------------------------------------------ criterion 1


def _gradient_cases():
    """(name, fn, inputs) triples; fn maps float64 leaves to a scalar."""
    rng = np.random.default_rng(2024)
    cases = []
    for i in range(INSTANCES):
        C = int(rng.integers(2, 6))
        K = int(rng.integers(1, 4))
        N = int(rng.integers(2, 7))
        d = int(rng.integers(2, 5))
        tau = float(rng.uniform(0.5, 2.0))

        cases.append(("energy_score", lambda z, tau=tau: energy_score(z, tau).sum(), [_d(rng, N, C, scale=2)]))

        w = _d(rng, N)
        cases.append(("aala_factor", lambda e, w=w: (aala_factor(e) * w).sum(), [_d(rng, N, scale=2)]))

        priors = torch.as_tensor(random_simplex(rng, K, C), dtype=torch.float64)
        targets = torch.as_tensor(random_simplex(rng, N, C, floor=0.0), dtype=torch.float64)
        cfg = LossConfig(tau_energy=tau)
        cases.append(("aala∘margins∘cls_loss", lambda v, t=targets, p=priors, c=cfg: cls_loss(v, t, p, c), [_d(rng, N, K, C)]))

        B = int(rng.integers(2, 4))
        Kb = int(rng.integers(2, 4))
        batch = _batch(rng, B, C, i)
        groups = tuple(tuple(g) for g in np.array_split(np.arange(C), Kb - 1)) + (tuple(range(C)),)
        assign = ExpertAssignment(Kb, groups)
        bpriors = torch.as_tensor(random_simplex(rng, Kb, C), dtype=torch.float64)
        feats = _d(rng, 4 * B, Kb, d)

        def nod_fn(v, batch=batch, feats=feats, p=bpriors, a=assign):
            return nod_loss(batch, ExpertEnsembleOutput.from_expert_logits(feats, v), p, LossConfig(), a)

        cases.append(("nod_loss", nod_fn, [_d(rng, 4 * B, Kb, C)]))

        cases.append(("vbl_distance", vbl_distance, [_d(rng, N, d), _d(rng, N, d), _d(rng, N, d)]))

        onehot = torch.as_tensor(np.eye(C)[rng.integers(C, size=N)], dtype=torch.float64)
        probs = torch.as_tensor(random_simplex(rng, N, C), dtype=torch.float64)
        cases.append(("dual_entropy_weight", lambda p, t=onehot: dual_entropy_weight(p, t).sum(), [probs]))

        cases.append(
            ("dec_distance", lambda z, p, c, t=onehot: dec_distance(z, p, t, c), [_d(rng, N, d), probs.clone(), _d(rng, C, d)])
        )

        dp = torch.as_tensor(rng.uniform(0, 5, N), dtype=torch.float64)
        dm = torch.as_tensor(rng.uniform(0, 5, N), dtype=torch.float64)
        ccfg = LossConfig(gamma0=float(rng.uniform(0.5, 2)), gamma1=float(rng.uniform(0.5, 2)), eps0=float(rng.uniform(0, 0.1)))
        cases.append(("cbcl_loss", lambda a, b, c=ccfg: cbcl_loss(a, b, c).sum(), [dp, dm]))

        h_m, h_c = _d(rng, N, d), _d(rng, N, d)
        cases.append(("rcl_loss", lambda um, uc, hm=h_m, hc=h_c: rcl_loss(hm, hc, um, uc), [_d(rng, N, d), _d(rng, N, d)]))

        centers = ClassCenters(_d(rng, Kb, C, d), 0.1, torch.ones(Kb, C, dtype=torch.long))
        proj = _d(rng, 2 * B, 5)
        tcfg = LossConfig(gamma0=0.1, gamma1=0.1, feature_source="all" if i % 2 else "global")

        def total_fn(z, v, u, batch=batch, proj=proj, centers=centers, p=bpriors, a=assign, c=tcfg):
            out = ExpertEnsembleOutput.from_expert_logits(z, v, proj, u)
            return total_loss(batch, out, centers, p, c, a).total

        # proj is the stop-gradient side; its own check is criterion 4
        cases.append(("total_loss", total_fn, [feats.clone(), _d(rng, 4 * B, Kb, C), _d(rng, 2 * B, 5)]))
    return cases


def test_criterion_1_gradient_suite(criterion_line):
    start = time.perf_counter()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, fn, inputs in _gradient_cases():
        err = grad_rel_error(fn, inputs)
        worst[name] = max(worst.get(name, 0.0), err)
        counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - start
    ok = all(e <= GRAD_TOL for e in worst.values()) and min(counts.values()) >= 20 and elapsed < 120
    detail = f"{len(worst)} ops x {min(counts.values())} instances, worst rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
    assert criterion_line(1, ok, detail), worst


# ------------------------------------------------------------------ criterion 2


def test_criterion_2_aala_invariants(criterion_line):
    rng = np.random.default_rng(7)
    in_range = conserved = shift = True
    worst_sum = worst_shift = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 257))
        logits = _d(rng, n, 10, scale=3)
        f = aala_factor(energy_score(logits, 1.0))
        in_range &= bool(((f > 1) & (f <= 2)).all())
        worst_sum = max(worst_sum, abs(float((f - 1).sum()) - 1))
        g = aala_factor(energy_score(logits + float(rng.uniform(-20, 20)), 1.0))
        worst_shift = max(worst_shift, float((f - g).abs().max()))
    conserved = worst_sum <= 1e-9
    shift = worst_shift <= 1e-9
    ok = in_range and conserved and shift
    assert criterion_line(2, ok, f"range ok={in_range}, max |sum-1|={worst_sum:.1e}, max shift diff={worst_shift:.1e}")


# ------------------------------------------------------------------ criterion 3


def test_criterion_3_metric_oracles(criterion_line):
    rng = np.random.default_rng(11)
    worst_auroc = worst_fpr = 0.0
    for k in range(200):
        n, m = rng.integers(1, 201, size=2)
        if k % 2:
            a, b = rng.integers(0, 20, n).astype(float), rng.integers(0, 20, m).astype(float)
        else:
            a, b = rng.standard_normal(n) + 0.5, rng.standard_normal(m)
        s = ScoreSet(a, b)
        worst_auroc = max(worst_auroc, abs(auroc(s) - auroc_pairs(a.tolist(), b.tolist())))
        worst_fpr = max(worst_fpr, abs(fpr_at_tpr(s) - fpr_scan(a.tolist(), b.tolist())))
    example = auroc(ScoreSet([3, 1, 2], [2, 0]))
    ok = worst_auroc <= 1e-12 and worst_fpr == 0.0 and example == 0.75
    assert criterion_line(3, ok, f"AUROC max diff {worst_auroc:.1e}, FPR95 max diff {worst_fpr:.1e}, worked example {example}")


# ------------------------------------------------------------------ criterion 4


def test_criterion_4_stop_gradient(criterion_line):
    torch.manual_seed(0)
    model = build_model((1, 2, 4), num_classes=4, num_experts=3, hidden=16, feat_dim=8).double()
    x = torch.randn(8, 1, 2, 4, dtype=torch.float64)
    B = 2

    def loss_of(params=None):
        out = model(x, head_rows=slice(4, 8))
        return rcl_loss(out.proj[:B], out.proj[B:], out.pred[:B], out.pred[B:]), out

    # detached path: gradient reaching the projections themselves
    out = model(x, head_rows=slice(4, 8))
    h = out.proj.detach().clone().requires_grad_(True)
    u = out.pred.detach().clone().requires_grad_(True)
    loss = rcl_loss(h[:B], h[B:], u[:B], u[B:])
    g_h, g_u = torch.autograd.grad(loss, (h, u), allow_unused=True)
    detached_change = 0.0 if g_h is None else float(g_h.abs().max())

    # predictor-only parameters sit purely on the prediction path
    params = list(model.predictor.parameters())
    loss, _ = loss_of()
    analytic = torch.autograd.grad(loss, params)
    with torch.no_grad():
        fd = central_fd(lambda *ps: loss_of()[0], params, step=1e-6)
    num = math.sqrt(sum(float((a - f).norm()) ** 2 for a, f in zip(analytic, fd)))
    den = max(math.sqrt(sum(float(a.norm()) ** 2 for a in analytic)), 1e-12)
    rel = num / den

    # directional change along the prediction path agrees with the first-order prediction
    direction = [torch.randn_like(p) for p in params]
    eps = 1e-6
    with torch.no_grad():
        for p, dvec in zip(params, direction):
            p.add_(eps * dvec)
        hi = float(loss_of()[0])
        for p, dvec in zip(params, direction):
            p.sub_(2 * eps * dvec)
        lo = float(loss_of()[0])
        for p, dvec in zip(params, direction):
            p.add_(eps * dvec)
    fd_dir = (hi - lo) / (2 * eps)
    an_dir = float(sum((a * dvec).sum() for a, dvec in zip(analytic, direction)))
    ok = detached_change == 0.0 and g_u is not None and float(g_u.abs().max()) > 0 and rel <= GRAD_TOL and abs(fd_dir) > 1e-8
    ok = ok and abs(fd_dir - an_dir) <= 1e-4 * max(abs(fd_dir), 1e-12)
    detail = f"grad on detached projections {detached_change:.1e}, prediction-path rel err {rel:.1e}, directional {an_dir:.3e} vs {fd_dir:.3e}"
    assert criterion_line(4, ok, detail)


# ------------------------------------------------------------------ criterion 5


def _reference_static_la(num_classes, counts, assignment, w_out):
    """Plain multi-expert logit-adjusted cross-entropy written from scratch."""
    n = torch.tensor(counts, dtype=torch.float64)
    pri = n / n.sum()
    rows = []
    for k, group in enumerate(assignment.groups):
        if k == assignment.global_index:
            rows.append(torch.log(pri) + assignment.tau)
        else:
            g = torch.tensor(group)
            row = torch.full((num_classes,), float(torch.log(pri.max())), dtype=torch.float64)
            row[g] = torch.log(pri[g])
            rows.append(row)
    log_prior = torch.stack(rows)

    def criterion(batch, outputs, centers, expert_priors, config, assign):
        B = len(batch)
        y = torch.as_tensor(batch.id_labels, dtype=torch.long)
        logits = outputs.logits[:B]
        total = logits.new_zeros(())
        for k, group in enumerate(assignment.groups):
            ce = F.cross_entropy(logits[:, k] + log_prior[k], y, reduction="none")
            if k == assignment.global_index:
                w = torch.ones(B, dtype=logits.dtype)
            else:
                w = torch.where(torch.isin(y, torch.tensor(group)), 1.0, w_out).to(logits.dtype)
            total = total + (w * ce).sum()
        total = total / B
        return LossBreakdown(nod=total, cbcl=None, rcl=None, total=total, lambda0=0.0, lambda1=0.0, mean_factor=1.0)

    return criterion


def test_criterion_5_reduction_equivalence(criterion_line):
    cfg = RunConfig(precision="float64").replace(
        loss={"nod_enabled": False, "aala_enabled": False, "cbcl_enabled": False, "rcl_enabled": False, "lambda0": 0.0, "lambda1": 0.0},
        optim={"epochs": 6},
        dataset={"val_ood": []},
    )
    prof = make_longtail_profile(cfg.profile.num_classes, cfg.profile.n_max, cfg.profile.imbalance_ratio)
    assignment = assign_experts(prof, cfg.model.num_local, cfg.model.tau)
    ref = train(cfg, criterion=_reference_static_la(prof.num_classes, prof.counts, assignment, cfg.loss.w_out), write=False)
    lib = train(cfg, write=False)
    a, b = np.array(lib.loss_trace()), np.array(ref.loss_trace())
    steps = min(len(a), len(b))
    diff = float(np.abs(a[:steps] - b[:steps]).max())
    ok = steps >= 100 and diff <= 1e-6
    assert criterion_line(5, ok, f"{steps} steps, max |library - reference| = {diff:.2e}")


# ------------------------------------------------------------------ criterion 6


def test_criterion_6_two_hot_optimum(criterion_line):
    prof = make_longtail_profile(3, 300, 10)
    assignment = assign_experts(prof, 1)
    priors = torch.as_tensor(expert_prior(prof.priors, assignment), dtype=torch.float64)
    target = torch.tensor([[0.5, 0.5, 0.0]], dtype=torch.float64)
    v = torch.zeros(1, assignment.num_experts, 3, dtype=torch.float64, requires_grad=True)
    cfg = LossConfig()
    opt = torch.optim.LBFGS([v], max_iter=1000, tolerance_grad=1e-14, tolerance_change=1e-16, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = cls_loss(v, target, priors, cfg)
        loss.backward()
        return loss

    for _ in range(3):
        opt.step(closure)
    terms = cls_loss_terms(v.detach(), target, priors, cfg)
    p = adjusted_softmax(v.detach(), terms.margins)[0]
    err = float((p - target).abs().max())
    assert criterion_line(6, err <= 1e-3, f"max |adjusted softmax - t| = {err:.2e} over {assignment.num_experts} experts")


# ------------------------------------------------------------------ criterion 7


def _trend_runs(loss_over, seeds=(0, 1, 2)):
    out = []
    for s in seeds:
        cfg = RunConfig(seed=s).replace(loss=loss_over, dataset={"data_seed": s})
        out.append(train(cfg, write=False).final)
    return out


@pytest.mark.slow
def test_criterion_7_desk_trend(criterion_line):
    start = time.perf_counter()
    base = _trend_runs({"nod_enabled": False, "rcl_enabled": False, "aala_enabled": False, "cbcl_enabled": False})
    full = _trend_runs({})
    elapsed = time.perf_counter() - start
    gain = 100 * (np.mean([r["auroc"] for r in full]) - np.mean([r["auroc"] for r in base]))
    tail_drop = 100 * (np.mean([r["acc_tail"] for r in base]) - np.mean([r["acc_tail"] for r in full]))
    cfg = RunConfig()
    ok = gain >= 5.0 and tail_drop <= 1.0 and elapsed < 600 and cfg.optim.epochs <= 30
    detail = f"energy AUROC gain {gain:+.2f} pts (need >= 5), tail acc change {-tail_drop:+.2f} pts (need >= -1), {elapsed:.0f}s"
    assert criterion_line(7, ok, detail)


# ------------------------------------------------------------------ criterion 8


def test_criterion_8_ablation_grid(criterion_line, tmp_path):
    cfg_text = (
        "seed: 3\n"
        "dataset: {kind: synthetic, dim: 8, shape: [1, 2, 4], test_per_class: 30, val_ood_size: 90}\n"
        "profile: {num_classes: 3, n_max: 40, imbalance_ratio: 4}\n"
        "model: {hidden: 16, feat_dim: 8}\n"
        "optim: {epochs: 2, batch_size: 16, warmup_epochs: 1}\n"
    )
    path = tmp_path / "grid.yaml"
    path.write_text(cfg_text)
    quiet = lambda s: None  # noqa: E731
    first = cmd_ablate(path, out=tmp_path / "a", echo=quiet)
    second = cmd_ablate(path, out=tmp_path / "b", echo=quiet)
    shape_ok = len(first.rows) == 8 and [tuple(r[k] for k in TOGGLE_NAMES) for r in first.rows] == ABLATION_GRID
    columns_ok = list(first.rows[0]) == list(TOGGLE_NAMES) + ["ACC", "AUROC", "FPR95"]
    deterministic = first.rows == second.rows and all(a.steps == b.steps for a, b in zip(first.records, second.records))
    zero_ok = True
    for row, rec in zip(first.rows, first.records):
        lam0, lam1 = rec.config["loss"]["lambda0"], rec.config["loss"]["lambda1"]
        for step in rec.steps:
            if not row["CBCL"]:
                zero_ok &= step["cbcl"] is None
            if not row["RCL"]:
                zero_ok &= step["rcl"] is None
            if not row["AALA"]:
                zero_ok &= step["mean_factor"] == 1.0
            present = step["nod"] + (lam0 * step["cbcl"] if step["cbcl"] is not None else 0.0) + (lam1 * step["rcl"] if step["rcl"] is not None else 0.0)
            zero_ok &= abs(present - step["total"]) <= 1e-5
            if step["cbcl"] is None and step["rcl"] is None:
                zero_ok &= step["total"] == step["nod"]
    ok = shape_ok and columns_ok and deterministic and zero_ok
    detail = f"rows={len(first.rows)} order ok={shape_ok}, deterministic={deterministic}, disabled terms absent={zero_ok}"
    assert criterion_line(8, ok, detail)


# ------------------------------------------------------------------ criterion 9


def test_criterion_9_cbcl_tanh(criterion_line):
    cfg = LossConfig(gamma0=1.0, gamma1=1.0, eps0=0.0, eps1=1e-6)
    grid = torch.linspace(0, 20, 201, dtype=torch.float64)
    dp, dm = torch.meshgrid(grid, grid, indexing="ij")
    diff = float((cbcl_loss(dp, dm, cfg) - torch.tanh((dp - dm) / 2)).abs().max())
    assert criterion_line(9, diff <= 1e-6, f"max |cbcl - tanh((d+ - d-)/2)| = {diff:.2e} on a 201x201 grid over [0, 20]^2")
