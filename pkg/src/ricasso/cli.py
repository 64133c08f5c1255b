"""``ricasso`` command line: train, eval, ablate, report.

Exit codes: 0 success, 2 config/schema error (the message names the field),
3 training diverged, 4 checkpoint unreadable or mismatched, 5 other input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import report as rp
from .config import ConfigError, RunConfig, config_from_dict, read_raw_config
from .harness import (
    ABLATION_GRID,
    TOGGLE_NAMES,
    CheckpointError,
    _dtype,
    _predict,
    DivergenceError,
    build_data,
    evaluate_scores,
    load_checkpoint,
    parse_ood_source,
    run_ablation_grid,
    train,
)
from .metrics import OODReport, auroc, fpr_at_tpr, group_accuracy, mean_report, per_class_accuracy

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_INPUT = 0, 2, 3, 4, 5


def _load(path, seed: int | None, out: str | None) -> tuple[RunConfig, dict]:
    raw = dict(read_raw_config(path))
    extra = {"ablation": raw.pop("ablation", None)}
    cfg = config_from_dict(raw)
    over = {}
    if seed is not None:
        over["seed"] = seed
    if out is not None:
        over["output_dir"] = out
    return (cfg.replace(**over) if over else cfg), extra


def _parse_grid(grid) -> list[tuple[bool, bool, bool, bool]]:
    if grid is None:
        return list(ABLATION_GRID)
    rows = []
    for i, row in enumerate(grid):
        if isinstance(row, dict):
            row = [row.get(k, row.get(k.lower())) for k in TOGGLE_NAMES]
        if len(row) != 4 or not all(isinstance(v, bool) for v in row):
            raise ConfigError(f"ablation[{i}]", "each row needs four booleans (NOD, RCL, AALA, CBCL)")
        rows.append(tuple(row))
    if not rows:
        raise ConfigError("ablation", "grid is empty")
    return rows


def cmd_train(config_path, seed: int | None = None, out: str | None = None, echo=print):
    cfg, _ = _load(config_path, seed, out)
    rec = train(cfg, write=True, echo=echo)
    echo(f"run directory: {rec.run_dir}")
    return rec


def cmd_eval(checkpoint, ood: list[str] | None = None, detector: str = "energy", out=None, figures: bool = True, config_path=None, echo=print):
    expected = None
    if config_path is not None:
        expected = _load(config_path, None, None)[0].hash()
    ck = load_checkpoint(checkpoint, expected)
    cfg = ck.config
    if not ood and cfg.dataset.kind == "synthetic":
        ood = [f"synthetic:{k}" for k in cfg.dataset.val_ood]
    if not ood:
        raise ValueError("at least one --ood source is required")
    out_dir = Path(out) if out else Path(checkpoint).parent / f"eval-{detector}"
    out_dir.mkdir(parents=True, exist_ok=True)

    test = build_data(cfg).test
    preds = _predict(ck.model, test.inputs, _dtype(cfg)).argmax(-1).numpy()
    acc = float(np.mean(preds == test.labels))
    groups = group_accuracy(preds, test.labels, ck.profile)
    bundle = rp.ReportBundle(out_dir, provenance=rp.provenance(ck.config_hash, cfg.seed))
    for spec in ood:
        src = parse_ood_source(spec, cfg)
        scores = evaluate_scores(ck, test, src, detector)
        bundle.reports.append(
            OODReport(src.name, detector, auroc(scores), fpr_at_tpr(scores), acc, groups, len(scores.id_scores), len(scores.ood_scores), ck.config_hash)
        )
        if figures:
            stem = rp.safe_stem(src.name)
            bundle.figures.update(rp.emit_figure(out_dir, f"roc-{stem}", "roc", rp.roc_data(scores), f"ROC ({detector}) vs {src.name}"))
            bundle.figures.update(rp.emit_figure(out_dir, f"hist-{stem}", "hist", rp.histogram_data(scores), f"{detector} scores vs {src.name}"))
    bundle.reports.append(mean_report(bundle.reports))
    if figures:
        pc = per_class_accuracy(preds, test.labels, ck.profile.num_classes)
        bundle.figures.update(rp.emit_figure(out_dir, "per-class-accuracy", "per-class", rp.per_class_data(pc, ck.profile.counts), "per-class accuracy"))
    bundle.rows = rp.report_rows(bundle.reports)
    bundle.tables.update(rp.write_table(out_dir, "ood-report", bundle.rows, rp.REPORT_COLUMNS))
    rp.write_summary(out_dir / "summary.json", bundle.reports, bundle.provenance)
    echo(rp.format_table(bundle.rows, rp.REPORT_COLUMNS).rstrip())
    echo("mean row: unweighted average over OOD sources")
    return bundle


def cmd_ablate(config_path, seed: int | None = None, out=None, echo=print):
    cfg, extra = _load(config_path, seed, None)
    grid = _parse_grid(extra["ablation"])
    out_dir = Path(out) if out else Path(cfg.output_dir) / f"ablation-{cfg.hash()[:8]}"
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_ablation_grid(cfg, grid, echo=echo)
    columns = list(TOGGLE_NAMES) + ["ACC", "AUROC", "FPR95"]
    bundle = rp.ReportBundle(out_dir, provenance=rp.provenance(cfg.hash(), cfg.seed), rows=result.rows, records=result.records)
    bundle.tables.update(rp.write_table(out_dir, "ablation", result.rows, columns))
    doc = {"provenance": bundle.provenance, "rows": result.rows, "final": [r.final for r in result.records]}
    (out_dir / "ablation.json").write_text(json.dumps(doc, indent=2))
    echo(rp.format_table(result.rows, columns).rstrip())
    return bundle


def cmd_report(source, out=None, figures: bool = True, echo=print):
    """Re-render a bundle directory, or summarise a run directory's training curves."""
    source = Path(source)
    out_dir = Path(out) if out else source
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = rp.ReportBundle(out_dir)
    if (source / "epochs.csv").exists():
        epochs = rp.read_raw_rows(source / "epochs.csv")
        cols = [c for c in ("epoch", "lr", "nod", "cbcl", "rcl", "total", "acc", "acc_head", "acc_medium", "acc_tail", "auroc", "fpr95") if c in epochs[0]]
        bundle.rows = epochs
        bundle.tables.update(rp.write_table(out_dir, "training", epochs, cols))
        if figures:
            keys = [k for k in ("total", "acc", "auroc") if k in epochs[0]]
            bundle.figures.update(rp.emit_figure(out_dir, "training-curves", "curves", rp.curve_data(epochs, keys), "training"))
        echo(rp.format_table(epochs, cols).rstrip())
    elif (source / "summary.json").exists():
        reports, prov = rp.read_summary(source / "summary.json")
        bundle.reports, bundle.provenance = reports, prov
        bundle.rows = rp.report_rows(reports)
        bundle.tables.update(rp.write_table(out_dir, "ood-report", bundle.rows, rp.REPORT_COLUMNS))
        if figures:
            if out_dir != source:
                for f in source.glob("*.kind"):
                    for ext in (".kind", ".csv"):
                        (out_dir / f.with_suffix(ext).name).write_bytes(f.with_suffix(ext).read_bytes())
            for png in rp.rerender(out_dir):
                bundle.figures[png.stem] = png
        echo(rp.format_table(bundle.rows, rp.REPORT_COLUMNS).rstrip())
    elif (source / "ablation.csv").exists():
        rows = rp.read_raw_rows(source / "ablation.csv")
        bundle.rows = rows
        bundle.tables.update(rp.write_table(out_dir, "ablation", rows))
        echo(rp.format_table(rows).rstrip())
    else:
        raise ValueError(f"{source} holds neither a run, an eval bundle nor an ablation table")
    return bundle


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ricasso", description="Long-tailed classification with OOD detection.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="parent directory for the run directory")

    e = sub.add_parser("eval", help="score a checkpoint against OOD sources")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--ood", action="append", help="synthetic:<kind>, image directory or score file; repeatable")
    e.add_argument("--detector", choices=("msp", "energy", "odin"), default="energy")
    e.add_argument("--config", help="reject the checkpoint unless its config hash matches this file")
    e.add_argument("--out")
    e.add_argument("--no-figures", action="store_true")

    a = sub.add_parser("ablate", help="run the (NOD, RCL, AALA, CBCL) toggle grid")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--out")

    r = sub.add_parser("report", help="render tables and figures from a run or bundle directory")
    r.add_argument("source")
    r.add_argument("--out")
    r.add_argument("--no-figures", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(args.config, args.seed, args.out)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.ood, args.detector, args.out, not args.no_figures, args.config)
        elif args.command == "ablate":
            cmd_ablate(args.config, args.seed, args.out)
        else:
            cmd_report(args.source, args.out, not args.no_figures)
    except (ConfigError, yaml.YAMLError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
