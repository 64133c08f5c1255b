"""Tables, figures and machine-readable summaries.

Every figure is drawn from a small raw-data CSV written next to it, and the
same CSV can be fed back through :func:`render_figure` to redraw it. Human
tables show percentages to two decimals; raw CSV and JSON keep full float
precision via ``repr``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .metrics import OODReport, ScoreSet, roc_curve_points  # noqa: E402

REPORT_COLUMNS = ("dataset", "score_kind", "auroc", "fpr95", "acc", "acc_head", "acc_medium", "acc_tail")
PERCENT_COLUMNS = frozenset({"auroc", "fpr95", "acc", "acc_head", "acc_medium", "acc_tail", "ACC", "AUROC", "FPR95"})
# fixed metadata keeps PNG bytes a pure function of the raw data
_PNG_META = {"Software": f"matplotlib {matplotlib.__version__}"}


@dataclass
class ReportBundle:
    out_dir: Path
    tables: dict[str, Path] = field(default_factory=dict)
    figures: dict[str, Path] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    reports: list[OODReport] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    records: list = field(default_factory=list, repr=False)


def provenance(config_hash: str, seed: int) -> dict:
    return {"config_hash": config_hash, "seed": seed, "version": f"ricasso {__version__}"}


def report_rows(reports: list[OODReport]) -> list[dict]:
    rows = []
    for r in reports:
        rows.append(
            {
                "dataset": r.dataset,
                "score_kind": r.score_kind,
                "auroc": r.auroc,
                "fpr95": r.fpr95,
                "acc": r.acc,
                "acc_head": r.group_acc.get("head"),
                "acc_medium": r.group_acc.get("medium"),
                "acc_tail": r.group_acc.get("tail"),
            }
        )
    return rows


def _human(value, column: str) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "x" if value else ""
    if column in PERCENT_COLUMNS and isinstance(value, (int, float)):
        return "nan" if value != value else f"{100 * value:.2f}"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def format_table(rows: list[dict], columns=None, delimiter: str = "\t") -> str:
    """Delimiter-separated text with percentage columns scaled to 2 decimals."""
    columns = list(columns or (rows[0].keys() if rows else []))
    lines = [delimiter.join(columns)]
    lines += [delimiter.join(_human(row.get(c), c) for c in columns) for row in rows]
    return "\n".join(lines) + "\n"


def write_raw_rows(path, rows: list[dict], columns=None) -> Path:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return Path(path)


def read_raw_rows(path) -> list[dict]:
    """Inverse of :func:`write_raw_rows`: numbers come back as int/float, blanks as None."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({k: _parse_cell(v) for k, v in row.items()})
    return out


def _parse_cell(text: str):
    if text == "":
        return None
    if text in ("True", "False"):
        return text == "True"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def write_table(out_dir, name: str, rows: list[dict], columns=None) -> dict[str, Path]:
    """``<name>.tsv`` for people, ``<name>.csv`` with full precision for machines."""
    out_dir = Path(out_dir)
    human = out_dir / f"{name}.tsv"
    human.write_text(format_table(rows, columns))
    raw = write_raw_rows(out_dir / f"{name}.csv", rows, columns)
    return {name: human, f"{name}-raw": raw}


def write_summary(path, reports: list[OODReport], prov: dict, extra: dict | None = None) -> Path:
    doc = {"provenance": prov, "reports": [r.to_dict() for r in reports]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))
    return Path(path)


def read_summary(path) -> tuple[list[OODReport], dict]:
    doc = json.loads(Path(path).read_text())
    return [OODReport.from_dict(d) for d in doc["reports"]], doc["provenance"]


def read_step_log(path) -> list[dict]:
    """Per-step loss rows from a run directory's ``steps.csv``."""
    return read_raw_rows(path)


# ---------------------------------------------------------------- figures


def roc_data(scores: ScoreSet) -> dict[str, np.ndarray]:
    fpr, tpr = roc_curve_points(scores)
    return {"fpr": fpr, "tpr": tpr}


def histogram_data(scores: ScoreSet) -> dict[str, np.ndarray]:
    values = np.concatenate([scores.id_scores, scores.ood_scores])
    split = np.array([1] * len(scores.id_scores) + [0] * len(scores.ood_scores))
    return {"score": values, "is_id": split}


def per_class_data(acc: np.ndarray, counts) -> dict[str, np.ndarray]:
    return {"class": np.arange(len(acc)), "count": np.asarray(counts), "acc": np.asarray(acc, dtype=float)}


def curve_data(epochs: list[dict], keys=("total", "acc", "auroc")) -> dict[str, np.ndarray]:
    out = {"epoch": np.array([e["epoch"] for e in epochs])}
    for k in keys:
        out[k] = np.array([np.nan if e.get(k) is None else e[k] for e in epochs], dtype=float)
    return out


def write_columns(path, data: dict[str, np.ndarray]) -> Path:
    names = list(data)
    n = len(next(iter(data.values())))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(n):
            w.writerow([repr(float(data[k][i])) if np.issubdtype(np.asarray(data[k]).dtype, np.floating) else int(data[k][i]) for k in names])
    return Path(path)


def read_columns(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        names = next(reader)
        rows = list(reader)
    out = {}
    for j, name in enumerate(names):
        col = [r[j] for r in rows]
        is_int = all(c.lstrip("-").isdigit() for c in col)
        out[name] = np.array([int(c) for c in col]) if is_int else np.array([float(c) for c in col])
    return out


def _draw(kind: str, data: dict[str, np.ndarray], title: str):
    fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
    if kind == "roc":
        ax.plot(data["fpr"], data["tpr"], lw=1.5)
        ax.plot([0, 1], [0, 1], ls="--", c="grey", lw=0.8)
        ax.set_xlabel("false positive rate (OOD)")
        ax.set_ylabel("true positive rate (ID)")
    elif kind == "hist":
        s, is_id = data["score"], data["is_id"].astype(bool)
        bins = np.linspace(s.min(), s.max(), 41) if s.max() > s.min() else 10
        ax.hist(s[is_id], bins=bins, alpha=0.6, label="ID", density=True)
        ax.hist(s[~is_id], bins=bins, alpha=0.6, label="OOD", density=True)
        ax.set_xlabel("score (higher = more ID)")
        ax.legend()
    elif kind == "per-class":
        ax.bar(data["class"], data["acc"])
        ax.set_xlabel("class (sorted by training count)")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
    elif kind == "curves":
        for k in data:
            if k != "epoch":
                ax.plot(data["epoch"], data[k], marker="o", ms=3, label=k)
        ax.set_xlabel("epoch")
        ax.legend()
    else:
        raise ValueError(f"unknown figure kind {kind!r}")
    ax.set_title(title)
    fig.tight_layout()
    return fig


def render_figure(kind: str, raw_csv, png, title: str = "") -> Path:
    """Draw a figure purely from its raw-data CSV."""
    fig = _draw(kind, read_columns(raw_csv), title)
    fig.savefig(png, format="png", metadata=_PNG_META)
    plt.close(fig)
    return Path(png)


def emit_figure(out_dir, stem: str, kind: str, data: dict[str, np.ndarray], title: str = "") -> dict[str, Path]:
    """Write ``<stem>.csv`` and render ``<stem>.png`` from that file."""
    out_dir = Path(out_dir)
    raw = write_columns(out_dir / f"{stem}.csv", data)
    png = render_figure(kind, raw, out_dir / f"{stem}.png", title)
    (out_dir / f"{stem}.kind").write_text(f"{kind}\n{title}\n")
    return {stem: png, f"{stem}-raw": raw}


def rerender(out_dir) -> list[Path]:
    """Redraw every figure in a bundle directory from its raw CSV."""
    out_dir = Path(out_dir)
    done = []
    for spec in sorted(out_dir.glob("*.kind")):
        kind, title = (spec.read_text().split("\n") + [""])[:2]
        done.append(render_figure(kind, spec.with_suffix(".csv"), spec.with_suffix(".png"), title))
    return done


def safe_stem(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "-" for ch in name)
