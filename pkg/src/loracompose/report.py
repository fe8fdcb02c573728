"""Delimited tables and matplotlib figures written next to run artifacts."""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .evaluation import AuditReport
from .lasrc import BlockComposition

# PNG metadata defaults embed the matplotlib version; drop it so files hash identically
_PNG_META = {"Software": None}


def write_tsv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in row])
    return path


def _figure(width: float = 6.0, height: float | None = None) -> Figure:
    height = height or width * 0.618
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path: str | os.PathLike) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    return path


def plot_task_deltas(report: AuditReport, path: str | os.PathLike) -> Path:
    rows = report.per_task_rows()
    fig = _figure(max(6.0, 0.35 * len(rows) + 2))
    ax = fig.add_subplot(111)
    deltas = [r[3] for r in rows]
    colors = ["tab:green" if d > 0 else "tab:red" if d < 0 else "tab:gray" for d in deltas]
    ax.bar(range(len(rows)), deltas, color=colors)
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r[0] for r in rows], rotation=60, ha="right", fontsize=8)
    ax.set_ylabel(f"EM {report.label_b} - {report.label_a} (pp)")
    ax.set_title(f"Per-task change, macro {report.delta_macro:+.2f} pp")
    return _save(fig, path)


def plot_bootstrap(report: AuditReport, path: str | os.PathLike) -> Path:
    fig = _figure()
    ax = fig.add_subplot(111)
    vals = report.bootstrap_values
    bins = min(50, max(5, len(np.unique(vals))))
    ax.hist(vals, bins=bins, color="tab:blue", alpha=0.75)
    for x, style in ((report.ci_lo, "--"), (report.ci_hi, "--"), (report.delta_macro, "-")):
        ax.axvline(x, color="black", ls=style, lw=1)
    ax.set_xlabel("macro EM difference (pp)")
    ax.set_ylabel("resamples")
    ax.set_title(f"Task bootstrap {100 * report.level:.0f}% CI [{report.ci_lo:.2f}, {report.ci_hi:.2f}], p={report.p_value:.4f}")
    return _save(fig, path)


def plot_block_gammas(comps: Mapping[str, Sequence[BlockComposition]], path: str | os.PathLike) -> Path:
    """Gamma and overlap per block, one marker series per composition path."""
    fig = _figure()
    ax = fig.add_subplot(111)
    for label, blocks in comps.items():
        ax.plot([c.block_id for c in blocks], [c.gamma_b for c in blocks], marker="o", lw=0.8, label=label)
    ax.set_ylabel("gamma_b")
    ax.set_ylim(0.0, 1.0)
    if 0 < len(comps) <= 12:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_view_em(view_em: Mapping[str, Mapping[str, float]], path: str | os.PathLike) -> Path:
    """Grouped bars: per task, EM of each view."""
    tasks = sorted(view_em)
    views = sorted({v for t in tasks for v in view_em[t]})
    fig = _figure(max(6.0, 0.6 * len(tasks) + 2))
    ax = fig.add_subplot(111)
    width = 0.8 / max(1, len(views))
    for i, v in enumerate(views):
        ax.bar(np.arange(len(tasks)) + i * width, [100.0 * view_em[t].get(v, 0.0) for t in tasks], width, label=v)
    ax.set_xticks(np.arange(len(tasks)) + 0.4 - width / 2)
    ax.set_xticklabels(tasks, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("EM (%)")
    ax.legend(fontsize=7)
    return _save(fig, path)


def write_audit(report: AuditReport, out_dir: str | os.PathLike, figures: bool = True) -> list[Path]:
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    p = out / "audit.json"
    p.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    paths.append(p)
    p = out / "audit.txt"
    p.write_text(report.to_table())
    paths.append(p)
    paths.append(write_tsv(out / "per_task.tsv", ["task_id", f"em_{report.label_a}", f"em_{report.label_b}", "delta"], report.per_task_rows()))
    if figures:
        (out / "figures").mkdir(exist_ok=True)
        paths.append(plot_task_deltas(report, out / "figures" / "task_deltas.png"))
        paths.append(plot_bootstrap(report, out / "figures" / "bootstrap.png"))
    return paths
