"""Render run reports as figures next to the delimited output files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def render_accuracy_curves(path: Path, rows: list[dict]) -> None:
    """Per-domain accuracy and round-mean accuracy over communication rounds."""
    domains = sorted({row["domain"] for row in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for dom in domains:
        pts = [(row["round"], row["accuracy"]) for row in rows if row["domain"] == dom]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"domain {dom}", alpha=0.7)
    rounds = sorted({row["round"] for row in rows})
    means = [
        np.mean([row["accuracy"] for row in rows if row["round"] == r]) for r in rounds
    ]
    ax.plot(rounds, means, "k--", linewidth=2, label="mean")
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    ax.set_title("global model accuracy")
    _save(fig, path)


def render_adaptive_net_curve(path: Path, rows: list[dict]) -> bool:
    """Domain-classification accuracy of the adaptive network per round."""
    pts = sorted({
        (row["round"], row["adaptive_net_acc"])
        for row in rows
        if row["adaptive_net_acc"] is not None
    })
    if not pts:
        return False
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", markersize=3)
    ax.set_xlabel("round")
    ax.set_ylabel("domain accuracy")
    ax.set_ylim(0, 1.02)
    ax.set_title("adaptive network convergence")
    _save(fig, path)
    return True


def render_per_key_matrix(path: Path, matrix: np.ndarray) -> None:
    """Heatmap of accuracy when forcing each key (rows) on each domain (columns)."""
    n_rows, n_domains = matrix.shape
    fig, ax = plt.subplots(figsize=(1.2 * n_domains + 2, 0.6 * n_rows + 2))
    im = ax.imshow(matrix, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(n_domains), [f"dom {k}" for k in range(n_domains)])
    ax.set_yticks(
        range(n_rows), ["meta only"] + [f"key {k}" for k in range(n_rows - 1)]
    )
    for i in range(n_rows):
        for j in range(n_domains):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    color="w" if matrix[i, j] < 0.6 else "k", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title("per-key accuracy decomposition")
    _save(fig, path)


def render_run_figures(out_dir: Path, rows: list[dict], report: EvalReport) -> list[Path]:
    made = []
    if rows:
        p = out_dir / "accuracy_curves.png"
        render_accuracy_curves(p, rows)
        made.append(p)
        p = out_dir / "adaptive_net_accuracy.png"
        if render_adaptive_net_curve(p, rows):
            made.append(p)
    if report.per_key_matrix is not None:
        p = out_dir / "per_key_matrix.png"
        render_per_key_matrix(p, report.per_key_matrix)
        made.append(p)
    return made


def render_comparison_figure(path: Path, table_rows: list[dict], labels: list[str]) -> None:
    """Grouped bars of per-domain accuracy for each compared run."""
    domains = [row["domain"] for row in table_rows]
    x = np.arange(len(domains))
    width = 0.8 / max(1, len(labels))
    fig, ax = plt.subplots(figsize=(1.0 * len(domains) + 3, 4))
    for i, label in enumerate(labels):
        vals = [row[label] for row in table_rows]
        ax.bar(x + (i - (len(labels) - 1) / 2) * width, vals, width, label=label)
    ax.set_xticks(x, domains)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    ax.set_title("per-domain accuracy by run")
    _save(fig, path)
