"""Stage results, CSV logs, and the matplotlib figures written next to them."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .networks import Checkpoint  # noqa: E402

# strip the library-version metadata so identical inputs give identical bytes
PNG_METADATA = {"Software": None}


class TrainingDivergedError(RuntimeError):
    """Non-finite loss encountered; aborts the stage with diagnostics."""


@dataclass
class StageResult:
    checkpoint: Checkpoint
    checkpoint_path: Path
    log_csv: Path
    curve_png: Path
    summary: dict = field(default_factory=dict)


def write_loss_csv(path: Path | str, header: list[str], rows: list[tuple]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def plot_loss_curves(path: Path | str, header: list[str], rows: list[tuple], title: str) -> Path:
    """Loss-vs-step figure next to the CSV; first column is the step index."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r[0] for r in rows]
    for col in range(1, len(header)):
        ax.plot(steps, [r[col] for r in rows], label=header[col], linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def write_json(path: Path | str, payload: dict) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path


def write_table_csv(path: Path | str, columns: list[str], rows: list[list]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def plot_metric_bars(
    path: Path | str, labels: list[str], values: list[float], metric_name: str
) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(labels)), values, color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(metric_name)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)
    return path
