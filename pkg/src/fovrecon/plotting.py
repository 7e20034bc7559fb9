"""CSV-driven plots: boundary-sweep detection curves and training loss
histories. Matplotlib with the Agg backend; no display needed."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ValidationError

SWEEP_FIELDS = ("method", "boundary_deg", "detection_rate")


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def read_sweep_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(SWEEP_FIELDS) - set(reader.fieldnames):
            raise ValidationError(f"{path}: expected columns {SWEEP_FIELDS}")
        for lineno, raw in enumerate(reader, start=2):
            try:
                rows.append({
                    "method": raw["method"],
                    "boundary_deg": float(raw["boundary_deg"]),
                    "detection_rate": float(raw["detection_rate"]),
                })
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: malformed row at line {lineno}: {exc}")
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return rows


def plot_curves(csv_in, png_out) -> Path:
    """One polyline per method: far-boundary eccentricity on x, predicted
    detection rate on y."""
    rows = read_sweep_csv(csv_in)
    methods = sorted({r["method"] for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for method in methods:
        pts = sorted(
            ((r["boundary_deg"], r["detection_rate"]) for r in rows if r["method"] == method)
        )
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.set_xlabel("far-periphery boundary (degrees)")
    ax.set_ylabel("predicted detection rate")
    ax.set_title("Detection rate vs far-periphery radius")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_out, dpi=120)
    plt.close(fig)
    return Path(png_out)


def plot_loss_history(csv_in, png_out) -> Path:
    """Generator/critic loss curves from a training history CSV."""
    steps, gen, critic = [], [], []
    with open(csv_in, newline="") as fh:
        reader = csv.DictReader(fh)
        for raw in reader:
            steps.append(int(raw["step"]))
            gen.append(float(raw["gen_loss"]))
            critic.append(float(raw["critic_loss"]))
    if not steps:
        raise ValidationError(f"{csv_in}: no data rows")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, gen, label="generator")
    ax.plot(steps, critic, label="critic (adv)")
    ax.set_xlabel("generator step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_out, dpi=120)
    plt.close(fig)
    return Path(png_out)
