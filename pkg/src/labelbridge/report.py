"""Rendering helpers: image grids, loss curves, and run summaries.

Images are written as PNG (lossless).  The grid layout stacks one row per
array family: inputs on top, the class's image labels in the middle, the
generated estimates at the bottom.
"""

from __future__ import annotations

import json
import os

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _to_unit(img, data_range):
    lo, hi = data_range
    arr = (np.asarray(img, dtype=np.float64) - lo) / (hi - lo)
    arr = np.clip(arr, 0.0, 1.0)
    if arr.shape[0] == 1:
        return arr[0]
    return np.transpose(arr, (1, 2, 0))


def save_image_grid(path, rows, row_titles, data_range):
    """Write a grid PNG: one row per (N,C,H,W) array in `rows`."""
    n = min(r.shape[0] for r in rows)
    fig, axes = plt.subplots(len(rows), n, figsize=(1.2 * n, 1.3 * len(rows)), squeeze=False)
    for ri, row in enumerate(rows):
        for ci in range(n):
            ax = axes[ri][ci]
            ax.imshow(_to_unit(row[ci], data_range), cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if ci == 0:
                ax.set_ylabel(row_titles[ri], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curves(path, metrics):
    """Plot intra/inter/total losses and the margin statistic over steps."""
    steps = [m["step"] for m in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, [m["loss"] for m in metrics], label="total")
    ax1.plot(steps, [m["loss_intra"] for m in metrics], label="intra")
    if metrics and metrics[0].get("loss_inter") is not None:
        ax1.plot(steps, [m["loss_inter"] for m in metrics], label="inter")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(steps, [m["margin"] for m in metrics], color="tab:green")
    ax2.set_xlabel("step")
    ax2.set_ylabel("margin (d_conf - d_true)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def read_metrics(run_dir):
    path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_records(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def summarize_run(run_dir):
    """Human-readable digest of whatever a run directory contains."""
    lines = [f"run: {run_dir}"]
    cfg_path = os.path.join(run_dir, "config.json")
    if os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            cfg = json.load(fh)
        lines.append(f"  code version: {cfg.get('code_version')}")
        lines.append(f"  seeds: {cfg.get('seeds')}")
        data = cfg.get("config", {}).get("data", {})
        if data:
            lines.append(f"  dataset: {data.get('name')} @ {data.get('resolution')}px")
    metrics = read_metrics(run_dir)
    if metrics:
        first, last = metrics[0], metrics[-1]
        lines.append(
            f"  steps logged: {len(metrics)} (to step {last['step']}); "
            f"loss {first['loss']:.4f} -> {last['loss']:.4f}; "
            f"margin {last['margin']:.3f}"
        )
    rep_path = os.path.join(run_dir, "report.json")
    if os.path.exists(rep_path):
        with open(rep_path) as fh:
            rep = json.load(fh)
        for key in ("clean_accuracy", "robust_accuracy", "n_samples"):
            if key in rep:
                lines.append(f"  {key}: {rep[key]}")
        if "attack_config" in rep:
            ac = rep["attack_config"]
            lines.append(
                f"  attack: {ac.get('family')} eps={ac.get('epsilon'):.5f} steps={ac.get('steps')}"
            )
    if len(lines) == 1:
        lines.append("  (empty run directory)")
    return "\n".join(lines)
