"""Run-directory reports: figures and a consolidated JSON summary.

Reads the delimited outputs the other commands leave in a run directory
(history.csv, ablation.csv, pair_strengths.csv, eval.json) and renders
plot files next to them. Headless backend only; nothing here opens a
window.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

HISTORY_CSV = "history.csv"
ABLATION_CSV = "ablation.csv"
PAIR_CSV = "pair_strengths.csv"
EVAL_JSON = "eval.json"
REPORT_JSON = "report.json"


def read_history_csv(path):
    """Rows of the training log as a dict of float arrays."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {"epoch": np.zeros(0), "train_loss": np.zeros(0),
                "test_acc": np.zeros(0), "lr": np.zeros(0),
                "wall_s": np.zeros(0)}
    out = {}
    for key in rows[0]:
        out[key] = np.array([float(r[key]) if r[key] != "" else np.nan
                             for r in rows])
    return out


def plot_accuracy_curve(history, png_path):
    """Loss and test-accuracy curves against epoch; returns png_path."""
    fig, ax1 = plt.subplots(figsize=(7, 4.2))
    ep = history["epoch"]
    ax1.plot(ep, history["train_loss"], color="tab:blue", lw=1.2,
             label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax1.tick_params(axis="y", labelcolor="tab:blue")
    ax2 = ax1.twinx()
    acc = history["test_acc"]
    have = np.isfinite(acc)
    ax2.plot(ep[have], acc[have], color="tab:red", lw=1.2, marker=".",
             ms=3, label="test acc")
    ax2.set_ylabel("test accuracy", color="tab:red")
    ax2.set_ylim(0.0, 1.0)
    ax2.tick_params(axis="y", labelcolor="tab:red")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def read_ablation_csv(path):
    """Long-form ablation rows -> list of dicts with typed rate."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["rate"] = float(r["rate"])
    return rows


def plot_ablation_distributions(rows, png_path):
    """Overall-accuracy drop per ablation kind, one marker per subnet set."""
    base = [r["rate"] for r in rows
            if r["target"] == "baseline" and r["class"] == "overall"]
    baseline = base[0] if base else np.nan
    kinds = []
    for r in rows:
        if r["target"] != "baseline" and r["class"] == "overall" \
                and r["target"] not in kinds:
            kinds.append(r["target"])
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for k, kind in enumerate(kinds):
        vals = [r["rate"] for r in rows
                if r["target"] == kind and r["class"] == "overall"]
        x = np.full(len(vals), k) + np.linspace(-0.15, 0.15, len(vals))
        ax.plot(x, vals, "o", ms=5, alpha=0.8)
    if np.isfinite(baseline):
        ax.axhline(baseline, color="gray", ls="--", lw=1.0,
                   label=f"baseline {baseline:.3f}")
        ax.legend(frameon=False)
    ax.set_xticks(range(len(kinds)))
    ax.set_xticklabels(kinds, rotation=20)
    ax.set_ylabel("test accuracy after ablation")
    ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def write_pair_strengths_csv(matrix, path):
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["from_subnet", "to_subnet", "mean_abs_weight"])
        for i in range(matrix.shape[0]):
            for j in range(matrix.shape[1]):
                w.writerow([i, j, f"{matrix[i, j]:.10g}"])


def read_pair_strengths_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    p = 1 + max(int(r["from_subnet"]) for r in rows)
    out = np.zeros((p, p))
    for r in rows:
        out[int(r["from_subnet"]), int(r["to_subnet"])] = \
            float(r["mean_abs_weight"])
    return out


def plot_pair_strengths(matrix, png_path):
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(5.5, 4.6))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xlabel("to subnet")
    ax.set_ylabel("from subnet")
    fig.colorbar(im, ax=ax, label="mean |coupling|")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def consolidate_run(run_dir):
    """Render figures for whatever outputs exist and write report.json."""
    summary = {"run_dir": os.path.abspath(run_dir), "figures": []}
    hist_path = os.path.join(run_dir, HISTORY_CSV)
    if os.path.exists(hist_path):
        history = read_history_csv(hist_path)
        png = plot_accuracy_curve(history,
                                  os.path.join(run_dir, "accuracy_curve.png"))
        summary["figures"].append(os.path.basename(png))
        acc = history["test_acc"]
        have = np.isfinite(acc)
        summary["epochs"] = int(len(history["epoch"]))
        summary["final_train_loss"] = (float(history["train_loss"][-1])
                                       if len(acc) else None)
        summary["best_test_acc"] = (float(np.max(acc[have]))
                                    if have.any() else None)
        summary["final_test_acc"] = (float(acc[have][-1])
                                     if have.any() else None)
    abl_path = os.path.join(run_dir, ABLATION_CSV)
    if os.path.exists(abl_path):
        rows = read_ablation_csv(abl_path)
        png = plot_ablation_distributions(
            rows, os.path.join(run_dir, "ablation_distributions.png"))
        summary["figures"].append(os.path.basename(png))
        summary["ablation_rows"] = len(rows)
    pair_path = os.path.join(run_dir, PAIR_CSV)
    if os.path.exists(pair_path):
        png = plot_pair_strengths(read_pair_strengths_csv(pair_path),
                                  os.path.join(run_dir, "pair_strengths.png"))
        summary["figures"].append(os.path.basename(png))
    eval_path = os.path.join(run_dir, EVAL_JSON)
    if os.path.exists(eval_path):
        with open(eval_path) as f:
            summary["eval"] = json.load(f)
    out = os.path.join(run_dir, REPORT_JSON)
    with open(out, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary
