"""Figure and table rendering for evaluation and training artifacts.

Each render writes a PNG next to a delimited (CSV) version of the same
numbers so results can be inspected without re-running anything.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def render_pr_curves(report_dict, out_dir, stem="pr"):
    """PR-curve figure + CSV from an EvalReport dict."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}_points.csv")
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["class", "recall", "precision"])
        for cls, pts in report_dict["pr_curves"].items():
            for rec, prec in pts:
                wr.writerow([cls, f"{rec:.6f}", f"{prec:.6f}"])
    fig, ax = plt.subplots(figsize=(5, 4))
    for cls, pts in report_dict["pr_curves"].items():
        if not pts:
            continue
        rec = [p[0] for p in pts]
        prec = [p[1] for p in pts]
        ap = report_dict["per_class_ap"].get(cls)
        label = f"class {cls}" + (f" (AP {ap:.3f})" if ap is not None else "")
        ax.plot(rec, prec, marker=".", markersize=2, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    title = "precision / recall"
    if report_dict.get("mean_ap") is not None:
        title += f"  (mAP {report_dict['mean_ap']:.3f})"
    ax.set_title(title)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    png_path = os.path.join(out_dir, f"{stem}.png")
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
    return png_path, csv_path


def render_training_curves(metrics_path, out_dir, stem="training"):
    """Loss/AP curves + CSV from a metrics.jsonl file."""
    os.makedirs(out_dir, exist_ok=True)
    steps, totals, hms, boxes, auxs = [], [], [], [], []
    val_epochs, val_aps = [], []
    with open(metrics_path) as f:
        for line in f:
            rec = json.loads(line)
            if "total" in rec:
                steps.append(rec["step"])
                totals.append(rec["total"])
                hms.append(rec["l_hm"])
                boxes.append(rec["l_box"])
                auxs.append(rec.get("l_aux"))
            elif "val_ap" in rec:
                val_epochs.append(rec["epoch"])
                val_aps.append(rec["val_ap"])
    csv_path = os.path.join(out_dir, f"{stem}_losses.csv")
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "total", "l_hm", "l_box", "l_aux"])
        for row in zip(steps, totals, hms, boxes, auxs):
            wr.writerow(["" if v is None else v for v in row])
    fig, axes = plt.subplots(1, 2 if val_aps else 1, figsize=(9 if val_aps else 5, 4))
    ax0 = axes[0] if val_aps else axes
    ax0.plot(steps, totals, label="total", lw=1)
    ax0.plot(steps, hms, label="heatmap", lw=1)
    ax0.plot(steps, boxes, label="box", lw=1)
    if any(a is not None for a in auxs):
        ax0.plot(steps, [a if a is not None else np.nan for a in auxs],
                 label="aux", lw=1)
    ax0.set_xlabel("step")
    ax0.set_ylabel("loss")
    ax0.set_yscale("log")
    ax0.legend(fontsize=8)
    if val_aps:
        axes[1].plot(val_epochs, val_aps, marker="o")
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("validation mAP")
        axes[1].set_ylim(0, 1.02)
    fig.tight_layout()
    png_path = os.path.join(out_dir, f"{stem}.png")
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
    return png_path, csv_path


def render_attention_maps(attention, out_dir, stem="attention"):
    """One figure per attention layer: branch-a and branch-b maps."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, fa, fb in attention:
        fig, axes = plt.subplots(1, 2, figsize=(8, 4))
        for ax, data, branch in ((axes[0], fa, "a"), (axes[1], fb, "b")):
            im = ax.imshow(np.asarray(data)[0, 0], origin="lower", cmap="viridis",
                           vmin=0.0, vmax=1.0)
            ax.set_title(f"{name} branch {branch}")
            fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{stem}_{name.replace('.', '_')}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
