"""Figure emission: training curves and predicted-pose wireframes."""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import geometry as geo
from .geometry import Scene

# skeleton edges for drawing (keypoint index pairs)
WIREFRAME_EDGES = (
    (0, 13), (13, 1), (13, 7),
    (1, 2), (2, 3), (7, 8), (8, 9),
    (1, 4), (7, 10), (4, 10),
    (4, 5), (5, 6), (10, 11), (11, 12),
)


def plot_training_curves(metrics_path, out_path):
    """Loss and learning-rate curves from a metrics.jsonl run log."""
    steps, totals, lrs = [], [], []
    val_epochs, val_mpjpe, val_pem = [], [], []
    with open(metrics_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("kind") == "step":
                steps.append(rec["step"])
                totals.append(rec["l_total"])
                lrs.append(rec["lr"])
            elif rec.get("kind") == "val":
                val_epochs.append(rec["epoch"])
                val_mpjpe.append(rec["mpjpe"])
                val_pem.append(rec["pem"])
    fig, axes = plt.subplots(1, 3 if val_epochs else 2, figsize=(12, 3.2))
    axes[0].plot(steps, totals, lw=0.8)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("total loss")
    axes[0].set_yscale("log")
    axes[1].plot(steps, lrs, lw=0.8)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("lr")
    if val_epochs:
        axes[2].plot(val_epochs, val_mpjpe, label="mpjpe", marker="o", ms=3)
        axes[2].plot(val_epochs, val_pem, label="pem", marker="s", ms=3)
        axes[2].set_xlabel("epoch")
        axes[2].legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def plot_scene_wireframe(scene: Scene, out_path, view: str = "xz"):
    """2D projection of a scene: gray points, red keypoints, yellow wireframe."""
    ax_a, ax_b = {"xz": (0, 2), "xy": (0, 1), "yz": (1, 2)}[view]
    fig, ax = plt.subplots(figsize=(8, 5))
    if len(scene.points):
        ax.scatter(
            scene.points[:, ax_a], scene.points[:, ax_b], s=1.5, c="0.6", linewidths=0
        )
    for kp in scene.keypoints:
        if kp is None:
            continue
        shown = kp.states != geo.ABSENT
        pos = kp.positions
        for i, j in WIREFRAME_EDGES:
            if shown[i] and shown[j]:
                ax.plot(
                    [pos[i, ax_a], pos[j, ax_a]],
                    [pos[i, ax_b], pos[j, ax_b]],
                    c="gold", lw=1.4, zorder=2,
                )
        ax.scatter(pos[shown, ax_a], pos[shown, ax_b], s=14, c="red", zorder=3)
    ax.set_aspect("equal")
    ax.set_xlabel("xyz"[ax_a])
    ax.set_ylabel("xyz"[ax_b])
    ax.set_title(scene.scene_id)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
