"""Pseudo segmentation label generation and the four-term training loss.

Regression losses average over contributing keypoint-coordinates; by default
only keypoints in the VISIBLE state contribute (``include_occluded`` adds the
occluded ones).  Absent keypoints contribute to nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericalError
from .geometry import ABSENT, N_KP, VISIBLE

log = logging.getLogger(__name__)

SMOOTH_L1_BETA = 1.0
VIS_EPS = 1e-7


def pseudo_seg_labels(
    points: np.ndarray,
    mask: np.ndarray,
    kp_local: np.ndarray,
    states: np.ndarray,
    k: int,
) -> np.ndarray:
    """Per-point class labels in {0..14}: each non-absent keypoint claims its
    k nearest valid points (class = keypoint index + 1), everything else is
    background 0.

    A point claimed by several keypoints goes to the closer one; exact
    distance ties go to the lower keypoint index.  Fewer than k valid points
    means every valid point is claimed.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n_max = len(mask)
    labels = np.zeros(n_max, dtype=np.int64)
    valid = np.nonzero(mask)[0]
    if len(valid) == 0:
        return labels
    xyz = np.asarray(points)[valid, :3]
    best_dist = np.full(len(valid), np.inf)
    best_kp = np.full(len(valid), -1, dtype=np.int64)
    for j in range(N_KP):
        if states[j] == ABSENT:
            continue
        d = np.linalg.norm(xyz - kp_local[j, :3], axis=1)
        order = np.argsort(d, kind="stable")[:k]
        for p in order:
            # strict < keeps the earlier (lower-index) keypoint on ties
            if d[p] < best_dist[p]:
                best_dist[p] = d[p]
                best_kp[p] = j
    claimed = best_kp >= 0
    labels[valid[claimed]] = best_kp[claimed] + 1
    return labels


def smooth_l1(diff: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    """Elementwise smooth-L1: 0.5 d^2 / beta for |d| < beta, else |d| - beta/2."""
    ad = diff.abs()
    return torch.where(ad < beta, 0.5 * ad * ad / beta, ad - 0.5 * beta)


def _regression_mask(states: torch.Tensor, include_occluded: bool) -> torch.Tensor:
    if include_occluded:
        return states != ABSENT
    return states == VISIBLE


def loss_xy(
    pred_xy: torch.Tensor,
    gt_xy: torch.Tensor,
    states: torch.Tensor,
    include_occluded: bool = False,
) -> torch.Tensor:
    """Smooth-L1 over the two planar offset coordinates of contributing keypoints."""
    m = _regression_mask(states, include_occluded)
    if not m.any():
        return pred_xy.sum() * 0.0
    per = smooth_l1(pred_xy - gt_xy)
    return per[m].mean()


def loss_z(
    pred_z: torch.Tensor,
    gt_z: torch.Tensor,
    states: torch.Tensor,
    include_occluded: bool = False,
) -> torch.Tensor:
    """Smooth-L1 over the height offset of contributing keypoints."""
    m = _regression_mask(states, include_occluded)
    if not m.any():
        return pred_z.sum() * 0.0
    per = smooth_l1(pred_z - gt_z)
    return per[m].mean()


def loss_vis(vis_prob: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on visibility: target 1 for visible, 0 for
    occluded; absent keypoints are excluded."""
    include = states != ABSENT
    if not include.any():
        return vis_prob.sum() * 0.0
    p = vis_prob.clamp(VIS_EPS, 1.0 - VIS_EPS)[include]
    target = (states[include] == VISIBLE).to(p.dtype)
    return -(target * p.log() + (1 - target) * (1 - p).log()).mean()


def loss_kpseg(seg_logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy over valid points, labels in {0..14}."""
    m = mask.reshape(-1)
    if not m.any():
        log.warning("loss_kpseg: no valid points in batch, returning 0")
        return seg_logits.sum() * 0.0
    flat = seg_logits.reshape(-1, seg_logits.shape[-1])[m]
    target = labels.reshape(-1)[m]
    return torch.nn.functional.cross_entropy(flat, target)


@dataclass
class LossWeights:
    xy: float = 5.0
    z: float = 1.0
    vis: float = 1.0
    seg: float = 1.0

    @classmethod
    def from_tuple(cls, w) -> "LossWeights":
        return cls(*map(float, w))


@dataclass
class LossBreakdown:
    """Weighted total plus per-term values; the float fields satisfy
    l_total == w.xy * l_xy + w.z * l_z + w.vis * l_vis + w.seg * l_kpseg
    evaluated left to right."""

    total: torch.Tensor
    l_xy: float
    l_z: float
    l_vis: float
    l_kpseg: float
    l_total: float
    n_reg_kp: int = 0
    n_vis_kp: int = 0
    n_seg_points: int = 0

    def as_dict(self) -> dict:
        return {
            "l_xy": self.l_xy,
            "l_z": self.l_z,
            "l_vis": self.l_vis,
            "l_kpseg": self.l_kpseg,
            "l_total": self.l_total,
            "n_reg_kp": self.n_reg_kp,
            "n_vis_kp": self.n_vis_kp,
            "n_seg_points": self.n_seg_points,
        }


def total_loss(
    l_xy: torch.Tensor,
    l_z: torch.Tensor,
    l_vis: torch.Tensor,
    l_kpseg: torch.Tensor,
    weights: LossWeights,
    counts: tuple = (0, 0, 0),
) -> LossBreakdown:
    """Combine the four terms; raises NumericalError naming a NaN component."""
    parts = {"l_xy": l_xy, "l_z": l_z, "l_vis": l_vis, "l_kpseg": l_kpseg}
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise NumericalError(f"loss component {name} is non-finite")
    total = weights.xy * l_xy + weights.z * l_z + weights.vis * l_vis + weights.seg * l_kpseg
    f_xy, f_z, f_vis, f_seg = (float(v.detach()) for v in (l_xy, l_z, l_vis, l_kpseg))
    f_total = weights.xy * f_xy + weights.z * f_z + weights.vis * f_vis + weights.seg * f_seg
    return LossBreakdown(
        total=total,
        l_xy=f_xy,
        l_z=f_z,
        l_vis=f_vis,
        l_kpseg=f_seg,
        l_total=f_total,
        n_reg_kp=counts[0],
        n_vis_kp=counts[1],
        n_seg_points=counts[2],
    )


def compute_losses(output, batch, weights: LossWeights, include_occluded: bool = False) -> LossBreakdown:
    """Evaluate all four terms for a model output on a target batch.

    ``output`` needs xy/z/vis_prob/seg_logits, ``batch`` needs
    gt_xy/gt_z/states/seg_labels/mask (see data.Batch).
    """
    l1 = loss_xy(output.xy, batch.gt_xy, batch.states, include_occluded)
    l2 = loss_z(output.z, batch.gt_z, batch.states, include_occluded)
    l3 = loss_vis(output.vis_prob, batch.states)
    if output.seg_logits is not None:
        l4 = loss_kpseg(output.seg_logits, batch.seg_labels, batch.mask)
        n_seg = int(batch.mask.sum())
    else:
        l4 = output.xy.sum() * 0.0
        n_seg = 0
    counts = (
        int(_regression_mask(batch.states, include_occluded).sum()),
        int((batch.states != ABSENT).sum()),
        n_seg,
    )
    return total_loss(l1, l2, l3, l4, weights, counts)
