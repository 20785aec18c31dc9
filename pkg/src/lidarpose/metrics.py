"""Object matching and the two pose metrics, with per-joint-group reporting.

MPJPE is the mean Euclidean error over keypoints that have ground truth and
whose object was matched.  The pose estimation metric (PEM) additionally
charges a constant penalty C for every unmatched keypoint:

    pem = (sum of matched keypoint errors + C * |U|) / (|M| + |U|)

where M collects ground-truth-annotated keypoints of matched objects and U
collects annotated keypoints of missed objects plus predicted-visible
keypoints of spurious objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError
from . import geometry as geo
from .geometry import ABSENT, JOINT_GROUPS, N_KP, VISIBLE, Scene

PEM_PENALTY = 0.25
GROUP_ORDER = tuple(JOINT_GROUPS) + ("all",)

_INFEASIBLE = 1.0e9


@dataclass
class MatchGate:
    """Feasibility test for a (gt, pred) box pair."""

    mode: str = "center"  # "center": BEV center distance; "iou": BEV IoU
    max_center_dist: float = 1.0
    min_iou: float = 0.1

    def feasible(self, gt_box, pred_box, center_dist: float) -> bool:
        if self.mode == "center":
            return center_dist <= self.max_center_dist
        if self.mode == "iou":
            return geo.bev_iou(gt_box, pred_box) > self.min_iou
        raise ValueError(f"unknown gate mode {self.mode!r}")


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int]]
    unmatched_gt: List[int]
    unmatched_pred: List[int]


def match_objects(gt_boxes: Sequence, pred_boxes: Sequence, gate: Optional[MatchGate] = None) -> MatchResult:
    """One-to-one matching that maximizes match count, then minimizes total
    BEV center distance.

    Equal-cost alternatives are canonicalized toward (gt, pred) lexicographic
    order by pairwise swaps.
    """
    gate = gate or MatchGate()
    ng, np_ = len(gt_boxes), len(pred_boxes)
    if ng == 0 or np_ == 0:
        return MatchResult([], list(range(ng)), list(range(np_)))
    dist = np.zeros((ng, np_))
    feasible = np.zeros((ng, np_), dtype=bool)
    for i, g in enumerate(gt_boxes):
        for j, p in enumerate(pred_boxes):
            d = float(np.linalg.norm(g.center[:2] - p.center[:2]))
            dist[i, j] = d
            feasible[i, j] = gate.feasible(g, p, d)
    cost = np.where(feasible, dist, _INFEASIBLE)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if feasible[i, j]]
    pairs.sort()
    # push equal-cost 2-swaps toward lexicographic order
    changed = True
    while changed:
        changed = False
        for a in range(len(pairs)):
            for b in range(a + 1, len(pairs)):
                (g1, p1), (g2, p2) = pairs[a], pairs[b]
                if p2 < p1 and feasible[g1, p2] and feasible[g2, p1]:
                    if dist[g1, p2] + dist[g2, p1] == dist[g1, p1] + dist[g2, p2]:
                        pairs[a], pairs[b] = (g1, p2), (g2, p1)
                        changed = True
    matched_g = {i for i, _ in pairs}
    matched_p = {j for _, j in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_gt=[i for i in range(ng) if i not in matched_g],
        unmatched_pred=[j for j in range(np_) if j not in matched_p],
    )


def _group_of_joint() -> np.ndarray:
    lookup = np.empty(N_KP, dtype=object)
    for name, members in JOINT_GROUPS.items():
        for m in members:
            lookup[m] = name
    return lookup


_JOINT_GROUP = _group_of_joint()


@dataclass
class _Pool:
    """Pooled error sums and counts, per group and overall."""

    err: Dict[str, float] = field(default_factory=lambda: {g: 0.0 for g in GROUP_ORDER})
    n_matched: Dict[str, int] = field(default_factory=lambda: {g: 0 for g in GROUP_ORDER})
    n_unmatched: Dict[str, int] = field(default_factory=lambda: {g: 0 for g in GROUP_ORDER})

    def add_matched(self, joint: int, error: float):
        for g in (_JOINT_GROUP[joint], "all"):
            self.err[g] += error
            self.n_matched[g] += 1

    def add_unmatched(self, joint: int):
        for g in (_JOINT_GROUP[joint], "all"):
            self.n_unmatched[g] += 1

    def mpjpe(self) -> Dict[str, Optional[float]]:
        return {
            g: (self.err[g] / self.n_matched[g] if self.n_matched[g] else None)
            for g in GROUP_ORDER
        }

    def pem(self, c: float) -> Dict[str, Optional[float]]:
        out = {}
        for g in GROUP_ORDER:
            m, u = self.n_matched[g], self.n_unmatched[g]
            out[g] = (self.err[g] + c * u) / (m + u) if (m + u) else None
        return out


def _accumulate(pool: _Pool, gt_scene: Scene, pred_scene: Scene, match: MatchResult):
    for gi, pi in match.pairs:
        gt_kp = gt_scene.keypoints[gi]
        pred_kp = pred_scene.keypoints[pi]
        if gt_kp is None:
            continue
        for j in range(N_KP):
            if gt_kp.states[j] == ABSENT:
                continue
            if pred_kp is None:
                pool.add_unmatched(j)
                continue
            err = float(np.linalg.norm(gt_kp.positions[j] - pred_kp.positions[j]))
            pool.add_matched(j, err)
    for gi in match.unmatched_gt:
        gt_kp = gt_scene.keypoints[gi]
        if gt_kp is None:
            continue
        for j in range(N_KP):
            if gt_kp.states[j] != ABSENT:
                pool.add_unmatched(j)
    for pi in match.unmatched_pred:
        pred_kp = pred_scene.keypoints[pi]
        if pred_kp is None:
            continue
        for j in range(N_KP):
            if pred_kp.states[j] == VISIBLE:
                pool.add_unmatched(j)


def mpjpe(gt_scene: Scene, pred_scene: Scene, match: MatchResult):
    """(per-group dict incl. "all", matched-keypoint count).  None where no
    keypoint contributed."""
    pool = _Pool()
    _accumulate(pool, gt_scene, pred_scene, match)
    return pool.mpjpe(), pool.n_matched["all"]


def pem(gt_scene: Scene, pred_scene: Scene, match: MatchResult, c: float = PEM_PENALTY):
    """(per-group dict incl. "all", |M|, |U|)."""
    if c < 0:
        raise ValueError("penalty must be nonnegative")
    pool = _Pool()
    _accumulate(pool, gt_scene, pred_scene, match)
    return pool.pem(c), pool.n_matched["all"], pool.n_unmatched["all"]


@dataclass
class EvalConfig:
    gate: MatchGate = field(default_factory=MatchGate)
    penalty: float = PEM_PENALTY


@dataclass
class EvalReport:
    """Aggregate metrics over a scene set."""

    mpjpe: Dict[str, Optional[float]]
    pem: Dict[str, Optional[float]]
    n_matched_keypoints: int
    n_unmatched_keypoints: int
    n_matched_objects: int
    fn_objects: int  # annotated GT objects left unmatched
    fp_objects: int  # predicted objects left unmatched
    n_scenes: int

    def to_dict(self) -> dict:
        return {
            "mpjpe": self.mpjpe,
            "pem": self.pem,
            "n_matched_keypoints": self.n_matched_keypoints,
            "n_unmatched_keypoints": self.n_unmatched_keypoints,
            "n_matched_objects": self.n_matched_objects,
            "fn_objects": self.fn_objects,
            "fp_objects": self.fp_objects,
            "n_scenes": self.n_scenes,
        }

    def format_table(self) -> str:
        def fmt(v):
            return "   --  " if v is None else f"{v:7.4f}"

        header = "metric  " + "".join(f"{g:>10}" for g in GROUP_ORDER)
        row_p = "pem     " + "".join(f"   {fmt(self.pem[g])}" for g in GROUP_ORDER)
        row_m = "mpjpe   " + "".join(f"   {fmt(self.mpjpe[g])}" for g in GROUP_ORDER)
        tail = (
            f"matched kp: {self.n_matched_keypoints}  unmatched kp: "
            f"{self.n_unmatched_keypoints}  matched objects: {self.n_matched_objects}  "
            f"fn objects: {self.fn_objects}  fp objects: {self.fp_objects}"
        )
        return "\n".join([header, row_p, row_m, tail])


def report(
    gt_scenes: Sequence[Scene],
    pred_scenes: Sequence[Scene],
    config: Optional[EvalConfig] = None,
    out_path=None,
) -> EvalReport:
    """Match per scene, pool keypoint errors across scenes, optionally write
    the JSON report."""
    config = config or EvalConfig()
    preds = {s.scene_id: s for s in pred_scenes}
    gts = {s.scene_id: s for s in gt_scenes}
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise DataError(f"missing predictions for scenes: {missing}")
    extra = sorted(set(preds) - set(gts))
    if extra:
        raise DataError(f"predictions for unknown scenes: {extra}")

    pool = _Pool()
    n_matched_objects = fn_objects = fp_objects = 0
    for sid in sorted(gts):
        gt, pred = gts[sid], preds[sid]
        match = match_objects(gt.boxes, pred.boxes, config.gate)
        _accumulate(pool, gt, pred, match)
        n_matched_objects += len(match.pairs)
        fn_objects += sum(1 for gi in match.unmatched_gt if gt.keypoints[gi] is not None)
        fp_objects += len(match.unmatched_pred)

    rep = EvalReport(
        mpjpe=pool.mpjpe(),
        pem=pool.pem(config.penalty),
        n_matched_keypoints=pool.n_matched["all"],
        n_unmatched_keypoints=pool.n_unmatched["all"],
        n_matched_objects=n_matched_objects,
        fn_objects=fn_objects,
        fp_objects=fp_objects,
        n_scenes=len(gts),
    )
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(rep.to_dict(), fh, indent=2)
            fh.write("\n")
    return rep
