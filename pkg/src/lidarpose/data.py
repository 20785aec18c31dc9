"""Per-box input preparation and batching for the network.

All geometry here is done in float64 numpy on box-canonical coordinates; the
collate step casts to the training dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from . import geometry as geo
from .assembly import BoxSample, sample_pad
from .config import ModelConfig, TrainConfig
from .features import (
    PILLAR_STAT_DIM,
    VOXEL_STAT_DIM,
    pillar_grid,
    voxel_stats,
    voxelize,
)
from .geometry import Box3D, KeypointSet, Scene
from .losses import pseudo_seg_labels


@dataclass
class BoxInputs:
    """Numpy model inputs (and optional targets) for a single box."""

    scene_id: str
    box_index: int
    box: Box3D
    sample: BoxSample
    vox_stats: np.ndarray  # (V, VOXEL_STAT_DIM)
    point_voxel: np.ndarray  # (n_max,) voxel row per point, 0 for padded
    pillar_stats: Optional[np.ndarray]  # (H, W, PILLAR_STAT_DIM) or None
    pillar_occ: Optional[np.ndarray]
    bev_locs: Optional[np.ndarray]  # (5, 2) grid coords
    gt_xy: Optional[np.ndarray] = None  # (14, 2) canonical
    gt_z: Optional[np.ndarray] = None  # (14,)
    states: Optional[np.ndarray] = None  # (14,)
    seg_labels: Optional[np.ndarray] = None  # (n_max,)


@dataclass
class Batch:
    """Padded torch tensors for a list of boxes."""

    point_feats: torch.Tensor  # (B, N, 3 + C_POINT)
    mask: torch.Tensor  # (B, N) bool
    vox_stats: torch.Tensor  # (B, V, VOXEL_STAT_DIM)
    vox_mask: torch.Tensor  # (B, V) bool
    point_voxel: torch.Tensor  # (B, N) long
    pillar_stats: Optional[torch.Tensor]  # (B, H, W, PILLAR_STAT_DIM)
    pillar_occ: Optional[torch.Tensor]  # (B, H, W) bool
    bev_locs: Optional[torch.Tensor]  # (B, 5, 2)
    gt_xy: Optional[torch.Tensor] = None
    gt_z: Optional[torch.Tensor] = None
    states: Optional[torch.Tensor] = None
    seg_labels: Optional[torch.Tensor] = None
    # externally supplied stage-one features (bypass the surrogate encoders)
    p_voxel: Optional[torch.Tensor] = None  # (B, N, c_voxel)
    bev5: Optional[torch.Tensor] = None  # (B, 5, c_bev)
    items: List[BoxInputs] = field(default_factory=list)

    def __len__(self) -> int:
        return self.point_feats.shape[0]


def jitter_box(box: Box3D, rng: np.random.Generator, cfg: TrainConfig) -> Box3D:
    """Perturb a GT box to emulate a detector output."""
    center = box.center + rng.uniform(-cfg.jitter_center, cfg.jitter_center, 3)
    dims = box.dims * (1.0 + rng.uniform(-cfg.jitter_dims, cfg.jitter_dims, 3))
    yaw = geo.normalize_angle(
        box.yaw + rng.uniform(-1.0, 1.0) * math.radians(cfg.jitter_yaw_deg)
    )
    return Box3D(center, dims, yaw, box.cls, box.score)


def prepare_box(
    scene: Scene,
    box_index: int,
    box: Box3D,
    keypoints: Optional[KeypointSet],
    mcfg: ModelConfig,
    rng: np.random.Generator,
    seg_label_k: int = 5,
) -> Optional[BoxInputs]:
    """Build model inputs for one box; None if the box contains no points.

    ``box`` may differ from the stored scene box (jittered training); targets
    are canonicalized with the same box the features use, so decoding returns
    world-frame ground truth.
    """
    inside = geo.points_in_box(scene.points, box)
    cropped = scene.points[inside]
    if len(cropped) == 0:
        return None
    canonical = geo.canonicalize(cropped, box)
    sample = sample_pad(canonical, mcfg.n_max, rng)

    grid = voxelize(sample.points[sample.mask], mcfg.voxel_size)
    stats = voxel_stats(grid)
    point_voxel = np.zeros(mcfg.n_max, dtype=np.int64)
    point_voxel[sample.mask] = grid.point_voxel

    if mcfg.use_box_feat:
        pg = pillar_grid(
            scene.points, box, pillar_size=mcfg.pillar_size, margin=mcfg.bev_margin
        )
        pstats, pocc, plocs = pg.stats, pg.occupancy, pg.sample_locs
    else:
        pstats = pocc = plocs = None

    out = BoxInputs(
        scene_id=scene.scene_id,
        box_index=box_index,
        box=box,
        sample=sample,
        vox_stats=stats,
        point_voxel=point_voxel,
        pillar_stats=pstats,
        pillar_occ=pocc,
        bev_locs=plocs,
    )
    if keypoints is not None:
        kp_local = geo.canonicalize(keypoints.positions, box)
        out.gt_xy = kp_local[:, :2]
        out.gt_z = kp_local[:, 2]
        out.states = keypoints.states.copy()
        out.seg_labels = pseudo_seg_labels(
            sample.points, sample.mask, kp_local, keypoints.states, seg_label_k
        )
    return out


def training_boxes(
    scene: Scene, cfg: TrainConfig, rng: np.random.Generator
) -> List[BoxInputs]:
    """Expand one scene into per-box training samples according to box_source."""
    items = []
    for i, (box, kp) in enumerate(zip(scene.boxes, scene.keypoints)):
        if kp is None or not (kp.states != geo.ABSENT).any():
            continue
        sources = []
        if cfg.box_source in ("gt", "mixed"):
            sources.append(box)
        if cfg.box_source in ("jittered", "mixed"):
            sources.extend(jitter_box(box, rng, cfg) for _ in range(cfg.jitters_per_box))
        for b in sources:
            item = prepare_box(scene, i, b, kp, cfg.model, rng, cfg.seg_label_k)
            if item is not None:
                items.append(item)
    return items


def collate(
    items: List[BoxInputs],
    mcfg: ModelConfig,
    dtype=torch.float32,
    pad_to: Optional[int] = None,
) -> Batch:
    """Stack per-box inputs, padding the variable voxel/pillar dimensions.

    By default the point dimension is trimmed to the batch's largest valid
    count (rounded up to a multiple of 8, capped at n_max): attention masks
    padded slots out, so dropping all-padded columns changes nothing.  Pass
    ``pad_to=mcfg.n_max`` to keep the full width.
    """
    if not items:
        raise ValueError("cannot collate an empty batch")
    b = len(items)
    if pad_to is None:
        widest = max(it.sample.n_valid for it in items)
        n = min(mcfg.n_max, max(8, -(-widest // 8) * 8))
    else:
        n = pad_to
    point_feats = torch.zeros(b, n, 3 + geo.C_POINT, dtype=dtype)
    mask = torch.zeros(b, n, dtype=torch.bool)
    v_max = max(len(it.vox_stats) for it in items)
    vox_stats = torch.zeros(b, v_max, VOXEL_STAT_DIM, dtype=dtype)
    vox_mask = torch.zeros(b, v_max, dtype=torch.bool)
    point_voxel = torch.zeros(b, n, dtype=torch.long)
    for k, it in enumerate(items):
        point_feats[k] = torch.as_tensor(it.sample.points[:n], dtype=dtype)
        mask[k] = torch.as_tensor(it.sample.mask[:n])
        v = len(it.vox_stats)
        vox_stats[k, :v] = torch.as_tensor(it.vox_stats, dtype=dtype)
        vox_mask[k, :v] = True
        point_voxel[k] = torch.as_tensor(it.point_voxel[:n])

    if mcfg.use_box_feat:
        h_max = max(it.pillar_stats.shape[0] for it in items)
        w_max = max(it.pillar_stats.shape[1] for it in items)
        pillar_stats = torch.zeros(b, h_max, w_max, PILLAR_STAT_DIM, dtype=dtype)
        pillar_occ = torch.zeros(b, h_max, w_max, dtype=torch.bool)
        bev_locs = torch.zeros(b, 5, 2, dtype=dtype)
        for k, it in enumerate(items):
            hh, ww = it.pillar_stats.shape[:2]
            pillar_stats[k, :hh, :ww] = torch.as_tensor(it.pillar_stats, dtype=dtype)
            pillar_occ[k, :hh, :ww] = torch.as_tensor(it.pillar_occ)
            bev_locs[k] = torch.as_tensor(it.bev_locs, dtype=dtype)
    else:
        pillar_stats = pillar_occ = bev_locs = None

    batch = Batch(
        point_feats=point_feats,
        mask=mask,
        vox_stats=vox_stats,
        vox_mask=vox_mask,
        point_voxel=point_voxel,
        pillar_stats=pillar_stats,
        pillar_occ=pillar_occ,
        bev_locs=bev_locs,
        items=list(items),
    )
    if all(it.states is not None for it in items):
        batch.gt_xy = torch.stack([torch.as_tensor(it.gt_xy, dtype=dtype) for it in items])
        batch.gt_z = torch.stack([torch.as_tensor(it.gt_z, dtype=dtype) for it in items])
        batch.states = torch.stack([torch.as_tensor(it.states) for it in items])
        batch.seg_labels = torch.stack(
            [torch.as_tensor(it.seg_labels[:n]) for it in items]
        )
    return batch
