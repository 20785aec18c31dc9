import numpy as np
import pytest
import torch

from lidarpose import geometry as geo
from lidarpose import synth
from lidarpose.config import ModelConfig
from lidarpose.data import collate, prepare_box


def random_box(rng, center_range=10.0):
    return geo.Box3D(
        center=rng.uniform(-center_range, center_range, 3),
        dims=rng.uniform(0.4, 2.5, 3),
        yaw=rng.uniform(-np.pi, np.pi),
        score=float(rng.uniform(0.2, 1.0)),
    )


def random_points(rng, n, spread=5.0):
    pts = np.zeros((n, geo.POINT_DIM))
    pts[:, :3] = rng.uniform(-spread, spread, (n, 3))
    pts[:, 3:] = rng.uniform(0, 1, (n, geo.C_POINT))
    return pts


def random_keypoints(rng, box, states=None):
    local = rng.uniform(-0.5, 0.5, (geo.N_KP, 3)) * (box.dims / 2)
    pos = geo.decanonicalize(local, box)
    if states is None:
        states = rng.choice([geo.ABSENT, geo.OCCLUDED, geo.VISIBLE], geo.N_KP, p=[0.1, 0.3, 0.6])
    return geo.KeypointSet(pos, states)


def random_scene(rng, n_boxes=3, n_points=200, scene_id="s0"):
    boxes = [random_box(rng) for _ in range(n_boxes)]
    kps = [random_keypoints(rng, b) for b in boxes]
    return geo.Scene(scene_id, random_points(rng, n_points), boxes, kps)


def synth_scene(seed=0, humans=(1, 2), noise=0.005, dropout=0.0):
    cfg = synth.GenConfig(
        humans=humans,
        points_per_person=(120, 250),
        clutter_points=(60, 120),
        noise_sigma=noise,
        label_dropout=dropout,
        seed=seed,
    )
    return synth.compose_scene(cfg, np.random.default_rng(seed), f"synth-{seed}")


def scene_batch(mcfg: ModelConfig, seed=0, n_boxes=None, dtype=torch.float32, seg_k=5):
    """Prepared batch from a generated scene (GT boxes, with targets)."""
    scene = synth_scene(seed=seed, humans=(2, 3))
    items = []
    data_rng = np.random.default_rng(seed + 1)
    for i, (box, kp) in enumerate(zip(scene.boxes, scene.keypoints)):
        item = prepare_box(scene, i, box, kp, mcfg, data_rng, seg_label_k=seg_k)
        if item is not None:
            items.append(item)
        if n_boxes is not None and len(items) >= n_boxes:
            break
    return scene, collate(items, mcfg, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
