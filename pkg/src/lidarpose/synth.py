"""Procedural generator of labeled pedestrian scenes, and the scene file format.

A pedestrian is a capsule skeleton: 14 taxonomy joints plus two internal
joints (pelvis, neck) connected by capsules.  Surface points are sampled on
the capsules facing the sensor, with a ray test against all capsules for
self-occlusion.  A keypoint's ground-truth visibility is defined by the point
pattern itself: visible iff at least ``VIS_MIN_POINTS`` rendered points lie
within ``VIS_RADIUS`` of it.  This stand-in rule is deliberately learnable
from the input cloud; real datasets define visibility differently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import GeometryError, PlacementError, SceneFormatError
from . import geometry as geo
from .geometry import (
    ABSENT,
    C_POINT,
    N_KP,
    OCCLUDED,
    POINT_DIM,
    STATE_IDS,
    STATE_NAMES,
    VISIBLE,
    Box3D,
    KeypointSet,
    Scene,
)

VIS_RADIUS = 0.2
VIS_MIN_POINTS = 3

# Internal (non-taxonomy) joints appended after the 14 keypoint slots.
PELVIS, NECK = 14, 15
N_JOINTS = 16

# (parent, child, capsule radius); a tree rooted at the pelvis.
_BONES = (
    (PELVIS, 4, 0.09),    # pelvis -> left hip
    (PELVIS, 10, 0.09),   # pelvis -> right hip
    (4, 5, 0.07),         # left hip -> knee
    (5, 6, 0.055),        # left knee -> ankle
    (10, 11, 0.07),       # right hip -> knee
    (11, 12, 0.055),      # right knee -> ankle
    (PELVIS, NECK, 0.13),  # torso
    (NECK, 1, 0.06),      # neck -> left shoulder
    (1, 2, 0.05),         # left shoulder -> elbow
    (2, 3, 0.045),        # left elbow -> wrist
    (NECK, 7, 0.06),      # neck -> right shoulder
    (7, 8, 0.05),         # right shoulder -> elbow
    (8, 9, 0.045),        # right elbow -> wrist
    (NECK, 13, 0.10),     # neck -> head center
    (13, 0, 0.05),        # head center -> nose
)

# Max local rotation (radians) of the bone ending at each child joint.
_ANGLE_LIMITS = {
    4: 0.5, 10: 0.5,      # hips
    5: 0.7, 11: 0.7,      # knees
    6: 0.35, 12: 0.35,    # ankles
    NECK: 0.25,           # torso lean
    1: 0.25, 7: 0.25,     # clavicles
    2: 0.7, 8: 0.7,       # upper arms
    3: 0.85, 9: 0.85,     # forearms
    13: 0.3,              # head
    0: 0.0,               # nose rigid with the head
}

# Rest-pose joint layout for a 1.70 m tall person; person frame is x forward,
# y left, z up, feet on the ground plane.
_REST_170 = np.array(
    [
        [0.09, 0.00, 1.56],   # nose
        [0.00, 0.19, 1.40],   # left shoulder
        [0.00, 0.23, 1.12],   # left elbow
        [0.00, 0.25, 0.86],   # left wrist
        [0.00, 0.10, 0.91],   # left hip
        [0.00, 0.11, 0.50],   # left knee
        [0.00, 0.12, 0.09],   # left ankle
        [0.00, -0.19, 1.40],  # right shoulder
        [0.00, -0.23, 1.12],  # right elbow
        [0.00, -0.25, 0.86],  # right wrist
        [0.00, -0.10, 0.91],  # right hip
        [0.00, -0.11, 0.50],  # right knee
        [0.00, -0.12, 0.09],  # right ankle
        [0.00, 0.00, 1.58],   # head center
        [0.00, 0.00, 0.93],   # pelvis
        [0.00, 0.00, 1.42],   # neck
    ]
)
_REST_HEIGHT = 1.70


@dataclass
class SkeletonTemplate:
    """Rest pose plus capsule bones and per-joint angle limits."""

    joints: np.ndarray  # (N_JOINTS, 3) person frame, ground at z=0
    bones: tuple = _BONES
    angle_limits: dict = field(default_factory=lambda: dict(_ANGLE_LIMITS))

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(N_JOINTS, 3)
        self.validate()

    def validate(self):
        parents = {c: p for p, c, _ in self.bones}
        if len(parents) != N_JOINTS - 1 or PELVIS in parents:
            raise ValueError("bone list must form a tree rooted at the pelvis")
        height = self.rest_height()
        if not 1.5 <= height <= 1.9:
            raise ValueError(f"rest height {height:.3f} m outside [1.5, 1.9]")
        mirror = self.joints[geo.LEFT_RIGHT_SWAP].copy()
        mirror[:, 1] = -mirror[:, 1]
        if not np.allclose(mirror, self.joints[:N_KP], atol=1e-9):
            raise ValueError("rest pose must be left/right mirror-symmetric")

    def rest_height(self) -> float:
        head_r = next(r for p, c, r in self.bones if c == 13)
        return float(self.joints[:, 2].max() + head_r)


def default_template(height: float = _REST_HEIGHT) -> SkeletonTemplate:
    """Template for a person of the given standing height."""
    return SkeletonTemplate(joints=_REST_170 * (height / _REST_HEIGHT))


def _rotvec_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrix for a rotation vector."""
    angle = float(np.linalg.norm(v))
    if angle == 0.0:
        return np.eye(3)
    k = v / angle
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * (kx @ kx)


@dataclass
class SampledPose:
    """Forward-kinematics result: posed joints plus the sampled parameters."""

    joints: np.ndarray  # (N_JOINTS, 3) person frame
    rotations: np.ndarray  # (n_bones, 3) local rotation vectors, bone order


def sample_skeleton(template: SkeletonTemplate, rng: np.random.Generator):
    """Sample a pose within the template's joint limits.

    Returns (KeypointSet in the person frame with states set VISIBLE as a
    placeholder, SampledPose).  Bone lengths are preserved exactly; the
    position of each joint is rest + accumulated rotational offset, so a
    zero-angle sample reproduces the rest pose bit-exactly.
    """
    rotations = np.zeros((len(template.bones), 3))
    for i, (_, child, _) in enumerate(template.bones):
        limit = template.angle_limits[child]
        if limit <= 0.0:
            continue
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rotations[i] = axis * rng.uniform(0.0, limit)
    joints = pose_joints(template, rotations)
    kp = KeypointSet(joints[:N_KP], np.full(N_KP, VISIBLE))
    return kp, SampledPose(joints, rotations)


def pose_joints(template: SkeletonTemplate, rotations: np.ndarray) -> np.ndarray:
    """Apply local bone rotations down the tree.

    Uses the offset form pos[c] = rest[c] + (off[p] + (R_cum - I) @ bone) so
    that identity rotations return the rest pose without rounding.
    """
    rest = template.joints
    cum = {PELVIS: np.eye(3)}
    offset = {PELVIS: np.zeros(3)}
    for i, (parent, child, _) in enumerate(template.bones):
        r = cum[parent] @ _rotvec_matrix(rotations[i])
        bone = rest[child] - rest[parent]
        cum[child] = r
        offset[child] = offset[parent] + (r @ bone - bone)
    out = rest.copy()
    for j in range(N_JOINTS):
        out[j] = rest[j] + offset[j]
    return out


@dataclass
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)


def capsules_for(template: SkeletonTemplate, joints: np.ndarray):
    return [Capsule(joints[p], joints[c], r) for p, c, r in template.bones]


def _segment_point_distance(a, b, p):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def _segment_segment_distance(p0, p1, q0, q1):
    """Minimum distance between segments [p0,p1] and [q0,q1]."""
    u = p1 - p0
    v = q1 - q0
    w = p0 - q0
    a, b, c = u @ u, u @ v, v @ v
    d, e = u @ w, v @ w
    denom = a * c - b * b
    if denom > 1e-12:
        s = np.clip((b * e - c * d) / denom, 0.0, 1.0)
    else:
        s = 0.0
    t = (b * s + e) / c if c > 1e-12 else 0.0
    t = np.clip(t, 0.0, 1.0)
    # re-clamp s for the clamped t
    s = np.clip((b * t - d) / a, 0.0, 1.0) if a > 1e-12 else 0.0
    return float(np.linalg.norm((p0 + s * u) - (q0 + t * v)))


def point_capsule_distance(p: np.ndarray, cap: Capsule) -> float:
    """Signed distance from a point to the capsule surface (negative inside)."""
    return _segment_point_distance(cap.a, cap.b, p) - cap.radius


@dataclass
class _CapsuleFrames:
    """Vectorized capsule geometry for batch surface sampling."""

    a: np.ndarray  # (K, 3)
    b: np.ndarray
    radius: np.ndarray  # (K,)
    axis: np.ndarray  # (K, 3)
    length: np.ndarray
    ez: np.ndarray
    ex: np.ndarray
    ey: np.ndarray
    cyl_fraction: np.ndarray  # cylinder share of each capsule's area
    weights: np.ndarray  # area-proportional sampling weights


def _capsule_frames(capsules) -> _CapsuleFrames:
    a = np.array([c.a for c in capsules])
    b = np.array([c.b for c in capsules])
    r = np.array([c.radius for c in capsules])
    axis = b - a
    length = np.linalg.norm(axis, axis=1)
    ez = np.where(length[:, None] > 0, axis / np.maximum(length, 1e-12)[:, None], [[0.0, 0.0, 1.0]])
    helper = np.where(np.abs(ez[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    ex = np.cross(ez, helper)
    ex /= np.linalg.norm(ex, axis=1, keepdims=True)
    ey = np.cross(ez, ex)
    cyl = 2 * math.pi * r * length
    sph = 4 * math.pi * r * r
    area = cyl + sph
    return _CapsuleFrames(a, b, r, axis, length, ez, ex, ey, cyl / area, area / area.sum())


def _sample_surface_batch(frames: _CapsuleFrames, idx: np.ndarray, rng):
    """(points (m, 3), outward normals (m, 3)) on the chosen capsules."""
    m = len(idx)
    a, axis, r = frames.a[idx], frames.axis[idx], frames.radius[idx][:, None]
    use_cyl = rng.uniform(size=m) < frames.cyl_fraction[idx]
    t = rng.uniform(size=(m, 1))
    phi = rng.uniform(0.0, 2 * math.pi, size=(m, 1))
    radial = np.cos(phi) * frames.ex[idx] + np.sin(phi) * frames.ey[idx]
    cyl_pt = a + t * axis + r * radial
    sph = rng.normal(size=(m, 3))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    toward_b = (sph * frames.ez[idx]).sum(axis=1) >= 0
    base = np.where(toward_b[:, None], frames.b[idx], a)
    sph_pt = base + r * sph
    points = np.where(use_cyl[:, None], cyl_pt, sph_pt)
    normals = np.where(use_cyl[:, None], radial, sph)
    return points, normals


def _occluded_batch(sensor, targets, frames: _CapsuleFrames, skip_fraction=1e-3):
    """Boolean mask over targets: segment sensor->target enters some capsule."""
    shrunk = sensor + (1.0 - skip_fraction) * (targets - sensor)
    u = shrunk - sensor  # (m, 3)
    v = frames.axis  # (K, 3)
    w = sensor - frames.a  # (K, 3)
    a_ = (u * u).sum(axis=1)[:, None]  # (m, 1)
    b_ = u @ v.T  # (m, K)
    c_ = (v * v).sum(axis=1)[None, :]  # (1, K)
    d_ = u @ w.T
    e_ = (v * w).sum(axis=1)[None, :]
    denom = a_ * c_ - b_ * b_
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-12, (b_ * e_ - c_ * d_) / denom, 0.0)
        s = np.clip(s, 0.0, 1.0)
        t = np.where(c_ > 1e-12, (b_ * s + e_) / c_, 0.0)
        t = np.clip(t, 0.0, 1.0)
        s = np.where(a_ > 1e-12, (b_ * t - d_) / a_, 0.0)
        s = np.clip(s, 0.0, 1.0)
    p_close = sensor + s[:, :, None] * u[:, None, :]
    q_close = frames.a[None] + t[:, :, None] * v[None]
    dist2 = ((p_close - q_close) ** 2).sum(axis=2)
    return (dist2 < (frames.radius**2)[None, :]).any(axis=1)


@dataclass
class GenConfig:
    """Scene generation parameters."""

    humans: tuple = (1, 4)
    points_per_person: tuple = (120, 400)
    clutter_points: tuple = (100, 300)
    noise_sigma: float = 0.008
    label_dropout: float = 0.05
    sensor_origin: tuple = (0.0, 0.0, 1.8)
    placement_radius: tuple = (3.0, 12.0)
    min_spacing: float = 2.6
    height_range: tuple = (1.55, 1.85)
    seed: int = 0

    def validate(self):
        for name in ("humans", "points_per_person", "clutter_points"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"empty range for {name}: ({lo}, {hi})")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.label_dropout <= 1:
            raise ValueError("label_dropout must be in [0, 1]")


def visibility_from_points(points_xyz: np.ndarray, keypoints: np.ndarray) -> np.ndarray:
    """Apply the ground-truth visibility rule: >= VIS_MIN_POINTS within VIS_RADIUS."""
    states = np.full(N_KP, OCCLUDED)
    if len(points_xyz) == 0:
        return states
    d = np.linalg.norm(points_xyz[:, None, :] - keypoints[None, :, :], axis=-1)
    counts = (d <= VIS_RADIUS).sum(axis=0)
    states[counts >= VIS_MIN_POINTS] = VISIBLE
    return states


def render_points(
    keypoints: np.ndarray,
    capsules,
    sensor_origin,
    config: GenConfig,
    rng: np.random.Generator,
):
    """Render sensor-facing surface points for one person.

    Returns (points (N, POINT_DIM), states (14,)).  States here reflect the
    visibility rule plus label dropout; compose_scene recomputes the
    visible/occluded split from the final box-cropped cloud so the stored
    labels stay consistent with the stored points.
    """
    sensor = np.asarray(sensor_origin, dtype=np.float64)
    for cap in capsules:
        if point_capsule_distance(sensor, cap) <= 0:
            raise GeometryError("sensor origin lies inside a body capsule")
    n_target = int(rng.integers(config.points_per_person[0], config.points_per_person[1] + 1))
    frames = _capsule_frames(capsules)
    blocks = []
    kept = 0
    for _ in range(12):
        need = n_target - kept
        if need <= 0:
            break
        m = 3 * need + 16
        idx = rng.choice(len(capsules), size=m, p=frames.weights)
        pts, normals = _sample_surface_batch(frames, idx, rng)
        to_sensor = sensor - pts
        dist = np.linalg.norm(to_sensor, axis=1)
        facing = (normals * to_sensor).sum(axis=1) / np.maximum(dist, 1e-12)
        cand = np.nonzero(facing >= 0.05)[0]
        cand = cand[~_occluded_batch(sensor, pts[cand], frames)]
        cand = cand[:need]
        pts, facing = pts[cand], facing[cand]
        if len(pts) == 0:
            continue
        block = np.empty((len(pts), POINT_DIM))
        block[:, :3] = pts
        if config.noise_sigma > 0:
            block[:, :3] += rng.normal(0.0, config.noise_sigma, (len(pts), 3))
        block[:, 3] = np.clip(0.25 + 0.7 * facing, 0.0, 1.0)
        block[:, 4] = rng.uniform(0.0, 0.3, len(pts))
        block[:, 5] = rng.uniform(0.0, 1.0, len(pts))
        blocks.append(block)
        kept += len(pts)
    points = (
        np.concatenate(blocks, axis=0) if blocks else np.zeros((0, POINT_DIM))
    )
    states = visibility_from_points(points[:, :3], keypoints)
    dropout = rng.random(N_KP) < config.label_dropout
    states[dropout] = ABSENT
    return points, states


def _tight_box(points_xyz: np.ndarray, keypoints: np.ndarray, yaw: float, pad: float = 0.1) -> Box3D:
    """Smallest yaw-aligned box containing points and keypoints, padded."""
    stack = np.concatenate([points_xyz, keypoints], axis=0)
    rot = geo.rotation_z(yaw)
    local = stack @ rot  # R(-yaw) @ p for row vectors
    lo, hi = local.min(axis=0), local.max(axis=0)
    center_local = (lo + hi) / 2.0
    dims = (hi - lo) + 2 * pad
    center = rot @ center_local
    return Box3D(center, dims, yaw)


def compose_scene(config: GenConfig, rng: np.random.Generator, scene_id: str = "scene-0") -> Scene:
    """Generate one labeled scene: posed pedestrians plus ground clutter."""
    config.validate()
    sensor = np.asarray(config.sensor_origin, dtype=np.float64)
    n_humans = int(rng.integers(config.humans[0], config.humans[1] + 1))

    positions = []
    for _ in range(n_humans):
        placed = False
        for _ in range(100):
            r = rng.uniform(*config.placement_radius)
            az = rng.uniform(-math.pi, math.pi)
            xy = np.array([r * math.cos(az), r * math.sin(az)])
            if all(np.linalg.norm(xy - q) >= config.min_spacing for q in positions):
                positions.append(xy)
                placed = True
                break
        if not placed:
            raise PlacementError(
                f"could not place human {len(positions) + 1}/{n_humans} "
                f"after 100 attempts"
            )

    point_blocks, boxes, keypoint_sets = [], [], []
    for xy in positions:
        template = default_template(height=float(rng.uniform(*config.height_range)))
        _, pose = sample_skeleton(template, rng)
        yaw = geo.normalize_angle(rng.uniform(-math.pi, math.pi))
        rot = geo.rotation_z(yaw)
        offset = np.array([xy[0], xy[1], 0.0])
        joints_world = pose.joints @ rot.T + offset
        capsules = capsules_for(template, joints_world)
        pts, _ = render_points(joints_world[:N_KP], capsules, sensor, config, rng)
        if len(pts) == 0:
            # degenerate but legal (points_per_person may be 0)
            box = _tight_box(joints_world[:N_KP], joints_world[:N_KP], yaw)
        else:
            box = _tight_box(pts[:, :3], joints_world[:N_KP], yaw)
        point_blocks.append(pts)
        boxes.append(box)
        keypoint_sets.append(joints_world[:N_KP])

    n_clutter = int(rng.integers(config.clutter_points[0], config.clutter_points[1] + 1))
    if n_clutter > 0:
        r = np.sqrt(rng.uniform(0.0, 1.0, n_clutter)) * (config.placement_radius[1] + 2.0)
        az = rng.uniform(-math.pi, math.pi, n_clutter)
        clutter = np.zeros((n_clutter, POINT_DIM))
        clutter[:, 0] = r * np.cos(az)
        clutter[:, 1] = r * np.sin(az)
        clutter[:, 2] = rng.normal(0.0, 0.01, n_clutter)
        clutter[:, 3:] = rng.uniform(0.0, 1.0, (n_clutter, C_POINT))
        point_blocks.append(clutter)

    points = (
        np.concatenate(point_blocks, axis=0)
        if point_blocks
        else np.zeros((0, POINT_DIM))
    )

    keypoints = []
    for box, kp_pos in zip(boxes, keypoint_sets):
        inside = geo.points_in_box(points, box)
        states = visibility_from_points(points[inside, :3], kp_pos)
        dropout = rng.random(N_KP) < config.label_dropout
        states[dropout] = ABSENT
        keypoints.append(KeypointSet(kp_pos, states))

    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            iou = geo.bev_iou(boxes[i], boxes[j])
            if iou > 0:
                raise PlacementError(f"boxes {i} and {j} overlap (BEV IoU {iou:.4f})")

    return Scene(scene_id, points, boxes, keypoints)


def generate_scenes(config: GenConfig, count: int, id_prefix: str = "scene") -> Iterator[Scene]:
    """Deterministic stream of scenes; per-scene child RNGs from config.seed."""
    seq = np.random.SeedSequence(config.seed)
    for i, child in enumerate(seq.spawn(count)):
        yield compose_scene(config, np.random.default_rng(child), f"{id_prefix}-{i:05d}")


# ---------------------------------------------------------------------------
# Scene file format: JSON Lines, one self-describing object per scene.  Also
# used for predictions, where boxes carry predicted keypoints + vis_probs.
# ---------------------------------------------------------------------------


def _scene_to_obj(scene: Scene) -> dict:
    kps = []
    for kp in scene.keypoints:
        if kp is None:
            kps.append(None)
        else:
            entry = {
                "positions": kp.positions.tolist(),
                "states": [STATE_NAMES[s] for s in kp.states],
            }
            if kp.vis_probs is not None:
                entry["vis_probs"] = kp.vis_probs.tolist()
            kps.append(entry)
    return {
        "scene_id": scene.scene_id,
        "points": scene.points.tolist(),
        "boxes": [
            {
                "center": b.center.tolist(),
                "dims": b.dims.tolist(),
                "yaw": b.yaw,
                "class": b.cls,
                "score": b.score,
            }
            for b in scene.boxes
        ],
        "keypoints": kps,
    }


def _require(obj: dict, key: str, idx: int):
    if key not in obj:
        raise SceneFormatError(f"record {idx}: missing field {key!r}")
    return obj[key]


def _obj_to_scene(obj: dict, idx: int) -> Scene:
    scene_id = _require(obj, "scene_id", idx)
    points = np.asarray(_require(obj, "points", idx), dtype=np.float64)
    if points.size == 0:
        points = points.reshape(0, POINT_DIM)
    if points.ndim != 2 or points.shape[1] != POINT_DIM:
        raise SceneFormatError(
            f"record {idx}: field 'points' must be (N, {POINT_DIM}), got {points.shape}"
        )
    boxes = []
    for b in _require(obj, "boxes", idx):
        try:
            boxes.append(
                Box3D(
                    np.asarray(b["center"], dtype=np.float64),
                    np.asarray(b["dims"], dtype=np.float64),
                    float(b["yaw"]),
                    b.get("class", "pedestrian"),
                    float(b.get("score", 1.0)),
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise SceneFormatError(f"record {idx}: field 'boxes': {exc}") from exc
    kps = []
    for entry in _require(obj, "keypoints", idx):
        if entry is None:
            kps.append(None)
            continue
        try:
            states = np.array([STATE_IDS[s] for s in entry["states"]])
            probs = entry.get("vis_probs")
            kps.append(
                KeypointSet(
                    np.asarray(entry["positions"], dtype=np.float64),
                    states,
                    None if probs is None else np.asarray(probs, dtype=np.float64),
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise SceneFormatError(f"record {idx}: field 'keypoints': {exc}") from exc
    if len(kps) != len(boxes):
        raise SceneFormatError(
            f"record {idx}: field 'keypoints' has {len(kps)} entries for {len(boxes)} boxes"
        )
    return Scene(scene_id, points, boxes, kps)


def write_scenes(path, scenes: Iterable[Scene]):
    """Write scenes as JSON Lines (one record per scene, append-order)."""
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(_scene_to_obj(scene)))
            fh.write("\n")


def read_scenes(path) -> Iterator[Scene]:
    """Stream scenes back from a JSON Lines file; raises SceneFormatError
    naming the first malformed record."""
    with open(path, "r", encoding="utf-8") as fh:
        for idx, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"record {idx}: invalid JSON ({exc.msg})") from exc
            yield _obj_to_scene(obj, idx)
