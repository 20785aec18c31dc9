"""Core geometric types, the 14-keypoint taxonomy, box-local coordinate
transforms, and scene-level augmentation.

Conventions
-----------
* World frame: x/y horizontal, z up, meters.
* Yaw: counter-clockwise rotation about +Z, stored normalized to (-pi, pi].
* Canonical (box-local) frame: translate to the box center, rotate by -yaw,
  so the box heading aligns with +x and "left" is +y.
* Point rows are ``(x, y, z, intensity, elongation, timestamp)``; the three
  extra features are dimensionless scalars in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

N_KP = 14
C_POINT = 3  # intensity, elongation, timestamp
POINT_DIM = 3 + C_POINT

KEYPOINT_NAMES = (
    "nose",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "head_center",
)

# Slot permutation applied when a scene is mirrored: left/right limb slots
# exchange, nose (0) and head center (13) stay put.  Involution by design.
LEFT_RIGHT_SWAP = np.array([0, 7, 8, 9, 10, 11, 12, 1, 2, 3, 4, 5, 6, 13])

# Reporting groups, in table column order.
JOINT_GROUPS = {
    "shoulders": (1, 7),
    "elbows": (2, 8),
    "wrists": (3, 9),
    "hips": (4, 10),
    "knees": (5, 11),
    "ankles": (6, 12),
    "head": (0, 13),
}

# Keypoint annotation states.  "absent" means no ground truth exists and the
# slot is ignored everywhere; "occluded" has ground truth but, by default,
# contributes only to the visibility target.
ABSENT, OCCLUDED, VISIBLE = 0, 1, 2
STATE_NAMES = ("absent", "occluded", "visible")
STATE_IDS = {name: i for i, name in enumerate(STATE_NAMES)}

BOX_CLASSES = ("pedestrian", "cyclist")

FlipAxis = Literal["x", "y"]


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi].  A no-op (bit-exact) for in-range input."""
    t = math.remainder(float(theta), math.tau)
    if t <= -math.pi:
        t += math.tau
    return t


def rotation_z(yaw: float) -> np.ndarray:
    """3x3 counter-clockwise rotation about +Z."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Box3D:
    """Upright 3D bounding box.

    center: (3,) meters, world frame.
    dims: (length, width, height) meters, strictly positive; length is the
        extent along the heading axis.
    yaw: heading, radians in (-pi, pi].
    """

    center: np.ndarray
    dims: np.ndarray
    yaw: float
    cls: str = "pedestrian"
    score: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.center)):
            raise ValueError("box center must be finite")
        if not np.all(self.dims > 0):
            raise ValueError(f"box dims must be strictly positive, got {self.dims}")
        if self.cls not in BOX_CLASSES:
            raise ValueError(f"unknown box class {self.cls!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score must be in [0, 1], got {self.score}")
        self.yaw = normalize_angle(self.yaw)

    def copy(self) -> "Box3D":
        return Box3D(self.center.copy(), self.dims.copy(), self.yaw, self.cls, self.score)

    def bev_corners(self) -> np.ndarray:
        """(4, 2) BEV rectangle corners, counter-clockwise."""
        l, w = self.dims[0] / 2.0, self.dims[1] / 2.0
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]


@dataclass
class KeypointSet:
    """Per-box keypoint annotation (or prediction).

    positions: (14, 3) world-frame meters, indexed per KEYPOINT_NAMES.
    states: (14,) ints in {ABSENT, OCCLUDED, VISIBLE}.
    vis_probs: optional (14,) predicted visibility probabilities.
    """

    positions: np.ndarray
    states: np.ndarray
    vis_probs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(N_KP, 3)
        self.states = np.asarray(self.states, dtype=np.int64).reshape(N_KP)
        if not np.all((self.states >= 0) & (self.states < len(STATE_NAMES))):
            raise ValueError("keypoint states must be in {0, 1, 2}")
        if self.vis_probs is not None:
            self.vis_probs = np.asarray(self.vis_probs, dtype=np.float64).reshape(N_KP)

    def copy(self) -> "KeypointSet":
        return KeypointSet(
            self.positions.copy(),
            self.states.copy(),
            None if self.vis_probs is None else self.vis_probs.copy(),
        )


@dataclass
class Scene:
    """A point cloud with annotated boxes and optional per-box keypoints."""

    scene_id: str
    points: np.ndarray  # (N, POINT_DIM)
    boxes: list = field(default_factory=list)
    keypoints: list = field(default_factory=list)  # Optional[KeypointSet] per box

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, POINT_DIM)
        if len(self.keypoints) != len(self.boxes):
            raise ValueError(
                f"scene {self.scene_id}: {len(self.boxes)} boxes but "
                f"{len(self.keypoints)} keypoint entries"
            )

    def copy(self) -> "Scene":
        return Scene(
            self.scene_id,
            self.points.copy(),
            [b.copy() for b in self.boxes],
            [None if k is None else k.copy() for k in self.keypoints],
        )

    def validate(self):
        """Check invariants: finite points, annotated keypoints near their box."""
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"scene {self.scene_id}: non-finite point coordinates")
        for i, (box, kp) in enumerate(zip(self.boxes, self.keypoints)):
            if kp is None:
                continue
            present = kp.states != ABSENT
            if not present.any():
                continue
            local = canonicalize(kp.positions[present], box)
            limit = 1.5 * box.dims / 2.0
            if np.any(np.abs(local[:, :3]) > limit):
                raise ValueError(
                    f"scene {self.scene_id}: box {i} has keypoints outside "
                    f"1.5x the box extent"
                )


def canonicalize(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Transform points into the box-local frame: R(-yaw) @ (p - center).

    Accepts (N, 3) or (N, 3 + k) arrays; extra feature columns are copied
    unchanged and input order is preserved.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise ValueError(f"expected (N, >=3) points, got shape {pts.shape}")
    out = pts.copy()
    # Row-vector form of R(-yaw) @ v is v @ R(yaw).
    out[:, :3] = (pts[:, :3] - box.center) @ rotation_z(box.yaw)
    return out


def decanonicalize(local: np.ndarray, box: Box3D) -> np.ndarray:
    """Inverse of canonicalize for positions: R(yaw) @ q + center."""
    q = np.asarray(local, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 3:
        raise ValueError(f"expected (N, 3) local positions, got shape {q.shape}")
    return q @ rotation_z(-box.yaw) + box.center


def flip_scene(scene: Scene, axis: FlipAxis) -> Scene:
    """Mirror a scene across the chosen world axis.

    axis="x" mirrors across the XZ plane (negates y); axis="y" negates x.
    Left/right keypoint slots are exchanged so labels stay anatomically
    consistent.  Box yaw maps to -yaw for both axes; for axis="y" this picks
    the box-rectangle-equivalent orientation (the mirrored heading modulo the
    box's 180-degree symmetry) so that flipping twice restores the scene
    bit-exactly.
    """
    if axis not in ("x", "y"):
        raise ValueError(f"flip axis must be 'x' or 'y', got {axis!r}")
    col = 1 if axis == "x" else 0
    pts = scene.points.copy()
    pts[:, col] = -pts[:, col]
    boxes, kps = [], []
    for box, kp in zip(scene.boxes, scene.keypoints):
        center = box.center.copy()
        center[col] = -center[col]
        boxes.append(Box3D(center, box.dims.copy(), -box.yaw, box.cls, box.score))
        if kp is None:
            kps.append(None)
        else:
            pos = kp.positions.copy()
            pos[:, col] = -pos[:, col]
            probs = None if kp.vis_probs is None else kp.vis_probs[LEFT_RIGHT_SWAP].copy()
            kps.append(KeypointSet(pos[LEFT_RIGHT_SWAP], kp.states[LEFT_RIGHT_SWAP].copy(), probs))
    return Scene(scene.scene_id, pts, boxes, kps)


@dataclass
class AugmentParams:
    """One concrete global augmentation: flips, then scale, rotation, translation."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    flip_x: bool = False
    flip_y: bool = False

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @property
    def is_identity(self) -> bool:
        return (
            self.scale == 1.0
            and self.rotation == 0.0
            and not self.translation.any()
            and not self.flip_x
            and not self.flip_y
        )


@dataclass
class AugmentRanges:
    """Sampling bounds for random global augmentation.

    flip_axes defaults to mirroring across the X axis only: combined with the
    rotation augmentation this already covers every mirror image a Y flip
    could add, without introducing heading-reversed canonical frames.
    """

    scale: tuple = (0.95, 1.05)
    rotation: tuple = (-math.pi / 4, math.pi / 4)
    translation: float = 0.5  # per-axis, meters
    flip_prob: float = 0.5  # probability of mirroring, axis drawn from flip_axes
    flip_axes: tuple = ("x",)

    def validate(self):
        if not (0 < self.scale[0] <= self.scale[1]):
            raise ValueError(f"bad scale range {self.scale}")
        if self.rotation[0] > self.rotation[1]:
            raise ValueError(f"bad rotation range {self.rotation}")
        if self.translation < 0 or not 0 <= self.flip_prob <= 1:
            raise ValueError("bad translation/flip_prob")
        if not self.flip_axes or any(a not in ("x", "y") for a in self.flip_axes):
            raise ValueError(f"bad flip_axes {self.flip_axes}")


def sample_augment(ranges: AugmentRanges, rng: np.random.Generator) -> AugmentParams:
    """Draw concrete augmentation parameters from the configured ranges."""
    ranges.validate()
    flip_x = flip_y = False
    if rng.random() < ranges.flip_prob:
        axis = ranges.flip_axes[int(rng.integers(len(ranges.flip_axes)))]
        flip_x = axis == "x"
        flip_y = axis == "y"
    return AugmentParams(
        scale=float(rng.uniform(*ranges.scale)),
        rotation=float(rng.uniform(*ranges.rotation)),
        translation=rng.uniform(-ranges.translation, ranges.translation, size=3),
        flip_x=flip_x,
        flip_y=flip_y,
    )


def global_augment(scene: Scene, params: AugmentParams) -> Scene:
    """Apply one similarity transform jointly to points, boxes, and keypoints.

    Order: flip_x, flip_y, then p -> R(rotation) @ (scale * p) + translation.
    Keypoint states are untouched except for the left/right relabeling done
    by flips.  Identity parameters return an identical scene.
    """
    if params.scale <= 0:
        raise ValueError(f"scale must be positive, got {params.scale}")
    out = scene
    if params.flip_x:
        out = flip_scene(out, "x")
    if params.flip_y:
        out = flip_scene(out, "y")
    if out is scene:
        out = scene.copy()
    s, theta, t = params.scale, params.rotation, params.translation
    if s == 1.0 and theta == 0.0 and not t.any():
        return out

    rot = rotation_z(theta)

    def move(xyz):
        return (xyz * s) @ rot.T + t

    out.points[:, :3] = move(out.points[:, :3])
    for box in out.boxes:
        box.center = move(box.center[None, :])[0]
        box.dims = box.dims * s
        box.yaw = normalize_angle(box.yaw + theta)
    for kp in out.keypoints:
        if kp is not None:
            kp.positions = move(kp.positions)
    return out


def random_augment(scene: Scene, ranges: AugmentRanges, rng: np.random.Generator) -> Scene:
    """Convenience wrapper: sample parameters, then apply them."""
    return global_augment(scene, sample_augment(ranges, rng))


def points_in_box(points: np.ndarray, box: Box3D, tol: float = 0.0) -> np.ndarray:
    """Boolean mask of points whose canonical coords lie within the box."""
    local = canonicalize(points[:, :3], box)
    half = box.dims / 2.0 + tol
    return np.all(np.abs(local) <= half, axis=1)


def _clip_polygon(poly: np.ndarray, edge_a: np.ndarray, edge_b: np.ndarray) -> np.ndarray:
    """Clip a convex polygon by the half-plane left of the directed edge a->b."""
    if len(poly) == 0:
        return poly
    d = edge_b - edge_a
    side = (poly[:, 0] - edge_a[0]) * d[1] - (poly[:, 1] - edge_a[1]) * d[0]
    keep = side <= 0.0  # left of a->b, i.e. inside for counter-clockwise hulls
    out = []
    n = len(poly)
    for i in range(n):
        j = (i + 1) % n
        if keep[i]:
            out.append(poly[i])
        if keep[i] != keep[j]:
            t = side[i] / (side[i] - side[j])
            out.append(poly[i] + t * (poly[j] - poly[i]))
    return np.asarray(out) if out else np.empty((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def bev_iou(box_a: Box3D, box_b: Box3D) -> float:
    """Bird's-eye-view IoU of two upright boxes (rotated-rectangle overlap)."""
    pa = box_a.bev_corners()
    pb = box_b.bev_corners()
    inter = pa
    for i in range(4):
        inter = _clip_polygon(inter, pb[i], pb[(i + 1) % 4])
        if len(inter) == 0:
            return 0.0
    area_i = _polygon_area(inter)
    area_a = float(box_a.dims[0] * box_a.dims[1])
    area_b = float(box_b.dims[0] * box_b.dims[1])
    union = area_a + area_b - area_i
    return area_i / union if union > 0 else 0.0
