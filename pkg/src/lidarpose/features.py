"""Stage-one feature surrogate: per-point voxel features and per-box BEV
features, as a small trainable encoder plus a file-backed provider for
precomputed features.

Both feature paths operate on box-canonical coordinates, so their outputs are
invariant under rigid motions applied jointly to scene and boxes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import DataError, FeatureLookupError
from . import geometry as geo
from .geometry import C_POINT, Box3D

VOXEL_STAT_DIM = 3 + 1 + C_POINT  # mean offset, log count, mean extras
PILLAR_STAT_DIM = 8  # log count, mean dx/dy, mean z, max z, mean extras


@dataclass
class VoxelGrid:
    """Sparse voxelization of a point set.

    indices: (V, 3) integer voxel coordinates (floor(p / size)), unique and
        lexicographically sorted.
    point_voxel: (N,) row into ``indices`` for every input point.
    """

    voxel_size: np.ndarray
    indices: np.ndarray
    point_voxel: np.ndarray
    counts: np.ndarray
    mean_pos: np.ndarray
    mean_extra: np.ndarray

    @property
    def n_voxels(self) -> int:
        return len(self.indices)


def voxelize(points: np.ndarray, voxel_size) -> VoxelGrid:
    """Assign each point to floor(coordinate / size) per axis.

    ``points`` is (N, 3) or (N, 3 + C_POINT); extra feature columns feed the
    per-voxel mean-extra statistics.
    """
    pts = np.asarray(points, dtype=np.float64)
    size = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,)).copy()
    if np.any(size <= 0):
        raise ValueError(f"voxel size must be positive, got {size}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("voxelize: non-finite point coordinates")
    xyz = pts[:, :3]
    extra = pts[:, 3:] if pts.shape[1] > 3 else np.zeros((len(pts), C_POINT))
    idx = np.floor(xyz / size).astype(np.int64)
    uniq, inverse = np.unique(idx, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    v = len(uniq)
    counts = np.bincount(inverse, minlength=v).astype(np.int64)
    mean_pos = np.zeros((v, 3))
    mean_extra = np.zeros((v, extra.shape[1]))
    for a in range(3):
        mean_pos[:, a] = np.bincount(inverse, weights=xyz[:, a], minlength=v)
    for a in range(extra.shape[1]):
        mean_extra[:, a] = np.bincount(inverse, weights=extra[:, a], minlength=v)
    denom = np.maximum(counts, 1)[:, None]
    mean_pos /= denom
    mean_extra /= denom
    return VoxelGrid(size, uniq, inverse, counts, mean_pos, mean_extra)


def voxel_stats(grid: VoxelGrid) -> np.ndarray:
    """(V, VOXEL_STAT_DIM) per-voxel encoder input."""
    centers = (grid.indices + 0.5) * grid.voxel_size
    return np.concatenate(
        [
            grid.mean_pos - centers,
            np.log1p(grid.counts)[:, None],
            grid.mean_extra,
        ],
        axis=1,
    )


class VoxelFeatureEncoder(nn.Module):
    """Small MLP mapping per-voxel statistics to C_voxel features."""

    def __init__(self, c_voxel: int, hidden: int = 32):
        super().__init__()
        self.c_voxel = c_voxel
        self.net = nn.Sequential(
            nn.Linear(VOXEL_STAT_DIM, hidden),
            nn.GELU(),
            nn.Linear(hidden, c_voxel),
        )

    def forward(self, stats: torch.Tensor) -> torch.Tensor:
        return self.net(stats)


def encode_voxels(grid: VoxelGrid, encoder: VoxelFeatureEncoder) -> torch.Tensor:
    """Per-point voxel features: encode each voxel, gather per point."""
    if grid.n_voxels == 0:
        raise ValueError("encode_voxels: empty voxel grid")
    stats = torch.as_tensor(voxel_stats(grid), dtype=next(encoder.parameters()).dtype)
    per_voxel = encoder(stats)
    return per_voxel[torch.as_tensor(grid.point_voxel, dtype=torch.long)]


@dataclass
class PillarGrid:
    """Coarse BEV grid of pooled pillar statistics around one box.

    The grid lives in the box-canonical frame: origin at the low corner of a
    margin-padded neighborhood, x rows and y columns of ``pillar_size``.
    """

    stats: np.ndarray  # (H, W, PILLAR_STAT_DIM)
    occupancy: np.ndarray  # (H, W) bool
    origin: np.ndarray  # (2,) canonical coords of grid corner
    pillar_size: float
    sample_locs: np.ndarray  # (5, 2) grid coords: center, front, back, left, right


def pillar_grid(
    scene_points: np.ndarray,
    box: Box3D,
    pillar_size: float = 0.2,
    margin: float = 1.0,
    z_margin: float = 0.5,
) -> PillarGrid:
    """Pool pillar statistics over the canonical-frame box neighborhood."""
    if pillar_size <= 0:
        raise ValueError("pillar size must be positive")
    l, w, h = box.dims
    x_half = l / 2 + margin
    y_half = w / 2 + margin
    local = geo.canonicalize(scene_points, box)
    keep = (
        (np.abs(local[:, 0]) <= x_half)
        & (np.abs(local[:, 1]) <= y_half)
        & (np.abs(local[:, 2]) <= h / 2 + z_margin)
    )
    local = local[keep]
    H = max(1, int(np.ceil(2 * x_half / pillar_size)))
    W = max(1, int(np.ceil(2 * y_half / pillar_size)))
    origin = np.array([-x_half, -y_half])
    stats = np.zeros((H, W, PILLAR_STAT_DIM))
    occupancy = np.zeros((H, W), dtype=bool)
    if len(local):
        gi = np.clip(np.floor((local[:, 0] - origin[0]) / pillar_size).astype(int), 0, H - 1)
        gj = np.clip(np.floor((local[:, 1] - origin[1]) / pillar_size).astype(int), 0, W - 1)
        flat = gi * W + gj
        counts = np.bincount(flat, minlength=H * W).astype(np.float64)
        occ = counts > 0
        centers_x = origin[0] + (gi + 0.5) * pillar_size
        centers_y = origin[1] + (gj + 0.5) * pillar_size

        def pooled(values):
            return np.bincount(flat, weights=values, minlength=H * W)

        denom = np.maximum(counts, 1.0)
        mean_dx = pooled(local[:, 0] - centers_x) / denom
        mean_dy = pooled(local[:, 1] - centers_y) / denom
        mean_z = pooled(local[:, 2]) / denom
        max_z = np.full(H * W, -np.inf)
        np.maximum.at(max_z, flat, local[:, 2])
        max_z[~occ] = 0.0
        cols = [np.log1p(counts), mean_dx, mean_dy, mean_z, max_z]
        if local.shape[1] > 3:
            for a in range(3, 6):
                cols.append(pooled(local[:, a]) / denom)
        else:
            cols.extend([np.zeros(H * W)] * 3)
        stats = np.stack(cols, axis=1).reshape(H, W, PILLAR_STAT_DIM)
        occupancy = occ.reshape(H, W)
    # sampling order fixed: center, front (+x), back (-x), left (+y), right (-y)
    pts = np.array(
        [[0.0, 0.0], [l / 2, 0.0], [-l / 2, 0.0], [0.0, w / 2], [0.0, -w / 2]]
    )
    sample_locs = (pts - origin) / pillar_size - 0.5
    return PillarGrid(stats, occupancy, origin, pillar_size, sample_locs)


class PillarFeatureEncoder(nn.Module):
    """Small MLP mapping pooled pillar statistics to C_BEV features.

    Empty pillars produce exactly zero features, so an empty neighborhood
    yields a zero feature map.
    """

    def __init__(self, c_bev: int, hidden: int = 32):
        super().__init__()
        self.c_bev = c_bev
        self.net = nn.Sequential(
            nn.Linear(PILLAR_STAT_DIM, hidden),
            nn.GELU(),
            nn.Linear(hidden, c_bev),
        )

    def forward(self, stats: torch.Tensor, occupancy: torch.Tensor) -> torch.Tensor:
        return self.net(stats) * occupancy.unsqueeze(-1).to(stats.dtype)


def bilinear_sample(featmap: torch.Tensor, locs: torch.Tensor) -> torch.Tensor:
    """Sample (..., H, W, C) feature maps at fractional grid coords (..., K, 2).

    Coordinates are clamped to the map; differentiable w.r.t. ``featmap``.
    """
    H, W = featmap.shape[-3], featmap.shape[-2]
    gx = locs[..., 0].clamp(0.0, H - 1.0)
    gy = locs[..., 1].clamp(0.0, W - 1.0)
    x0 = gx.floor().long().clamp(0, H - 1)
    y0 = gy.floor().long().clamp(0, W - 1)
    x1 = (x0 + 1).clamp(0, H - 1)
    y1 = (y0 + 1).clamp(0, W - 1)
    wx = (gx - x0.to(gx.dtype)).unsqueeze(-1)
    wy = (gy - y0.to(gy.dtype)).unsqueeze(-1)

    def at(xi, yi):
        if featmap.dim() == 3:
            return featmap[xi, yi]
        idx = (xi * W + yi).unsqueeze(-1).expand(*xi.shape, featmap.shape[-1])
        flat = featmap.reshape(featmap.shape[0], H * W, -1)
        return torch.gather(flat, 1, idx)

    f00, f01 = at(x0, y0), at(x0, y1)
    f10, f11 = at(x1, y0), at(x1, y1)
    top = f00 * (1 - wy) + f01 * wy
    bot = f10 * (1 - wy) + f11 * wy
    return top * (1 - wx) + bot * wx


def box_bev_features(
    scene_points: np.ndarray,
    box: Box3D,
    encoder: PillarFeatureEncoder,
    pillar_size: float = 0.2,
    margin: float = 1.0,
) -> torch.Tensor:
    """(5, C_BEV) BEV features at the box center and its four edge midpoints."""
    grid = pillar_grid(scene_points, box, pillar_size=pillar_size, margin=margin)
    dtype = next(encoder.parameters()).dtype
    stats = torch.as_tensor(grid.stats, dtype=dtype)
    occ = torch.as_tensor(grid.occupancy)
    featmap = encoder(stats, occ)
    locs = torch.as_tensor(grid.sample_locs, dtype=dtype)
    return bilinear_sample(featmap, locs)


# ---------------------------------------------------------------------------
# Precomputed-feature file: binary records keyed by (scene id, box index),
# little-endian float32, header carrying (C_voxel, C_BEV, N_max).
# ---------------------------------------------------------------------------

_MAGIC = b"LPF1"
_HEADER = struct.Struct("<4sIIII")  # magic, c_voxel, c_bev, n_max, n_records
_REC_HEAD = struct.Struct("<II")  # scene-id byte length, box index


def write_precomputed(path, c_voxel: int, c_bev: int, n_max: int, entries):
    """Write {(scene_id, box_index): (P_voxel, B)} records.

    P_voxel must be (n_max, c_voxel) and B (5, c_bev); anything else raises
    DataError naming the expected and actual shapes.
    """
    items = list(entries.items() if isinstance(entries, dict) else entries)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, c_voxel, c_bev, n_max, len(items)))
        for (scene_id, box_index), (p_voxel, b) in items:
            p_voxel = np.asarray(p_voxel, dtype="<f4")
            b = np.asarray(b, dtype="<f4")
            if p_voxel.shape != (n_max, c_voxel):
                raise DataError(
                    f"({scene_id}, {box_index}): P_voxel shape {p_voxel.shape}, "
                    f"expected {(n_max, c_voxel)}"
                )
            if b.shape != (5, c_bev):
                raise DataError(
                    f"({scene_id}, {box_index}): B shape {b.shape}, expected {(5, c_bev)}"
                )
            sid = scene_id.encode("utf-8")
            fh.write(_REC_HEAD.pack(len(sid), int(box_index)))
            fh.write(sid)
            fh.write(p_voxel.tobytes())
            fh.write(b.tobytes())


class PrecomputedFeatures:
    """Random-access reader over a precomputed-feature file."""

    def __init__(self, path):
        self.path = path
        with open(path, "rb") as fh:
            size = fh.seek(0, 2)
            fh.seek(0)
            head = fh.read(_HEADER.size)
            if len(head) < _HEADER.size:
                raise DataError(f"{path}: truncated header")
            magic, self.c_voxel, self.c_bev, self.n_max, n_records = _HEADER.unpack(head)
            if magic != _MAGIC:
                raise DataError(f"{path}: bad magic {magic!r}")
            self._index = {}
            vox_bytes = self.n_max * self.c_voxel * 4
            bev_bytes = 5 * self.c_bev * 4
            for k in range(n_records):
                rec = fh.read(_REC_HEAD.size)
                if len(rec) < _REC_HEAD.size:
                    raise DataError(f"{path}: record {k}: truncated record header")
                id_len, box_index = _REC_HEAD.unpack(rec)
                sid = fh.read(id_len)
                if len(sid) < id_len:
                    raise DataError(f"{path}: record {k}: truncated scene id")
                offset = fh.tell()
                if offset + vox_bytes + bev_bytes > size:
                    raise DataError(
                        f"{path}: record {k}: expected {vox_bytes + bev_bytes} payload "
                        f"bytes, file ends early"
                    )
                fh.seek(vox_bytes + bev_bytes, 1)
                self._index[(sid.decode("utf-8"), box_index)] = offset

    def keys(self):
        return self._index.keys()

    def get(self, scene_id: str, box_index: int):
        """Return (P_voxel (n_max, c_voxel), B (5, c_bev)) as float32 arrays."""
        key = (scene_id, int(box_index))
        if key not in self._index:
            raise FeatureLookupError(f"no precomputed features for {key}")
        vox_bytes = self.n_max * self.c_voxel * 4
        bev_bytes = 5 * self.c_bev * 4
        with open(self.path, "rb") as fh:
            fh.seek(self._index[key])
            raw = fh.read(vox_bytes + bev_bytes)
        if len(raw) < vox_bytes + bev_bytes:
            raise DataError(
                f"{self.path}: {key}: expected {vox_bytes + bev_bytes} bytes, "
                f"got {len(raw)}"
            )
        p_voxel = np.frombuffer(raw[:vox_bytes], dtype="<f4").reshape(self.n_max, self.c_voxel)
        b = np.frombuffer(raw[vox_bytes:], dtype="<f4").reshape(5, self.c_bev)
        return p_voxel.copy(), b.copy()


def load_precomputed(path, scene_id: str, box_index: int):
    """One-shot lookup; prefer PrecomputedFeatures for repeated access."""
    return PrecomputedFeatures(path).get(scene_id, box_index)
