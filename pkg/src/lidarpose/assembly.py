"""Per-box token construction: point sampling/padding, box-feature
compression, and the fused-feature projection to transformer width."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .geometry import C_POINT, POINT_DIM


@dataclass
class BoxSample:
    """Fixed-size canonical point array for one box.

    Valid rows are a uniform random subset when the box holds more than
    ``n_max`` points; padded rows are all-zero.  Row order is whatever the
    sampler drew; the mask is authoritative.
    """

    points: np.ndarray  # (n_max, POINT_DIM) canonical
    mask: np.ndarray  # (n_max,) bool
    kept_indices: np.ndarray  # (n_valid,) indices into the pre-sampling array

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    @property
    def is_empty(self) -> bool:
        return not self.mask.any()


def sample_pad(canonical_points: np.ndarray, n_max: int, rng: np.random.Generator) -> BoxSample:
    """Random-subsample to n_max rows, or zero-pad up to n_max."""
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    pts = np.asarray(canonical_points, dtype=np.float64).reshape(-1, POINT_DIM)
    n = len(pts)
    out = np.zeros((n_max, POINT_DIM))
    mask = np.zeros(n_max, dtype=bool)
    if n > n_max:
        kept = rng.choice(n, size=n_max, replace=False)
        out[:] = pts[kept]
        mask[:] = True
    else:
        kept = np.arange(n)
        out[:n] = pts
        mask[:n] = True
    return BoxSample(out, mask, kept)


class BoxFeatureCompressor(nn.Module):
    """MLP squeezing the (5, C_BEV) box feature block down to C_compressed."""

    def __init__(self, c_bev: int, c_compressed: int):
        super().__init__()
        self.c_bev = c_bev
        self.c_compressed = c_compressed
        width = 5 * c_bev
        self.net = nn.Sequential(
            nn.Linear(width, width),
            nn.GELU(),
            nn.Linear(width, c_compressed),
        )

    def forward(self, box_feats: torch.Tensor) -> torch.Tensor:
        if box_feats.shape[-2:] != (5, self.c_bev):
            raise ValueError(
                f"box features must end in (5, {self.c_bev}), got {tuple(box_feats.shape)}"
            )
        return self.net(box_feats.flatten(-2))


class TokenAssembler(nn.Module):
    """Concatenate point, voxel, and replicated box features, then project.

    The projection is a single bias-free linear map so padded (all-zero) rows
    stay exactly zero.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.p_cat_width, cfg.c_tr, bias=False)

    def forward(
        self,
        point_feats: torch.Tensor,  # (B, N, 3 + C_POINT)
        voxel_feats: torch.Tensor,  # (B, N, c_voxel)
        box_feat,  # (B, c_compressed) or None when the box path is off
        mask: torch.Tensor,  # (B, N) bool
    ):
        b, n, w_pt = point_feats.shape
        w_vox = voxel_feats.shape[-1]
        if w_pt != 3 + C_POINT or w_vox != self.cfg.c_voxel:
            raise ValueError(
                f"component widths (point={w_pt}, voxel={w_vox}) do not match "
                f"config (point={3 + C_POINT}, voxel={self.cfg.c_voxel})"
            )
        if box_feat is None:
            replicated = point_feats.new_zeros(b, n, self.cfg.c_compressed)
        else:
            if box_feat.shape[-1] != self.cfg.c_compressed:
                raise ValueError(
                    f"component widths (box={box_feat.shape[-1]}) do not match "
                    f"config (box={self.cfg.c_compressed})"
                )
            replicated = box_feat.unsqueeze(1).expand(b, n, self.cfg.c_compressed)
            replicated = replicated * mask.unsqueeze(-1).to(point_feats.dtype)
        p_cat = torch.cat([point_feats, voxel_feats, replicated], dim=-1)
        return self.proj(p_cat), p_cat
