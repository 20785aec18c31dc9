"""The keypoint transformer: learnable per-keypoint queries joined with point
tokens, pre-normalization self-attention blocks, four prediction heads, and
world-frame decoding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn

from .assembly import BoxFeatureCompressor, TokenAssembler
from .config import ModelConfig
from .data import Batch
from .errors import CheckpointError, NumericalError
from .features import PillarFeatureEncoder, VoxelFeatureEncoder, bilinear_sample
from . import geometry as geo
from .geometry import Box3D, N_KP


class TransformerBlock(nn.Module):
    """Pre-norm multi-head self-attention + feed-forward, both residual."""

    def __init__(self, c: int, heads: int, ffn: int):
        super().__init__()
        self.heads = heads
        self.scale = (c // heads) ** -0.5
        self.ln_attn = nn.LayerNorm(c)
        self.qkv = nn.Linear(c, 3 * c)
        self.proj = nn.Linear(c, c)
        self.ln_ffn = nn.LayerNorm(c)
        self.ff1 = nn.Linear(c, ffn)
        self.ff2 = nn.Linear(ffn, c)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor, need_attn: bool = False):
        b, t, c = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln_attn(x)).chunk(3, dim=-1)
        q = q.view(b, t, h, c // h).transpose(1, 2)
        k = k.view(b, t, h, c // h).transpose(1, 2)
        v = v.view(b, t, h, c // h).transpose(1, 2)
        logits = (q @ k.transpose(-2, -1)) * self.scale
        logits = logits.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        x = x + self.proj(out)
        x = x + self.ff2(self.act(self.ff1(self.ln_ffn(x))))
        return x, (attn if need_attn else None)


class PredictionHeads(nn.Module):
    """Two-layer maps from query features to offsets/visibility, and from
    point features to per-point keypoint-class logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.c_tr

        def mlp(out_dim):
            return nn.Sequential(nn.Linear(c, c), nn.GELU(), nn.Linear(c, out_dim))

        self.xy = mlp(2)
        self.z = mlp(1)
        self.vis = mlp(1)
        self.seg = mlp(N_KP + 1) if cfg.use_seg_head else None


@dataclass
class ModelOutput:
    """Batched network outputs; offsets are meters in the canonical frame."""

    xy: torch.Tensor  # (B, 14, 2)
    z: torch.Tensor  # (B, 14)
    vis_logit: torch.Tensor  # (B, 14)
    vis_prob: torch.Tensor  # (B, 14)
    seg_logits: Optional[torch.Tensor]  # (B, N, 15) or None
    x_kp: torch.Tensor  # (B, 14, c_tr)
    x_point: torch.Tensor  # (B, N, c_tr)
    p_cat: torch.Tensor  # (B, N, p_cat_width)
    attn: Optional[List[torch.Tensor]] = None  # per block (B, heads, T, T)


class KeypointTransformer(nn.Module):
    """End-to-end second stage: feature encoders, token fusion, attention
    blocks, and prediction heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.voxel_encoder = VoxelFeatureEncoder(cfg.c_voxel, cfg.encoder_hidden)
        if cfg.use_box_feat:
            self.bev_encoder = PillarFeatureEncoder(cfg.c_bev, cfg.encoder_hidden)
            self.compressor = BoxFeatureCompressor(cfg.c_bev, cfg.c_compressed)
        else:
            self.bev_encoder = None
            self.compressor = None
        self.assembler = TokenAssembler(cfg)
        self.queries = nn.Parameter(torch.randn(N_KP, cfg.c_tr) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.c_tr, cfg.heads, cfg.ffn) for _ in range(cfg.blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.c_tr)
        self.heads = PredictionHeads(cfg)

    def stage1_parameters(self):
        """Parameters of the feature surrogate (the trainable stand-in for a
        frozen first stage)."""
        params = list(self.voxel_encoder.parameters())
        if self.bev_encoder is not None:
            params += list(self.bev_encoder.parameters())
        return params

    def forward(self, batch: Batch, need_attn: bool = False) -> ModelOutput:
        dtype = self.queries.dtype
        mask_f = batch.mask.unsqueeze(-1).to(dtype)
        if batch.p_voxel is not None:
            p_voxel = batch.p_voxel.to(dtype) * mask_f
        else:
            per_voxel = self.voxel_encoder(batch.vox_stats)
            per_voxel = per_voxel * batch.vox_mask.unsqueeze(-1).to(dtype)
            gather_idx = batch.point_voxel.unsqueeze(-1).expand(-1, -1, self.cfg.c_voxel)
            p_voxel = torch.gather(per_voxel, 1, gather_idx) * mask_f

        if self.cfg.use_box_feat:
            if batch.bev5 is not None:
                b5 = batch.bev5.to(dtype)
            else:
                featmap = self.bev_encoder(batch.pillar_stats, batch.pillar_occ)
                b5 = bilinear_sample(featmap, batch.bev_locs)
            box_feat = self.compressor(b5)
        else:
            box_feat = None

        x_point, p_cat = self.assembler(batch.point_feats, p_voxel, box_feat, batch.mask)
        b = x_point.shape[0]
        tokens = torch.cat([self.queries.unsqueeze(0).expand(b, -1, -1), x_point], dim=1)
        key_valid = torch.cat(
            [torch.ones(b, N_KP, dtype=torch.bool, device=tokens.device), batch.mask], dim=1
        )
        attns = [] if need_attn else None
        for i, block in enumerate(self.blocks):
            tokens, attn = block(tokens, key_valid, need_attn)
            if not torch.isfinite(tokens).all():
                raise NumericalError(f"block {i}: non-finite activations")
            if need_attn:
                attns.append(attn)
        tokens = self.final_norm(tokens)
        x_kp, x_point_out = tokens[:, :N_KP], tokens[:, N_KP:]

        xy = self.heads.xy(x_kp)
        z = self.heads.z(x_kp).squeeze(-1)
        vis_logit = self.heads.vis(x_kp).squeeze(-1)
        seg = self.heads.seg(x_point_out) if self.heads.seg is not None else None
        return ModelOutput(
            xy=xy,
            z=z,
            vis_logit=vis_logit,
            vis_prob=torch.sigmoid(vis_logit),
            seg_logits=seg,
            x_kp=x_kp,
            x_point=x_point_out,
            p_cat=p_cat,
            attn=attns,
        )


@dataclass
class PosePrediction:
    """Decoded per-box prediction."""

    xy: np.ndarray  # (14, 2) canonical
    z: np.ndarray  # (14,)
    vis_prob: np.ndarray  # (14,)
    seg_logits: Optional[np.ndarray]  # (N, 15)
    world: np.ndarray  # (14, 3)
    visible: np.ndarray  # (14,) bool


def decode(
    xy: np.ndarray,
    z: np.ndarray,
    vis_prob: np.ndarray,
    box: Box3D,
    vis_threshold: float = 0.5,
    seg_logits: Optional[np.ndarray] = None,
) -> PosePrediction:
    """Map canonical offsets back to world keypoints and threshold visibility."""
    if not 0.0 < vis_threshold < 1.0:
        raise ValueError(f"vis_threshold must be in (0, 1), got {vis_threshold}")
    xy = np.asarray(xy, dtype=np.float64).reshape(N_KP, 2)
    z = np.asarray(z, dtype=np.float64).reshape(N_KP)
    vis_prob = np.asarray(vis_prob, dtype=np.float64).reshape(N_KP)
    local = np.concatenate([xy, z[:, None]], axis=1)
    world = geo.decanonicalize(local, box)
    return PosePrediction(
        xy=xy,
        z=z,
        vis_prob=vis_prob,
        seg_logits=seg_logits,
        world=world,
        visible=vis_prob >= vis_threshold,
    )


# ---------------------------------------------------------------------------
# Grouping, counting, checkpoints
# ---------------------------------------------------------------------------

_GROUP_PREFIXES = (
    ("queries", "queries"),
    ("voxel_encoder.", "voxel_encoder"),
    ("bev_encoder.", "bev_encoder"),
    ("compressor.", "compressor"),
    ("assembler.", "projection"),
    ("final_norm.", "final_norm"),
    ("heads.xy.", "head_xy"),
    ("heads.z.", "head_z"),
    ("heads.vis.", "head_vis"),
    ("heads.seg.", "head_seg"),
)

STAGE1_GROUPS = ("voxel_encoder", "bev_encoder")


def group_of(param_name: str) -> str:
    if param_name.startswith("blocks."):
        return f"block_{param_name.split('.')[1]}"
    for prefix, group in _GROUP_PREFIXES:
        if param_name == prefix or param_name.startswith(prefix):
            return group
    return "other"


def parameter_groups(model: KeypointTransformer) -> dict:
    """Named parameters bucketed into reporting groups."""
    groups: dict = {}
    for name, p in model.named_parameters():
        groups.setdefault(group_of(name), []).append((name, p))
    return groups


def parameter_breakdown(model: KeypointTransformer) -> dict:
    """Parameter counts per group, plus the transformer-component total
    (everything except the stage-one feature surrogate)."""
    counts = {g: sum(p.numel() for _, p in ps) for g, ps in parameter_groups(model).items()}
    core = sum(n for g, n in counts.items() if g not in STAGE1_GROUPS)
    counts["core_total"] = core
    counts["total"] = sum(p.numel() for p in model.parameters())
    return counts


def save_checkpoint(path, model: KeypointTransformer, extra: Optional[dict] = None):
    """Named-parameter container: float32 little-endian arrays plus a header
    carrying the full model config."""
    arrays = {
        name: p.detach().cpu().numpy().astype("<f4")
        for name, p in model.named_parameters()
    }
    arrays["__config__"] = np.array(json.dumps(model.cfg.to_dict()))
    arrays["__extra__"] = np.array(json.dumps(extra or {}))
    np.savez(path, **arrays)


def load_checkpoint(path, map_dtype=torch.float32):
    """Rebuild the model from a checkpoint, verifying every parameter shape."""
    try:
        with np.load(path, allow_pickle=False) as zf:
            payload = {k: zf[k] for k in zf.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__config__" not in payload:
        raise CheckpointError(f"{path}: missing config header")
    cfg = ModelConfig.from_dict(json.loads(str(payload.pop("__config__"))))
    extra = json.loads(str(payload.pop("__extra__", np.array("{}"))))
    model = KeypointTransformer(cfg)
    state = dict(model.named_parameters())
    missing = set(state) - set(payload)
    unexpected = set(payload) - set(state)
    if missing or unexpected:
        raise CheckpointError(
            f"{path}: parameter names do not match config "
            f"(missing {sorted(missing)}, unexpected {sorted(unexpected)})"
        )
    with torch.no_grad():
        for name, arr in payload.items():
            expect = tuple(state[name].shape)
            if tuple(arr.shape) != expect:
                raise CheckpointError(
                    f"{path}: {name} has shape {tuple(arr.shape)}, expected {expect}"
                )
            state[name].copy_(torch.from_numpy(arr.astype(np.float32)))
    model.to(map_dtype)
    return model, extra
