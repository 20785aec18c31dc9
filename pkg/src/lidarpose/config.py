"""Model and training configuration, with JSON round-trip and CLI overrides."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .geometry import AugmentRanges, C_POINT, N_KP


@dataclass
class ModelConfig:
    """Network dimensions and structural toggles.

    Desk-scale defaults are sized for CPU training; ``full_scale`` gives the
    full-scale dimensions used for parameter-count checks.
    """

    c_voxel: int = 16
    c_bev: int = 64
    c_compressed: int = 16
    c_tr: int = 64
    blocks: int = 2
    heads: int = 4
    ffn: int = 128
    n_max: int = 256
    encoder_hidden: int = 32
    voxel_size: float = 0.10
    pillar_size: float = 0.20
    bev_margin: float = 1.0
    use_box_feat: bool = True
    use_seg_head: bool = True

    # fixed by the point schema / keypoint taxonomy
    @property
    def c_point(self) -> int:
        return C_POINT

    @property
    def n_kp(self) -> int:
        return N_KP

    @property
    def p_cat_width(self) -> int:
        w = 3 + C_POINT + self.c_voxel
        return w + self.c_compressed

    def validate(self):
        for name in ("c_voxel", "c_bev", "c_compressed", "c_tr", "blocks", "heads",
                     "ffn", "n_max", "encoder_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.c_tr % self.heads != 0:
            raise ConfigError(f"c_tr ({self.c_tr}) must be divisible by heads ({self.heads})")
        if self.voxel_size <= 0 or self.pillar_size <= 0 or self.bev_margin < 0:
            raise ConfigError("voxel_size/pillar_size must be positive, bev_margin >= 0")
        return self

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(
            c_voxel=32, c_bev=512, c_compressed=32, c_tr=256,
            blocks=4, heads=8, ffn=256, n_max=1024,
        )

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Smallest config that still exercises every module (for gradcheck)."""
        return cls(
            c_voxel=4, c_bev=8, c_compressed=8, c_tr=16,
            blocks=2, heads=2, ffn=16, n_max=16, encoder_hidden=8,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return _build(cls, d)


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the desk-scale regime."""

    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 20
    batch_size: int = 8
    max_lr: float = 3e-3
    weight_decay: float = 0.01
    momentum: tuple = (0.85, 0.95)
    seed: int = 0
    box_source: str = "gt"  # gt | jittered | mixed
    include_occluded: bool = False
    freeze_stage1: bool = False
    seg_aux: bool = True
    box_feat: bool = True
    loss_weights: tuple = (5.0, 1.0, 1.0, 1.0)
    vis_threshold: float = 0.5
    seg_label_k: int = 5
    augment: bool = True
    augment_ranges: AugmentRanges = field(default_factory=AugmentRanges)
    checkpoint_every: int = 1  # epochs between periodic checkpoint/val passes
    jitter_center: float = 0.1
    jitter_dims: float = 0.05
    jitter_yaw_deg: float = 5.0
    jitters_per_box: int = 1

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.max_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("max_lr must be > 0 and weight_decay >= 0")
        lo, hi = self.momentum
        if not (0 <= lo <= hi < 1):
            raise ConfigError(f"momentum range must satisfy 0 <= lo <= hi < 1, got {self.momentum}")
        if self.box_source not in ("gt", "jittered", "mixed"):
            raise ConfigError(f"box_source must be gt|jittered|mixed, got {self.box_source!r}")
        if len(self.loss_weights) != 4 or any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights must be 4 nonnegative values")
        if not 0 < self.vis_threshold < 1:
            raise ConfigError("vis_threshold must be in (0, 1)")
        if self.seg_label_k < 1 or self.jitters_per_box < 1:
            raise ConfigError("seg_label_k and jitters_per_box must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        try:
            self.augment_ranges.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        # structural toggles live on the model
        self.model.use_seg_head = self.seg_aux
        self.model.use_box_feat = self.box_feat
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["augment_ranges"] = dataclasses.asdict(self.augment_ranges)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        if "augment_ranges" in d and isinstance(d["augment_ranges"], dict):
            ar = d["augment_ranges"]
            try:
                d["augment_ranges"] = AugmentRanges(
                    scale=tuple(ar.get("scale", (0.95, 1.05))),
                    rotation=tuple(ar.get("rotation", (-math.pi / 4, math.pi / 4))),
                    translation=ar.get("translation", 0.5),
                    flip_prob=ar.get("flip_prob", 0.5),
                )
            except TypeError as exc:
                raise ConfigError(f"bad augment_ranges: {exc}") from exc
        return _build(cls, d)


def _build(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in d:
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def load_train_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Build a TrainConfig from an optional JSON file plus CLI overrides.

    Override keys use the flat flag names; ``model.<field>`` addresses nested
    model dimensions.
    """
    base: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("model."):
            base.setdefault("model", {})
            if not isinstance(base["model"], dict):
                base["model"] = dict(base["model"])
            base["model"][key.split(".", 1)[1]] = value
        else:
            base[key] = value
    return TrainConfig.from_dict(base).validate()
