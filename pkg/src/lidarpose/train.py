"""Training loop, evaluation/prediction entry points, and the gradient check."""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import geometry as geo
from . import metrics as met
from .config import ModelConfig, TrainConfig
from .data import Batch, BoxInputs, collate, prepare_box, training_boxes
from .errors import DataError, TrainingDiverged
from .features import PrecomputedFeatures
from .losses import LossWeights, compute_losses
from .model import KeypointTransformer, decode, load_checkpoint, parameter_groups, save_checkpoint
from .schedule import OneCycleSchedule
from .synth import read_scenes, write_scenes

log = logging.getLogger(__name__)


@dataclass
class RunArtifacts:
    run_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path
    metrics_log: Path
    figures: List[Path] = field(default_factory=list)
    final_val: Optional[met.EvalReport] = None


def _annotated(scene: geo.Scene):
    """Indices of boxes carrying at least one non-absent keypoint."""
    out = []
    for i, kp in enumerate(scene.keypoints):
        if kp is not None and (kp.states != geo.ABSENT).any():
            out.append(i)
    return out


def count_training_samples(scenes: Sequence[geo.Scene], cfg: TrainConfig) -> int:
    per_box = {"gt": 1, "jittered": cfg.jitters_per_box, "mixed": 1 + cfg.jitters_per_box}
    return sum(len(_annotated(s)) for s in scenes) * per_box[cfg.box_source]


def _epoch_items(scenes, cfg: TrainConfig, epoch: int) -> List[BoxInputs]:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch)))
    items: List[BoxInputs] = []
    for scene in scenes:
        s = geo.random_augment(scene, cfg.augment_ranges, rng) if cfg.augment else scene
        items.extend(training_boxes(s, cfg, rng))
    rng.shuffle(items)
    return items


def train(
    cfg: TrainConfig,
    train_scenes: Sequence[geo.Scene],
    val_scenes: Sequence[geo.Scene],
    run_dir,
) -> RunArtifacts:
    """Train on GT (or jittered) boxes; checkpoints every epoch plus best-val.

    A non-finite loss aborts with TrainingDiverged; the last epoch checkpoint
    is left on disk.
    """
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)

    torch.manual_seed(cfg.seed)
    model = KeypointTransformer(cfg.model)
    if cfg.freeze_stage1:
        for p in model.stage1_parameters():
            p.requires_grad_(False)
    trainable = [p for p in model.parameters() if p.requires_grad]

    n_samples = count_training_samples(train_scenes, cfg)
    if n_samples == 0:
        raise DataError("no annotated boxes in the training scenes")
    steps_per_epoch = math.ceil(n_samples / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    schedule = OneCycleSchedule(cfg.max_lr, total_steps, momentum=cfg.momentum)
    optimizer = torch.optim.AdamW(
        trainable,
        lr=schedule.initial_lr,
        betas=(cfg.momentum[1], 0.999),
        weight_decay=cfg.weight_decay,
    )
    weights = LossWeights.from_tuple(cfg.loss_weights)
    if not cfg.seg_aux:
        weights.seg = 0.0

    metrics_log = run_dir / "metrics.jsonl"
    last_path = run_dir / "last.npz"
    best_path = run_dir / "best.npz"
    last_good = run_dir / "init.npz"
    save_checkpoint(last_good, model, {"epoch": -1})
    best_pem = math.inf
    step = 0
    final_val = None
    with open(metrics_log, "w") as logf:
        for epoch in range(cfg.epochs):
            model.train()
            items = _epoch_items(train_scenes, cfg, epoch)
            for start in range(0, len(items), cfg.batch_size):
                chunk = items[start : start + cfg.batch_size]
                batch = collate(chunk, cfg.model)
                lr, mom = schedule.apply(optimizer, step)
                optimizer.zero_grad()
                try:
                    out = model(batch)
                    breakdown = compute_losses(out, batch, weights, cfg.include_occluded)
                except Exception as exc:
                    raise TrainingDiverged(
                        f"step {step}: {exc}; last good checkpoint is {last_good}"
                    ) from exc
                breakdown.total.backward()
                optimizer.step()
                rec = {"kind": "step", "step": step, "epoch": epoch, "lr": lr, "momentum": mom}
                rec.update(breakdown.as_dict())
                logf.write(json.dumps(rec) + "\n")
                step += 1
            periodic = (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1
            if periodic:
                epoch_path = run_dir / f"epoch-{epoch:03d}.npz"
                save_checkpoint(epoch_path, model, {"epoch": epoch})
                last_good = epoch_path
            if val_scenes and periodic:
                rep = evaluate_model(
                    model,
                    val_scenes,
                    vis_threshold=cfg.vis_threshold,
                    out_path=run_dir / "val_report.json",
                )
                final_val = rep
                val_pem = rep.pem["all"] if rep.pem["all"] is not None else math.inf
                logf.write(
                    json.dumps(
                        {
                            "kind": "val",
                            "epoch": epoch,
                            "mpjpe": rep.mpjpe["all"],
                            "pem": rep.pem["all"],
                        }
                    )
                    + "\n"
                )
                if val_pem < best_pem:
                    best_pem = val_pem
                    save_checkpoint(best_path, model, {"epoch": epoch, "val_pem": val_pem})
            logf.flush()
    save_checkpoint(last_path, model, {"epoch": cfg.epochs - 1})
    if not best_path.exists():
        save_checkpoint(best_path, model, {"epoch": cfg.epochs - 1})

    figures = []
    try:
        from .viz import plot_training_curves

        fig_path = run_dir / "training_curves.png"
        plot_training_curves(metrics_log, fig_path)
        figures.append(fig_path)
    except Exception as exc:  # plotting must never sink a finished run
        log.warning("could not render training curves: %s", exc)

    return RunArtifacts(
        run_dir=run_dir,
        last_checkpoint=last_path,
        best_checkpoint=best_path,
        metrics_log=metrics_log,
        figures=figures,
        final_val=final_val,
    )


# ---------------------------------------------------------------------------
# Prediction and evaluation
# ---------------------------------------------------------------------------


def _default_keypoints(box: geo.Box3D) -> geo.KeypointSet:
    """Fallback for boxes without points: all keypoints at the box center,
    flagged invisible."""
    pos = np.tile(box.center, (geo.N_KP, 1))
    return geo.KeypointSet(pos, np.full(geo.N_KP, geo.OCCLUDED), np.zeros(geo.N_KP))


def predict_scenes(
    model: KeypointTransformer,
    scenes: Sequence[geo.Scene],
    vis_threshold: float = 0.5,
    sample_seed: int = 0,
    features: Optional[PrecomputedFeatures] = None,
    chunk_size: int = 64,
) -> List[geo.Scene]:
    """Run the model over every box; returns prediction scenes in the scene
    file schema (predicted keypoints, visibility states, probabilities)."""
    model.eval()
    mcfg = model.cfg
    out_scenes = []
    for scene in scenes:
        sid_hash = zlib.crc32(scene.scene_id.encode("utf-8"))
        rng = np.random.default_rng(np.random.SeedSequence((sample_seed, sid_hash)))
        preds: List[Optional[geo.KeypointSet]] = [None] * len(scene.boxes)
        pending: List[BoxInputs] = []
        for i, box in enumerate(scene.boxes):
            item = prepare_box(scene, i, box, None, mcfg, rng)
            if item is None:
                preds[i] = _default_keypoints(box)
            else:
                pending.append(item)
        for start in range(0, len(pending), chunk_size):
            chunk = pending[start : start + chunk_size]
            batch = collate(chunk, mcfg)
            if features is not None:
                width = batch.point_feats.shape[1]
                loaded = [features.get(it.scene_id, it.box_index) for it in chunk]
                batch.p_voxel = torch.stack(
                    [torch.as_tensor(pv[:width]) for pv, _ in loaded]
                )
                batch.bev5 = torch.stack([torch.as_tensor(b5) for _, b5 in loaded])
            with torch.no_grad():
                out = model(batch)
            for k, it in enumerate(chunk):
                pred = decode(
                    out.xy[k].numpy(),
                    out.z[k].numpy(),
                    out.vis_prob[k].numpy(),
                    it.box,
                    vis_threshold,
                )
                states = np.where(pred.visible, geo.VISIBLE, geo.OCCLUDED)
                preds[it.box_index] = geo.KeypointSet(pred.world, states, pred.vis_prob)
        out_scenes.append(
            geo.Scene(
                scene.scene_id,
                scene.points.copy(),
                [b.copy() for b in scene.boxes],
                preds,
            )
        )
    return out_scenes


def evaluate_model(
    model: KeypointTransformer,
    scenes: Sequence[geo.Scene],
    eval_cfg: Optional[met.EvalConfig] = None,
    vis_threshold: float = 0.5,
    features: Optional[PrecomputedFeatures] = None,
    out_path=None,
) -> met.EvalReport:
    preds = predict_scenes(model, scenes, vis_threshold=vis_threshold, features=features)
    return met.report(scenes, preds, eval_cfg, out_path=out_path)


def evaluate(checkpoint_path, scenes_path, eval_cfg=None, vis_threshold=0.5,
             features_path=None, out_path=None) -> met.EvalReport:
    model, _ = load_checkpoint(checkpoint_path)
    scenes = list(read_scenes(scenes_path))
    features = PrecomputedFeatures(features_path) if features_path else None
    return evaluate_model(
        model, scenes, eval_cfg, vis_threshold=vis_threshold, features=features,
        out_path=out_path,
    )


def predict(checkpoint_path, scenes_path, out_path, vis_threshold=0.5,
            features_path=None, figures_dir=None) -> List[geo.Scene]:
    model, _ = load_checkpoint(checkpoint_path)
    scenes = list(read_scenes(scenes_path))
    features = PrecomputedFeatures(features_path) if features_path else None
    preds = predict_scenes(model, scenes, vis_threshold=vis_threshold, features=features)
    write_scenes(out_path, preds)
    if figures_dir is not None:
        from .viz import plot_scene_wireframe

        figures_dir = Path(figures_dir)
        figures_dir.mkdir(parents=True, exist_ok=True)
        for scene in preds:
            plot_scene_wireframe(scene, figures_dir / f"{scene.scene_id}.png")
    return preds


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    dtype: str
    threshold: float
    group_errors: dict  # group -> max relative error
    passed: bool

    def format(self) -> str:
        lines = [f"gradcheck ({self.dtype}, threshold {self.threshold:g})"]
        for group in sorted(self.group_errors):
            err = self.group_errors[group]
            flag = "ok " if err <= self.threshold else "FAIL"
            lines.append(f"  {flag} {group:<16} max rel err {err:.3e}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def _gradcheck_batch(mcfg: ModelConfig, seed: int, dtype) -> Batch:
    from .synth import GenConfig, compose_scene

    gen = GenConfig(
        humans=(2, 2), points_per_person=(25, 40), clutter_points=(10, 20),
        noise_sigma=0.005, label_dropout=0.1,
    )
    scene = compose_scene(gen, np.random.default_rng(seed), "gradcheck")
    rng = np.random.default_rng(seed + 1)
    items = []
    for i, (box, kp) in enumerate(zip(scene.boxes, scene.keypoints)):
        item = prepare_box(scene, i, box, kp, mcfg, rng, seg_label_k=3)
        if item is not None:
            items.append(item)
    return collate(items, mcfg, dtype=dtype)


def gradcheck(
    mcfg: Optional[ModelConfig] = None,
    seed: int = 0,
    dtype: str = "float64",
    max_coords_per_group: Optional[int] = None,
    rel_floor: float = 1e-3,
) -> GradcheckReport:
    """Compare analytic gradients of the total loss with central differences,
    per parameter group.

    Relative error uses a small-gradient floor: |a - n| / max(|a|, |n|, floor).
    """
    mcfg = mcfg or ModelConfig.tiny()
    torch_dtype = {"float64": torch.float64, "float32": torch.float32}[dtype]
    threshold = 1e-5 if dtype == "float64" else 1e-3
    h = 1e-6 if dtype == "float64" else 3e-3

    torch.manual_seed(seed)
    model = KeypointTransformer(mcfg)
    model.to(torch_dtype)
    batch = _gradcheck_batch(mcfg, seed, torch_dtype)
    weights = LossWeights()

    def loss_value() -> torch.Tensor:
        return compute_losses(model(batch), batch, weights).total

    model.zero_grad()
    loss_value().backward()

    rng = np.random.default_rng(seed)
    group_errors = {}
    for group, params in parameter_groups(model).items():
        worst = 0.0
        for _, p in params:
            grad = p.grad.detach().clone().reshape(-1)
            n = p.numel()
            coords = np.arange(n)
            if max_coords_per_group is not None and n > max_coords_per_group:
                coords = rng.choice(n, size=max_coords_per_group, replace=False)
            flat = p.data.reshape(-1)
            for c in coords:
                orig = flat[c].item()
                with torch.no_grad():
                    flat[c] = orig + h
                    up = loss_value().item()
                    flat[c] = orig - h
                    dn = loss_value().item()
                    flat[c] = orig
                numeric = (up - dn) / (2 * h)
                analytic = grad[c].item()
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), rel_floor)
                worst = max(worst, rel)
        group_errors[group] = worst
    passed = all(err <= threshold for err in group_errors.values())
    return GradcheckReport(dtype=dtype, threshold=threshold, group_errors=group_errors, passed=passed)
