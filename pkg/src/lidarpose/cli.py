"""Command-line interface.

Subcommands: gen-data, train, eval, predict, gradcheck, inspect.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, DataError, NumericalError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lidarpose", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic labeled scenes")
    g.add_argument("--out", required=True, help="output .jsonl path")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--humans", type=int, nargs=2, default=(1, 4), metavar=("LO", "HI"))
    g.add_argument("--points", type=int, nargs=2, default=(120, 400), metavar=("LO", "HI"))
    g.add_argument("--clutter", type=int, nargs=2, default=(100, 300), metavar=("LO", "HI"))
    g.add_argument("--noise", type=float, default=0.008)
    g.add_argument("--dropout", type=float, default=0.05)
    g.add_argument("--prefix", default="scene")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--train", required=True, dest="train_path")
    t.add_argument("--val", dest="val_path")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", help="JSON config file (flags override it)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--momentum", type=float, nargs=2, metavar=("LO", "HI"))
    t.add_argument("--seed", type=int)
    t.add_argument("--box-source", choices=("gt", "jittered", "mixed"))
    t.add_argument("--loss-weights", type=float, nargs=4, metavar=("XY", "Z", "VIS", "SEG"))
    t.add_argument("--vis-threshold", type=float)
    t.add_argument("--seg-label-k", type=int)
    t.add_argument("--no-seg-aux", action="store_true")
    t.add_argument("--no-box-feat", action="store_true")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--freeze-stage1", action="store_true")
    t.add_argument("--include-occluded", action="store_true")
    _add_dim_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on labeled scenes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--report", help="write the JSON report here")
    e.add_argument("--vis-threshold", type=float, default=0.5)
    e.add_argument("--gate", choices=("center", "iou"), default="center")
    e.add_argument("--max-center-dist", type=float, default=1.0)
    e.add_argument("--min-iou", type=float, default=0.1)
    e.add_argument("--precomputed", help="precomputed stage-one feature file")

    r = sub.add_parser("predict", help="write predictions in the scene format")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scenes", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--vis-threshold", type=float, default=0.5)
    r.add_argument("--figures", help="directory for wireframe figures")
    r.add_argument("--precomputed", help="precomputed stage-one feature file")

    c = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    c.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-coords", type=int, help="sample at most this many coords per group")

    i = sub.add_parser("inspect", help="print model dimensions and parameter counts")
    src = i.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--full-scale", action="store_true", dest="full_scale",
                     help="use the full-scale dimension preset")
    _add_dim_flags(i)
    return p


def _add_dim_flags(sp):
    sp.add_argument("--c-tr", type=int, dest="c_tr")
    sp.add_argument("--blocks", type=int)
    sp.add_argument("--heads", type=int)
    sp.add_argument("--ffn", type=int)
    sp.add_argument("--n-max", type=int, dest="n_max")
    sp.add_argument("--c-voxel", type=int, dest="c_voxel")
    sp.add_argument("--c-bev", type=int, dest="c_bev")
    sp.add_argument("--c-compressed", type=int, dest="c_compressed")


_DIM_FLAGS = ("c_tr", "blocks", "heads", "ffn", "n_max", "c_voxel", "c_bev", "c_compressed")


def _cmd_gen_data(args) -> int:
    from .synth import GenConfig, generate_scenes, write_scenes

    cfg = GenConfig(
        humans=tuple(args.humans),
        points_per_person=tuple(args.points),
        clutter_points=tuple(args.clutter),
        noise_sigma=args.noise,
        label_dropout=args.dropout,
        seed=args.seed,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_scenes(args.out, generate_scenes(cfg, args.scenes, id_prefix=args.prefix))
    print(f"wrote {args.scenes} scenes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .config import load_train_config
    from .synth import read_scenes
    from .train import train

    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "max_lr": args.max_lr,
        "weight_decay": args.weight_decay,
        "momentum": tuple(args.momentum) if args.momentum else None,
        "seed": args.seed,
        "box_source": args.box_source,
        "loss_weights": tuple(args.loss_weights) if args.loss_weights else None,
        "vis_threshold": args.vis_threshold,
        "seg_label_k": args.seg_label_k,
    }
    if args.no_seg_aux:
        overrides["seg_aux"] = False
    if args.no_box_feat:
        overrides["box_feat"] = False
    if args.no_augment:
        overrides["augment"] = False
    if args.freeze_stage1:
        overrides["freeze_stage1"] = True
    if args.include_occluded:
        overrides["include_occluded"] = True
    for name in _DIM_FLAGS:
        overrides[f"model.{name}"] = getattr(args, name)
    cfg = load_train_config(args.config, overrides)
    train_scenes = list(read_scenes(args.train_path))
    val_scenes = list(read_scenes(args.val_path)) if args.val_path else []
    artifacts = train(cfg, train_scenes, val_scenes, args.out)
    print(f"run directory: {artifacts.run_dir}")
    print(f"last checkpoint: {artifacts.last_checkpoint}")
    print(f"best checkpoint: {artifacts.best_checkpoint}")
    if artifacts.final_val is not None:
        print(artifacts.final_val.format_table())
    return 0


def _cmd_eval(args) -> int:
    from . import metrics as met
    from .train import evaluate

    gate = met.MatchGate(
        mode=args.gate, max_center_dist=args.max_center_dist, min_iou=args.min_iou
    )
    rep = evaluate(
        args.checkpoint,
        args.scenes,
        met.EvalConfig(gate=gate),
        vis_threshold=args.vis_threshold,
        features_path=args.precomputed,
        out_path=args.report,
    )
    print(rep.format_table())
    return 0


def _cmd_predict(args) -> int:
    from .train import predict

    preds = predict(
        args.checkpoint,
        args.scenes,
        args.out,
        vis_threshold=args.vis_threshold,
        features_path=args.precomputed,
        figures_dir=args.figures,
    )
    print(f"wrote {len(preds)} prediction scenes to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .train import gradcheck

    report = gradcheck(seed=args.seed, dtype=args.dtype, max_coords_per_group=args.max_coords)
    print(report.format())
    if not report.passed:
        raise NumericalError("gradient check failed")
    return 0


def _cmd_inspect(args) -> int:
    from .config import ModelConfig
    from .model import KeypointTransformer, load_checkpoint, parameter_breakdown

    if args.checkpoint:
        model, extra = load_checkpoint(args.checkpoint)
        print(f"checkpoint: {args.checkpoint}  extra: {extra}")
    else:
        cfg = ModelConfig.full_scale() if args.full_scale else ModelConfig()
        for name in _DIM_FLAGS:
            value = getattr(args, name)
            if value is not None:
                setattr(cfg, name, value)
        model = KeypointTransformer(cfg.validate())
    print(json.dumps(model.cfg.to_dict(), indent=2))
    counts = parameter_breakdown(model)
    width = max(len(k) for k in counts)
    for key in sorted(k for k in counts if k not in ("core_total", "total")):
        print(f"{key:<{width}}  {counts[key]:>12,}")
    print(f"{'core_total':<{width}}  {counts['core_total']:>12,}   (transformer component)")
    print(f"{'total':<{width}}  {counts['total']:>12,}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
