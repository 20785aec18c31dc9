"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s``.  The generalization
criterion trains six desk-scale models and takes the bulk of the runtime.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from lidarpose import geometry as geo
from lidarpose import losses
from lidarpose import metrics as met
from lidarpose import synth
from lidarpose.config import ModelConfig, TrainConfig
from lidarpose.data import collate, prepare_box
from lidarpose.model import KeypointTransformer, decode, load_checkpoint, parameter_breakdown
from lidarpose.train import evaluate_model, gradcheck, predict_scenes, train
from conftest import random_box, random_keypoints


def _ok(name, detail):
    print(f"\nACCEPTANCE {name} PASS: {detail}")


# -- shared desk-scale dataset and training runs ----------------------------

DESK_GEN = dict(points_per_person=(90, 200), clutter_points=(60, 120), noise_sigma=0.008,
                label_dropout=0.05)


def _desk_train_config(seed, seg_aux):
    return TrainConfig(
        model=ModelConfig(),
        epochs=20,
        batch_size=8,
        seed=seed,
        seg_aux=seg_aux,
    )


@pytest.fixture(scope="session")
def desk_dataset():
    gen_tr = synth.GenConfig(humans=(1, 2), seed=1000, **DESK_GEN)
    gen_va = synth.GenConfig(humans=(1, 2), seed=2000, **DESK_GEN)
    train_scenes = list(synth.generate_scenes(gen_tr, 512, id_prefix="train"))
    val_scenes = list(synth.generate_scenes(gen_va, 128, id_prefix="val"))
    return train_scenes, val_scenes


@pytest.fixture(scope="session")
def desk_runs(desk_dataset, tmp_path_factory):
    """Final val metrics for 3 seeds x {seg on, seg off}."""
    train_scenes, val_scenes = desk_dataset
    results = {}
    base = tmp_path_factory.mktemp("desk-runs")
    for seed, seg in itertools.product((0, 1, 2), (True, False)):
        tag = f"seed{seed}-{'on' if seg else 'off'}"
        cfg = _desk_train_config(seed, seg)
        art = train(cfg, train_scenes, val_scenes, base / tag)
        rep = art.final_val
        results[(seed, seg)] = {
            "mpjpe": rep.mpjpe["all"],
            "pem": rep.pem["all"],
            "run_dir": art.run_dir,
            "metrics_log": art.metrics_log,
        }
        print(f"\n[desk run {tag}] val mpjpe {rep.mpjpe['all']:.4f} pem {rep.pem['all']:.4f}")
    return results


# -- criterion 1: gradient suite --------------------------------------------


def test_01_gradient_suite():
    t0 = time.time()
    rep = gradcheck(seed=0, dtype="float64")
    elapsed = time.time() - t0
    assert rep.passed, rep.format()
    worst = max(rep.group_errors.values())
    assert worst <= 1e-5
    groups = set(rep.group_errors)
    assert {"queries", "compressor", "voxel_encoder", "bev_encoder"} <= groups
    assert {"head_xy", "head_z", "head_vis", "head_seg"} <= groups
    assert {"block_0", "block_1"} <= groups
    assert elapsed <= 120.0
    _ok("1 gradient-suite", f"{len(groups)} groups, max rel err {worst:.2e}, {elapsed:.0f}s")


# -- criterion 2: metric oracles ---------------------------------------------


def _brute_pool(gt, pred, pairs, unmatched_gt, unmatched_pred):
    errs, unmatched = [], 0
    for gi, pi in pairs:
        for j in range(geo.N_KP):
            if gt.keypoints[gi].states[j] != geo.ABSENT:
                errs.append(
                    float(
                        np.linalg.norm(
                            gt.keypoints[gi].positions[j] - pred.keypoints[pi].positions[j]
                        )
                    )
                )
    for gi in unmatched_gt:
        unmatched += int((gt.keypoints[gi].states != geo.ABSENT).sum())
    for pi in unmatched_pred:
        unmatched += int((pred.keypoints[pi].states == geo.VISIBLE).sum())
    mpjpe = sum(errs) / len(errs) if errs else None
    denom = len(errs) + unmatched
    pem = (sum(errs) + 0.25 * unmatched) / denom if denom else None
    return mpjpe, pem


def _brute_match(gt_boxes, pred_boxes, gate):
    ng, npd = len(gt_boxes), len(pred_boxes)
    n = max(ng, npd)
    best = None
    for perm in itertools.permutations(range(n)):
        pairs, total = [], 0.0
        for gi in range(ng):
            pj = perm[gi]
            if pj >= npd:
                continue
            d = float(np.linalg.norm(gt_boxes[gi].center[:2] - pred_boxes[pj].center[:2]))
            if gate.feasible(gt_boxes[gi], pred_boxes[pj], d):
                pairs.append((gi, pj))
                total += d
        key = (-len(pairs), total, tuple(sorted(pairs)))
        if best is None or key < best:
            best = key
    pairs = list(best[2])
    mg = {i for i, _ in pairs}
    mp = {j for _, j in pairs}
    return pairs, [i for i in range(ng) if i not in mg], [j for j in range(npd) if j not in mp]


def _random_eval_case(rng):
    n_gt = int(rng.integers(0, 4))
    n_pred = int(rng.integers(0, 4))
    gt_boxes, gt_kps = [], []
    for i in range(n_gt):
        b = geo.Box3D([3.0 * i, float(rng.uniform(-1, 1)), 0.9], [0.8, 0.8, 1.8], 0.0)
        gt_boxes.append(b)
        gt_kps.append(random_keypoints(rng, b))
    pred_boxes, pred_kps = [], []
    for i in range(n_pred):
        if i < n_gt and rng.random() < 0.7:  # near a gt box
            center = gt_boxes[i].center + rng.uniform(-0.4, 0.4, 3)
        else:  # spurious detection far away
            center = np.array([30.0 + 5 * i, 30.0, 0.9])
        b = geo.Box3D(center, [0.8, 0.8, 1.8], 0.0)
        pred_boxes.append(b)
        states = rng.choice([geo.OCCLUDED, geo.VISIBLE], geo.N_KP)
        kp = random_keypoints(rng, b, states=states)
        pred_kps.append(kp)
    gt = geo.Scene("case", np.zeros((0, geo.POINT_DIM)), gt_boxes, gt_kps)
    pred = geo.Scene("case", np.zeros((0, geo.POINT_DIM)), pred_boxes, pred_kps)
    return gt, pred


def test_02_metric_oracles(rng):
    gate = met.MatchGate()
    checked = 0
    for _ in range(200):
        gt, pred = _random_eval_case(rng)
        pairs, ug, up = _brute_match(gt.boxes, pred.boxes, gate)
        match = met.MatchResult(pairs, ug, up)
        got_m, _ = met.mpjpe(gt, pred, match)
        got_p, _, _ = met.pem(gt, pred, match)
        want_m, want_p = _brute_pool(gt, pred, pairs, ug, up)
        if want_m is None:
            assert got_m["all"] is None
        else:
            assert abs(got_m["all"] - want_m) <= 1e-9
        if want_p is None:
            assert got_p["all"] is None
        else:
            assert abs(got_p["all"] - want_p) <= 1e-9
        checked += 1
    # the three fixed edge cases
    b = geo.Box3D([0, 0, 0.9], [0.8, 0.8, 1.8], 0.0)
    kp = random_keypoints(rng, b, states=np.full(14, geo.VISIBLE))
    gt = geo.Scene("e", np.zeros((0, geo.POINT_DIM)), [b], [kp])
    perfect = geo.Scene("e", np.zeros((0, geo.POINT_DIM)), [b.copy()], [kp.copy()])
    m = met.match_objects(gt.boxes, perfect.boxes)
    assert met.pem(gt, perfect, m)[0]["all"] == 0.0
    nothing = geo.Scene("e", np.zeros((0, geo.POINT_DIM)), [], [])
    m = met.match_objects(gt.boxes, nothing.boxes)
    assert met.pem(gt, nothing, m)[0]["all"] == 0.25
    # one matched keypoint at 0.10 error plus one unmatched keypoint
    states = np.full(14, geo.ABSENT)
    states[0] = geo.VISIBLE
    gt_kp = geo.KeypointSet(np.tile(b.center, (14, 1)), states)
    pred_pos = gt_kp.positions.copy()
    pred_pos[0, 0] += 0.10
    far = geo.Box3D([40, 40, 0.9], [0.8, 0.8, 1.8], 0.0)
    far_states = np.full(14, geo.ABSENT)
    far_states[3] = geo.OCCLUDED
    gt2 = geo.Scene("e", np.zeros((0, geo.POINT_DIM)), [b, far],
                    [gt_kp, geo.KeypointSet(np.tile(far.center, (14, 1)), far_states)])
    pred2 = geo.Scene("e", np.zeros((0, geo.POINT_DIM)), [b.copy()],
                      [geo.KeypointSet(pred_pos, states)])
    m = met.match_objects(gt2.boxes, pred2.boxes)
    vals, nm, nu = met.pem(gt2, pred2, m)
    assert (nm, nu) == (1, 1)
    assert vals["all"] == pytest.approx(0.175, abs=1e-12)
    _ok("2 metric-oracles", f"{checked} randomized cases + 3 edge cases at 1e-9")


# -- criterion 3: matching optimality ----------------------------------------


def test_03_matching_optimality(rng):
    gate = met.MatchGate()
    trials = 1000
    for _ in range(trials):
        ng = int(rng.integers(0, 7))
        npd = int(rng.integers(0, 7))
        gt = [geo.Box3D(rng.uniform(-3, 3, 3) * [1, 1, 0] + [0, 0, 0.9],
                        [0.8, 0.8, 1.8], 0.0) for _ in range(ng)]
        pred = [geo.Box3D(rng.uniform(-3, 3, 3) * [1, 1, 0] + [0, 0, 0.9],
                          [0.8, 0.8, 1.8], 0.0) for _ in range(npd)]
        res = met.match_objects(gt, pred, gate)
        pairs, ug, up = _brute_match(gt, pred, gate)
        assert len(res.pairs) == len(pairs)
        got = sum(np.linalg.norm(gt[i].center[:2] - pred[j].center[:2]) for i, j in res.pairs)
        want = sum(np.linalg.norm(gt[i].center[:2] - pred[j].center[:2]) for i, j in pairs)
        assert got == pytest.approx(want, abs=1e-9)
        assert sorted(res.pairs) == pairs
    _ok("3 matching-optimality", f"{trials} random instances up to 6x6")


# -- criterion 4: pseudo-label oracle ----------------------------------------


def test_04_pseudo_label_oracle(rng):
    from test_losses import bruteforce_labels

    trials = 500
    for t in range(trials):
        n = int(rng.integers(1, 50))
        n_max = n + int(rng.integers(0, 5))
        pts = np.zeros((n_max, geo.POINT_DIM))
        if t % 5 == 0:
            # grid coordinates force exact distance ties
            pts[:n, :3] = rng.integers(-2, 3, (n, 3)) * 0.5
            kp = rng.integers(-2, 3, (geo.N_KP, 3)) * 0.5
        else:
            pts[:n, :3] = rng.normal(size=(n, 3))
            kp = rng.normal(size=(geo.N_KP, 3)) * 0.8
        mask = np.zeros(n_max, dtype=bool)
        mask[:n] = True
        states = rng.choice([geo.ABSENT, geo.OCCLUDED, geo.VISIBLE], geo.N_KP)
        k = int(rng.integers(1, 7))
        got = losses.pseudo_seg_labels(pts, mask, kp.astype(float), states, k)
        want = bruteforce_labels(pts, mask, kp.astype(float), states, k)
        assert np.array_equal(got, want)
    _ok("4 pseudo-label-oracle", f"{trials} instances incl. exact-tie grids")


# -- criterion 5: geometry invariance ----------------------------------------


def test_05_geometry_invariance(rng):
    # canonicalize round trips
    for _ in range(200):
        box = random_box(rng)
        pts = np.zeros((20, geo.POINT_DIM))
        pts[:, :3] = rng.uniform(-10, 10, (20, 3))
        back = geo.decanonicalize(geo.canonicalize(pts, box)[:, :3], box)
        assert np.max(np.abs(back - pts[:, :3])) <= 1e-6
    # flip involution, bit-exact, both axes
    from conftest import random_scene

    for axis in ("x", "y"):
        scene = random_scene(rng, n_boxes=4)
        back = geo.flip_scene(geo.flip_scene(scene, axis), axis)
        assert np.array_equal(back.points, scene.points)
        for b0, b1 in zip(scene.boxes, back.boxes):
            assert b0.yaw == b1.yaw and np.array_equal(b0.center, b1.center)
        for k0, k1 in zip(scene.keypoints, back.keypoints):
            assert np.array_equal(k0.positions, k1.positions)
            assert np.array_equal(k0.states, k1.states)
    # full-pipeline rigid-motion equivariance at 1e-4
    torch.manual_seed(0)
    model = KeypointTransformer(ModelConfig.tiny()).double()
    gen = synth.GenConfig(humans=(2, 2), points_per_person=(40, 70),
                          clutter_points=(20, 40), noise_sigma=0.005, label_dropout=0.0)
    scene = synth.compose_scene(gen, np.random.default_rng(3), "equiv")

    def decode_all(s):
        out = []
        for i, box in enumerate(s.boxes):
            item = prepare_box(s, i, box, None, model.cfg, np.random.default_rng(90 + i))
            batch = collate([item], model.cfg, dtype=torch.float64)
            with torch.no_grad():
                o = model(batch)
            out.append(
                decode(o.xy[0].numpy(), o.z[0].numpy(), o.vis_prob[0].numpy(), box).world
            )
        return out

    base = decode_all(scene)
    worst = 0.0
    for _ in range(50):
        params = geo.AugmentParams(
            rotation=float(rng.uniform(-math.pi, math.pi)),
            translation=rng.uniform(-8, 8, 3),
        )
        moved = geo.global_augment(scene, params)
        got = decode_all(moved)
        rot = geo.rotation_z(params.rotation)
        for w0, w1 in zip(base, got):
            err = np.max(np.abs(w1 - (w0 @ rot.T + params.translation)))
            worst = max(worst, err)
    assert worst <= 1e-4
    _ok("5 geometry-invariance", f"50 rigid motions, worst deviation {worst:.2e} m")


# -- criterion 6: overfit check ----------------------------------------------


def test_06_overfit_32_pedestrians(tmp_path):
    t0 = time.time()
    gen = synth.GenConfig(humans=(2, 2), seed=42, **DESK_GEN)
    scenes = list(synth.generate_scenes(gen, 16, id_prefix="ov"))
    n_boxes = sum(len(s.boxes) for s in scenes)
    assert n_boxes == 32
    cfg = TrainConfig(
        model=ModelConfig(),
        epochs=1000,  # 4 steps/epoch on 32 boxes = 4000 steps
        batch_size=8,
        seed=0,
        augment=False,
        checkpoint_every=250,
    )
    steps = cfg.epochs * math.ceil(n_boxes / cfg.batch_size)
    assert steps <= 5000
    art = train(cfg, scenes, [], tmp_path / "overfit")
    model, _ = load_checkpoint(art.last_checkpoint)
    rep = evaluate_model(model, scenes)
    preds = predict_scenes(model, scenes)
    correct = total = 0
    for g, p in zip(scenes, preds):
        for kg, kp in zip(g.keypoints, p.keypoints):
            present = kg.states != geo.ABSENT
            total += int(present.sum())
            agree = (kg.states == geo.VISIBLE) == (kp.states == geo.VISIBLE)
            correct += int((agree & present).sum())
    elapsed = time.time() - t0
    vis_acc = correct / total
    assert rep.mpjpe["all"] <= 0.03
    assert vis_acc >= 0.95
    assert elapsed <= 20 * 60
    _ok(
        "6 overfit",
        f"32 pedestrians, {steps} steps: train mpjpe {rep.mpjpe['all']:.4f} m, "
        f"vis acc {vis_acc:.3f}, {elapsed:.0f}s",
    )


# -- criterion 7: generalization sanity ---------------------------------------


def test_07_generalization(desk_runs):
    main = desk_runs[(0, True)]
    assert main["mpjpe"] <= 0.15
    assert main["pem"] <= 0.17
    _ok(
        "7a generalization",
        f"512/128 scenes, 20 epochs: val mpjpe {main['mpjpe']:.4f} <= 0.15, "
        f"val pem {main['pem']:.4f} <= 0.17",
    )


def test_07_seg_aux_not_worse(desk_runs):
    deltas = [desk_runs[(s, True)]["pem"] - desk_runs[(s, False)]["pem"] for s in (0, 1, 2)]
    mean_delta = float(np.mean(deltas))
    assert mean_delta <= 0.005
    _ok(
        "7b seg-aux",
        f"mean val-pem delta (on - off) over 3 seeds = {mean_delta:+.4f} <= 0.005",
    )


# -- criterion 8: loss analytics ----------------------------------------------


def test_08_loss_analytics(desk_runs):
    logits = torch.zeros(1, 7, 15)
    labels = torch.randint(0, 15, (1, 7))
    mask = torch.ones(1, 7, dtype=torch.bool)
    ce = losses.loss_kpseg(logits, labels, mask).item()
    assert abs(ce - math.log(15)) <= 1e-6
    states = torch.full((1, 14), geo.VISIBLE)
    bce = losses.loss_vis(torch.full((1, 14), 0.5), states).item()
    assert abs(bce - math.log(2)) <= 1e-6
    sl = losses.smooth_l1(torch.tensor([0.0, 1.0, 2.0]))
    assert sl.tolist() == [0.0, 0.5, 1.5]
    # weighted-sum identity, bit-exact, in a real training log
    log_path = desk_runs[(0, True)]["metrics_log"]
    w = (5.0, 1.0, 1.0, 1.0)
    n_rows = 0
    for line in open(log_path):
        rec = json.loads(line)
        if rec["kind"] != "step":
            continue
        expect = w[0] * rec["l_xy"] + w[1] * rec["l_z"] + w[2] * rec["l_vis"] + w[3] * rec["l_kpseg"]
        assert rec["l_total"] == expect
        n_rows += 1
    assert n_rows > 0
    _ok("8 loss-analytics", f"ln15/ln2/smooth-l1 exact; identity bit-exact over {n_rows} log rows")


# -- criterion 9: padding insensitivity ----------------------------------------


def test_09_padding_insensitivity():
    torch.manual_seed(1)
    cfg_a = ModelConfig(n_max=128)
    cfg_b = ModelConfig(n_max=192)
    model_a = KeypointTransformer(cfg_a)
    torch.manual_seed(1)
    model_b = KeypointTransformer(cfg_b)
    gen = synth.GenConfig(humans=(1, 1), points_per_person=(60, 100),
                          clutter_points=(20, 40), noise_sigma=0.005, label_dropout=0.0)
    worst = 0.0
    for s in range(5):
        scene = synth.compose_scene(gen, np.random.default_rng(s), f"pad-{s}")
        box, kp = scene.boxes[0], scene.keypoints[0]
        item_a = prepare_box(scene, 0, box, kp, cfg_a, np.random.default_rng(7))
        item_b = prepare_box(scene, 0, box, kp, cfg_b, np.random.default_rng(7))
        assert item_a.sample.n_valid == item_b.sample.n_valid < 128
        with torch.no_grad():
            out_a = model_a(collate([item_a], cfg_a, pad_to=128))
            out_b = model_b(collate([item_b], cfg_b, pad_to=192))
        for field in ("x_kp", "xy", "z", "vis_prob"):
            d = (getattr(out_a, field) - getattr(out_b, field)).abs().max().item()
            worst = max(worst, d)
        d = (out_a.seg_logits[:, :128] - out_b.seg_logits[:, :128]).abs().max().item()
        worst = max(worst, d)
    assert worst <= 1e-5
    _ok("9 padding-insensitivity", f"n_max 128 vs 192: max deviation {worst:.2e}")


# -- criterion 10: parameter count ---------------------------------------------


def test_10_parameter_count(capsys):
    model = KeypointTransformer(ModelConfig.full_scale())
    counts = parameter_breakdown(model)
    core = counts["core_total"]
    target = 9_610_000  # full-scale transformer component reference size
    rel = abs(core - target) / target
    assert rel <= 0.15
    from lidarpose.cli import main as cli_main

    rc = cli_main(["inspect", "--full-scale"])
    assert rc == 0
    out = capsys.readouterr().out
    assert f"{core:,}" in out
    _ok("10 parameter-count", f"core {core:,} params, within {rel:.1%} of {target:,}")
