import math

import numpy as np
import pytest
import torch

from lidarpose import geometry as geo
from lidarpose import losses
from lidarpose.errors import NumericalError


def bruteforce_labels(points, mask, kp_local, states, k):
    """Independent oracle: per-point argmin over claiming keypoints."""
    n_max = len(mask)
    valid = [i for i in range(n_max) if mask[i]]
    claims = {i: [] for i in valid}  # point -> [(dist, kp_index)]
    for j in range(geo.N_KP):
        if states[j] == geo.ABSENT:
            continue
        ranked = sorted(valid, key=lambda i: (np.linalg.norm(points[i, :3] - kp_local[j, :3]), i))
        for i in ranked[:k]:
            claims[i].append((np.linalg.norm(points[i, :3] - kp_local[j, :3]), j))
    labels = np.zeros(n_max, dtype=np.int64)
    for i in valid:
        if claims[i]:
            _, j = min(claims[i], key=lambda t: (t[0], t[1]))
            labels[i] = j + 1
    return labels


class TestPseudoLabels:
    def test_single_keypoint_k2(self, rng):
        pts = np.zeros((5, geo.POINT_DIM))
        pts[:, 0] = [0.0, 0.1, 0.2, 0.3, 0.4]
        mask = np.ones(5, dtype=bool)
        kp = np.zeros((geo.N_KP, 3))
        states = np.full(geo.N_KP, geo.ABSENT)
        states[0] = geo.VISIBLE
        labels = losses.pseudo_seg_labels(pts, mask, kp, states, k=2)
        assert (labels == 1).sum() == 2
        assert set(np.nonzero(labels == 1)[0]) == {0, 1}

    def test_all_absent(self, rng):
        pts = rng.normal(size=(8, geo.POINT_DIM))
        mask = np.ones(8, dtype=bool)
        labels = losses.pseudo_seg_labels(
            pts, mask, np.zeros((geo.N_KP, 3)), np.full(geo.N_KP, geo.ABSENT), k=3
        )
        assert np.all(labels == 0)

    def test_matches_bruteforce(self, rng):
        for _ in range(50):
            n = int(rng.integers(4, 40))
            pts = np.zeros((n + 4, geo.POINT_DIM))
            pts[:n, :3] = rng.normal(size=(n, 3))
            mask = np.zeros(n + 4, dtype=bool)
            mask[:n] = True
            kp = rng.normal(size=(geo.N_KP, 3)) * 0.5
            states = rng.choice([geo.ABSENT, geo.OCCLUDED, geo.VISIBLE], geo.N_KP)
            k = int(rng.integers(1, 6))
            got = losses.pseudo_seg_labels(pts, mask, kp, states, k)
            want = bruteforce_labels(pts, mask, kp, states, k)
            assert np.array_equal(got, want)

    def test_exact_tie_goes_to_lower_keypoint(self):
        # one point equidistant from keypoints 2 and 5
        pts = np.zeros((1, geo.POINT_DIM))
        mask = np.ones(1, dtype=bool)
        kp = np.zeros((geo.N_KP, 3))
        kp[2] = [1.0, 0.0, 0.0]
        kp[5] = [-1.0, 0.0, 0.0]
        states = np.full(geo.N_KP, geo.ABSENT)
        states[2] = states[5] = geo.VISIBLE
        labels = losses.pseudo_seg_labels(pts, mask, kp, states, k=1)
        assert labels[0] == 3  # keypoint index 2 -> class 3

    def test_fewer_valid_than_k(self, rng):
        pts = np.zeros((3, geo.POINT_DIM))
        mask = np.array([True, True, False])
        kp = np.zeros((geo.N_KP, 3))
        states = np.full(geo.N_KP, geo.ABSENT)
        states[0] = geo.VISIBLE
        labels = losses.pseudo_seg_labels(pts, mask, kp, states, k=10)
        assert np.array_equal(labels, [1, 1, 0])

    def test_at_most_k_per_keypoint(self, rng):
        for _ in range(20):
            n = 30
            pts = np.zeros((n, geo.POINT_DIM))
            pts[:, :3] = rng.normal(size=(n, 3))
            mask = np.ones(n, dtype=bool)
            kp = rng.normal(size=(geo.N_KP, 3))
            states = np.full(geo.N_KP, geo.VISIBLE)
            labels = losses.pseudo_seg_labels(pts, mask, kp, states, k=4)
            for j in range(geo.N_KP):
                assert (labels == j + 1).sum() <= 4


class TestRegressionLosses:
    def test_zero_diff(self):
        states = torch.full((1, 14), geo.VISIBLE)
        xy = torch.zeros(1, 14, 2)
        assert losses.loss_xy(xy, xy, states).item() == 0.0

    def test_single_keypoint_offset_one(self):
        states = torch.full((1, 14), geo.ABSENT)
        states[0, 3] = geo.VISIBLE
        pred = torch.zeros(1, 14, 2)
        gt = torch.zeros(1, 14, 2)
        pred[0, 3, 0] = 1.0
        # smooth-L1 at 1.0 -> 0.5, at 0 -> 0; mean over the two coords = 0.25
        assert losses.loss_xy(pred, gt, states).item() == pytest.approx(0.25)

    def test_z_offset_two(self):
        states = torch.full((1, 14), geo.ABSENT)
        states[0, 0] = geo.VISIBLE
        pred = torch.zeros(1, 14)
        gt = torch.zeros(1, 14)
        pred[0, 0] = 2.0
        assert losses.loss_z(pred, gt, states).item() == pytest.approx(1.5)

    def test_smooth_l1_spot_values(self):
        d = torch.tensor([0.0, 1.0, 2.0])
        out = losses.smooth_l1(d)
        assert out.tolist() == [0.0, 0.5, 1.5]

    def test_occluded_excluded_by_default(self):
        states = torch.full((1, 14), geo.OCCLUDED)
        pred = torch.ones(1, 14, 2)
        gt = torch.zeros(1, 14, 2)
        assert losses.loss_xy(pred, gt, states).item() == 0.0
        assert losses.loss_xy(pred, gt, states, include_occluded=True).item() > 0

    def test_absent_perturbation_changes_nothing(self, rng):
        states = torch.tensor(
            rng.choice([geo.ABSENT, geo.OCCLUDED, geo.VISIBLE], (2, 14))
        )
        pred = torch.randn(2, 14, 2)
        gt = torch.randn(2, 14, 2)
        base = losses.loss_xy(pred, gt, states).item()
        gt2 = gt.clone()
        gt2[states == geo.ABSENT] += 100.0
        assert losses.loss_xy(pred, gt2, states).item() == base


class TestVisLoss:
    def test_half_probability_gives_ln2(self):
        states = torch.full((3, 14), geo.VISIBLE)
        states[0, :7] = geo.OCCLUDED
        p = torch.full((3, 14), 0.5)
        assert losses.loss_vis(p, states).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_perfect_confident(self):
        states = torch.full((1, 14), geo.VISIBLE)
        states[0, ::2] = geo.OCCLUDED
        p = torch.where(states == geo.VISIBLE, 1.0 - 1e-9, 1e-9).float()
        assert losses.loss_vis(p, states).item() <= 1e-6

    def test_all_absent_zero(self):
        states = torch.full((2, 14), geo.ABSENT)
        assert losses.loss_vis(torch.rand(2, 14), states).item() == 0.0


class TestSegLoss:
    def test_uniform_logits_ln15(self):
        logits = torch.zeros(2, 12, 15)
        labels = torch.randint(0, 15, (2, 12))
        mask = torch.ones(2, 12, dtype=torch.bool)
        assert losses.loss_kpseg(logits, labels, mask).item() == pytest.approx(
            math.log(15), abs=1e-6
        )

    def test_confident_correct_near_zero(self):
        labels = torch.randint(0, 15, (1, 9))
        logits = torch.full((1, 9, 15), -30.0)
        logits.scatter_(2, labels.unsqueeze(-1), 30.0)
        mask = torch.ones(1, 9, dtype=torch.bool)
        assert losses.loss_kpseg(logits, labels, mask).item() < 1e-6

    def test_all_padded_warns_and_zero(self, caplog):
        import logging

        logits = torch.randn(1, 4, 15)
        labels = torch.zeros(1, 4, dtype=torch.long)
        mask = torch.zeros(1, 4, dtype=torch.bool)
        with caplog.at_level(logging.WARNING):
            out = losses.loss_kpseg(logits, labels, mask)
        assert out.item() == 0.0
        assert any("no valid points" in r.message for r in caplog.records)


class TestTotalLoss:
    def test_weighted_sum(self):
        w = losses.LossWeights()
        parts = [torch.tensor(v) for v in (0.2, 0.1, 0.3, 0.4)]
        bd = losses.total_loss(*parts, w)
        assert bd.l_total == pytest.approx(5 * 0.2 + 0.1 + 0.3 + 0.4)
        assert bd.l_total == 5.0 * bd.l_xy + 1.0 * bd.l_z + 1.0 * bd.l_vis + 1.0 * bd.l_kpseg

    def test_zero_components(self):
        w = losses.LossWeights()
        zeros = [torch.tensor(0.0)] * 4
        assert losses.total_loss(*zeros, w).l_total == 0.0

    def test_isolating_weights(self):
        w = losses.LossWeights(0.0, 0.0, 0.0, 1.0)
        parts = [torch.tensor(v) for v in (9.0, 9.0, 9.0, 0.7)]
        assert losses.total_loss(*parts, w).l_total == pytest.approx(0.7)

    def test_nan_component_named(self):
        w = losses.LossWeights()
        parts = [torch.tensor(0.1)] * 3 + [torch.tensor(float("nan"))]
        with pytest.raises(NumericalError, match="l_kpseg"):
            losses.total_loss(*parts, w)


class TestLossGradients:
    def test_finite_difference_match(self, rng):
        torch.manual_seed(0)
        states = torch.tensor(
            rng.choice([geo.ABSENT, geo.OCCLUDED, geo.VISIBLE], (2, 14), p=[0.2, 0.3, 0.5])
        )
        pred_xy = torch.randn(2, 14, 2, dtype=torch.float64, requires_grad=True)
        gt_xy = torch.randn(2, 14, 2, dtype=torch.float64)
        out = losses.loss_xy(pred_xy, gt_xy, states)
        out.backward()
        eps = 1e-6
        flat_grad = pred_xy.grad.flatten()
        for idx in rng.choice(pred_xy.numel(), 10, replace=False):
            delta = torch.zeros_like(pred_xy).flatten()
            delta[idx] = eps
            delta = delta.reshape(pred_xy.shape)
            up = losses.loss_xy(pred_xy.detach() + delta, gt_xy, states).item()
            dn = losses.loss_xy(pred_xy.detach() - delta, gt_xy, states).item()
            fd = (up - dn) / (2 * eps)
            assert flat_grad[idx].item() == pytest.approx(fd, rel=1e-3, abs=1e-9)

    def test_vis_gradient(self):
        p = torch.full((1, 14), 0.3, dtype=torch.float64, requires_grad=True)
        states = torch.full((1, 14), geo.VISIBLE)
        losses.loss_vis(p, states).backward()
        eps = 1e-7
        up = losses.loss_vis(torch.full((1, 14), 0.3 + eps, dtype=torch.float64), states)
        dn = losses.loss_vis(torch.full((1, 14), 0.3 - eps, dtype=torch.float64), states)
        fd = (up.item() - dn.item()) / (2 * eps)
        assert p.grad.sum().item() == pytest.approx(fd, rel=1e-4)
