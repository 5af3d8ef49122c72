import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gazeobj.config import ModelConfig
from gazeobj.detection import (DetectionBranch, Targets, build_targets, ciou_loss, decode_grid,
                               decode_xywh, detection_loss, encode_box, split_grid)
from gazeobj.geometry import BoundingBox

from oracles import bce, ciou_terms, sig


class TestDecode:
    anchors = ((12.0, 16.0), (19.0, 40.0))

    def test_zero_offsets_centre_and_anchor_size(self):
        t = torch.zeros(1, 2, 3, 3, 4, dtype=torch.float64)
        xywh = decode_xywh(t, self.anchors, 8.0)
        assert xywh[0, 0, 1, 2].tolist() == [20.0, 12.0, 12.0, 16.0]
        assert xywh[0, 1, 0, 0].tolist() == [4.0, 4.0, 19.0, 40.0]

    def test_one_hot_cell(self):
        g, c = 4, 2
        raw = torch.full((1, 2 * (5 + c), g, g), -20.0)
        t = split_grid(raw, 2)
        t[0, 1, 2, 1, :4] = torch.tensor([0.0, 0.0, math.log(2), 0.0])
        t[0, 1, 2, 1, 4] = 20.0
        t[0, 1, 2, 1, 6] = 20.0
        dets = decode_grid(raw, self.anchors, 32, conf_threshold=0.5)[0]
        assert len(dets.boxes) == 1
        # stride 8: centre (1.5*8, 2.5*8) = (12, 20), size (38, 40)
        np.testing.assert_allclose(dets.boxes[0], [0.0, 0.0, 31.0, 32.0])  # clipped to image
        assert dets.classes[0] == 1
        assert dets.scores[0] == pytest.approx(sig(20) ** 2)

    def test_non_finite_rejected(self):
        raw = torch.zeros(1, 2 * 6, 2, 2)
        raw[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            decode_grid(raw, self.anchors, 16)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1, 60), st.floats(1, 60), st.floats(2, 40), st.floats(2, 40))
    def test_encode_decode_roundtrip(self, x, y, w, h):
        box = BoundingBox(x, y, x + w, y + h)
        (i, j), tvec = encode_box(box, (12.0, 16.0), 8.0)
        t = torch.zeros(1, 1, 16, 16, 4, dtype=torch.float64)
        t[0, 0, i, j] = torch.tensor(tvec, dtype=torch.float64)
        cx, cy, bw, bh = decode_xywh(t, ((12.0, 16.0),), 8.0)[0, 0, i, j].tolist()
        assert (cx, cy, bw, bh) == pytest.approx((*box.center, w, h), abs=1e-6)


class TestCiou:
    def test_identical(self):
        b = torch.tensor([5.0, 5.0, 10.0, 4.0], dtype=torch.float64)
        assert abs(ciou_loss(b, b).item()) < 1e-9

    def test_concentric(self):
        p = torch.tensor([10.0, 10.0, 10.0, 10.0], dtype=torch.float64)
        g = torch.tensor([10.0, 10.0, 20.0, 20.0], dtype=torch.float64)
        assert ciou_loss(p, g).item() == pytest.approx(0.75, abs=1e-9)

    def test_disjoint(self):
        p, g = [0.0, 0.0, 4.0, 2.0], [10.0, 5.0, 3.0, 6.0]
        got = ciou_loss(torch.tensor(p, dtype=torch.float64), torch.tensor(g, dtype=torch.float64))
        assert got.item() == pytest.approx(ciou_terms(p, g)[0], abs=1e-7)

    def test_random_pairs_match_oracle(self):
        rng = np.random.default_rng(0)
        p = np.column_stack([rng.uniform(0, 50, (1000, 2)), rng.uniform(1, 30, (1000, 2))])
        g = np.column_stack([rng.uniform(0, 50, (1000, 2)), rng.uniform(1, 30, (1000, 2))])
        got = ciou_loss(torch.from_numpy(p), torch.from_numpy(g)).numpy()
        want = np.array([ciou_terms(a, b)[0] for a, b in zip(p, g)])
        np.testing.assert_allclose(got, want, atol=1e-7)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = np.concatenate([rng.uniform(0, 20, 2), rng.uniform(2, 15, 2)])
            g = np.concatenate([rng.uniform(0, 20, 2), rng.uniform(2, 15, 2)])
            x = torch.tensor(p, requires_grad=True)
            ciou_loss(x, torch.tensor(g)).backward()
            # alpha is a constant in the defined gradient
            alpha = ciou_terms(p, g)[1]
            fd = np.zeros(4)
            h = 1e-6
            for k in range(4):
                up, dn = p.copy(), p.copy()
                up[k] += h
                dn[k] -= h
                fd[k] = (ciou_terms(up, g, alpha)[0] - ciou_terms(dn, g, alpha)[0]) / (2 * h)
            np.testing.assert_allclose(x.grad.numpy(), fd, atol=1e-3)


class TestTargets:
    def test_assignment(self):
        anchors = ((10.0, 10.0), (20.0, 40.0))
        gt = [[BoundingBox(30, 10, 50, 50, 3)]]
        t = build_targets(gt, anchors, grid=4, image_size=64)
        assert t.positive.sum() == 1
        # centre (40, 30), stride 16 -> cell (1, 2); shape matches anchor 1
        assert t.positive[0, 1, 1, 2]
        assert t.cls[0, 1, 1, 2] == 3
        assert t.box[0, 1, 1, 2].tolist() == [40.0, 30.0, 20.0, 40.0]

    def test_ignore_overlapping_priors(self):
        anchors = ((16.0, 16.0), (16.0, 16.0))
        t = build_targets([[BoundingBox(0, 0, 16, 16)]], anchors, grid=4, image_size=64)
        # the second identical anchor prior overlaps with IoU 1 but is not the positive
        assert t.positive[0, 0, 0, 0] and not t.obj_mask[0, 1, 0, 0]


class TestDetectionLoss:
    def test_perfect_logits(self):
        anchors = ((12.0, 16.0), (19.0, 40.0), (28.0, 64.0))
        n_cls = 3
        gts = [[BoundingBox(10, 20, 30, 44, 2), BoundingBox(60, 5, 80, 70, 0)]]
        targets = build_targets(gts, anchors, 8, 128)
        raw = torch.full((1, 3 * (5 + n_cls), 8, 8), -40.0, dtype=torch.float64)
        t = split_grid(raw, 3)
        for b, a, i, j in targets.positive.nonzero().tolist():
            cx, cy, w, h = targets.box[b, a, i, j].tolist()
            box = BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            _, tvec = encode_box(box, anchors[a], 16.0, eps=1e-12)
            t[b, a, i, j, :4] = torch.tensor(tvec)
            t[b, a, i, j, 4] = 40.0
            t[b, a, i, j, 5 + targets.cls[b, a, i, j]] = 40.0
        total, parts = detection_loss(raw, targets, anchors, 128)
        assert total.item() == pytest.approx(0.0, abs=1e-6)

    def test_hand_computed_2x2(self):
        anchors = ((10.0, 10.0),)
        rng = np.random.default_rng(5)
        raw_np = rng.normal(size=(1, 7, 2, 2))
        raw = torch.tensor(raw_np)
        gt = BoundingBox(2, 3, 12, 11, 1)
        targets = build_targets([[gt]], anchors, 2, 20)
        total, parts = detection_loss(raw, targets, anchors, 20)
        # objectness: cell (0, 0) positive, other priors overlap the GT far below 0.5
        obj = [bce(raw_np[0, 4, i, j], 1.0 if (i, j) == (0, 0) else 0.0)
               for i in range(2) for j in range(2)]
        cls = [bce(raw_np[0, 5, 0, 0], 0.0), bce(raw_np[0, 6, 0, 0], 1.0)]
        tx, ty, tw, th = raw_np[0, :4, 0, 0]
        pred = [sig(tx) * 10, sig(ty) * 10, 10 * math.exp(tw), 10 * math.exp(th)]
        reg = ciou_terms(pred, [7.0, 7.0, 10.0, 8.0])[0]
        assert parts["obj"].item() == pytest.approx(np.mean(obj), abs=1e-9)
        assert parts["cls"].item() == pytest.approx(np.mean(cls), abs=1e-9)
        assert parts["reg"].item() == pytest.approx(reg, abs=1e-7)
        assert total.item() == pytest.approx(np.mean(obj) + np.mean(cls) + reg, abs=1e-7)

    def test_empty_image(self):
        anchors = ((10.0, 10.0),)
        raw = torch.randn(1, 7, 2, 2, dtype=torch.float64)
        targets = build_targets([[]], anchors, 2, 20)
        total, parts = detection_loss(raw, targets, anchors, 20)
        expected = np.mean([bce(v, 0.0) for v in raw[0, 4].flatten().tolist()])
        assert total.item() == pytest.approx(expected, abs=1e-9)
        assert parts["cls"].item() == 0.0 and parts["reg"].item() == 0.0


class TestBranch:
    def test_output_grid(self):
        cfg = ModelConfig()
        branch = DetectionBranch(cfg)
        f = [torch.randn(2, 8, 56, 56), torch.randn(2, 16, 28, 28), torch.randn(2, 32, 14, 14)]
        out = branch(f)
        assert out.shape == (2, 3 * 29, 56, 56)

    def test_initial_objectness_prior(self):
        branch = DetectionBranch(ModelConfig())
        b = branch.head.bias.view(3, -1)
        assert torch.allclose(torch.sigmoid(b[:, 4]), torch.full((3,), 0.01))

    def test_interpolate_variant_runs(self):
        branch = DetectionBranch(ModelConfig(upsample="interpolate"))
        f = [torch.randn(1, 8, 56, 56), torch.randn(1, 16, 28, 28), torch.randn(1, 32, 14, 14)]
        assert branch(f).shape == (1, 87, 56, 56)
