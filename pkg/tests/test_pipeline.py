import numpy as np
import pytest
import torch
from PIL import Image

from gazeobj.data import SceneSpec, generate_sample
from gazeobj.model import GazeObjectNet
from gazeobj.pipeline import (Prediction, evaluate, evaluate_predictions, heatmap_to_uint8, infer,
                              oracle_predictions, render_panels, visualize)


@pytest.fixture(scope="module")
def model():
    from gazeobj.config import ModelConfig

    torch.manual_seed(0)
    return GazeObjectNet(ModelConfig(image_size=128)).eval()


class TestEvaluate:
    def test_oracle_upper_bound(self):
        samples = [generate_sample(SceneSpec(), i) for i in range(8)]
        rep = evaluate_predictions(samples, oracle_predictions(samples))
        assert rep.wuoc_mean == 1.0 and rep.ap50 == 1.0 and rep.auc == 1.0
        assert rep.wuoc_gt_gaze == 1.0 and rep.wuoc_gt_boxes == 1.0

    def test_constant_heatmap_auc_half(self):
        samples = [generate_sample(SceneSpec(), i) for i in range(3)]
        preds = [Prediction([], np.full((64, 64), 0.3), None) for _ in samples]
        rep = evaluate_predictions(samples, preds)
        assert rep.auc == 0.5
        assert rep.wuoc_mean == 0.0 and rep.ap == 0.0

    def test_length_mismatch(self):
        s = [generate_sample(SceneSpec(), 0)]
        with pytest.raises(ValueError):
            evaluate_predictions(s, [])

    def test_untrained_model_runs(self, model, small_samples):
        rep, preds = evaluate(model, small_samples, conf_threshold=0.0)
        assert rep.sample_count == len(small_samples)
        assert all(p.gaze_object in p.boxes for p in preds)

    def test_evaluate_deterministic(self, model, small_samples):
        a, _ = evaluate(model, small_samples, conf_threshold=0.0)
        b, _ = evaluate(model, small_samples, conf_threshold=0.0)
        assert a == b


class TestInfer:
    def test_contract(self, model, small_samples):
        s = small_samples[0]
        a = infer(model, s.image, s.head_box, conf_threshold=0.0)
        b = infer(model, s.image, s.head_box, conf_threshold=0.0)
        assert np.array_equal(a["heatmap"], b["heatmap"]) and a["boxes"] == b["boxes"]
        assert a["gaze_object"] in a["boxes"]

    def test_bad_head_box(self, model, small_samples):
        with pytest.raises(ValueError):
            infer(model, small_samples[0].image, (0, 0, 500, 10))


class TestVisualize:
    def test_png(self, model, small_samples, tmp_path):
        out = visualize(model, small_samples[0], tmp_path / "v.png", panel_size=96)
        with Image.open(out) as im:
            assert im.format == "PNG" and im.size == (4 * 96, 96)

    def test_min_max(self):
        m = np.array([[0.2, 0.4], [0.6, 0.2]])
        u = heatmap_to_uint8(m)
        assert u.max() == 255 and u.min() == 0
        assert heatmap_to_uint8(np.ones((3, 3))).max() == 0

    def test_gt_panel_draws_gaze_box(self):
        s = generate_sample(SceneSpec(), 3)
        pred = Prediction([], np.zeros((64, 64)), None)
        img = np.asarray(render_panels(s, pred, 224))
        gt_panel = img[:, 3 * 224:]
        b = s.gaze_box
        x1, y1 = int(b.x1), int(b.y1)
        assert tuple(gt_panel[y1, x1 + 3]) == (255, 0, 0)
        # predicted panel has no box drawn when nothing was selected
        assert tuple(img[y1, 2 * 224 + x1 + 3]) != (255, 0, 0)

    def test_unwritable(self, model, small_samples, tmp_path):
        with pytest.raises(OSError):
            visualize(model, small_samples[0], tmp_path / "missing" / "v.png")
