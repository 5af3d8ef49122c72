import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gazeobj.defocus import Defocus, Focus, defocus, flop_count, flop_count_json, focus, stage_macs

from oracles import index_map_defocus


class TestDefocus:
    def test_reference_example_shape(self):
        assert defocus(torch.zeros(2048, 7, 7), 2).shape == (512, 14, 14)

    def test_four_scalars_to_grid(self):
        x = np.array([1, 2, 3, 4]).reshape(4, 1, 1)
        np.testing.assert_array_equal(defocus(x, 2)[0], [[1, 2], [3, 4]])

    def test_cell_by_cell(self):
        k, i, j = np.meshgrid(np.arange(4), np.arange(2), np.arange(2), indexing="ij")
        x = 100 * k + 10 * i + j
        y = defocus(x, 2)
        for kk in range(4):
            di, dj = divmod(kk, 2)
            for ii in range(2):
                for jj in range(2):
                    assert y[0, 2 * ii + di, 2 * jj + dj] == 100 * kk + 10 * ii + jj

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 4), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5),
           st.integers(0, 2 ** 31 - 1))
    def test_matches_index_map(self, r, c, h, w, seed):
        x = np.random.default_rng(seed).standard_normal((c * r * r, h, w))
        np.testing.assert_array_equal(defocus(x, r), index_map_defocus(x, r))
        np.testing.assert_array_equal(defocus(torch.from_numpy(x), r).numpy(),
                                      index_map_defocus(x, r))

    def test_batch_dims(self):
        x = torch.randn(3, 2, 8, 5, 6)
        y = defocus(x, 2)
        assert y.shape == (3, 2, 2, 10, 12)
        assert torch.equal(y[1, 0], defocus(x[1, 0], 2))

    def test_bad_channels(self):
        with pytest.raises(ValueError):
            defocus(torch.zeros(6, 2, 2), 2)

    def test_ratio_one_rejected(self):
        with pytest.raises(ValueError):
            defocus(torch.zeros(4, 2, 2), 1)
        with pytest.raises(ValueError):
            Defocus(1)


class TestFocus:
    def test_inverse_example(self):
        x = torch.randn(8, 4, 4)
        assert torch.equal(focus(defocus(x, 2), 2), x)

    def test_shapes(self):
        assert focus(np.zeros((1, 2, 2)), 2).shape == (4, 1, 1)
        assert focus(torch.zeros(512, 14, 14), 2).shape == (2048, 7, 7)

    def test_odd_spatial(self):
        with pytest.raises(ValueError):
            focus(torch.zeros(1, 3, 4), 2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
           st.integers(0, 2 ** 31 - 1))
    def test_defocus_after_focus(self, r, c, h, w, seed):
        y = np.random.default_rng(seed).standard_normal((c, h * r, w * r))
        np.testing.assert_array_equal(defocus(focus(y, r), r), y)

    def test_modules(self):
        x = torch.randn(2, 16, 3, 3)
        assert torch.equal(Focus(2)(Defocus(2)(x)), x)


class TestFlops:
    def test_defocus_free(self):
        assert stage_macs({"kind": "defocus", "channels": 2048, "h": 7, "w": 7, "r": 2}) == 0

    def test_bilinear(self):
        st_ = {"kind": "interpolate", "channels": 512, "h": 7, "w": 7, "factor": 2, "mode": "bilinear"}
        assert stage_macs(st_) == 4 * 512 * 14 * 14

    def test_conv_closed_form(self):
        st_ = {"kind": "conv", "c_in": 2048, "c_out": 512, "k": 1, "h_out": 7, "w_out": 7}
        assert stage_macs(st_) == 2048 * 512 * 49

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            stage_macs({"kind": "magic"})

    def test_json_roundtrip(self):
        doc = {"stages": [{"name": "a", "kind": "conv", "c_in": 2, "c_out": 3, "k": 3,
                           "h_out": 4, "w_out": 4}, {"name": "b", "kind": "defocus"}]}
        out = json.loads(flop_count_json(json.dumps(doc)))
        assert out["total_macs"] == 2 * 3 * 9 * 16
        assert [s["name"] for s in out["per_stage"]] == ["a", "b"]
        assert json.loads(flop_count_json(json.dumps(doc["stages"]))) == out

    def test_total_is_sum(self):
        stages = [{"kind": "linear", "in_features": 10, "out_features": 5},
                  {"kind": "pool"}, {"kind": "conv", "c_in": 1, "c_out": 1, "k": 3, "h_out": 2, "w_out": 2}]
        res = flop_count(stages)
        assert res["total_macs"] == 50 + 36
