import numpy as np
import pytest

from volseg.inference import (
    SlidingWindowConfig,
    argmax_labels,
    ensemble_predict,
    equal_weight_kernel,
    gaussian_weight_kernel,
    sliding_window_predict,
    tile_offsets,
)
from volseg.sampling import normalize_patchwise
from volseg.volume import Volume3D


def constant_predictor(probs):
    probs = np.asarray(probs, np.float64)

    def predict(patch):
        out = np.empty((len(probs), *patch.shape[1:]), np.float32)
        out[:] = probs[:, None, None, None]
        return out

    return predict


def mean_predictor(patch):
    """Input-dependent toy predictor: softmax over channel-0 statistics."""
    m = float(patch[0].mean())
    logits = np.stack([
        np.full(patch.shape[1:], m, np.float64),
        patch[0].astype(np.float64),
        -patch[0].astype(np.float64),
    ])
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return (e / e.sum(axis=0, keepdims=True)).astype(np.float32)


class TestWeightKernels:
    def test_gaussian_center_face_and_corner_values(self):
        kernel = gaussian_weight_kernel((9, 7, 5), edge_value=0.1)
        w = kernel.weights
        assert w[4, 3, 2] == 1.0
        assert abs(w[0, 3, 2] - 0.1) < 1e-9
        assert abs(w[4, 0, 2] - 0.1) < 1e-9
        assert abs(w[4, 3, 0] - 0.1) < 1e-9
        assert abs(w[0, 0, 0] - 1e-3) < 1e-9

    def test_gaussian_monotone_from_center(self):
        w = gaussian_weight_kernel((11, 9, 7)).weights
        cx, cy, cz = 5, 4, 3
        for axis, center in ((0, cx), (1, cy), (2, cz)):
            profile = np.moveaxis(w, axis, 0)[:, cy if axis != 1 else cx, cz if axis != 2 else cx]
            left = profile[: center + 1]
            right = profile[center:]
            assert (np.diff(left) >= -1e-12).all()
            assert (np.diff(right) <= 1e-12).all()

    def test_gaussian_size_one_axis_is_flat(self):
        w = gaussian_weight_kernel((5, 1, 1)).weights
        assert w[2, 0, 0] == 1.0
        assert w.shape == (5, 1, 1)

    def test_gaussian_rejects_bad_edge_value(self):
        with pytest.raises(ValueError):
            gaussian_weight_kernel((4, 4, 4), edge_value=0.0)
        with pytest.raises(ValueError):
            gaussian_weight_kernel((4, 4, 4), edge_value=1.0)

    def test_equal_kernel_is_all_ones(self):
        kernel = equal_weight_kernel((3, 4, 5))
        assert (kernel.weights == 1.0).all()
        assert kernel.weights.sum() == 3 * 4 * 5


class TestTileOffsets:
    def cfg(self, patch, stride):
        return SlidingWindowConfig(patch_size=patch, stride=stride)

    def test_single_tile_when_volume_equals_patch(self):
        cfg = self.cfg((4, 4, 4), (2, 2, 2))
        assert tile_offsets((4, 4, 4), cfg) == [(0, 0, 0)]

    def test_exact_fit_has_no_extra_flush_offset(self):
        cfg = self.cfg((4, 1, 1), (3, 1, 1))
        offs = [o[0] for o in tile_offsets((10, 1, 1), cfg)]
        assert offs == [0, 3, 6]

    def test_overshoot_appends_flush_offset(self):
        cfg = self.cfg((4, 1, 1), (3, 1, 1))
        offs = [o[0] for o in tile_offsets((11, 1, 1), cfg)]
        assert offs == [0, 3, 6, 7]

    def test_order_is_z_outer_x_inner(self):
        cfg = self.cfg((2, 2, 2), (2, 2, 2))
        offs = tile_offsets((4, 4, 4), cfg)
        assert offs[0] == (0, 0, 0)
        assert offs[1] == (2, 0, 0)   # x moves first
        assert offs[2] == (0, 2, 0)   # then y
        assert offs[4] == (0, 0, 2)   # z last

    def test_full_coverage_for_random_geometry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            patch = tuple(int(rng.integers(2, 6)) for _ in range(3))
            stride = tuple(int(rng.integers(1, p + 1)) for p in patch)
            dims = tuple(int(rng.integers(p, 14)) for p in patch)
            cfg = self.cfg(patch, stride)
            covered = np.zeros(dims, bool)
            for ox, oy, oz in tile_offsets(dims, cfg):
                assert ox + patch[0] <= dims[0]
                assert oy + patch[1] <= dims[1]
                assert oz + patch[2] <= dims[2]
                covered[ox:ox + patch[0], oy:oy + patch[1], oz:oz + patch[2]] = True
            assert covered.all()


class TestSlidingWindow:
    def test_single_tile_equals_direct_prediction(self):
        rng = np.random.default_rng(1)
        vol = Volume3D(rng.normal(size=(1, 4, 4, 4)).astype(np.float32), (1, 1, 1))
        cfg = SlidingWindowConfig(patch_size=(4, 4, 4), stride=(4, 4, 4), weighting="equal")
        out = sliding_window_predict(vol, mean_predictor, cfg)
        direct = mean_predictor(normalize_patchwise(vol.data))
        np.testing.assert_allclose(out.data, direct, atol=1e-6)

    def test_constant_predictor_ignores_overlap_and_weighting(self):
        rng = np.random.default_rng(2)
        vol = Volume3D(rng.normal(size=(1, 8, 6, 4)).astype(np.float32), (1, 1, 1))
        probs = (0.5, 0.3, 0.2)
        for weighting in ("equal", "gaussian"):
            cfg = SlidingWindowConfig(patch_size=(4, 4, 2), stride=(2, 3, 1), weighting=weighting)
            out = sliding_window_predict(vol, constant_predictor(probs), cfg)
            for c, value in enumerate(probs):
                np.testing.assert_allclose(out.data[c], value, atol=1e-6)

    def test_equal_and_gaussian_agree_for_constant_predictor(self):
        rng = np.random.default_rng(3)
        vol = Volume3D(rng.normal(size=(1, 6, 6, 6)).astype(np.float32), (1, 1, 1))
        base = dict(patch_size=(4, 4, 4), stride=(2, 2, 2))
        out_eq = sliding_window_predict(vol, constant_predictor((0.2, 0.3, 0.5)),
                                        SlidingWindowConfig(weighting="equal", **base))
        out_ga = sliding_window_predict(vol, constant_predictor((0.2, 0.3, 0.5)),
                                        SlidingWindowConfig(weighting="gaussian", **base))
        np.testing.assert_allclose(out_eq.data, out_ga.data, atol=1e-6)

    def test_output_stays_channel_normalized(self):
        rng = np.random.default_rng(4)
        vol = Volume3D(rng.normal(size=(1, 8, 8, 4)).astype(np.float32), (1, 1, 1))
        cfg = SlidingWindowConfig(patch_size=(4, 4, 2), stride=(3, 2, 2), weighting="gaussian")
        out = sliding_window_predict(vol, mean_predictor, cfg)
        np.testing.assert_allclose(out.data.sum(axis=0), 1.0, atol=1e-5)

    def test_tile_order_does_not_change_result(self):
        rng = np.random.default_rng(5)
        vol = Volume3D(rng.normal(size=(1, 8, 6, 4)).astype(np.float32), (1, 1, 1))
        cfg = SlidingWindowConfig(patch_size=(4, 4, 2), stride=(2, 2, 2), weighting="gaussian")
        offsets = tile_offsets(vol.dims, cfg)
        out_fwd = sliding_window_predict(vol, mean_predictor, cfg, offsets=offsets)
        shuffled = [offsets[i] for i in rng.permutation(len(offsets))]
        out_shuf = sliding_window_predict(vol, mean_predictor, cfg, offsets=shuffled)
        np.testing.assert_allclose(out_fwd.data, out_shuf.data, atol=1e-6)

    def test_matches_manual_two_patch_accumulation(self):
        rng = np.random.default_rng(6)
        vol = Volume3D(rng.normal(size=(1, 6, 4, 4)).astype(np.float32), (1, 1, 1))
        cfg = SlidingWindowConfig(patch_size=(4, 4, 4), stride=(2, 4, 4), weighting="gaussian")
        out = sliding_window_predict(vol, mean_predictor, cfg)

        from volseg.inference import gaussian_weight_kernel as gk
        kernel = gk((4, 4, 4), 0.1).weights
        num = np.zeros((3, 6, 4, 4))
        den = np.zeros((6, 4, 4))
        for ox in (0, 2):
            patch = normalize_patchwise(vol.data[:, ox:ox + 4])
            pred = mean_predictor(patch).astype(np.float64)
            num[:, ox:ox + 4] += pred * kernel
            den[ox:ox + 4] += kernel
        np.testing.assert_allclose(out.data, (num / den).astype(np.float32), atol=1e-5)

    def test_small_volume_padded_then_cropped(self):
        rng = np.random.default_rng(7)
        vol = Volume3D(rng.normal(size=(1, 3, 3, 3)).astype(np.float32), (1, 1, 1))
        cfg = SlidingWindowConfig(patch_size=(4, 4, 4), stride=(4, 4, 4), weighting="equal")
        out = sliding_window_predict(vol, constant_predictor((0.6, 0.3, 0.1)), cfg)
        assert out.dims == (3, 3, 3)
        np.testing.assert_allclose(out.data[0], 0.6, atol=1e-6)

    def test_bad_predictor_shape_raises(self):
        vol = Volume3D(np.zeros((1, 4, 4, 4), np.float32), (1, 1, 1))
        cfg = SlidingWindowConfig(patch_size=(4, 4, 4), stride=(4, 4, 4))

        def broken(patch):
            return np.zeros((3, 2, 2, 2), np.float32)

        with pytest.raises(ValueError, match="predictor returned"):
            sliding_window_predict(vol, broken, cfg)

    def test_exempt_channels_skip_normalization(self):
        rng = np.random.default_rng(8)
        data = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
        vol = Volume3D(data, (1, 1, 1))
        cfg = SlidingWindowConfig(patch_size=(4, 4, 4), stride=(4, 4, 4),
                                  weighting="equal", exempt_channels=frozenset({1}))
        seen = {}

        def spy(patch):
            seen["patch"] = patch.copy()
            return constant_predictor((1 / 3, 1 / 3, 1 / 3))(patch)

        sliding_window_predict(vol, spy, cfg)
        np.testing.assert_array_equal(seen["patch"][1], data[1])
        assert abs(seen["patch"][0].mean(dtype=np.float64)) < 1e-5


class TestEnsembleAndArgmax:
    def prob_volume(self, rng, dims=(4, 4, 4)):
        raw = rng.random((3, *dims))
        return Volume3D((raw / raw.sum(axis=0)).astype(np.float32), (1, 1, 1))

    def test_mean_of_identical_inputs_is_identity(self):
        vol = self.prob_volume(np.random.default_rng(9))
        out = ensemble_predict([vol, vol, vol])
        np.testing.assert_allclose(out.data, vol.data, atol=1e-7)

    def test_two_member_hand_average(self):
        a = Volume3D(np.array([1.0, 0.0, 0.0], np.float32).reshape(3, 1, 1, 1), (1, 1, 1))
        b = Volume3D(np.array([0.0, 1.0, 0.0], np.float32).reshape(3, 1, 1, 1), (1, 1, 1))
        out = ensemble_predict([a, b])
        np.testing.assert_allclose(out.data.ravel(), [0.5, 0.5, 0.0])

    def test_matches_scalar_loop_average(self):
        rng = np.random.default_rng(10)
        vols = [self.prob_volume(rng) for _ in range(5)]
        out = ensemble_predict(vols)
        expected = np.zeros((3, 4, 4, 4))
        for idx in np.ndindex(expected.shape):
            expected[idx] = sum(float(v.data[idx]) for v in vols) / 5.0
        np.testing.assert_allclose(out.data, expected, atol=1e-7)
        np.testing.assert_allclose(out.data.sum(axis=0), 1.0, atol=1e-5)

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ValueError):
            ensemble_predict([self.prob_volume(rng), self.prob_volume(rng, dims=(3, 3, 3))])

    def test_argmax_one_hot(self):
        probs = np.zeros((3, 2, 2, 2), np.float32)
        probs[1] = 1.0
        out = argmax_labels(Volume3D(probs, (1, 1, 1)))
        assert (out.labels == 1).all()

    def test_argmax_tie_prefers_background(self):
        probs = np.full((3, 2, 2, 2), 1.0 / 3.0, np.float32)
        out = argmax_labels(Volume3D(probs, (1, 1, 1)))
        assert (out.labels == 0).all()

    def test_argmax_matches_scan_oracle(self):
        rng = np.random.default_rng(12)
        vol = self.prob_volume(rng, dims=(5, 4, 3))
        out = argmax_labels(vol)
        for idx in np.ndindex((5, 4, 3)):
            values = [float(vol.data[c][idx]) for c in range(3)]
            best = max(range(3), key=lambda c: (values[c], -c))
            assert out.labels[idx] == best
