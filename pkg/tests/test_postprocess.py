#!/usr/bin/env python3
"""
Tests for Prediction Post-processing
====================================
Individual steps, delay compensation and the greedy chain optimizer.
"""

import numpy as np
import pytest
from scipy import ndimage

from affectcae.data import synth_dataset
from affectcae.errors import ParameterError, ShapeError
from affectcae.metrics import ccc
from affectcae.postprocess import (
    MAX_SHIFT,
    MAX_WINDOW,
    ChainGrid,
    ChainStep,
    PostprocessChain,
    apply_center,
    apply_scale,
    default_shifts,
    default_windows,
    delay_compensate,
    fit_center,
    fit_scale,
    median_filter,
    optimize_chain,
    time_shift,
)


def brute_force_median(series, window):
    half = window // 2
    out = np.empty_like(series)
    for t in range(len(series)):
        idx = np.clip(np.arange(t - half, t + half + 1), 0, len(series) - 1)
        out[t] = np.median(series[idx])
    return out


def smooth_series(seed, n):
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter1d(rng.standard_normal(n + 100), 8.0)[50:-50]


SMALL_GRID = ChainGrid(windows=(1, 3, 5, 9, 15, 31), shifts=(0, 1, 2, 5, 10, 20))


class TestMedianFilter:
    """Test the sliding median"""

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            series = rng.standard_normal(n)
            window = int(rng.choice(np.arange(1, n + 1, 2)))
            np.testing.assert_array_equal(median_filter(series, window), brute_force_median(series, window))

    def test_window_one_is_identity(self):
        series = np.array([3.0, -1.0, 2.0])
        np.testing.assert_array_equal(median_filter(series, 1), series)

    def test_removes_spike(self):
        np.testing.assert_array_equal(median_filter(np.array([0.0, 0.0, 9.0, 0.0, 0.0]), 3), np.zeros(5))

    @pytest.mark.parametrize("window", [0, 2, 4])
    def test_even_or_zero_window(self, window):
        with pytest.raises(ParameterError):
            median_filter(np.zeros(10), window)

    def test_window_longer_than_series(self):
        with pytest.raises(ParameterError):
            median_filter(np.zeros(3), 5)


class TestCenterScaleShift:
    """Test centering, scaling and time shifting"""

    def test_bias_centering(self):
        params = fit_center([1.0, 2.0, 3.0], [0.0, 0.5, 1.0])
        np.testing.assert_allclose(apply_center([0.0, 1.0], params, "bias"), [1.5, 2.5])

    def test_literal_centering(self):
        params = fit_center([1.0, 2.0, 3.0], [0.0, 0.5, 1.0])
        np.testing.assert_allclose(apply_center([0.0, 1.0], params, "literal"), [-2.0, -1.0])

    def test_unknown_center_mode(self):
        with pytest.raises(ParameterError):
            apply_center([0.0], fit_center([1.0], [1.0]), "median")

    def test_std_scaling(self):
        beta = fit_scale([-2.0, 2.0], [-1.0, 1.0], "std")
        assert beta == pytest.approx(2.0)
        np.testing.assert_allclose(apply_scale([0.5, -0.5], beta), [1.0, -1.0])

    def test_literal_ratio_scaling(self):
        assert fit_scale([2.0, 4.0], [1.0, 2.0], "literal-ratio") == pytest.approx(2.0)

    def test_zero_denominator_skips(self, caplog):
        assert fit_scale([1.0, 2.0], [0.5, 0.5], "std") is None
        assert "Skipping scaling" in caplog.text

    def test_shift_pads_front(self):
        np.testing.assert_array_equal(time_shift([1.0, 2.0, 3.0, 4.0], 1), [1.0, 1.0, 2.0, 3.0])
        np.testing.assert_array_equal(time_shift([1.0, 2.0, 3.0], 0), [1.0, 2.0, 3.0])

    def test_shift_longer_than_series(self):
        np.testing.assert_array_equal(time_shift([5.0, 6.0], 4), [5.0, 5.0])

    def test_shift_range(self):
        with pytest.raises(ParameterError):
            time_shift(np.zeros(10), MAX_SHIFT + 1)
        with pytest.raises(ParameterError):
            time_shift(np.zeros(10), -1)


class TestDelayCompensation:
    """Test frame/label alignment"""

    def test_arrays(self):
        frames, labels = delay_compensate(np.arange(10), np.arange(100, 110), 3)
        np.testing.assert_array_equal(frames, np.arange(7))
        np.testing.assert_array_equal(labels, np.arange(103, 110))

    def test_zero_delay(self):
        frames, labels = delay_compensate(np.arange(5), np.arange(5), 0)
        assert len(frames) == len(labels) == 5

    def test_sequences(self):
        seq, track = synth_dataset(seed=1, n_subjects=1, n_frames=50, image_size=8, n_dev=0)[0]
        seq2, track2 = delay_compensate(seq, track, 40)
        assert len(seq2) == len(track2) == 10
        assert seq2.timestamps[0] == seq.timestamps[0]
        assert track2.timestamps[0] == pytest.approx(40 * 0.04)
        np.testing.assert_array_equal(track2.valence, track.valence[40:])

    def test_delay_too_long(self):
        with pytest.raises(ParameterError):
            delay_compensate(np.arange(5), np.arange(5), 5)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            delay_compensate(np.arange(5), np.arange(4), 1)


class TestGrids:
    """Test default search grids"""

    def test_windows_odd_and_bounded(self):
        windows = default_windows()
        assert windows[0] == 1 and windows[-1] == MAX_WINDOW
        assert all(w % 2 == 1 for w in windows)
        assert list(windows) == sorted(set(windows))

    def test_shifts(self):
        shifts = default_shifts()
        assert shifts[:26] == tuple(range(26))
        assert shifts[-1] == MAX_SHIFT

    def test_invalid_grid(self):
        with pytest.raises(ParameterError):
            ChainGrid(windows=(4,))
        with pytest.raises(ParameterError):
            ChainGrid(shifts=(300,))


class TestChain:
    """Test the greedy chain optimizer and chain files"""

    def test_never_below_raw_dev_ccc(self):
        rng = np.random.default_rng(5)
        for k in range(100):
            gold_train, gold_dev = smooth_series(2 * k, 200), smooth_series(2 * k + 1, 200)
            noise = rng.uniform(0.05, 2.0)
            pred_train = gold_train + rng.normal(0, noise, 200) + rng.normal()
            pred_dev = gold_dev + rng.normal(0, noise, 200) + rng.normal()
            chain = optimize_chain(gold_train, pred_train, gold_dev, pred_dev, SMALL_GRID)
            assert chain.dev_ccc >= chain.raw_dev_ccc
            assert ccc(gold_dev, chain.apply(pred_dev)) == pytest.approx(chain.dev_ccc)

    def test_median_kept_for_noisy_predictions(self):
        rng = np.random.default_rng(1)
        gold_train, gold_dev = smooth_series(10, 400), smooth_series(11, 400)
        chain = optimize_chain(
            gold_train,
            gold_train + rng.normal(0, 1.0, 400),
            gold_dev,
            gold_dev + rng.normal(0, 1.0, 400),
            SMALL_GRID,
        )
        assert chain.steps[0].name == "median"
        assert chain.steps[0].params["window"] > 1
        assert chain.dev_ccc > chain.raw_dev_ccc

    def test_shift_recovers_lead(self):
        train, dev = smooth_series(20, 510), smooth_series(21, 510)
        grid = ChainGrid(windows=(1,), shifts=(0, 5, 10, 20))
        chain = optimize_chain(train[:500], train[10:], dev[:500], dev[10:], grid)
        shifts = [s for s in chain.steps if s.name == "shift"]
        assert shifts and shifts[0].params["frames"] == 10

    def test_train_gate_applies_to_dev_best_candidate(self):
        train, dev = smooth_series(50, 501), smooth_series(51, 510)
        grid = ChainGrid(windows=(1,), shifts=(0, 1, 10))
        # train predictions lead by one frame, dev predictions by ten
        chain = optimize_chain(train[:500], train[1:], dev[:500], dev[10:], grid)
        decision = chain.decisions[-1]
        assert decision.step == "shift"
        assert decision.params == "frames=10"
        assert decision.dev_after > decision.dev_before
        assert decision.train_after < decision.train_before
        assert not decision.accepted
        assert "shift" not in [s.name for s in chain.steps]

    def test_scale_restores_halved_predictions(self):
        gold_train, gold_dev = smooth_series(60, 300), smooth_series(61, 300)
        gold_train, gold_dev = gold_train - gold_train.mean(), gold_dev - gold_dev.mean()
        grid = ChainGrid(windows=(1,), shifts=(0, 1, 2))
        chain = optimize_chain(gold_train, 0.5 * gold_train, gold_dev, 0.5 * gold_dev, grid)
        scale = [s for s in chain.steps if s.name == "scale"]
        assert scale and scale[0].params["beta"] == pytest.approx(2.0)
        assert chain.dev_ccc == pytest.approx(1.0)

    def test_every_step_logged(self):
        gold, pred = smooth_series(1, 100), smooth_series(2, 100)
        chain = optimize_chain(gold, pred, gold, pred, SMALL_GRID)
        assert [d.step for d in chain.decisions] == ["median", "center", "scale", "shift"]
        assert all(d.dev_after <= d.dev_before or d.accepted for d in chain.decisions)

    def test_perfect_prediction_keeps_nothing(self):
        gold = smooth_series(3, 100)
        chain = optimize_chain(gold, gold, gold, gold, SMALL_GRID)
        assert chain.steps == []
        assert chain.dev_ccc == pytest.approx(1.0)

    def test_segments_keep_shift_inside_subject(self):
        step = ChainStep("shift", {"frames": 1}, float("nan"))
        series = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        np.testing.assert_array_equal(step.apply(series, [3, 3]), [1.0, 1.0, 2.0, 4.0, 4.0, 5.0])
        np.testing.assert_array_equal(step.apply(series), [1.0, 1.0, 2.0, 3.0, 4.0, 5.0])

    def test_segments_must_cover_series(self):
        step = ChainStep("shift", {"frames": 1}, float("nan"))
        with pytest.raises(ShapeError):
            step.apply(np.zeros(6), [3, 2])

    def test_file_reproduces_outputs(self, tmp_path):
        rng = np.random.default_rng(8)
        gold_train, gold_dev = smooth_series(30, 300), smooth_series(31, 300)
        pred_train = 0.5 * gold_train + rng.normal(0, 0.5, 300) + 0.3
        pred_dev = 0.5 * gold_dev + rng.normal(0, 0.5, 300) + 0.3
        chain = optimize_chain(gold_train, pred_train, gold_dev, pred_dev, SMALL_GRID)
        path = tmp_path / "valence.chain"
        chain.save(path)
        loaded = PostprocessChain.load(path)
        assert [s.name for s in loaded.steps] == [s.name for s in chain.steps]
        assert loaded.raw_dev_ccc == chain.raw_dev_ccc
        np.testing.assert_array_equal(loaded.apply(pred_dev), chain.apply(pred_dev))

    def test_literal_modes(self):
        rng = np.random.default_rng(9)
        gold_train, gold_dev = smooth_series(40, 200) + 2.0, smooth_series(41, 200) + 2.0
        chain = optimize_chain(
            gold_train,
            gold_train + rng.normal(0, 0.1, 200),
            gold_dev,
            gold_dev + rng.normal(0, 0.1, 200),
            SMALL_GRID,
            center_mode="literal",
            scale_mode="literal-ratio",
        )
        # subtracting the gold mean moves predictions away from gold, so it is rejected
        assert "center" not in [s.name for s in chain.steps]
        assert chain.dev_ccc >= chain.raw_dev_ccc
