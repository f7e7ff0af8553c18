#!/usr/bin/env python3
"""
Tests for Network Builders
==========================
Architectures, weight transfer, freezing, feature extraction and training
sanity on small synthetic sets.
"""

import numpy as np
import pytest

from affectcae.data import ArrayDataset, synth_labeled_images
from affectcae.errors import ParameterError, ShapeError, TransferError
from affectcae.metrics import accuracy
from affectcae.models import (
    CONV_BLOCKS,
    TRANSFER_LAYERS,
    EncodedFeatures,
    build_cae,
    build_pretrain_cnn,
    classify,
    encode,
    set_frozen,
    transfer_weights,
)
from affectcae.nn import TrainConfig, evaluate_loss, forward, train

SMALL = dict(conv_channels=(4, 4, 8), input_size=8)


class TestArchitectures:
    """Test network shapes and sizes"""

    def test_pretrain_cnn_full_size(self):
        spec, weights = build_pretrain_cnn(seed=0)
        assert spec.input_shape == (48, 48, 1)
        assert spec.output_shape == (7,)
        assert spec.parameter_count() == 1_919_657

    def test_pretrain_cnn_outputs_probabilities(self):
        spec, weights = build_pretrain_cnn(seed=0, **SMALL)
        out, _ = forward(spec, weights, np.random.default_rng(0).random((3, 8, 8, 1)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0)

    def test_cae_full_size_shapes(self):
        spec, _ = build_cae(encoder_size=900, seed=0)
        assert spec.output_shape == (48, 48, 1)
        assert spec.output_shapes()[spec.index("encoder")] == (900,)
        assert spec.name == "cae-d900"

    def test_cae_without_decoder_pool(self):
        spec, _ = build_cae(encoder_size=5, seed=0, decoder_pool_upsample=False, **SMALL)
        names = [layer.name for layer in spec.layers]
        assert "dec_pool" not in names
        assert spec.output_shape == (8, 8, 1)

    def test_cae_odd_decoder_map_rejected(self):
        with pytest.raises(ParameterError):
            build_cae(encoder_size=5, conv_channels=(4, 4, 8), input_size=12)

    def test_conv_layer_names_shared(self):
        cnn, _ = build_pretrain_cnn(**SMALL)
        cae, _ = build_cae(encoder_size=5, **SMALL)
        for name in TRANSFER_LAYERS:
            assert cnn.layer(name).kind == cae.layer(name).kind

    def test_bad_geometry(self):
        with pytest.raises(ParameterError):
            build_pretrain_cnn(input_size=10)
        with pytest.raises(ParameterError):
            build_cae(encoder_size=0)

    def test_seeded_init_is_reproducible(self):
        _, a = build_cae(encoder_size=5, seed=4, **SMALL)
        _, b = build_cae(encoder_size=5, seed=4, **SMALL)
        np.testing.assert_array_equal(a.params["encoder"]["kernel"], b.params["encoder"]["kernel"])


class TestTransfer:
    """Test copying the pre-trained conv stack"""

    def test_copies_conv_stack_only(self):
        _, source = build_pretrain_cnn(seed=1, **SMALL)
        source.state["bn1"]["running_mean"] = np.full(4, 0.25)
        _, target = build_cae(encoder_size=5, seed=2, **SMALL)
        result = transfer_weights(source, target)
        for name in TRANSFER_LAYERS:
            for pname, value in source.params[name].items():
                np.testing.assert_array_equal(result.params[name][pname], value)
        np.testing.assert_array_equal(result.state["bn1"]["running_mean"], np.full(4, 0.25))
        np.testing.assert_array_equal(result.params["encoder"]["kernel"], target.params["encoder"]["kernel"])

    def test_copies_are_independent(self):
        _, source = build_pretrain_cnn(seed=1, **SMALL)
        _, target = build_cae(encoder_size=5, seed=2, **SMALL)
        result = transfer_weights(source, target)
        result.params["conv1"]["kernel"][...] = 0.0
        assert np.any(source.params["conv1"]["kernel"] != 0.0)

    def test_shape_mismatch_named(self):
        _, source = build_pretrain_cnn(seed=1, conv_channels=(4, 4, 8), input_size=8)
        _, target = build_cae(encoder_size=5, seed=2, conv_channels=(4, 6, 8), input_size=8)
        with pytest.raises(TransferError, match="conv2 shape mismatch"):
            transfer_weights(source, target)


class TestFreezing:
    """Test freezing of encoder conv blocks"""

    @pytest.mark.parametrize("n", [0, 1, 2, 3])
    def test_freezes_from_input_side(self, n):
        _, weights = build_cae(encoder_size=5, **SMALL)
        frozen = set_frozen(weights, n).frozen
        expected = {name for block in CONV_BLOCKS[:n] for name in block}
        assert frozen == expected

    def test_out_of_range(self):
        _, weights = build_cae(encoder_size=5, **SMALL)
        with pytest.raises(ParameterError):
            set_frozen(weights, 4)
        with pytest.raises(ParameterError):
            set_frozen(weights, -1)


class TestEncoding:
    """Test bottleneck feature extraction"""

    def test_one_row_per_frame(self):
        spec, weights = build_cae(encoder_size=5, seed=0, **SMALL)
        frames = np.random.default_rng(0).random((7, 8, 8))
        timestamps = np.arange(7) * 0.04
        features = encode(spec, weights, frames, timestamps, batch_size=3)
        assert features.features.shape == (7, 5)
        np.testing.assert_array_equal(features.timestamps, timestamps)
        assert np.all(np.abs(features.features) <= 1.0)

    def test_batching_does_not_change_features(self):
        spec, weights = build_cae(encoder_size=5, seed=0, **SMALL)
        frames = np.random.default_rng(0).random((7, 8, 8))
        timestamps = np.arange(7) * 0.04
        a = encode(spec, weights, frames, timestamps, batch_size=2)
        b = encode(spec, weights, frames, timestamps, batch_size=7)
        np.testing.assert_allclose(a.features, b.features, atol=1e-12)

    def test_no_frames(self):
        spec, weights = build_cae(encoder_size=6, seed=0, **SMALL)
        features = encode(spec, weights, np.zeros((0, 8, 8)), np.zeros(0))
        assert features.features.shape == (0, 6)
        assert features.timestamps.shape == (0,)

    def test_wrong_frame_size(self):
        spec, weights = build_cae(encoder_size=5, seed=0, **SMALL)
        with pytest.raises(ShapeError):
            encode(spec, weights, np.zeros((2, 16, 16)), np.arange(2) * 0.04)

    def test_csv_keeps_values(self, tmp_path):
        features = EncodedFeatures(features=np.array([[0.1, -0.25], [0.5, 0.125]]), timestamps=np.array([0.0, 0.04]))
        path = tmp_path / "S01.csv"
        features.to_csv(path)
        assert path.read_text().splitlines()[0] == "timestamp,f0,f1"
        loaded = EncodedFeatures.from_csv(path)
        np.testing.assert_allclose(loaded.features, features.features)
        assert loaded.dimension == 2

    def test_classify_returns_labels(self):
        spec, weights = build_pretrain_cnn(seed=0, **SMALL)
        labels = classify(spec, weights, np.random.default_rng(0).random((5, 8, 8, 1)))
        assert labels.shape == (5,)
        assert labels.min() >= 0 and labels.max() < 7


def blob_images(n, size, seed):
    """Random 2-D Gaussian blobs (N, size, size, 1) in [0, 1]."""
    rng = np.random.default_rng(seed)
    grid = np.arange(size, dtype=np.float64)
    cx, cy = rng.uniform(size * 0.2, size * 0.8, (2, n))
    sigma = rng.uniform(size / 12.0, size / 6.0, n)
    amplitude = rng.uniform(0.4, 1.0, n)
    dx = (grid[None, None, :] - cx[:, None, None]) ** 2
    dy = (grid[None, :, None] - cy[:, None, None]) ** 2
    return (amplitude[:, None, None] * np.exp(-(dx + dy) / (2.0 * sigma[:, None, None] ** 2)))[..., None]


def reconstruction_mse(encoder_size, images, epochs):
    spec, weights = build_cae(encoder_size=encoder_size, seed=7, conv_channels=(8, 8, 16), input_size=images.shape[1])
    dataset = ArrayDataset(images, images)
    config = TrainConfig(learning_rate=1e-3, batch_size=32, max_epochs=epochs, loss="mse", seed=7)
    before = evaluate_loss(spec, weights, dataset, "mse", 64)
    result = train(spec, weights, dataset, config)
    return before, evaluate_loss(spec, result.weights, dataset, "mse", 64)


class TestTrainingSanity:
    """Test that both networks learn on small synthetic sets"""

    @pytest.mark.slow
    def test_pretrain_cnn_overfits_small_set(self):
        images = synth_labeled_images(seed=7, n_per_class=10, image_size=16)
        assert len(images) == 70
        spec, weights = build_pretrain_cnn(seed=7, conv_channels=(8, 8, 16), input_size=16, dropout=0.0)
        config = TrainConfig(learning_rate=1e-3, batch_size=10, max_epochs=200, loss="categorical-crossentropy", seed=7)
        result = train(spec, weights, images.dataset(), config)
        assert accuracy(classify(spec, result.weights, images.images), images.labels) > 0.9

    @pytest.mark.slow
    def test_cae_halves_reconstruction_error(self):
        before, after = reconstruction_mse(100, blob_images(500, 48, seed=7), epochs=50)
        assert after <= 0.5 * before

    @pytest.mark.slow
    def test_larger_bottleneck_reconstructs_no_worse(self):
        images = blob_images(500, 48, seed=7)
        errors = [reconstruction_mse(d, images, epochs=50)[1] for d in (16, 64, 256)]
        # shared seed and epochs; 10% covers init differences between sizes
        assert errors[1] <= errors[0] * 1.1
        assert errors[2] <= errors[1] * 1.1
