import warnings

import numpy as np
import pytest

from photocore_sim import fixtures
from photocore_sim.dnf import (
    InsufficientSamplesError,
    LayerNoise,
    NoiseProfile,
    TrainConfig,
    TrainingDivergedError,
    dnf_train,
    estimate_noise_profile,
    load_profile,
    loss_and_gradients,
    save_profile,
    softmax_cross_entropy,
    training_loss,
    zero_profile,
)
from photocore_sim.model import Layer, ModelGraph, SegmentationSample
from photocore_sim.photocore import PhotocoreConfig
from photocore_sim.tensor import Tensor


def small_dense_model(rng):
    w1 = Tensor(rng.normal(size=(6, 4)).astype(np.float32) * 0.5)
    b1 = Tensor(rng.normal(size=6).astype(np.float32) * 0.1)
    w2 = Tensor(rng.normal(size=(3, 6)).astype(np.float32) * 0.5)
    return ModelGraph(
        layers=(
            Layer("dense", weight=w1),
            Layer("add_bias", bias=b1),
            Layer("relu"),
            Layer("dense", weight=w2),
        ),
        input_shape=(4,),
        class_count=3,
    )


def conv_seg_model(rng):
    w1 = Tensor(rng.normal(size=(5, 3, 3, 3)).astype(np.float32) * 0.3)
    b1 = Tensor(rng.normal(size=5).astype(np.float32) * 0.1)
    w2 = Tensor(rng.normal(size=(3, 5, 1, 1)).astype(np.float32) * 0.4)
    return ModelGraph(
        layers=(
            Layer("conv2d", weight=w1, padding=1),
            Layer("add_bias", bias=b1),
            Layer("relu"),
            Layer("conv2d", weight=w2),
            Layer("argmax_channel"),
        ),
        input_shape=(3, 5, 5),
        class_count=3,
    )


def seg_sample(rng, shape=(3, 5, 5), classes=3):
    img = Tensor(rng.normal(size=shape).astype(np.float32))
    label = rng.integers(-1, classes, size=shape[1:])
    if (label >= 0).sum() == 0:
        label[0, 0] = 0
    return SegmentationSample(image=img, label=label)


class TestLoss:
    def test_cross_entropy_hand_case(self):
        logits = np.log(np.array([[0.7], [0.2], [0.1]]))
        labels = np.array([[0]])
        loss, grad = softmax_cross_entropy(logits[:, :, None], labels[:, None])
        assert loss == pytest.approx(-np.log(0.7))
        np.testing.assert_allclose(
            grad[:, 0, 0], [0.7 - 1.0, 0.2, 0.1], rtol=1e-12
        )

    def test_background_pixels_carry_no_gradient(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 2, 2))
        labels = np.array([[0, -1], [-1, 1]])
        loss, grad = softmax_cross_entropy(logits, labels)
        assert grad[:, 0, 1] == pytest.approx(0.0)
        assert grad[:, 1, 0] == pytest.approx(0.0)

    def test_all_background_rejected(self):
        logits = np.zeros((2, 2, 2))
        labels = np.full((2, 2), -1)
        with pytest.raises(ValueError):
            softmax_cross_entropy(logits, labels)


class TestGradients:
    def test_conv_chain_finite_difference_check(self):
        rng = np.random.default_rng(1)
        model = conv_seg_model(rng)
        sample = seg_sample(rng)
        _loss, grad_w, grad_b = loss_and_gradients(model, sample)
        h = 1e-5
        for li, g in grad_w.items():
            w = model.layers[li].weight.data
            probe = [(0,) * w.ndim, tuple(d - 1 for d in w.shape)]
            rng2 = np.random.default_rng(li)
            probe += [tuple(int(rng2.integers(0, d)) for d in w.shape) for _ in range(4)]
            for idx in probe:
                wp = w.copy()
                wp[idx] = np.float32(float(w[idx]) + h)
                wm = w.copy()
                wm[idx] = np.float32(float(w[idx]) - h)
                realized = float(wp[idx]) - float(wm[idx])  # exact f32 step
                fd = (
                    training_loss(_with_weight(model, li, wp), sample)
                    - training_loss(_with_weight(model, li, wm), sample)
                ) / realized
                assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_bias_finite_difference_check(self):
        from dataclasses import replace

        rng = np.random.default_rng(2)
        model = conv_seg_model(rng)
        sample = seg_sample(rng)
        _loss, _gw, grad_b = loss_and_gradients(model, sample)
        (bi,) = grad_b.keys()
        h = 1e-5
        for k in range(model.layers[bi].bias.shape[0]):
            def with_bias(value):
                b = model.layers[bi].bias.data.copy()
                b[k] = value
                layers = list(model.layers)
                layers[bi] = replace(layers[bi], bias=Tensor(b))
                return ModelGraph(layers=tuple(layers), input_shape=model.input_shape,
                                  class_count=model.class_count)

            b0 = float(model.layers[bi].bias.data[k])
            up = np.float32(b0 + h)
            dn = np.float32(b0 - h)
            fd = (training_loss(with_bias(up), sample)
                  - training_loss(with_bias(dn), sample)) / (float(up) - float(dn))
            assert grad_b[bi][k] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_dense_chain_gradient_matches_analytic(self):
        import types

        rng = np.random.default_rng(3)
        model = small_dense_model(rng)
        x = rng.normal(size=(4,)).astype(np.float32)
        sample = types.SimpleNamespace(image=Tensor(x), label=np.int64(1))
        _loss, grad_w, grad_b = loss_and_gradients(model, sample)
        # analytic check on the last dense layer: dL/dW2 = (p - onehot) h^T
        w1 = model.layers[0].weight.data.astype(np.float64)
        b1 = model.layers[1].bias.data.astype(np.float64)
        w2 = model.layers[3].weight.data.astype(np.float64)
        hidden = np.maximum(w1 @ x.astype(np.float64) + b1, 0.0)
        logits = w2 @ hidden
        p = np.exp(logits - logits.max())
        p /= p.sum()
        p[1] -= 1.0
        np.testing.assert_allclose(grad_w[3], np.outer(p, hidden), rtol=1e-10)


def _with_weight(model, layer_index, new_w):
    from dataclasses import replace

    layers = list(model.layers)
    layers[layer_index] = replace(layers[layer_index], weight=Tensor(new_w.astype(np.float32)))
    return ModelGraph(layers=tuple(layers), input_shape=model.input_shape,
                      class_count=model.class_count)


class TestProfile:
    def test_roundtrip(self, tmp_path):
        prof = NoiseProfile(
            layers={0: LayerNoise(0.01, 0.2, 12000), 3: LayerNoise(-0.005, 0.4, 15000)},
            seed=7,
        )
        save_profile(prof, tmp_path / "p.json")
        back = load_profile(tmp_path / "p.json")
        assert back == prof

    def test_zero_profile_covers_offloadable_layers(self):
        rng = np.random.default_rng(2)
        model = conv_seg_model(rng)
        prof = zero_profile(model)
        assert set(prof.layers) == set(model.offloadable_indices())
        assert prof.is_zero()

    def test_estimate_requires_enough_samples(self):
        rng = np.random.default_rng(3)
        model = conv_seg_model(rng)
        data = [seg_sample(rng) for _ in range(2)]
        cfg = PhotocoreConfig(tile_size=8, rng_seed=1)
        with pytest.raises(InsufficientSamplesError):
            estimate_noise_profile(model, data, cfg, min_samples=10**9)

    def test_estimate_statistics_reasonable(self):
        rng = np.random.default_rng(4)
        model = conv_seg_model(rng)
        data = [seg_sample(rng) for _ in range(4)]
        cfg = PhotocoreConfig(tile_size=8, rng_seed=1)
        prof = estimate_noise_profile(model, data, cfg, min_samples=50)
        assert set(prof.layers) == set(model.offloadable_indices())
        for ln in prof.layers.values():
            assert ln.std > 0
            assert ln.sample_count >= 50

    def test_biased_layer_warns(self):
        # all-ones weights on an all-ones image saturate the converter the
        # same way at every pixel: pure bias, zero spread -> must warn
        w = Tensor(np.ones((2, 2, 1, 1), dtype=np.float32))
        model = ModelGraph(
            layers=(Layer("conv2d", weight=w), Layer("argmax_channel")),
            input_shape=(2, 4, 4),
            class_count=2,
        )
        data = [
            SegmentationSample(
                image=Tensor(np.ones((2, 4, 4), dtype=np.float32)),
                label=np.zeros((4, 4), dtype=np.int64),
            )
            for _ in range(3)
        ]
        cfg = PhotocoreConfig(tile_size=8, rng_seed=1, gain=8.0, noise_sigma=0.0)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            prof = estimate_noise_profile(model, data, cfg, min_samples=50)
        assert any("mean" in str(c.message).lower() for c in caught)
        assert prof.layers[0].mean == pytest.approx(-1.0)
        assert prof.layers[0].std == pytest.approx(0.0, abs=1e-9)


class TestTraining:
    def test_zero_profile_equals_plain_finetune(self):
        # with an all-zero profile the trainer must not draw noise at all:
        # bit-identical to the same SGD run on the clean model
        rng = np.random.default_rng(6)
        model = conv_seg_model(rng)
        data = [seg_sample(rng) for _ in range(6)]
        tc = TrainConfig(learning_rate=0.05, epochs=2, batch_size=2, rng_seed=3)
        a = dnf_train(model, data, zero_profile(model), tc)
        b = dnf_train(model, data, zero_profile(model), tc)
        for la, lb in zip(a.layers, b.layers):
            if la.weight is not None:
                np.testing.assert_array_equal(la.weight.data, lb.weight.data)

    def test_zero_profile_matches_hand_rolled_sgd(self):
        # one epoch, batch=1: updates are w -= lr * grad per sample in order
        from dataclasses import replace

        rng = np.random.default_rng(7)
        model = conv_seg_model(rng)
        data = [seg_sample(rng) for _ in range(3)]
        lr = 0.1
        tc = TrainConfig(learning_rate=lr, epochs=1, batch_size=1, rng_seed=0)
        got = dnf_train(model, data, zero_profile(model), tc)

        ws = {i: l.weight.data.astype(np.float64) for i, l in enumerate(model.layers)
              if l.weight is not None}
        bs = {i: l.bias.data.astype(np.float64) for i, l in enumerate(model.layers)
              if l.bias is not None}
        for s in data:
            layers = list(model.layers)
            for i, w in ws.items():
                layers[i] = replace(layers[i], weight=Tensor(w.astype(np.float32)))
            for i, b in bs.items():
                layers[i] = replace(layers[i], bias=Tensor(b.astype(np.float32)))
            cur = ModelGraph(layers=tuple(layers), input_shape=model.input_shape,
                             class_count=model.class_count)
            _, grad_w, grad_b = loss_and_gradients(cur, s)
            for i, g in grad_w.items():
                ws[i] = ws[i] - lr * g
            for i, g in grad_b.items():
                bs[i] = bs[i] - lr * g
        for i, w in ws.items():
            np.testing.assert_allclose(
                got.layers[i].weight.data, w.astype(np.float32), rtol=2e-5, atol=1e-7
            )
        for i, b in bs.items():
            np.testing.assert_allclose(
                got.layers[i].bias.data, b.astype(np.float32), rtol=2e-5, atol=1e-7
            )

    def test_noise_draws_are_deterministic_per_seed(self):
        rng = np.random.default_rng(8)
        model = conv_seg_model(rng)
        data = [seg_sample(rng) for _ in range(4)]
        prof = NoiseProfile(
            layers={0: LayerNoise(0.0, 0.1, 10000), 3: LayerNoise(0.0, 0.1, 10000)},
            seed=1,
        )
        tc = TrainConfig(learning_rate=0.05, epochs=1, batch_size=2, rng_seed=5)
        a = dnf_train(model, data, prof, tc)
        b = dnf_train(model, data, prof, tc)
        c = dnf_train(model, data, prof, TrainConfig(
            learning_rate=0.05, epochs=1, batch_size=2, rng_seed=6))
        np.testing.assert_array_equal(a.layers[0].weight.data, b.layers[0].weight.data)
        assert not np.array_equal(a.layers[0].weight.data, c.layers[0].weight.data)

    def test_profile_keys_must_match_model(self):
        rng = np.random.default_rng(9)
        model = conv_seg_model(rng)
        data = [seg_sample(rng)]
        bad = NoiseProfile(layers={0: LayerNoise(0.0, 0.1, 10000)}, seed=0)
        with pytest.raises(ValueError):
            dnf_train(model, data, bad, TrainConfig(learning_rate=0.01))

    def test_divergence_detected(self):
        rng = np.random.default_rng(10)
        model = conv_seg_model(rng)
        data = [seg_sample(rng) for _ in range(4)]
        tc = TrainConfig(learning_rate=1e6, epochs=60, batch_size=2, rng_seed=0)
        with pytest.raises(TrainingDivergedError):
            dnf_train(model, data, zero_profile(model), tc)

    def test_training_reduces_loss_under_noise(self):
        rng = np.random.default_rng(11)
        model = conv_seg_model(rng)
        data = [seg_sample(rng) for _ in range(6)]
        prof = NoiseProfile(
            layers={0: LayerNoise(0.0, 0.05, 10000), 3: LayerNoise(0.0, 0.05, 10000)},
            seed=2,
        )
        tc = TrainConfig(learning_rate=0.2, epochs=4, batch_size=2, rng_seed=1)
        log = []
        dnf_train(model, data, prof, tc, loss_log=log)
        assert len(log) == 4 * 3  # one entry per optimization step
        assert log[-1] < log[0]
