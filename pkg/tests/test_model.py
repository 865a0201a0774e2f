import json

import numpy as np
import pytest

from photocore_sim.model import (
    BACKGROUND,
    Layer,
    ModelFormatError,
    ModelGraph,
    SegmentationSample,
    col2im,
    conv2d_reference,
    eval_layer_digital,
    im2col,
    load_dataset,
    load_model,
    reference_forward,
    save_dataset,
    save_model,
)
from photocore_sim.tensor import Tensor

from oracles import conv2d_oracle


def _t(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


def tiny_model(class_count=3):
    rng = np.random.default_rng(0)
    w1 = _t(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))
    b1 = _t(rng.normal(size=4).astype(np.float32))
    w2 = _t(rng.normal(size=(class_count, 4, 1, 1)).astype(np.float32))
    return ModelGraph(
        layers=(
            Layer("conv2d", weight=w1, stride=1, padding=1),
            Layer("add_bias", bias=b1),
            Layer("relu"),
            Layer("conv2d", weight=w2),
            Layer("argmax_channel"),
        ),
        input_shape=(3, 6, 6),
        class_count=class_count,
    )


class TestConv2d:
    @pytest.mark.parametrize("stride,padding,kh", [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 2)])
    def test_matches_sliding_window_oracle(self, stride, padding, kh):
        rng = np.random.default_rng(42)
        img = rng.normal(size=(2, 7, 6)).astype(np.float32)
        w = rng.normal(size=(3, 2, kh, kh)).astype(np.float32)
        got = conv2d_reference(img, w, stride, padding)
        want = np.array(conv2d_oracle(img.tolist(), w.tolist(), stride, padding))
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_im2col_col2im_are_adjoint(self):
        # <im2col(x), g> == <x, col2im(g)> -- the defining property
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 5))
        cols = im2col(x, 3, 3, stride=2, padding=1)
        g = rng.normal(size=cols.shape)
        lhs = float(np.sum(cols * g))
        back = col2im(g, x.shape, 3, 3, stride=2, padding=1)
        rhs = float(np.sum(x * back))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestLayers:
    def test_dense_and_bias_and_relu(self):
        w = _t([[1.0, 2.0], [0.0, -1.0]])
        x = np.array([3.0, 4.0], dtype=np.float32)
        y = eval_layer_digital(Layer("dense", weight=w), x)
        np.testing.assert_array_equal(y, [11.0, -4.0])
        y = eval_layer_digital(Layer("add_bias", bias=_t([1.0, 1.0])), y)
        np.testing.assert_array_equal(y, [12.0, -3.0])
        y = eval_layer_digital(Layer("relu"), y)
        np.testing.assert_array_equal(y, [12.0, 0.0])

    def test_argmax_ties_take_lowest_class(self):
        x = np.zeros((3, 2, 2), dtype=np.float32)
        out = eval_layer_digital(Layer("argmax_channel"), x)
        np.testing.assert_array_equal(out, np.zeros((2, 2)))

    def test_kind_validation(self):
        with pytest.raises(ValueError):
            Layer("dense")  # missing weight
        with pytest.raises(ValueError):
            Layer("relu", weight=_t([1.0]))
        with pytest.raises(ValueError):
            Layer("conv2d", weight=_t([[1.0]]))  # wrong rank
        with pytest.raises(ValueError):
            Layer("frobnicate")

    def test_graph_shape_chain_validated(self):
        with pytest.raises(ValueError):
            ModelGraph(
                layers=(Layer("dense", weight=_t([[1.0, 2.0]])),),
                input_shape=(3,),  # dense wants 2 inputs
                class_count=1,
            )

    def test_reference_forward_shapes(self):
        m = tiny_model()
        img = np.random.default_rng(2).normal(size=(3, 6, 6)).astype(np.float32)
        out = reference_forward(m, Tensor(img))
        assert out.shape == (6, 6)
        assert set(np.unique(out.data)) <= {0.0, 1.0, 2.0}


class TestModelIO:
    def test_roundtrip_inline(self, tmp_path):
        m = tiny_model()
        p = tmp_path / "model.json"
        save_model(m, p)
        back = load_model(p)
        assert len(back.layers) == len(m.layers)
        assert back.input_shape == m.input_shape
        assert back.class_count == m.class_count
        for a, b in zip(back.layers, m.layers):
            assert a.kind == b.kind
            if a.weight is not None:
                np.testing.assert_array_equal(a.weight.data, b.weight.data)

    def test_roundtrip_external_tensors(self, tmp_path):
        m = tiny_model()
        p = tmp_path / "model.json"
        save_model(m, p, external_weights=True)
        doc = json.loads(p.read_text())
        refs = [
            entry[key]["tensor_file"]
            for entry in doc["layers"]
            for key in ("weight", "bias")
            if key in entry
        ]
        assert refs and all((tmp_path / r).exists() for r in refs)
        back = load_model(p)
        np.testing.assert_array_equal(back.layers[0].weight.data, m.layers[0].weight.data)

    def test_save_is_deterministic(self, tmp_path):
        m = tiny_model()
        save_model(m, tmp_path / "a.json")
        save_model(m, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_load_rejects_bad_version(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"pcmodel_version": 99}))
        with pytest.raises(ModelFormatError):
            load_model(p)

    def test_load_missing_file_names_path(self, tmp_path):
        with pytest.raises(ModelFormatError, match="gone.json"):
            load_model(tmp_path / "gone.json")

    def test_load_rejects_bad_json(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text("{broken")
        with pytest.raises(ModelFormatError):
            load_model(p)


class TestDatasetIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        samples = [
            SegmentationSample(
                image=Tensor(rng.normal(size=(3, 4, 4)).astype(np.float32)),
                label=np.array(rng.integers(-1, 3, size=(4, 4))),
            )
            for _ in range(3)
        ]
        save_dataset(samples, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert len(back) == 3
        for a, b in zip(back, samples):
            np.testing.assert_array_equal(a.image.data, b.image.data)
            np.testing.assert_array_equal(a.label, b.label)

    def test_label_validation(self):
        img = Tensor(np.zeros((1, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            SegmentationSample(image=img, label=np.full((2, 2), -2))
        with pytest.raises(ValueError):
            SegmentationSample(image=img, label=np.zeros((2, 2, 1)))
        s = SegmentationSample(image=img, label=np.full((2, 2), BACKGROUND))
        assert s.label.dtype == np.int64

    def test_missing_directory_errors(self, tmp_path):
        with pytest.raises(ModelFormatError, match="nodir"):
            load_dataset(tmp_path / "nodir")

    def test_unpaired_files_error(self, tmp_path):
        rng = np.random.default_rng(4)
        samples = [
            SegmentationSample(
                image=Tensor(rng.normal(size=(1, 2, 2)).astype(np.float32)),
                label=np.zeros((2, 2), dtype=np.int64),
            )
        ]
        save_dataset(samples, tmp_path / "ds")
        (tmp_path / "ds" / "lbl_0000.pcten").unlink()
        with pytest.raises(ModelFormatError):
            load_dataset(tmp_path / "ds")
