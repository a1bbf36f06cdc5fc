import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ternia import core
from ternia.core import Dataset, Layer, ModelGraph

from conftest import write_manifest


def dense_layer(w, b):
    w = np.asarray(w, dtype=np.float32)
    return Layer("dense", {"weights": w, "bias": np.asarray(b, np.float32)}, {"in": w.shape[1], "out": w.shape[0]})


def test_load_one_layer_manifest(tmp_path):
    path = write_manifest(tmp_path, [{"kind": "dense", "in": 2, "out": 1, "weights": [0.5, -0.5], "bias": [0.0]}])
    model = core.load_model(path)
    assert len(model) == 1
    assert model.layers[0].params["weights"].shape == (1, 2)
    np.testing.assert_array_equal(model.layers[0].params["weights"], [[0.5, -0.5]])


def test_blob_size_mismatch_names_layer(tmp_path):
    path = write_manifest(tmp_path, [{"kind": "dense", "in": 2, "out": 1, "weights": [1.0, 2.0, 3.0], "bias": [0.0]}])
    with pytest.raises(core.ModelError, match="layer 0 \\(dense\\).*3 floats"):
        core.load_model(path)


def test_missing_blob(tmp_path):
    path = write_manifest(tmp_path, [{"kind": "dense", "in": 2, "out": 1, "weights": [1.0, 2.0], "bias": [0.0]}])
    (tmp_path / "l0_bias.bin").unlink()
    with pytest.raises(core.ModelError, match="layer 0.*missing blob"):
        core.load_model(path)


def test_non_finite_blob(tmp_path):
    path = write_manifest(tmp_path, [{"kind": "dense", "in": 2, "out": 1, "weights": [np.nan, 2.0], "bias": [0.0]}])
    with pytest.raises(core.ModelError, match="layer 0.*non-finite"):
        core.load_model(path)


def test_incompatible_consecutive_layers(tmp_path):
    layers = [
        {"kind": "dense", "in": 2, "out": 3, "weights": np.ones(6), "bias": np.zeros(3)},
        {"kind": "dense", "in": 4, "out": 1, "weights": np.ones(4), "bias": np.zeros(1)},
    ]
    with pytest.raises(core.ModelError, match="layer 1"):
        core.load_model(write_manifest(tmp_path, layers))


def test_add_must_reference_earlier_layer(tmp_path):
    layers = [{"kind": "relu"}, {"kind": "add", "ref": 1}]
    with pytest.raises(core.ModelError, match="does not precede"):
        core.load_model(write_manifest(tmp_path, layers, input_shape=[2]))


def test_validate_rejects_avgpool_without_kernel():
    with pytest.raises(core.ModelError, match="kernel"):
        core.validate(ModelGraph([Layer("avgpool")], input_shape=(2, 4, 4)))


def small_conv_model(rng):
    return ModelGraph(
        [
            Layer("conv2d", {"weights": rng.normal(size=(4, 2, 3, 3)).astype(np.float32),
                             "bias": rng.normal(size=4).astype(np.float32)},
                  {"in": 2, "out": 4, "kh": 3, "kw": 3, "stride": 1, "padding": 1}),
            Layer("batchnorm", {"gamma": rng.uniform(0.5, 1.5, 4).astype(np.float32),
                                "beta": rng.normal(size=4).astype(np.float32),
                                "mean": rng.normal(size=4).astype(np.float32),
                                "var": rng.uniform(0.5, 2, 4).astype(np.float32)},
                  {"channels": 4, "eps": 1e-5}),
            Layer("relu"),
            Layer("conv2d", {"weights": rng.normal(size=(4, 4, 3, 3)).astype(np.float32),
                             "bias": np.zeros(4, np.float32)},
                  {"in": 4, "out": 4, "kh": 3, "kw": 3, "stride": 1, "padding": 1}),
            Layer("add", {}, {"ref": 2}),
            Layer("avgpool", {}, {"kernel": 2}),
            Layer("flatten"),
            dense_layer(rng.normal(size=(3, 16)), np.zeros(3)),
        ],
        input_shape=(2, 4, 4),
    )


def test_save_load_round_trip_is_byte_exact(tmp_path):
    model = small_conv_model(np.random.default_rng(0))
    core.save_model(model, tmp_path / "a.json")
    again = core.load_model(tmp_path / "a.json")
    core.save_model(again, tmp_path / "b.json")
    for i, layer in enumerate(model.layers):
        for name in core.PARAM_NAMES.get(layer.kind, ()):
            a = (tmp_path / f"a.{i}_{name}.bin").read_bytes()
            b = (tmp_path / f"b.{i}_{name}.bin").read_bytes()
            assert a == b
            assert a == layer.params[name].astype("<f4").tobytes()


def test_identity_dense():
    model = ModelGraph([dense_layer([[1, 0], [0, 1]], [0, 0])])
    np.testing.assert_array_equal(core.forward(model, [[3.0, 4.0]]), [[3.0, 4.0]])


def test_relu():
    model = ModelGraph([Layer("relu")])
    np.testing.assert_array_equal(core.forward(model, [[-1.0, 2.0]]), [[0.0, 2.0]])


def test_unit_batchnorm_is_identity():
    one, zero = np.ones(3, np.float32), np.zeros(3, np.float32)
    bn = Layer("batchnorm", {"gamma": one, "beta": zero, "mean": zero, "var": one}, {"channels": 3, "eps": 1e-5})
    x = np.random.default_rng(1).normal(size=(5, 3)).astype(np.float32)
    np.testing.assert_allclose(core.forward(ModelGraph([bn]), x), x, rtol=1e-4)


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    y = np.zeros((n, out, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            y[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
    return y


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_direct_loop(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 7, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    got = core.conv2d(x, w, b, stride, padding)
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding), rtol=1e-4, atol=1e-4)


def test_residual_model_forward_shapes_and_determinism():
    model = small_conv_model(np.random.default_rng(0))
    core.validate(model)
    x = np.random.default_rng(1).normal(size=(6, 2, 4, 4)).astype(np.float32)
    a, b = core.forward(model, x), core.forward(model, x)
    assert a.shape == (6, 3)
    assert a.tobytes() == b.tobytes()


def test_forward_rejects_wrong_batch_shape():
    model = small_conv_model(np.random.default_rng(0))
    with pytest.raises(core.ShapeError):
        core.forward(model, np.zeros((1, 3, 4, 4), np.float32))
    with pytest.raises(core.ShapeError):
        core.forward(ModelGraph([dense_layer(np.ones((2, 3)), np.zeros(2))]), np.zeros((1, 4)))


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(-8, 8).filter(lambda a: abs(a) > 1e-3), seed=st.integers(0, 1000))
def test_linear_graph_is_homogeneous(alpha, seed):
    rng = np.random.default_rng(seed)
    model = ModelGraph([
        Layer("conv2d", {"weights": rng.normal(size=(3, 2, 3, 3)).astype(np.float32), "bias": np.zeros(3, np.float32)},
              {"in": 2, "out": 3, "kh": 3, "kw": 3, "stride": 1, "padding": 0}),
        Layer("flatten"),
        dense_layer(rng.normal(size=(4, 18)), np.zeros(4)),
    ], input_shape=(2, 4, 5))
    x = rng.normal(size=(3, 2, 4, 5)).astype(np.float32)
    a = core.forward(model, np.float32(alpha) * x).astype(np.float64)
    b = alpha * core.forward(model, x).astype(np.float64)
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5 * np.abs(b).max())


@pytest.mark.parametrize("w,expected", [
    ([[0.2, -0.5, 0.1]], [(-0.5, 0.2)]),
    ([[1, 1], [-2, 3]], [(1, 1), (-2, 3)]),
    ([[0.7, 0.7]], [(0.7, 0.7)]),
])
def test_row_minmax(w, expected):
    np.testing.assert_array_equal(core.row_minmax(np.asarray(w, np.float32)), np.asarray(expected, np.float32))


def test_row_minmax_conv_rows_are_output_channels():
    w = np.arange(2 * 3 * 2 * 2, dtype=np.float32).reshape(2, 3, 2, 2)
    np.testing.assert_array_equal(core.row_minmax(w), [[0, 11], [12, 23]])


def test_row_minmax_errors():
    with pytest.raises(core.ShapeError):
        core.row_minmax(np.zeros(3))
    with pytest.raises(core.ShapeError):
        core.row_minmax(np.zeros((2, 0)))


@pytest.mark.parametrize("logits,labels,expected", [
    ([[2, 1], [0, 3]], [0, 1], 1.0),
    ([[2, 1]], [1], 0.0),
    ([[1, 1]], [0], 1.0),
])
def test_accuracy(logits, labels, expected):
    assert core.accuracy(np.asarray(logits, float), labels) == expected


def test_dataset_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = Dataset(rng.normal(size=(10, 3)).astype(np.float32), rng.integers(0, 4, 10))
    core.save_dataset(data, tmp_path / "d.csv")
    back = core.load_dataset(tmp_path / "d.csv")
    assert back.features.tobytes() == data.features.tobytes()
    np.testing.assert_array_equal(back.labels, data.labels)


def test_dataset_invariants():
    with pytest.raises(core.ShapeError):
        Dataset(np.zeros((3, 2)), [0, 1])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, -1])


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=4, max_side=5),
                  elements=st.floats(-100, 100, width=32)))
def test_row_minmax_matches_scan(w):
    mm = core.row_minmax(w)
    for i, row in enumerate(w.reshape(len(w), -1)):
        assert mm[i, 0] == min(row) and mm[i, 1] == max(row)
