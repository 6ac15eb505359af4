import math

import numpy as np
import pytest
from conftest import layer_grad_error, model_grad_error
from hypothesis import given
from hypothesis import strategies as st

from hmfdetect import dataset, kernels, model
from hmfdetect.errors import CheckpointError, ConfigError, LabelError, ShapeError
from hmfdetect.model import Conv2D, ModelSpec, TrainConfig

TINY = ModelSpec("plain", ((3, 1), (4, 1)), 8, 2)


def test_conv_same_padding_shape():
    rng = np.random.default_rng(0)
    conv = Conv2D(3, 8)
    out, _ = conv.forward(rng.uniform(size=(1, 64, 64, 3)), conv.init_params(rng))
    assert out.shape == (1, 64, 64, 8) and conv.out_shape((64, 64, 3)) == (64, 64, 8)


@given(side=st.integers(3, 24), k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 3), pad=st.integers(0, 2), cout=st.integers(1, 4))
def test_conv_shape_algebra(side, k, stride, pad, cout):
    if side + 2 * pad < k:
        return
    conv = Conv2D(2, cout, k, stride, pad)
    params = conv.init_params(np.random.default_rng(0))
    out, _ = conv.forward(np.ones((1, side, side, 2)), params)
    want = (side + 2 * pad - k) // stride + 1
    assert out.shape == (1, want, want, cout) == (1, *conv.out_shape((side, side, 2)))


@given(side=st.integers(2, 20), k=st.integers(1, 4))
def test_pool_shape_algebra(side, k):
    if side < k:
        return
    x = np.random.default_rng(0).normal(size=(1, side, side, 2))
    for pool in (model.MaxPool(k), model.AvgPool(k)):
        out, _ = pool.forward(x, [])
        assert out.shape[1:] == pool.out_shape((side, side, 2)) == (side // k, side // k, 2)


@pytest.mark.parametrize("family", model.FAMILIES)
def test_network_output_shape_matches_declared(family):
    spec = ModelSpec(family, ((4, 2), (6, 1)), 16, 3)
    net = model.network(spec)
    m = model.init_model(spec)
    z, _ = net.forward(np.zeros((2, 16, 16, 3)), m.views())
    assert z.shape == (2, 1) and net.out_shape((16, 16, 3)) == (1,)


def test_zero_dense_head_scores_half():
    m = model.init_model(TINY, seed=3)
    m.params[-(4 + 1):] = 0.0  # final dense weights (4x1) and bias
    x = np.random.default_rng(1).uniform(size=(5, 8, 8, 3))
    np.testing.assert_array_equal(model.forward(m, x), 0.5)
    assert model.predict_score(m, np.random.default_rng(2).uniform(size=(30, 30, 3))) == 0.5


def test_residual_zero_weights_is_identity():
    block = model.Residual(4)
    x = np.random.default_rng(0).normal(size=(2, 6, 6, 4))
    params = [np.zeros(s) for s in block.param_shapes()]
    out, _ = block.forward(x, params)
    np.testing.assert_array_equal(out, x)


def test_dense_concat_keeps_input_channels():
    block = model.DenseConcat(3, 2)
    x = np.random.default_rng(0).normal(size=(1, 5, 5, 3))
    out, _ = block.forward(x, block.init_params(np.random.default_rng(1)))
    assert out.shape == (1, 5, 5, 5)
    np.testing.assert_array_equal(out[..., :3], x)


def test_bce_examples():
    loss, _ = model.weighted_bce(np.zeros(1), np.ones(1), 1.0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    loss, _ = model.weighted_bce(np.zeros(4), np.ones(4), 9.0)
    assert loss == pytest.approx(9 * math.log(2), abs=1e-14)
    loss, _ = model.weighted_bce(np.zeros(2), np.zeros(2), 9.0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


# the naive log(1 - s) oracle loses precision beyond |z| ~ 12
@given(st.lists(st.floats(-12, 12), min_size=1, max_size=8), st.floats(0.1, 20))
def test_bce_matches_definition(zs, pw):
    z = np.array(zs)
    y = (np.arange(len(z)) % 2).astype(float)
    s = 1 / (1 + np.exp(-z))
    want = -np.mean(pw * y * np.log(s) + (1 - y) * np.log(1 - s))
    loss, dz = model.weighted_bce(z, y, pw)
    assert loss == pytest.approx(want, rel=1e-9, abs=1e-12)
    # d/dz of the per-sample loss, derived by hand
    want_dz = (-pw * y * (1 - s) + (1 - y) * s) / len(z)
    np.testing.assert_allclose(dz, want_dz, rtol=1e-9, atol=1e-15)


def _layers():
    return [
        ("conv", model.Conv2D(2, 3), (2, 6, 6, 2)),
        ("conv-stride2", model.Conv2D(2, 3, 3, 2, 1), (2, 7, 7, 2)),
        ("relu", model.ReLU(), (2, 4, 4, 2)),
        ("maxpool", model.MaxPool(2), (2, 6, 6, 2)),
        ("avgpool", model.AvgPool(2), (2, 5, 5, 2)),
        ("gap", model.GlobalAvgPool(), (2, 3, 3, 4)),
        ("dense", model.Dense(5, 3), (4, 5)),
        ("residual", model.Residual(3), (2, 5, 5, 3)),
        ("dense-concat", model.DenseConcat(3, 2), (2, 5, 5, 3)),
    ]


@pytest.mark.parametrize("name, layer, shape", _layers(), ids=[n for n, _, _ in _layers()])
def test_layer_gradients(name, layer, shape):
    rng = np.random.default_rng(7)
    x = rng.normal(size=shape)
    params = [rng.normal(0, 0.5, size=s) for s in layer.param_shapes()]
    assert layer_grad_error(layer, x, params, rng) < 1e-4


@pytest.mark.parametrize("family", model.FAMILIES)
def test_model_gradients(family):
    spec = ModelSpec(family, ((3, 1), (4, 2)), 8, 2)
    assert model_grad_error(spec, seed=11) < 1e-4


def test_backward_label_errors():
    m = model.init_model(TINY)
    x = np.zeros((2, 8, 8, 3))
    with pytest.raises(LabelError):
        model.backward(m, x, [0, 2])
    with pytest.raises(LabelError):
        model.backward(m, x, [1])


def test_shape_error_names_shapes():
    m = model.init_model(TINY)
    with pytest.raises(ShapeError, match=r"8, 8, 3.*\(2, 9, 9, 3\)"):
        model.forward(m, np.zeros((2, 9, 9, 3)))
    with pytest.raises(ShapeError):
        model.predict_score(m, np.zeros((10, 10)))


@given(st.floats(-1e6, 1e6))
def test_scores_strictly_inside_unit_interval(scale):
    m = model.init_model(TINY, seed=0)
    m.params *= 50
    x = np.random.default_rng(0).uniform(size=(3, 8, 8, 3)) * scale
    s = model.forward(m, x)
    assert np.all((s > 0) & (s < 1))


def test_predict_score_is_pure():
    m = model.init_model(TINY, seed=1)
    tile = np.random.default_rng(4).uniform(size=(20, 20, 3))
    assert model.predict_score(m, tile) == model.predict_score(m, tile.copy())
    batch = model.predict_scores(m, [tile, tile, tile * 0.5])
    assert batch[0] == batch[1]


def _toy_data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 4 == 0).astype(float)
    x = rng.uniform(0, 0.5, size=(n, 8, 8, 3))
    x[y == 1, 2:6, 2:6, :] += 0.5
    return x, y, dataset.split(n, seed=seed, stratify_labels=y)


def test_learning_rate_zero_leaves_params():
    x, y, ds = _toy_data()
    init = model.init_model(TINY, seed=2)
    out = model.train(x, y, ds, TINY, TrainConfig(learning_rate=0.0, epochs=2, seed=2), init=init)
    np.testing.assert_array_equal(out.params, init.params)
    assert [h.epoch for h in out.history] == [1, 2]


def test_training_deterministic_and_learns():
    x, y, ds = _toy_data()
    cfg = TrainConfig(epochs=6, batch_size=8, seed=5)
    a = model.train(x, y, ds, TINY, cfg)
    b = model.train(x, y, ds, TINY, cfg)
    assert a.params.tobytes() == b.params.tobytes() and a.history == b.history
    assert a.history[a.best_epoch - 1].val_auc == max(h.val_auc for h in a.history)


def test_train_needs_validation():
    x, y, ds = _toy_data()
    empty = dataset.DatasetSplit(ds.train, (), ds.test)
    with pytest.raises(ConfigError):
        model.train(x, y, empty, TINY, TrainConfig(epochs=1))


def test_train_config_rejects_negative_values():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ConfigError):
        TrainConfig(pos_weight=0)


def test_checkpoint_round_trip(tmp_path):
    x, y, ds = _toy_data()
    m = model.train(x, y, ds, TINY, TrainConfig(epochs=2, seed=1))
    model.save_checkpoint(m, tmp_path / "m.ckpt")
    back = model.load_checkpoint(tmp_path / "m.ckpt")
    assert back.params.tobytes() == m.params.tobytes()
    assert back.spec == m.spec and back.history == m.history and back.best_epoch == m.best_epoch
    assert model.checkpoint_bytes(back) == (tmp_path / "m.ckpt").read_bytes()
    assert back.model_id == m.model_id


def test_checkpoint_errors():
    data = model.checkpoint_bytes(model.init_model(TINY))
    with pytest.raises(CheckpointError):
        model.checkpoint_from_bytes(b"garbage" + data)
    with pytest.raises(CheckpointError):
        model.checkpoint_from_bytes(data[:-8])


def test_model_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec("wide")
    with pytest.raises(ConfigError):
        ModelSpec(stages=())
    with pytest.raises(ConfigError):
        ModelSpec("dense", growth_rate=0)


def test_kernel_paths_give_same_scores():
    if not kernels.HAVE_NUMBA:
        pytest.skip("numba not importable")
    m = model.init_model(ModelSpec("residual", ((4, 1),), 16), seed=0)
    x = np.random.default_rng(0).uniform(size=(4, 16, 16, 3))
    ref = model.forward(m, x)
    saved = kernels.conv2d_forward, kernels.maxpool_forward
    try:
        kernels.conv2d_forward = kernels.conv2d_forward_numpy
        kernels.maxpool_forward = kernels.maxpool_forward_numpy
        other = model.forward(m, x)
    finally:
        kernels.conv2d_forward, kernels.maxpool_forward = saved
    np.testing.assert_allclose(ref, other, rtol=1e-10)
