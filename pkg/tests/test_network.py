import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_difference
from sonatr import network as nw
from sonatr import synthgen as sg
from sonatr.errors import DimensionError, TrainingDataError

L = nw.LayerSpec


def micro_spec():
    """Every layer kind, 205 parameters."""
    layers = (L("conv", out_channels=2, kernel=3, stride=1, padding=1), L("relu"), L("maxpool", window=2, stride=2),
              L("conv", out_channels=3, kernel=2, stride=1, padding=0), L("relu"), L("flatten"),
              L("dense", units=6), L("relu"), L("dense", units=3), L("softmax"))
    return nw.NetworkSpec((1, 6, 6), layers, ("a", "b", "c"))


def test_micro_network_is_small_and_covers_every_kind():
    spec = micro_spec()
    n = sum(int(np.prod(s)) for s in spec.param_shapes().values())
    assert n <= 500
    assert {layer.kind for layer in spec.layers} == set(nw.LAYER_PARAMS)


def max_relative_error(net, x, labels, h=1e-5, penalty=None):
    _, grads = nw.loss_and_gradients(net, x, labels, penalty)
    keys = list(net.params)
    numeric = central_difference(lambda: nw.loss_and_gradients(net, x, labels, penalty)[0],
                                 [net.params[k] for k in keys], h)
    worst = 0.0
    for k, num in zip(keys, numeric):
        ana = grads[k]
        # relative error with an absolute floor so exactly-zero gradients compare sanely
        rel = np.abs(ana - num) / np.maximum(np.abs(ana) + np.abs(num), 1e-7)
        worst = max(worst, float(rel.max()))
    return worst


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    net = nw.Network.initialize(micro_spec(), seed=seed)
    for k in net.params:  # nonzero biases and a livelier head exercise every path
        net.params[k] = rng.normal(scale=0.5, size=net.params[k].shape)
    x = rng.normal(size=(3, 1, 6, 6))
    labels = rng.integers(0, 3, size=3)
    assert max_relative_error(net, x, labels) < 1e-4


def test_gradients_with_soft_targets():
    rng = np.random.default_rng(11)
    net = nw.Network.initialize(micro_spec(), seed=11)
    x = rng.normal(size=(2, 1, 6, 6))
    t = rng.dirichlet(np.ones(3), size=2)
    assert max_relative_error(net, x, t) < 1e-4


def test_gradients_with_feature_penalty():
    rng = np.random.default_rng(3)
    net = nw.Network.initialize(micro_spec(), seed=3)
    x = rng.normal(size=(3, 1, 6, 6))
    assert max_relative_error(net, x, np.array([0, 2, 1]), penalty=np.array([0.0, 0.7, 1.3])) < 1e-4


def test_feature_penalty_adds_squared_norm():
    net = nw.Network.initialize(micro_spec(), seed=4)
    x = np.random.default_rng(4).normal(size=(2, 1, 6, 6))
    base, _ = nw.loss_and_gradients(net, x, np.array([0, 1]))
    pen, _ = nw.loss_and_gradients(net, x, np.array([0, 1]), np.array([0.0, 2.0]))
    f = nw.extract_features(net, x[1])
    assert pen - base == pytest.approx(2.0 * float(f @ f) / 2, rel=1e-12, abs=1e-15)


def test_zero_weights_give_uniform_output():
    spec = nw.NetworkSpec((1, 4, 4), (L("conv", out_channels=2, kernel=3, stride=1, padding=1), L("relu"),
                                      L("flatten"), L("dense", units=5), L("softmax")), tuple("abcde"))
    net = nw.Network(spec, {k: np.zeros(s) for k, s in spec.param_shapes().items()})
    trace = nw.forward(net, np.random.default_rng(0).normal(size=(1, 4, 4)))
    np.testing.assert_allclose(trace.probabilities, np.full(5, 0.2), rtol=0, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_output_is_distribution(seed):
    rng = np.random.default_rng(seed)
    net = nw.Network.initialize(micro_spec(), seed=seed % 1000)
    p = nw.forward(net, rng.normal(scale=10.0, size=(1, 6, 6))).probabilities
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_trace_shapes_follow_spec_and_runs_are_identical():
    net = nw.Network.initialize(nw.mini_cnn_spec(), seed=3)
    img = np.random.default_rng(3).random((1, 64, 64))
    a = nw.forward(net, img).activations
    b = nw.forward(net, img).activations
    assert [x.shape for x in a] == net.spec.shapes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_forward_rejects_wrong_input_shape():
    net = nw.Network.initialize(nw.mini_cnn_spec())
    with pytest.raises(DimensionError):
        nw.forward(net, np.zeros((1, 32, 32)))


def test_spec_validation():
    with pytest.raises(ValueError):
        L("conv", out_channels=2)
    with pytest.raises(ValueError):
        L("relu", units=3)
    with pytest.raises((ValueError, DimensionError)):
        nw.NetworkSpec((1, 4, 4), (L("flatten"), L("dense", units=2), L("softmax")), ("a", "b", "c"))
    with pytest.raises((ValueError, DimensionError)):
        nw.NetworkSpec((1, 2, 2), (L("conv", out_channels=1, kernel=5, stride=1, padding=0), L("flatten"),
                                   L("dense", units=1), L("softmax")), ("a",))


def test_spec_json_round_trip():
    spec = nw.mini_cnn_spec()
    assert nw.NetworkSpec.from_json(spec.to_json()) == spec


def test_mini_cnn_reference_architecture():
    spec = nw.mini_cnn_spec()
    assert spec.input_shape == (1, 64, 64)
    assert [layer.kind for layer in spec.layers] == ["conv", "relu", "maxpool", "conv", "relu", "maxpool",
                                                     "flatten", "dense", "relu", "dense", "softmax"]
    net = nw.Network.initialize(spec)
    assert net.feature_width == 64
    assert nw.extract_features(net, np.zeros((1, 64, 64))).shape == (64,)


def test_extract_features_deterministic_and_batched():
    net = nw.Network.initialize(nw.mini_cnn_spec(), seed=1)
    imgs = np.random.default_rng(1).random((3, 64, 64))
    batch = nw.extract_features_batch(net, imgs)
    for i in range(3):
        single = nw.extract_features(net, imgs[i][None])
        np.testing.assert_array_equal(single, nw.extract_features(net, imgs[i][None]))
        np.testing.assert_allclose(single, batch[i], rtol=0, atol=1e-12)


def test_feature_tap_knob():
    net = nw.Network.initialize(nw.mini_cnn_spec(), seed=1)
    img = np.random.default_rng(2).random((1, 64, 64))
    assert nw.extract_features(net, img, tap=5).shape == (16 * 16 * 16,)
    with pytest.raises(ValueError):
        nw.extract_features(net, img, tap=99)


def test_replace_head():
    net = nw.Network.initialize(nw.mini_cnn_spec(tuple("abcdefghij")), seed=0)
    new = nw.replace_head(net, ["w", "x", "y", "z"], seed=5)
    h = new.spec.head_index
    assert new.params[(h, "weights")].shape == (4, 64)
    assert np.all(np.abs(new.params[(h, "weights")]) <= 0.05)
    assert not new.params[(h, "bias")].any()
    for k, v in net.params.items():
        if k[0] != h:
            assert v.tobytes() == new.params[k].tobytes()
    again = nw.replace_head(net, ["w", "x", "y", "z"], seed=5)
    assert again.params[(h, "weights")].tobytes() == new.params[(h, "weights")].tobytes()
    with pytest.raises(ValueError):
        nw.replace_head(net, [])


def _tiny_set(n_per_class=2, seed=0):
    return sg.generate_dataset(n_per_class, seed)


def test_zero_learning_rate_changes_nothing():
    net = nw.Network.initialize(nw.mini_cnn_spec(), seed=0)
    out, hist = nw.fine_tune(net, _tiny_set(), nw.FineTuneConfig(learning_rate=0.0, epochs=3))
    assert all(net.params[k].tobytes() == out.params[k].tobytes() for k in net.params)
    assert hist[0] == hist[1] == hist[2]


def test_single_example_is_memorized():
    ds = _tiny_set(1).subset([0])
    net = nw.Network.initialize(nw.mini_cnn_spec(["block"]), seed=0)
    net = nw.replace_head(net, ["block", "sphere"], seed=0)
    x, labels = ds.images, ds.labels
    out, hist = nw.train_arrays(net, x, labels, nw.FineTuneConfig(learning_rate=0.05, epochs=200, batch_size=1))
    assert hist[-1] < 0.01


def test_freeze_depth_keeps_frozen_weights_bitwise():
    net = nw.Network.initialize(nw.mini_cnn_spec(), seed=0)
    depth = len(net.spec.layers) - 2
    out, _ = nw.fine_tune(net, _tiny_set(), nw.FineTuneConfig(epochs=2, freeze_depth=depth))
    for k in net.params:
        same = net.params[k].tobytes() == out.params[k].tobytes()
        assert same == (k[0] < depth)


def test_fine_tune_is_deterministic():
    net = nw.Network.initialize(nw.mini_cnn_spec(), seed=0)
    cfg = nw.FineTuneConfig(epochs=2, seed=7)
    a, ha = nw.fine_tune(net, _tiny_set(), cfg)
    b, hb = nw.fine_tune(net, _tiny_set(), cfg)
    assert ha == hb
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_fine_tune_data_errors():
    net = nw.Network.initialize(nw.mini_cnn_spec(), seed=0)
    ds = _tiny_set()
    with pytest.raises(TrainingDataError):
        nw.fine_tune(net, ds.subset([]), nw.FineTuneConfig(epochs=1))
    with pytest.raises(TrainingDataError):
        nw.fine_tune(net, ds.subset(np.flatnonzero(ds.labels != 1)), nw.FineTuneConfig(epochs=1))


def test_small_learning_rate_loss_is_nearly_monotone():
    ds = sg.standard_dataset(60)
    net = nw.Network.initialize(nw.mini_cnn_spec(), seed=0)
    _, hist = nw.fine_tune(net, ds, nw.FineTuneConfig(learning_rate=1e-3, momentum=0.0, epochs=20, seed=0))
    ups = [(a, b) for a, b in zip(hist, hist[1:]) if b > a]
    assert len(ups) <= 0.05 * (len(hist) - 1)
    assert all(b < 1.1 * a for a, b in ups)


def test_dump_activations():
    net = nw.Network.initialize(nw.mini_cnn_spec(), seed=0)
    img = np.random.default_rng(0).random((1, 64, 64))
    dumps = nw.dump_activations(net, img, [0, 3])
    assert [len(dumps[0]), len(dumps[3])] == [8, 16]
    assert all(c.dtype == np.uint8 and c.shape == (64, 64) for c in dumps[0])
    again = nw.dump_activations(net, img, [0, 3])
    assert all(a.tobytes() == b.tobytes() for a, b in zip(dumps[3], again[3]))
    with pytest.raises(ValueError):
        nw.dump_activations(net, img, [42])
    with pytest.raises(ValueError):
        nw.dump_activations(net, img, [7])  # dense layer has no spatial activation


def test_dump_constant_channel_is_mid_gray():
    net = nw.Network.initialize(nw.mini_cnn_spec(), seed=0)
    net.params[(0, "kernels")][:] = 0.0
    out = nw.dump_activations(net, np.random.default_rng(0).random((1, 64, 64)), [0])
    assert all(np.all(c == 128) for c in out[0])
