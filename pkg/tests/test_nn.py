import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratrej import nn
from conftest import fd_grad, smooth_point


def test_init_shapes_and_determinism():
    a = nn.init_mlp([3, 5, 4], seed=1)
    b = nn.init_mlp([3, 5, 4], seed=1)
    assert a.widths == [3, 5, 4]
    assert (a.d, a.k) == (3, 4)
    assert all(np.array_equal(la.w, lb.w) for la, lb in zip(a.layers, b.layers))
    assert a.layers[-1].act == "id" and a.layers[0].act == "relu"
    assert all(np.all(layer.b == 0) for layer in a.layers)


def test_parameters_are_read_only(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.layers[0].w[0, 0] = 1.0


def test_layer_chain_and_class_count_validation():
    with pytest.raises(nn.ShapeError):
        nn.Mlp((nn.Layer(np.ones((3, 2)), np.zeros(3)), nn.Layer(np.ones((2, 4)), np.zeros(2), "id")))
    with pytest.raises(nn.ShapeError):
        nn.Mlp((nn.Layer(np.ones((1, 2)), np.zeros(1), "id"),))
    with pytest.raises(nn.NumericError):
        nn.Mlp((nn.Layer(np.full((2, 2), np.nan), np.zeros(2), "id"),))


def test_wrong_input_dimension(tiny_model):
    with pytest.raises(nn.ShapeError):
        nn.logits(tiny_model, np.zeros(3))


def test_softmax_stable_for_huge_logits():
    z = np.array([[1000.0, 0.0], [-1000.0, -1000.0]])
    p = nn.softmax(z)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(nn.logsumexp(z), [1000.0, -1000.0 + np.log(2)])


def test_argmax_ties_go_to_lowest_index():
    assert nn.argmax(np.array([[1.0, 1.0, 0.0]]))[0] == 0


def test_single_and_batch_shapes(tiny_model):
    x = np.array([0.3, -0.2])
    assert nn.logits(tiny_model, x).shape == (2,)
    assert nn.logits(tiny_model, x[None]).shape == (1, 2)
    np.testing.assert_array_equal(nn.logits(tiny_model, x), nn.logits(tiny_model, x[None])[0])
    assert np.ndim(nn.predict(tiny_model, x)) == 0


def test_linear_model_logits_exact():
    model = nn.Mlp((nn.Layer([[1.0, 2.0], [-1.0, 0.5]], [0.1, -0.2], "id"),))
    np.testing.assert_allclose(nn.logits(model, [1.0, 1.0]), [3.1, -0.7])


@pytest.mark.parametrize("widths", [[2, 16, 2], [2, 32, 32, 2], [3, 8, 4]])
def test_grad_input_matches_finite_differences(widths):
    rng = np.random.default_rng(0)
    model = nn.init_mlp(widths, seed=7)
    x = smooth_point(model, rng, widths[0])
    spec = nn.LossSpec.cross_entropy(1)
    g = nn.grad_input(model, x, spec)
    fd = fd_grad(lambda z: float(nn.value_and_grad_input(model, z, spec)[0]), x)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_grad_params_matches_finite_differences(deep_model):
    rng = np.random.default_rng(1)
    x = np.stack([smooth_point(deep_model, rng, 2) for _ in range(3)])
    y = np.array([0, 1, 1])
    grads = nn.grad_params(deep_model, x, y)
    for li, (gw, gb) in enumerate(grads):
        for which, g in (("w", gw), ("b", gb)):
            base = [list(p) for p in deep_model.params()]

            def loss(v, li=li, which=which):
                params = [list(p) for p in base]
                params[li][0 if which == "w" else 1] = v
                m = deep_model.with_params([tuple(p) for p in params])
                return float(nn.cross_entropy(nn.logits(m, x), y)[0].mean())

            fd = fd_grad(loss, base[li][0 if which == "w" else 1])
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)


def test_custom_loss_spec_gradient(tiny_model):
    rng = np.random.default_rng(2)
    x = smooth_point(tiny_model, rng, 2)

    def fn(a):
        return a[:, 0] ** 2 - a[:, 1], np.stack([2 * a[:, 0], -np.ones(len(a))], axis=1)

    spec = nn.LossSpec.custom(fn)
    fd = fd_grad(lambda z: float(nn.value_and_grad_input(tiny_model, z, spec)[0]), x)
    np.testing.assert_allclose(nn.grad_input(tiny_model, x, spec), fd, rtol=1e-5, atol=1e-8)


def test_cross_entropy_target_out_of_range(tiny_model):
    with pytest.raises(ValueError):
        nn.grad_input(tiny_model, np.zeros(2), nn.LossSpec.cross_entropy(5))


def test_empty_batch_rejected(tiny_model):
    with pytest.raises(ValueError):
        nn.value_and_grad_params(tiny_model, np.zeros((0, 2)), nn.LossSpec.cross_entropy(np.zeros(0, int)))


def test_sgd_step_moves_against_gradient(tiny_model):
    x = np.array([[0.5, -0.5], [1.0, 1.0]])
    y = np.array([0, 1])
    before = nn.value_and_grad_params(tiny_model, x, nn.LossSpec.cross_entropy(y))
    model, vel = nn.sgd_step(tiny_model, before[1], lr=1e-3)
    after = nn.value_and_grad_params(model, x, nn.LossSpec.cross_entropy(y))[0]
    assert after < before[0]
    model2, _ = nn.sgd_step(model, before[1], lr=1e-3, momentum=0.5, velocity=vel)
    np.testing.assert_allclose(model2.layers[0].w, model.layers[0].w - 1e-3 * 1.5 * before[1][0][0])


def test_serialization_round_trip_is_exact(tmp_path, deep_model):
    path = tmp_path / "m.json"
    nn.save(deep_model, path)
    back = nn.load(path)
    for a, b in zip(deep_model.layers, back.layers):
        assert np.array_equal(a.w, b.w) and np.array_equal(a.b, b.b) and a.act == b.act
    assert nn.dumps(back) == nn.dumps(deep_model)
    doc = json.loads(path.read_text())
    assert doc["k"] == 2 and doc["d"] == 2


def test_malformed_model_document():
    with pytest.raises(nn.ShapeError):
        nn.from_dict({"layers": [{"w": [[1.0]]}]})
    doc = nn.to_dict(nn.init_mlp([2, 3, 2]))
    doc["k"] = 7
    with pytest.raises(nn.ShapeError):
        nn.from_dict(doc)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_log_softmax_normalises(values):
    z = np.array([values])
    np.testing.assert_allclose(np.exp(nn.log_softmax(z)).sum(), 1.0, rtol=1e-12)
    ce, g = nn.cross_entropy(z, np.array([0]))
    assert ce[0] >= 0
    np.testing.assert_allclose(g.sum(), 0.0, atol=1e-12)
