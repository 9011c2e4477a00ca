import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ploff.errors import ValidationError
from ploff.nets import (
    ACTIVATIONS,
    Adam,
    Mlp,
    backward,
    forward,
    hard_update,
    init_mlp,
    mlp_from_tensors,
    mlp_tensors,
    polyak_update,
)
from ploff.seeding import substream
from ploff.verify import finite_difference_grads, max_relative_error


def scalar_loss(mlp, x):
    out, _ = forward(mlp, x)
    return float(np.sum(out * out))


@given(
    hidden=st.integers(2, 6),
    act=st.sampled_from(ACTIVATIONS),
    seed=st.integers(0, 40),
)
@settings(max_examples=20, deadline=None)
def test_param_grads_match_finite_differences(hidden, act, seed):
    rng = substream(seed, "test-mlp-fd")
    mlp = init_mlp((3, hidden, 2), (act, "identity"), rng)
    x = rng.standard_normal((4, 3))
    out, cache = forward(mlp, x)
    analytic, _ = backward(mlp, cache, 2.0 * out)
    numeric = finite_difference_grads(lambda: scalar_loss(mlp, x), mlp.params())
    assert max_relative_error(analytic, numeric) <= 1e-5


def test_input_grads_match_finite_differences():
    rng = substream(7, "test-mlp-input-fd")
    mlp = init_mlp((3, 5, 2), ("tanh", "elu"), rng)
    x = rng.standard_normal((2, 3))
    out, cache = forward(mlp, x)
    _, input_grads = backward(mlp, cache, 2.0 * out)
    eps = 1e-6
    numeric = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += eps
            xm[i, j] -= eps
            numeric[i, j] = (scalar_loss(mlp, xp) - scalar_loss(mlp, xm)) / (2 * eps)
    assert max_relative_error(input_grads, numeric) <= 1e-5


def test_elu_is_stable_for_large_negative_inputs():
    mlp = Mlp([np.eye(2)], [np.zeros(2)], ("elu",))
    x = np.array([[-1e6, 3.0]])
    out, cache = forward(mlp, x)
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(-1.0, abs=1e-12)
    assert out[0, 1] == 3.0
    _, gin = backward(mlp, cache, np.ones_like(out))
    assert np.all(np.isfinite(gin))
    assert gin[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_init_bounds_follow_fan_in():
    rng = substream(2, "test-init")
    mlp = init_mlp((16, 8, 1), ("relu", "identity"), rng)
    for w, b, fan_in in zip(mlp.weights, mlp.biases, (16, 8)):
        bound = 1.0 / np.sqrt(fan_in)
        assert np.max(np.abs(w)) <= bound
        assert np.max(np.abs(b)) <= bound
    # not degenerate
    assert np.std(mlp.weights[0]) > 0


def test_forward_validates_shape():
    rng = substream(3, "test-shape")
    mlp = init_mlp((3, 2), ("identity",), rng)
    with pytest.raises(ValidationError):
        forward(mlp, np.zeros((4, 5)))
    with pytest.raises(ValidationError):
        forward(mlp, np.zeros(3))


def test_adam_matches_reference_formula():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, 0.25])
    opt = Adam.for_params([p], lr=0.1)
    opt.step([p], [g])
    # after one step: m_hat = g, v_hat = g^2, so the update is
    # lr * g / (|g| + eps), a signed step of almost exactly lr
    want = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p, want, atol=1e-12)
    assert opt.t == 1

    opt2 = Adam.for_params([np.zeros(2)], lr=0.1)
    with pytest.raises(ValidationError):
        opt2.step([np.zeros(2), np.zeros(2)], [g, g])


def test_adam_two_steps_track_manual_state():
    rng = substream(4, "test-adam")
    p = rng.standard_normal(3)
    ref = p.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    opt = Adam.for_params([p], lr=0.01)
    for t in (1, 2):
        g = rng.standard_normal(3)
        opt.step([p], [g])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.allclose(p, ref, atol=1e-14)


@pytest.mark.parametrize("tau,mix", [(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)])
def test_polyak_update_algebra(tau, mix):
    rng = substream(5, "test-polyak")
    online = init_mlp((3, 4, 2), ("relu", "identity"), rng)
    target = init_mlp((3, 4, 2), ("relu", "identity"), rng)
    before = [p.copy() for p in target.params()]
    polyak_update(target, online, tau)
    for tp, b, op in zip(target.params(), before, online.params()):
        assert np.allclose(tp, (1 - mix) * b + mix * op, atol=1e-15)


def test_polyak_rejects_bad_tau():
    rng = substream(6, "test-polyak-bad")
    net = init_mlp((2, 2), ("identity",), rng)
    with pytest.raises(ValidationError):
        polyak_update(net.copy(), net, 1.5)


def test_hard_update_copies_values_not_references():
    rng = substream(8, "test-hard")
    online = init_mlp((2, 3), ("tanh",), rng)
    target = init_mlp((2, 3), ("tanh",), rng)
    hard_update(target, online)
    for tp, op in zip(target.params(), online.params()):
        assert np.array_equal(tp, op)
        assert tp is not op
    online.weights[0][0, 0] += 1.0
    assert target.weights[0][0, 0] != online.weights[0][0, 0]


def test_copy_is_deep():
    rng = substream(9, "test-copy")
    net = init_mlp((2, 2), ("relu",), rng)
    dup = net.copy()
    dup.weights[0][0, 0] += 5.0
    assert net.weights[0][0, 0] != dup.weights[0][0, 0]


def test_tensor_round_trip():
    rng = substream(10, "test-tensors")
    net = init_mlp((3, 4, 2), ("elu", "identity"), rng)
    tensors = mlp_tensors(net, "critic")
    assert set(tensors) == {"critic.w0", "critic.b0", "critic.w1", "critic.b1"}
    rebuilt = mlp_from_tensors(tensors, "critic", ("elu", "identity"))
    x = rng.standard_normal((5, 3))
    assert np.array_equal(forward(net, x)[0], forward(rebuilt, x)[0])
    with pytest.raises(ValidationError):
        mlp_from_tensors(tensors, "actor", ("elu", "identity"))


def test_mlp_rejects_unknown_activation():
    with pytest.raises(ValidationError):
        Mlp([np.eye(2)], [np.zeros(2)], ("softmax",))
    with pytest.raises(ValidationError):
        init_mlp((2,), (), substream(0, "x"))
