import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resitta import nn, oracle
from resitta.nn import BatchNorm, Conv2d, Dense, Flatten, Network, NormMode, ReLU


def small_net(dtype=np.float64, seed=0):
    layers = [Conv2d(2, 3, 3), BatchNorm(3), ReLU(), Flatten(), Dense(3 * 4 * 4, 4), ReLU(), Dense(4, 3)]
    return Network(layers, (2, 4, 4), 3, dtype=dtype, seed=seed)


def test_zero_weight_dense_gives_zero_logits():
    net = Network([Dense(5, 3)], (5,), 3)
    net.params[:] = 0
    out = net.forward(np.random.default_rng(0).normal(size=(4, 5)))
    assert np.all(out == 0)


def test_unit_stats_identity_bn_is_near_identity():
    bn = BatchNorm(2)
    net = Network([bn, Flatten(), Dense(18, 2)], (2, 3, 3), 2, dtype=np.float64)
    x = np.random.default_rng(1).normal(size=(4, 2, 3, 3))
    out = bn.forward(x, net._views[0], NormMode.EVAL_TARGET)
    np.testing.assert_allclose(out, x / np.sqrt(1 + bn.eps), rtol=1e-12)


def test_train_batch_bn_output_stats_match_affine():
    rng = np.random.default_rng(2)
    net = Network([BatchNorm(3), Flatten(), Dense(3 * 5 * 5, 2)], (3, 5, 5), 2, dtype=np.float64)
    bn = net.layers[0]
    gamma, beta = np.array([0.5, 2.0, 1.5]), np.array([-1.0, 0.3, 4.0])
    bn.state.gamma[:] = gamma
    bn.state.beta[:] = beta
    x = rng.normal(3, 2, size=(16, 3, 5, 5))
    y = bn.forward(x, net._views[0], NormMode.TRAIN_BATCH)
    m, v = oracle.two_pass_stats(y)
    np.testing.assert_allclose(m, beta, atol=1e-4)
    np.testing.assert_allclose(v, gamma**2, atol=1e-4 * 4)
    # pre-affine activations are standardized
    m0, v0 = oracle.two_pass_stats(bn._xhat)
    assert np.all(np.abs(m0) < 1e-4) and np.all(np.abs(v0 - 1) < 1e-3)
    assert bn.last_batch_stats is not None


def test_shape_mismatch_names_layer():
    with pytest.raises(nn.ShapeError, match="layer 1"):
        Network([Conv2d(2, 3), BatchNorm(4)], (2, 4, 4), 3)
    net = small_net()
    with pytest.raises(nn.ShapeError, match="layer 0"):
        net.forward(np.zeros((2, 3, 4, 4)))


def test_backward_without_forward():
    with pytest.raises(RuntimeError):
        small_net().backward(np.zeros((1, 3)))


def test_constant_loss_zero_tape():
    net = small_net()
    net.forward(np.ones((2, 2, 4, 4)))
    tape = net.backward(np.zeros((2, 3)))
    assert len(tape.grads) == net.num_params and not tape.grads.any()


def test_linear_chain_rule():
    net = Network([Dense(1, 1)], (1,), 1, dtype=np.float64)
    net.params[:] = [0.7, 0.0]
    net.forward(np.array([[3.0]]))
    g = net.backward(np.ones((1, 1))).view(net, 0, "weight")
    assert g.item() == pytest.approx(3.0)


@pytest.mark.parametrize("mode", [NormMode.TRAIN_BATCH, NormMode.EVAL_TARGET, NormMode.EVAL_SOURCE])
def test_gradient_check_f64(mode):
    rng = np.random.default_rng(3)
    net = small_net()
    x, y = rng.normal(size=(6, 2, 4, 4)), rng.integers(0, 3, 6)
    theta0 = net.params.copy()

    def f(theta):
        net.params[:] = theta
        return nn.softmax_cross_entropy(net.forward(x, mode), y)[0]

    # h=1e-3 is dominated by truncation error through batch statistics of 6 samples
    fd = oracle.finite_diff_grad(f, theta0, h=1e-5)
    net.params[:] = theta0
    _, g = nn.softmax_cross_entropy(net.forward(x, mode), y)
    got = net.backward(g).grads
    rel = np.abs(got - fd) / np.maximum(np.abs(fd), 1e-6)
    assert np.mean(rel < 1e-5) >= 0.99


def test_gradient_check_f32_probe():
    rng = np.random.default_rng(4)
    net = small_net(np.float32, seed=5)
    x, y = rng.normal(size=(64, 2, 4, 4)), rng.integers(0, 3, 64)
    theta0 = net.params.astype(np.float64)
    f64 = small_net(np.float64)
    f64.params[:] = theta0

    def f(theta):
        f64.params[:] = theta
        return nn.softmax_cross_entropy(f64.forward(x, NormMode.TRAIN_BATCH), y)[0]

    fd = oracle.finite_diff_grad(f, theta0, h=1e-5)
    _, g = nn.softmax_cross_entropy(net.forward(x, NormMode.TRAIN_BATCH), y)
    got = net.backward(g).grads.astype(np.float64)
    ok = np.abs(got - fd) <= 1e-3 * np.abs(fd) + 1e-4
    assert np.mean(ok) >= 0.99


def test_cross_entropy_examples():
    assert nn.cross_entropy([0, 1, 0], [0, 1, 0]) <= 1e-11
    assert nn.cross_entropy([0, 0, 1, 0], [0.25] * 4) == pytest.approx(np.log(4))
    assert nn.cross_entropy([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.8369, abs=1e-4)
    with pytest.raises(ValueError):
        nn.cross_entropy([0.5, 0.5], [1.0])


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12))
def test_softmax_rows_sum_to_one(logits):
    p = nn.softmax(np.array([logits]))
    assert abs(p.sum() - 1) < 1e-6
    assert nn.cross_entropy(p[0], p[0]) == pytest.approx(-np.sum(p * np.log(np.maximum(p, 1e-12))), abs=1e-9)


def _scalar_net(theta):
    net = Network([Dense(1, 1)], (1,), 1, dtype=np.float64)
    net.params[:] = [theta, 0.0]
    return net


def test_adam_zero_gradient_is_noop():
    net = _scalar_net(1.5)
    opt = nn.AdamState.zeros(net.num_params)
    before = net.params.copy()
    nn.adam_step(net, nn.GradientTape(np.zeros(2)), opt, 1e-3)
    np.testing.assert_array_equal(net.params, before)


def test_adam_constant_gradient_monotone():
    net = _scalar_net(0.0)
    opt = nn.AdamState.zeros(2)
    trace = []
    for _ in range(50):
        nn.adam_step(net, nn.GradientTape(np.array([0.3, 0.0])), opt, 1e-2)
        trace.append(net.params[0])
    assert np.all(np.diff(trace) < 0)


def test_adam_quadratic_converges():
    net = _scalar_net(0.0)
    opt = nn.AdamState.zeros(2)
    for _ in range(2000):
        theta = net.params[0]
        nn.adam_step(net, nn.GradientTape(np.array([2 * (theta - 2), 0.0])), opt, 1e-2)
    assert abs(net.params[0] - 2) < 1e-2


def test_adam_skips_non_finite():
    net = _scalar_net(1.0)
    opt = nn.AdamState.zeros(2)
    assert not nn.adam_step(net, nn.GradientTape(np.array([np.nan, 0.0])), opt, 1e-3)
    assert opt.skipped == 1 and net.params[0] == 1.0


def test_forward_deterministic_and_copy_independent():
    net = nn.toy_backbone(seed=3)
    x = np.random.default_rng(0).normal(size=(4, 3, 8, 8)).astype(np.float32)
    a = net.forward(x, NormMode.EVAL_SOURCE)
    clone = net.copy()
    np.testing.assert_array_equal(a, clone.forward(x, NormMode.EVAL_SOURCE))
    clone.params += 1
    clone.norm_layers[0].state.gamma[:] = 5
    np.testing.assert_array_equal(a, net.forward(x, NormMode.EVAL_SOURCE))
    # gamma stays a view into the flat parameter store
    assert clone.norm_layers[0].state.gamma.base is not None


def test_checkpoint_round_trip(tmp_path):
    net = nn.toy_backbone(seed=9)
    for bn in net.norm_layers:
        bn.state.mu_s[:] = np.arange(bn.channels) * 0.1
    path = tmp_path / "ck.bin"
    nn.save_checkpoint(net, path)
    back = nn.load_checkpoint(path)
    assert nn.checkpoint_bytes(back) == path.read_bytes()
    np.testing.assert_array_equal(back.params, net.params)
    assert back.describe() == net.describe()
    with pytest.raises(ValueError):
        nn.checkpoint_from_bytes(b"garbage")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_finite_on_random_inputs(seed):
    rng = np.random.default_rng(seed)
    net = small_net(seed=seed % 1000)
    out = net.forward(rng.normal(size=(3, 2, 4, 4)), NormMode.TRAIN_BATCH)
    assert out.shape == (3, 3) and np.all(np.isfinite(out))
