import math

import numpy as np
import pytest

from bilevel_rl import policy_net as pn
from bilevel_rl.errors import ContractError, InputError, PolicyFormatError
from bilevel_rl.policy_net import (
    Activation,
    ControlDistribution,
    PolicyNetwork,
    forward,
    grad_log_prob,
    grad_log_prob_batch,
    log_prob,
    sample,
)
from conftest import random_net


def zero_net(input_dim=2, hidden=(3,), low=0.0, high=1.0):
    net = PolicyNetwork(input_dim, list(hidden), 1, low, high)
    net.set_theta(np.zeros(net.n_params))
    return net


def test_zero_network_outputs_low_and_floor():
    net = zero_net(low=-2.0, high=4.0)
    d = forward(net, np.array([0.3, -1.7]))
    assert d.mean[0] == -2.0
    assert d.std[0] == pytest.approx(0.06)


def test_mean_head_saturates_at_high():
    net = zero_net(low=200.0, high=500.0)
    net.biases[-2][:] = 7.0
    assert forward(net, np.zeros(2)).mean[0] == 500.0


def test_single_tanh_neuron_at_zero_propagates_zero():
    net = PolicyNetwork(1, [1], 1, 0.0, 1.0)
    net.set_theta(np.zeros(net.n_params))
    net.weights[0][:] = 1.0
    d = forward(net, np.array([0.0]))
    assert d.mean[0] == 0.0
    assert d.std[0] == net.std_floor[0]


def test_param_layout_chains_shapes():
    net = PolicyNetwork(4, [20, 20], 1, 0.0, 1.0)
    assert [w.shape for w in net.weights] == [(20, 4), (20, 20), (1, 20), (1, 20)]
    assert net.n_params == 20 * 4 + 20 + 20 * 20 + 20 + 2 * (20 + 1)
    net.theta[0] = 123.0
    assert net.weights[0][0, 0] == 123.0


def test_initial_policy_is_mid_range_and_obs_independent_std():
    net = PolicyNetwork(4, [20, 20], 1, 0.0, 1.0, seed=3, init_std_frac=0.1)
    X = np.random.default_rng(0).normal(size=(50, 4))
    d = forward(net, X)
    assert np.allclose(d.std, 0.1)
    assert np.all((d.mean > 0.2) & (d.mean < 0.8))


def test_forward_errors():
    net = zero_net()
    with pytest.raises(ContractError):
        forward(net, np.zeros(3))
    with pytest.raises(InputError):
        forward(net, np.array([np.nan, 0.0]))


def test_forward_is_pure():
    net = random_net(1)
    x = np.array([0.1, -0.4, 2.0])
    a, b = forward(net, x), forward(net, x)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)


def test_sample_seeded_and_clipped():
    net = zero_net()
    dist = ControlDistribution(np.array([1.0]), np.array([0.5]))
    r1 = sample(net, dist, np.random.default_rng(7))
    r2 = sample(net, dist, np.random.default_rng(7))
    assert np.array_equal(r1[0], r2[0])
    raws = []
    for s in range(200):
        raw, clipped = sample(net, dist, np.random.default_rng(s))
        assert clipped[0] <= 1.0
        raws.append(raw[0])
    assert max(raws) > 1.0


def test_sample_mean_law_of_large_numbers():
    net = PolicyNetwork(1, [2], 1, -100.0, 100.0)
    mu, sigma = 3.0, 2.0
    dist = ControlDistribution(np.full(100_000, mu), np.full(100_000, sigma))
    raw, _ = sample(net, dist, np.random.default_rng(11))
    assert abs(raw.mean() - mu) < 5 * sigma / math.sqrt(1e5)


def test_log_prob_closed_forms():
    half_log_2pi = 0.5 * math.log(2 * math.pi)
    d = ControlDistribution(np.array([0.3]), np.array([1.0]))
    assert log_prob(d, [0.3]) == pytest.approx(-half_log_2pi, abs=1e-15)
    assert log_prob(d, [0.3]) == pytest.approx(-0.918939, abs=1e-6)
    d2 = ControlDistribution(np.array([0.3]), np.array([2.5]))
    assert log_prob(d2, [2.8]) == pytest.approx(-half_log_2pi - math.log(2.5) - 0.5, abs=1e-14)
    d3 = ControlDistribution(np.array([0.3]), np.array([5.0]))
    assert log_prob(d2, [0.3]) - log_prob(d3, [0.3]) == pytest.approx(math.log(2.0), abs=1e-14)


def test_log_prob_sums_controls():
    d = ControlDistribution(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    assert log_prob(d, [0.0, 1.0]) == pytest.approx(-math.log(2 * math.pi), abs=1e-14)


def _fd_grad(net, obs, u, h=1e-5):
    base = net.theta.copy()
    g = np.zeros_like(base)
    for i in range(base.size):
        net.theta[:] = base
        net.theta[i] += h
        lp_plus = log_prob(forward(net, obs), u)
        net.theta[i] -= 2 * h
        lp_minus = log_prob(forward(net, obs), u)
        g[i] = (lp_plus - lp_minus) / (2 * h)
    net.theta[:] = base
    return g


@pytest.mark.parametrize("seed", range(8))
def test_grad_log_prob_matches_finite_differences(seed):
    net = random_net(seed, hidden=(4, 3), scale=0.5)
    net.biases[-2][:] = 3.0
    net.biases[-1][:] = 0.3
    rng = np.random.default_rng(100 + seed)
    obs = rng.normal(size=3)
    u = forward(net, obs).mean + rng.normal(0, 0.3, size=2)
    g = grad_log_prob(net, obs, u)
    fd = _fd_grad(net, obs, u)
    assert np.allclose(g, fd, rtol=1e-4, atol=1e-7 * max(1.0, np.abs(fd).max()))


def test_zero_network_mean_path_gradient_vanishes():
    net = zero_net()
    obs = np.array([0.5, -0.5])
    g = grad_log_prob(net, obs, forward(net, obs).mean)
    gw, gb = net.split(g)
    assert np.all(gw[-2] == 0.0) and np.all(gb[-2] == 0.0)


def test_last_layer_mean_bias_gradient_hand_computed():
    # no hidden layers: zm = w x + b; mean = low + zm * span / 6 inside (0, 6)
    net = PolicyNetwork(1, [], 1, -3.0, 3.0)
    net.set_theta(np.array([0.5, 2.0, 0.0, 0.2]))
    obs = np.array([1.0])
    u = np.array([1.7])
    d = forward(net, obs)
    mean, std = -3.0 + 2.5 * 1.0, 0.2 * 6.0
    assert d.mean[0] == pytest.approx(mean) and d.std[0] == pytest.approx(std)
    score_mu = (u[0] - mean) / std**2
    g = grad_log_prob(net, obs, u)
    assert g[1] == pytest.approx(score_mu * 1.0, rel=1e-12)
    assert g[0] == pytest.approx(score_mu * 1.0 * obs[0], rel=1e-12)
    score_sigma = -1.0 / std + (u[0] - mean) ** 2 / std**3
    assert g[3] == pytest.approx(score_sigma * 6.0, rel=1e-12)


def test_gradient_zero_below_std_floor():
    net = PolicyNetwork(1, [], 1, 0.0, 1.0)
    net.set_theta(np.array([0.0, 3.0, 0.0, 1e-4]))
    g = grad_log_prob(net, np.array([1.0]), np.array([0.7]))
    assert g[2] == 0.0 and g[3] == 0.0


def test_batch_gradient_is_weighted_sum():
    net = random_net(4)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 3))
    U = rng.normal(size=(6, 2))
    w = rng.normal(size=6)
    total = sum(w[i] * grad_log_prob(net, X[i], U[i]) for i in range(6))
    assert np.allclose(grad_log_prob_batch(net, X, U, w), total, rtol=1e-12, atol=1e-14)


def test_activation_kinks():
    z = np.array([0.0, 6.0, 3.0, -1.0])
    assert list(pn.activation_grad(z, Activation.RELU6)) == [0.0, 0.0, 1.0, 0.0]
    assert list(pn.activation_grad(np.array([0.0, 1.0]), Activation.LEAKY_RELU)) == [0.01, 1.0]


def test_serialize_round_trip_bitwise():
    net = random_net(9)
    net.obs_mean = np.array([1.0, 2.0, 3.0])
    net.obs_std = np.array([0.5, 1.5, 2.0])
    back = pn.deserialize(pn.serialize(net))
    X = np.random.default_rng(1).normal(size=(100, 3))
    a, b = forward(net, X), forward(back, X)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)
    assert np.array_equal(back.obs_std, net.obs_std)


def test_serialized_field_names():
    payload = pn.to_dict(zero_net())
    for key in ("input_dim", "layers", "weights", "biases", "action_low", "action_high", "std_floor"):
        assert key in payload
    assert payload["layers"][-2:] == [{"width": 1, "activation": "relu6"}, {"width": 1, "activation": "leaky_relu"}]


def test_truncated_payload_is_rejected():
    text = pn.serialize(random_net(2))
    with pytest.raises(PolicyFormatError):
        pn.deserialize(text[: len(text) // 2])


def test_bad_field_is_named():
    payload = pn.to_dict(random_net(2))
    payload["weights"][1] = payload["weights"][1][:-1]
    with pytest.raises(PolicyFormatError, match=r"weights\[1\]"):
        pn.from_dict(payload)
    payload = pn.to_dict(random_net(2))
    del payload["std_floor"]
    with pytest.raises(PolicyFormatError, match="std_floor"):
        pn.from_dict(payload)


def test_compiled_forward_matches_numpy():
    net = random_net(5)
    x = np.array([0.2, -1.0, 0.7])
    mean, std = np.zeros(2), np.zeros(2)
    args = net.kernel_args()
    pn.policy_forward_one(*args[:7], x, mean, std, np.empty((2, 5)))
    d = forward(net, x)
    assert np.allclose(mean, d.mean, rtol=0, atol=1e-13)
    assert np.allclose(std, d.std, rtol=0, atol=1e-13)
