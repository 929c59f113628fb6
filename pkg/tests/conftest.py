import numpy as np

from bilevel_rl.policy_net import PolicyNetwork


def random_net(seed, input_dim=3, hidden=(5, 4), n_controls=2, low=-1.0, high=2.0, scale=0.7):
    """Small network with randomised heads (not the mid-range init)."""
    rng = np.random.default_rng(seed)
    net = PolicyNetwork(input_dim, list(hidden), n_controls, low, high, seed=seed)
    net.set_theta(rng.normal(0.0, scale, net.n_params))
    return net


def hold_valve(obs, t):
    """Feed-forward valve ``F_in / V_SP``: keeps the tank at V_SP when started there."""
    return obs[0] / obs[1]


def closed_valve(obs, t):
    return 0.0


BANDIT_SPAN = 40.0


def bandit_policy(theta):
    """One-input, no-hidden-layer policy on [-20, 20]; theta = (w_mean, b_mean, w_std, b_std)."""
    net = PolicyNetwork(1, [], 1, -BANDIT_SPAN / 2, BANDIT_SPAN / 2)
    net.set_theta(np.asarray(theta, dtype=float))
    return net


def bandit_true_gradient(theta, c):
    """Gradient of E[-(u - c)^2] = -((mu - c)^2 + sigma^2) for the bandit policy at obs 1.

    Valid where the mean head is unsaturated and the std is above its floor.
    """
    wm, bm, ws, bs = theta
    zm, zs = wm + bm, ws + bs
    assert 0.0 < zm < 6.0
    mu = -BANDIT_SPAN / 2 + zm * BANDIT_SPAN / 6
    s = zs if zs > 0 else 0.01 * zs
    sigma = abs(s) * BANDIT_SPAN
    assert sigma > 0.01 * BANDIT_SPAN
    dmu = BANDIT_SPAN / 6
    dsigma = BANDIT_SPAN * np.sign(s) * (1.0 if zs > 0 else 0.01)
    g_mu = -2.0 * (mu - c) * dmu
    g_sigma = -2.0 * sigma * dsigma
    return np.array([g_mu, g_mu, g_sigma, g_sigma])


def bandit_estimates(theta, c, n_batches, k, seed):
    """Reinforce estimates from ``n_batches`` batches of ``k`` one-step episodes."""
    from bilevel_rl.policy_net import forward
    from bilevel_rl.training import policy_gradient

    net = bandit_policy(theta)
    rng = np.random.default_rng(seed)
    d = forward(net, np.ones(1))
    obs = np.ones((k, 1, 1))
    out = np.zeros((n_batches, net.n_params))
    for b in range(n_batches):
        u = d.mean[0] + d.std[0] * rng.standard_normal(k)
        J = -((u - c) ** 2)
        out[b], _ = policy_gradient(net, obs, u.reshape(k, 1, 1), J)
    return out


class LaggedHold:
    """``hold_valve`` acting on an inflow reading ``lag`` steps old; fails for large F_dev."""

    def __init__(self, lag):
        self.lag = lag
        self.buf = []

    def reset(self):
        self.buf = []

    def __call__(self, obs, t):
        self.buf.append(obs[0])
        return self.buf[max(0, len(self.buf) - 1 - self.lag)] / obs[1]


ACCEPTANCE = {}


def record(n, ok, detail):
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
