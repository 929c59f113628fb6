"""Feed-forward Gaussian policy with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector ``theta``; ``weights`` and
``biases`` are views into it, so an optimizer can update ``theta`` in place.
Layout, per layer in order (hidden layers, then mean head, then std head)::

    W (rows = layer width, cols = fan-in, row-major), b (layer width)

The mean head uses ReLU6 and is mapped affinely from [0, 6] onto the actuator
range.  The std head uses LeakyReLU; its output is scaled by the actuator
range, made positive with ``abs`` and floored at ``std_floor``.
"""

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ._accel import njit
from .errors import ContractError, InputError, PolicyFormatError

LEAKY_SLOPE = 0.01
LOG_2PI = math.log(2.0 * math.pi)


class Activation(str, Enum):
    TANH = "tanh"
    RELU6 = "relu6"
    LEAKY_RELU = "leaky_relu"
    LINEAR = "linear"

    @property
    def code(self):
        return _ACT_CODES[self]


_ACT_CODES = {
    Activation.TANH: 0,
    Activation.RELU6: 1,
    Activation.LEAKY_RELU: 2,
    Activation.LINEAR: 3,
}


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: Activation = Activation.TANH

    def __post_init__(self):
        if int(self.width) != self.width or self.width < 1:
            raise ContractError(f"layer width must be a positive integer, got {self.width!r}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "activation", Activation(self.activation))


@dataclass
class ControlDistribution:
    mean: np.ndarray
    std: np.ndarray


# -- activations ------------------------------------------------------------


def activate(z, act):
    act = Activation(act)
    if act is Activation.TANH:
        return np.tanh(z)
    if act is Activation.RELU6:
        return np.clip(z, 0.0, 6.0)
    if act is Activation.LEAKY_RELU:
        return np.where(z > 0.0, z, LEAKY_SLOPE * z)
    return np.asarray(z, dtype=float).copy()


def activation_grad(z, act):
    """Derivative of ``activate`` w.r.t. its input.

    Kinks resolve deterministically: ReLU6 has slope 0 at 0 and 6, LeakyReLU
    takes the negative-side slope at 0.
    """
    act = Activation(act)
    if act is Activation.TANH:
        t = np.tanh(z)
        return 1.0 - t * t
    if act is Activation.RELU6:
        return ((z > 0.0) & (z < 6.0)).astype(float)
    if act is Activation.LEAKY_RELU:
        return np.where(z > 0.0, 1.0, LEAKY_SLOPE)
    return np.ones_like(z, dtype=float)


# -- network ----------------------------------------------------------------


class PolicyNetwork:
    """Stochastic feedback law mapping an observation to a Gaussian control.

    ``obs_mean``/``obs_std`` are the frozen normalisation statistics applied
    by rollouts before :func:`forward`; they travel with the serialised
    policy.
    """

    def __init__(
        self,
        input_dim,
        hidden,
        n_controls,
        action_low,
        action_high,
        *,
        std_floor=None,
        theta=None,
        obs_mean=None,
        obs_std=None,
        seed=0,
        init_std_frac=0.1,
    ):
        if int(input_dim) < 1 or int(n_controls) < 1:
            raise ContractError("input_dim and n_controls must be >= 1")
        self.input_dim = int(input_dim)
        self.n_controls = int(n_controls)
        self.hidden = [h if isinstance(h, LayerSpec) else LayerSpec(h) for h in hidden]
        self.action_low = np.broadcast_to(np.asarray(action_low, float), (self.n_controls,)).copy()
        self.action_high = np.broadcast_to(np.asarray(action_high, float), (self.n_controls,)).copy()
        if np.any(self.action_high <= self.action_low):
            raise ContractError("action_high must exceed action_low")
        span = self.action_high - self.action_low
        if std_floor is None:
            std_floor = 0.01 * span
        self.std_floor = np.broadcast_to(np.asarray(std_floor, float), (self.n_controls,)).copy()
        if np.any(self.std_floor <= 0.0):
            raise ContractError("std_floor must be positive")

        self.obs_mean = np.zeros(self.input_dim) if obs_mean is None else np.asarray(obs_mean, float).copy()
        self.obs_std = np.ones(self.input_dim) if obs_std is None else np.asarray(obs_std, float).copy()
        if self.obs_mean.shape != (self.input_dim,) or self.obs_std.shape != (self.input_dim,):
            raise ContractError("normalisation statistics must have length input_dim")

        self._shapes = self._layer_shapes()
        n_params = sum(r * c + r for r, c in self._shapes)
        if theta is None:
            self.theta = self._initial_theta(seed, init_std_frac)
        else:
            theta = np.asarray(theta, dtype=float)
            if theta.shape != (n_params,):
                raise ContractError(f"theta has shape {theta.shape}, expected ({n_params},)")
            self.theta = theta.copy()
        self._bind_views()

    # layout ---------------------------------------------------------------

    @property
    def layers(self):
        """All layers including the two heads."""
        return self.hidden + [
            LayerSpec(self.n_controls, Activation.RELU6),
            LayerSpec(self.n_controls, Activation.LEAKY_RELU),
        ]

    def _layer_shapes(self):
        shapes = []
        fan_in = self.input_dim
        for spec in self.hidden:
            shapes.append((spec.width, fan_in))
            fan_in = spec.width
        shapes.append((self.n_controls, fan_in))
        shapes.append((self.n_controls, fan_in))
        return shapes

    def _bind_views(self):
        self.weights, self.biases = [], []
        offset = 0
        for rows, cols in self._shapes:
            self.weights.append(self.theta[offset:offset + rows * cols].reshape(rows, cols))
            offset += rows * cols
            self.biases.append(self.theta[offset:offset + rows])
            offset += rows

    def _initial_theta(self, seed, init_std_frac):
        rng = np.random.default_rng(seed)
        parts = []
        for rows, cols in self._shapes:
            bound = 1.0 / math.sqrt(cols)
            parts.append(rng.uniform(-bound, bound, size=rows * cols))
            parts.append(rng.uniform(-bound, bound, size=rows))
        theta = np.concatenate(parts)
        self.theta = theta
        self._bind_views()
        # mean head starts mid-range, std head obs-independent
        self.biases[-2][:] = 3.0
        self.weights[-1][:] = 0.0
        self.biases[-1][:] = init_std_frac
        return self.theta

    @property
    def n_params(self):
        return self.theta.size

    def set_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ContractError(f"theta has shape {theta.shape}, expected {self.theta.shape}")
        self.theta[:] = theta

    def split(self, flat):
        """View a flat parameter-shaped vector as per-layer (weights, biases)."""
        ws, bs = [], []
        offset = 0
        for rows, cols in self._shapes:
            ws.append(flat[offset:offset + rows * cols].reshape(rows, cols))
            offset += rows * cols
            bs.append(flat[offset:offset + rows])
            offset += rows
        return ws, bs

    def copy(self):
        return PolicyNetwork(
            self.input_dim,
            list(self.hidden),
            self.n_controls,
            self.action_low,
            self.action_high,
            std_floor=self.std_floor,
            theta=self.theta,
            obs_mean=self.obs_mean,
            obs_std=self.obs_std,
        )

    def kernel_args(self):
        """Flat arrays consumed by the compiled rollout kernels."""
        sizes = np.array([self.input_dim] + [h.width for h in self.hidden], dtype=np.int64)
        codes = np.array([h.activation.code for h in self.hidden], dtype=np.int64)
        return (
            self.theta,
            sizes,
            codes,
            self.n_controls,
            self.action_low,
            self.action_high,
            self.std_floor,
            self.obs_mean,
            self.obs_std,
        )

    def normalize(self, obs):
        return (np.asarray(obs, float) - self.obs_mean) / self.obs_std

    def __repr__(self):
        widths = [h.width for h in self.hidden]
        return f"PolicyNetwork(input_dim={self.input_dim}, hidden={widths}, n_controls={self.n_controls})"


# -- forward / distribution ---------------------------------------------------


def _check_obs(net, obs):
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != net.input_dim:
        raise ContractError(f"observation has length {obs.shape[-1]}, network expects {net.input_dim}")
    if not np.all(np.isfinite(obs)):
        raise InputError("observation contains non-finite values")
    return obs


def _forward_cache(net, X):
    """Batched forward pass keeping pre-activations for backprop."""
    hs = [X]
    zs = []
    h = X
    for spec, W, b in zip(net.hidden, net.weights, net.biases):
        z = h @ W.T + b
        zs.append(z)
        h = activate(z, spec.activation)
        hs.append(h)
    zm = h @ net.weights[-2].T + net.biases[-2]
    zsd = h @ net.weights[-1].T + net.biases[-1]
    span = net.action_high - net.action_low
    mean = net.action_low + activate(zm, Activation.RELU6) * (span / 6.0)
    s = activate(zsd, Activation.LEAKY_RELU)
    std = np.maximum(np.abs(s) * span, net.std_floor)
    return mean, std, (hs, zs, zm, zsd, s)


def forward(net, obs):
    """Control distribution for a normalised observation (or a batch of them)."""
    obs = _check_obs(net, obs)
    single = obs.ndim == 1
    mean, std, _ = _forward_cache(net, np.atleast_2d(obs))
    if single:
        return ControlDistribution(mean[0], std[0])
    return ControlDistribution(mean, std)


def sample(net, dist, rng):
    """Draw a control; returns ``(raw, clipped)``.

    The raw Gaussian draw is what :func:`log_prob` scores; the clipped value
    is what the plant receives.
    """
    raw = dist.mean + dist.std * rng.standard_normal(np.shape(dist.mean))
    return raw, np.clip(raw, net.action_low, net.action_high)


def log_prob(dist, u):
    u = np.asarray(u, dtype=float)
    z = (u - dist.mean) / dist.std
    return np.sum(-0.5 * LOG_2PI - np.log(dist.std) - 0.5 * z * z, axis=-1)


def _backward(net, cache, g_zm, g_zsd):
    """Accumulate parameter gradients from head pre-activation gradients."""
    hs, zs, _, _, _ = cache
    grad = np.zeros_like(net.theta)
    gw, gb = net.split(grad)
    h_last = hs[-1]
    gw[-2][:] = g_zm.T @ h_last
    gb[-2][:] = g_zm.sum(axis=0)
    gw[-1][:] = g_zsd.T @ h_last
    gb[-1][:] = g_zsd.sum(axis=0)
    gh = g_zm @ net.weights[-2] + g_zsd @ net.weights[-1]
    for i in range(len(net.hidden) - 1, -1, -1):
        gz = gh * activation_grad(zs[i], net.hidden[i].activation)
        gw[i][:] = gz.T @ hs[i]
        gb[i][:] = gz.sum(axis=0)
        if i > 0:
            gh = gz @ net.weights[i]
    return grad


def grad_log_prob_batch(net, obs, u, weights=None):
    """``sum_b weights[b] * grad_theta log pi(u[b] | obs[b])`` as a flat vector."""
    X = _check_obs(net, np.atleast_2d(obs))
    U = np.asarray(u, dtype=float).reshape(X.shape[0], net.n_controls)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, float).reshape(-1)
    mean, std, cache = _forward_cache(net, X)
    _, _, zm, zsd, s = cache
    span = net.action_high - net.action_low
    diff = U - mean
    dlp_dmean = diff / std**2
    dlp_dstd = -1.0 / std + diff**2 / std**3
    dmean_dzm = activation_grad(zm, Activation.RELU6) * (span / 6.0)
    above_floor = np.abs(s) * span > net.std_floor
    dstd_dzsd = np.where(above_floor, np.sign(s) * span * activation_grad(zsd, Activation.LEAKY_RELU), 0.0)
    g_zm = w[:, None] * dlp_dmean * dmean_dzm
    g_zsd = w[:, None] * dlp_dstd * dstd_dzsd
    return _backward(net, cache, g_zm, g_zsd)


def grad_log_prob(net, obs, u):
    """Exact gradient of ``log_prob(forward(net, obs), u)`` w.r.t. ``net.theta``."""
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 1:
        raise ContractError("grad_log_prob takes a single observation; use grad_log_prob_batch")
    return grad_log_prob_batch(net, obs[None, :], np.atleast_1d(u)[None, :])


def grad_mean_loss(net, obs, g_mean):
    """Backpropagate ``dLoss/dmean`` (batch x n_controls) to the parameters."""
    X = _check_obs(net, np.atleast_2d(obs))
    _, _, cache = _forward_cache(net, X)
    span = net.action_high - net.action_low
    g_zm = np.asarray(g_mean, float) * activation_grad(cache[2], Activation.RELU6) * (span / 6.0)
    return _backward(net, cache, g_zm, np.zeros_like(g_zm))


# -- compiled single-observation forward --------------------------------------


@njit
def _act(z, code):
    if code == 0:
        return math.tanh(z)
    if code == 1:
        return min(max(z, 0.0), 6.0)
    if code == 2:
        return z if z > 0.0 else LEAKY_SLOPE * z
    return z


@njit
def policy_forward_one(theta, sizes, codes, n_c, low, high, floor, x, mean, std, work):
    """Mean and std for one already-normalised observation, written in place.

    ``work`` is a (2, max(sizes)) scratch array so the hot loop never allocates.
    """
    width = sizes[0]
    for c in range(width):
        work[0, c] = x[c]
    cur = 0
    off = 0
    for layer in range(sizes.shape[0] - 1):
        rows = sizes[layer + 1]
        nxt = 1 - cur
        for r in range(rows):
            acc = 0.0
            base = off + r * width
            for c in range(width):
                acc += theta[base + c] * work[cur, c]
            work[nxt, r] = _act(acc + theta[off + rows * width + r], codes[layer])
        off += rows * width + rows
        cur = nxt
        width = rows
    off_std = off + n_c * width + n_c
    for j in range(n_c):
        zm = 0.0
        zs = 0.0
        for c in range(width):
            zm += theta[off + j * width + c] * work[cur, c]
            zs += theta[off_std + j * width + c] * work[cur, c]
        zm += theta[off + n_c * width + j]
        zs += theta[off_std + n_c * width + j]
        span = high[j] - low[j]
        mean[j] = low[j] + min(max(zm, 0.0), 6.0) * (span / 6.0)
        s = zs if zs > 0.0 else LEAKY_SLOPE * zs
        std[j] = max(abs(s) * span, floor[j])


# -- serialisation ------------------------------------------------------------


def to_dict(net):
    return {
        "input_dim": net.input_dim,
        "layers": [{"width": s.width, "activation": s.activation.value} for s in net.layers],
        "weights": [w.ravel().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "action_low": net.action_low.tolist(),
        "action_high": net.action_high.tolist(),
        "std_floor": net.std_floor.tolist(),
        "obs_mean": net.obs_mean.tolist(),
        "obs_std": net.obs_std.tolist(),
    }


def serialize(net):
    return json.dumps(to_dict(net), separators=(",", ":"))


def _field(payload, key, required=True):
    if key not in payload:
        if required:
            raise PolicyFormatError(key, "missing")
        return None
    return payload[key]


def _float_list(value, field, length=None):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise PolicyFormatError(field, "expected a list of numbers") from None
    if arr.ndim != 1 or (length is not None and arr.size != length):
        raise PolicyFormatError(field, f"expected {length} numbers")
    if not np.all(np.isfinite(arr)):
        raise PolicyFormatError(field, "non-finite value")
    return arr


def from_dict(payload):
    if not isinstance(payload, dict):
        raise PolicyFormatError("<root>", "expected a JSON object")
    input_dim = _field(payload, "input_dim")
    if not isinstance(input_dim, int) or input_dim < 1:
        raise PolicyFormatError("input_dim", "expected a positive integer")
    raw_layers = _field(payload, "layers")
    if not isinstance(raw_layers, list) or len(raw_layers) < 2:
        raise PolicyFormatError("layers", "expected hidden layers followed by mean and std heads")
    specs = []
    for i, item in enumerate(raw_layers):
        try:
            specs.append(LayerSpec(item["width"], item["activation"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise PolicyFormatError(f"layers[{i}]", str(exc)) from None
    *hidden, mean_head, std_head = specs
    if mean_head.activation is not Activation.RELU6 or std_head.activation is not Activation.LEAKY_RELU:
        raise PolicyFormatError("layers", "heads must be relu6 (mean) then leaky_relu (std)")
    if mean_head.width != std_head.width:
        raise PolicyFormatError("layers", "head widths differ")
    n_c = mean_head.width

    weights = _field(payload, "weights")
    biases = _field(payload, "biases")
    if not isinstance(weights, list) or len(weights) != len(specs):
        raise PolicyFormatError("weights", f"expected {len(specs)} weight matrices")
    if not isinstance(biases, list) or len(biases) != len(specs):
        raise PolicyFormatError("biases", f"expected {len(specs)} bias vectors")
    parts = []
    fan_in = input_dim
    for i, spec in enumerate(specs):
        parts.append(_float_list(weights[i], f"weights[{i}]", spec.width * fan_in))
        parts.append(_float_list(biases[i], f"biases[{i}]", spec.width))
        if i < len(hidden):
            fan_in = spec.width
    kwargs = {}
    for key in ("obs_mean", "obs_std"):
        value = _field(payload, key, required=False)
        if value is not None:
            kwargs[key] = _float_list(value, key, input_dim)
    try:
        return PolicyNetwork(
            input_dim,
            hidden,
            n_c,
            _float_list(_field(payload, "action_low"), "action_low", n_c),
            _float_list(_field(payload, "action_high"), "action_high", n_c),
            std_floor=_float_list(_field(payload, "std_floor"), "std_floor", n_c),
            theta=np.concatenate(parts),
            **kwargs,
        )
    except ContractError as exc:
        raise PolicyFormatError("<root>", str(exc)) from None


def deserialize(text):
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyFormatError("<json>", f"malformed JSON ({exc.msg} at char {exc.pos})") from None
    return from_dict(payload)


def save(net, path):
    from .io import atomic_write_text

    atomic_write_text(path, serialize(net))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return deserialize(fh.read())
