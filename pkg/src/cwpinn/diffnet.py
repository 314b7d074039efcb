"""Differentiable multilayer perceptrons with exact input jets.

Parameters of one network live in a single flat float64 vector. The layout is
layer-major: for every layer the weight matrix of shape ``(fan_out, fan_in)``
in row-major order, followed by its bias. Input derivatives up to second order
are obtained by propagating truncated Taylor streams through the layers, and
parameter gradients by reverse accumulation (``jax.grad``) over that
propagation, so derivatives-of-derivatives come out exact.
"""

from __future__ import annotations

import functools
import math
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

jax.config.update("jax_enable_x64", True)

ACTIVATIONS = ("tanh",)
CHECKPOINT_MAGIC = b"PINNCW1"


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    output_dim: int
    hidden_layers: int
    hidden_width: int
    activation: str = "tanh"

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "hidden_layers", "hidden_width"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}; choose from {ACTIVATIONS}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))


def unpack(params, config: NetworkConfig):
    """Split a flat parameter vector into ``[(W, b), ...]`` views."""
    layers = []
    offset = 0
    sizes = config.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = params[offset:offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def init_params(config: NetworkConfig, seed: int) -> np.ndarray:
    """Glorot-uniform weights and zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    chunks = []
    sizes = config.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def check_params(params, config: NetworkConfig) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != config.n_params:
        raise ValueError(f"expected a flat vector of {config.n_params} parameters, got shape {params.shape}")
    if not np.all(np.isfinite(params)):
        raise ValueError("parameter vector contains non-finite entries")
    return params


def check_points(points, dim: int) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points.reshape(1, -1)
    if points.ndim != 2 or points.shape[1] != dim:
        raise ValueError(f"expected points of shape (n, {dim}), got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("input points contain non-finite entries")
    return points


# Taylor coefficients of tanh(z) / z in powers of z**2
_TANH_SERIES = (1.0, -1.0 / 3, 2.0 / 15, -17.0 / 315, 62.0 / 2835, -1382.0 / 155925,
                21844.0 / 6081075, -929569.0 / 638512875)


@jax.custom_jvp
def tanh(z):
    """tanh from one exp plus a short series near zero (within a few ulp).

    XLA's float64 tanh on CPU is an order of magnitude slower than exp, and
    activations dominate the cost of jet propagation.
    """
    a = jnp.abs(z)
    e = jnp.exp(-2.0 * jnp.minimum(a, 20.0))
    z2 = z * z
    series = _TANH_SERIES[-1]
    for c in _TANH_SERIES[-2::-1]:
        series = series * z2 + c
    return jnp.copysign(jnp.where(a < 0.1, a * series, (1.0 - e) / (1.0 + e)), z)


@tanh.defjvp
def _tanh_jvp(primals, tangents):
    (z,), (dz,) = primals, tangents
    t = tanh(z)
    return t, (1.0 - t * t) * dz


def mlp(params, config: NetworkConfig, X):
    """Traceable MLP evaluation, ``X`` of shape (n, input_dim)."""
    layers = unpack(params, config)
    a = X
    for W, b in layers[:-1]:
        a = tanh(a @ W.T + b)
    W, b = layers[-1]
    return a @ W.T + b


@functools.partial(jax.jit, static_argnums=1)
def _forward(params, config, X):
    return mlp(params, config, X)


def forward(params, config: NetworkConfig, inputs) -> np.ndarray:
    """Evaluate the network on a batch, returning shape (n, output_dim)."""
    params = check_params(params, config)
    X = check_points(inputs, config.input_dim)
    return np.asarray(_forward(params, config, X))


# --------------------------------------------------------------------------
# Second-order jets


class Jet:
    """A scalar field with its input gradient and selected second derivatives.

    ``val`` has shape (n,), ``grad`` (n, d) and ``hess`` (n, P) where column p
    holds the mixed derivative for ``pairs[p] = (i, j)`` with ``i <= j``.
    Arithmetic follows the product and chain rules, so hard-constraint
    transforms can be written as ordinary expressions over jets.
    """

    __slots__ = ("val", "grad", "hess", "pairs")

    def __init__(self, val, grad, hess, pairs):
        self.val = val
        self.grad = grad
        self.hess = hess
        self.pairs = tuple(pairs)

    @classmethod
    def coordinate(cls, X, k, pairs):
        n, d = X.shape
        grad = jnp.zeros((n, d)).at[:, k].set(1.0)
        return cls(X[:, k], grad, jnp.zeros((n, len(pairs))), pairs)

    @classmethod
    def constant(cls, value, like: "Jet"):
        value = jnp.broadcast_to(value, like.val.shape)
        return cls(value, jnp.zeros_like(like.grad), jnp.zeros_like(like.hess), like.pairs)

    def d(self, i):
        return self.grad[:, i]

    def d2(self, i, j):
        key = (min(i, j), max(i, j))
        return self.hess[:, self.pairs.index(key)]

    def apply(self, f0, f1, f2):
        """Chain rule for an elementwise function with derivatives f1, f2."""
        v = self.val
        g1 = f1(v)
        g2 = f2(v)
        hess = jnp.stack(
            [g2 * self.grad[:, i] * self.grad[:, j] + g1 * self.hess[:, p]
             for p, (i, j) in enumerate(self.pairs)], axis=1,
        ) if self.pairs else self.hess
        return Jet(f0(v), g1[:, None] * self.grad, hess, self.pairs)

    def _lift(self, other):
        if isinstance(other, Jet):
            return other
        return Jet.constant(other, self)

    def __add__(self, other):
        other = self._lift(other)
        return Jet(self.val + other.val, self.grad + other.grad, self.hess + other.hess, self.pairs)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.val, -self.grad, -self.hess, self.pairs)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, Jet):
            # constant factor (scalar or per-point array without derivatives)
            c = jnp.asarray(other)
            cc = c[..., None] if c.ndim else c
            return Jet(self.val * c, self.grad * cc, self.hess * cc, self.pairs)
        a, b = self, other
        cols = [a.hess[:, p] * b.val + a.grad[:, i] * b.grad[:, j] + a.grad[:, j] * b.grad[:, i]
                + a.val * b.hess[:, p] for p, (i, j) in enumerate(self.pairs)]
        hess = jnp.stack(cols, axis=1) if cols else a.hess
        grad = a.grad * b.val[:, None] + a.val[:, None] * b.grad
        return Jet(a.val * b.val, grad, hess, self.pairs)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            raise TypeError("division by a jet is not supported")
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return self.apply(lambda v: other / v, lambda v: -other / v**2, lambda v: 2 * other / v**3)

    def __pow__(self, k):
        if k != 2:
            raise ValueError("only squaring is supported")
        return self * self


def _flatten_jet(jet):
    return (jet.val, jet.grad, jet.hess), jet.pairs


def _unflatten_jet(pairs, children):
    return Jet(*children, pairs)


jax.tree_util.register_pytree_node(Jet, _flatten_jet, _unflatten_jet)


def _elementwise(v, jet_fn, array_fn):
    if isinstance(v, Jet):
        return jet_fn(v)
    return array_fn(v)


def sin(v):
    return _elementwise(v, lambda j: j.apply(jnp.sin, jnp.cos, lambda x: -jnp.sin(x)), jnp.sin)


def cos(v):
    return _elementwise(v, lambda j: j.apply(jnp.cos, lambda x: -jnp.sin(x), lambda x: -jnp.cos(x)), jnp.cos)


def exp(v):
    return _elementwise(v, lambda j: j.apply(jnp.exp, jnp.exp, jnp.exp), jnp.exp)


def coordinates(X, pairs=None):
    """Coordinate functions of ``X`` as jets (or plain columns if ``pairs`` is None)."""
    if pairs is None:
        return tuple(X[:, k] for k in range(X.shape[1]))
    return tuple(Jet.coordinate(X, k, pairs) for k in range(X.shape[1]))


def all_pairs(d: int) -> tuple[tuple[int, int], ...]:
    return tuple((i, j) for i in range(d) for j in range(i, d))


def network_jets(params, config: NetworkConfig, X, pairs) -> tuple[Jet, ...]:
    """Jets of every network output at the points ``X`` (traceable).

    The value, all first-order tangents and the requested second-order
    streams are stacked along a leading axis so each layer costs a single
    matrix product.
    """
    n, d = X.shape
    pairs = tuple(pairs)
    n_pairs = len(pairs)
    stack = jnp.concatenate(
        [X[None], jnp.broadcast_to(jnp.eye(d)[:, None, :], (d, n, d)), jnp.zeros((n_pairs, n, d))], axis=0,
    )
    layers = unpack(params, config)
    for W, b in layers[:-1]:
        Z = stack @ W.T
        z = Z[0] + b
        t = tanh(z)
        s1 = 1.0 - t * t
        s2 = -2.0 * t * s1
        dz = Z[1:1 + d]
        second = [s2 * dz[i] * dz[j] + s1 * Z[1 + d + p] for p, (i, j) in enumerate(pairs)]
        stack = jnp.concatenate([t[None], s1[None] * dz] + [s[None] for s in second], axis=0)
    W, b = layers[-1]
    Z = stack @ W.T
    value = Z[0] + b
    jets = []
    for k in range(config.output_dim):
        grad = jnp.moveaxis(Z[1:1 + d, :, k], 0, 1)
        hess = jnp.moveaxis(Z[1 + d:, :, k], 0, 1)
        jets.append(Jet(value[:, k], grad, hess, pairs))
    return tuple(jets)


@dataclass(frozen=True)
class InputJet:
    value: np.ndarray  # (output_dim,)
    gradient: np.ndarray  # (output_dim, input_dim)
    hessian: np.ndarray  # (output_dim, input_dim, input_dim)


@functools.partial(jax.jit, static_argnums=1)
def _full_jets(params, config, X):
    d = config.input_dim
    pairs = all_pairs(d)
    jets = network_jets(params, config, X, pairs)
    value = jnp.stack([j.val for j in jets], axis=1)
    grad = jnp.stack([j.grad for j in jets], axis=1)
    hess = jnp.zeros(X.shape[:1] + (len(jets), d, d))
    for p, (i, j) in enumerate(pairs):
        col = jnp.stack([jet.hess[:, p] for jet in jets], axis=1)
        hess = hess.at[:, :, i, j].set(col).at[:, :, j, i].set(col)
    return value, grad, hess


def input_jets(params, config: NetworkConfig, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched value (n, o), gradient (n, o, d) and hessian (n, o, d, d)."""
    params = check_params(params, config)
    X = check_points(points, config.input_dim)
    return tuple(np.asarray(a) for a in _full_jets(params, config, X))


def input_jet(params, config: NetworkConfig, point) -> InputJet:
    """Exact value, input gradient and input Hessian of the network at one point."""
    point = np.asarray(point, dtype=np.float64).reshape(-1)
    value, grad, hess = input_jets(params, config, point[None])
    return InputJet(value[0], grad[0], hess[0])


# --------------------------------------------------------------------------
# Scalar losses over registered parameter vectors


class UnregisteredParameterError(KeyError):
    pass


class _Registry(Mapping):
    def __init__(self, values):
        self._values = values

    def __getitem__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise UnregisteredParameterError(f"loss references unregistered parameter vector {key!r}") from None

    def __iter__(self) -> Iterator:
        return iter(self._values)

    def __len__(self):
        return len(self._values)


class LossGraph:
    """A scalar loss as a pure function of named parameter vectors.

    ``fn`` receives a mapping from names to parameter arrays and must return
    a scalar built with ``jax.numpy`` (network evaluations, jets, constants).
    """

    def __init__(self, fn: Callable[[Mapping], jnp.ndarray], params: Mapping[str, np.ndarray]):
        registered = {}
        for name, vec in params.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.ndim != 1:
                raise ValueError(f"parameter vector {name!r} must be flat")
            registered[name] = vec
        self.fn = fn
        self.params = registered
        value = float(fn(_Registry({k: jnp.asarray(v) for k, v in registered.items()})))
        if not math.isfinite(value):
            raise FloatingPointError(f"loss value is not finite: {value}")
        self.value = value

    def __float__(self):
        return self.value

    def _combine(self, other: "LossGraph", a: float, b: float) -> "LossGraph":
        merged = dict(self.params)
        for name, vec in other.params.items():
            if name in merged and not np.array_equal(merged[name], vec):
                raise ValueError(f"parameter name {name!r} registered twice with different values")
            merged[name] = vec
        f, g = self.fn, other.fn
        return LossGraph(lambda p: a * f(p) + b * g(p), merged)

    def __add__(self, other):
        return self._combine(other, 1.0, 1.0)

    def __sub__(self, other):
        return self._combine(other, 1.0, -1.0)

    def __mul__(self, c):
        f = self.fn
        c = float(c)
        return LossGraph(lambda p: c * f(p), self.params)

    __rmul__ = __mul__


def param_gradient(loss: LossGraph) -> dict[str, np.ndarray]:
    """Exact gradient of the loss with respect to every registered vector."""
    values = {k: jnp.asarray(v) for k, v in loss.params.items()}
    grads = jax.grad(lambda p: loss.fn(_Registry(p)))(values)
    return {k: np.asarray(g) for k, g in grads.items()}


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, configs: Sequence[NetworkConfig], params: Sequence[np.ndarray]) -> None:
    """Write networks to the binary checkpoint format.

    Layout: ``PINNCW1\\n``, the network count as decimal text and a newline,
    one line per network ``input_dim output_dim hidden_layers hidden_width
    activation``, then every parameter vector in order as little-endian
    float64.
    """
    if len(configs) != len(params):
        raise ValueError("one parameter vector per network config is required")
    lines = [CHECKPOINT_MAGIC, str(len(configs)).encode()]
    for c in configs:
        lines.append(f"{c.input_dim} {c.output_dim} {c.hidden_layers} {c.hidden_width} {c.activation}".encode())
    header = b"\n".join(lines) + b"\n"
    payload = b"".join(check_params(p, c).astype("<f8").tobytes() for c, p in zip(configs, params))
    Path(path).write_bytes(header + payload)


def load_checkpoint(path) -> tuple[list[NetworkConfig], list[np.ndarray]]:
    data = Path(path).read_bytes()
    magic, _, rest = data.partition(b"\n")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {magic[:16]!r})")
    count, _, rest = rest.partition(b"\n")
    configs = []
    for _ in range(int(count)):
        line, _, rest = rest.partition(b"\n")
        i, o, h, w, act = line.decode().split()
        configs.append(NetworkConfig(int(i), int(o), int(h), int(w), act))
    expected = sum(c.n_params for c in configs) * 8
    if len(rest) != expected:
        raise ValueError(f"{path}: payload has {len(rest)} bytes, expected {expected}")
    flat = np.frombuffer(rest, dtype="<f8").astype(np.float64)
    params, offset = [], 0
    for c in configs:
        params.append(flat[offset:offset + c.n_params].copy())
        offset += c.n_params
    return configs, params
