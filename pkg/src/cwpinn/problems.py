"""Benchmark PDE problems described as data.

Every problem carries its box domain, the network architectures, a
hard-constraint transform from raw network outputs to the predicted fields,
a residual operator over second-order jets of those fields, any fixed loss
terms (boundary, observation) and an analytic or quadrature oracle for the
true solution.

Coordinates are ordered with time first for evolution problems: ``(t, x)``
or ``(t, x, y)``; the inverse Poisson problem uses ``(x, y)``.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from .diffnet import Jet, NetworkConfig, coordinates, mlp, network_jets
from .diffnet import cos as jcos
from .diffnet import exp as jexp
from .diffnet import sin as jsin

REGIONS = ("interior", "boundary", "initial")

BURGERS_NU = 0.01 / math.pi


@dataclass(frozen=True)
class FixedLoss:
    """A mean-squared penalty ``weight * mean((field - targets)**2)``."""

    kind: str
    points: np.ndarray
    targets: np.ndarray
    weight: float
    field: int = 0

    def __post_init__(self):
        if self.kind not in ("boundary", "initial", "observation"):
            raise ValueError(f"unknown fixed-loss kind {self.kind!r}")
        if len(self.points) != len(self.targets):
            raise ValueError("fixed-loss points and targets differ in length")


@dataclass(frozen=True)
class ObservationSet:
    points: np.ndarray
    values: np.ndarray
    noise_variance: float

    def __post_init__(self):
        if len(self.points) != len(self.values):
            raise ValueError("observation points and values differ in length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observation values must be finite")


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    name: str
    coord_names: tuple[str, ...]
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    networks: tuple[NetworkConfig, ...]
    field_names: tuple[str, ...]
    pairs: tuple[tuple[int, int], ...]
    hard_constraint: Callable
    residual_operator: Callable
    exact_solution: Callable | None = None
    fixed_losses: tuple[FixedLoss, ...] = ()
    time_dependent: bool = True
    observations: ObservationSet | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        lo = np.asarray(self.domain_lo, dtype=np.float64)
        hi = np.asarray(self.domain_hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.shape != (len(self.coord_names),):
            raise ValueError("domain bounds must match the coordinate count")
        if not np.all(lo < hi):
            raise ValueError("domain_lo must be strictly below domain_hi")
        object.__setattr__(self, "domain_lo", lo)
        object.__setattr__(self, "domain_hi", hi)

    @property
    def input_dim(self) -> int:
        return len(self.coord_names)

    @property
    def regions(self) -> tuple[str, ...]:
        return REGIONS if self.time_dependent else ("interior", "boundary")

    def contains(self, points, atol=0.0) -> np.ndarray:
        points = np.asarray(points)
        return np.all((points >= self.domain_lo - atol) & (points <= self.domain_hi + atol), axis=1)


# --------------------------------------------------------------------------
# traceable evaluation helpers


def predict_fields(problem: ProblemSpec, params, X):
    """Hard-constrained predictions, shape (n, n_fields); traceable."""
    raw = tuple(mlp(p, c, X)[:, 0] for p, c in zip(params, problem.networks))
    fields = problem.hard_constraint(coordinates(X), raw)
    return jnp.stack(fields, axis=1)


def field_jets(problem: ProblemSpec, params, X) -> tuple[Jet, ...]:
    coords = coordinates(X, problem.pairs)
    raw = tuple(network_jets(p, c, X, problem.pairs)[0] for p, c in zip(params, problem.networks))
    return tuple(problem.hard_constraint(coords, raw))


def residuals(problem: ProblemSpec, params, X):
    """Signed PDE residuals at the points ``X``; traceable."""
    return problem.residual_operator(X, field_jets(problem, params, X))


def fixed_loss_terms(problem: ProblemSpec, params):
    """Weighted fixed-loss values, one per term; traceable."""
    terms = []
    for term in problem.fixed_losses:
        pred = predict_fields(problem, params, jnp.asarray(term.points))[:, term.field]
        terms.append(term.weight * jnp.mean((pred - jnp.asarray(term.targets)) ** 2))
    return terms


def exact_jets(X, solution: Callable, pairs) -> tuple[Jet, ...]:
    """Jets of an analytic solution written over coordinate jets."""
    coords = coordinates(jnp.asarray(X), pairs)
    out = solution(coords)
    return out if isinstance(out, tuple) else (out,)


# --------------------------------------------------------------------------
# 1D heat equation


def heat_solution(coords):
    t, x = coords
    return jexp(-t) * jsin(20 * math.pi * x)


def heat1d(hidden_layers: int = 4, hidden_width: int = 80) -> ProblemSpec:
    """u_t = u_xx / (400 pi^2) on [0, 1]^2 with every condition hard-enforced."""

    def constraint(coords, raw):
        t, x = coords
        (u_nn,) = raw
        return (t * x * (1 - x) * u_nn + jsin(20 * math.pi * x),)

    def residual(X, fields):
        (u,) = fields
        return u.d(0) - u.d2(1, 1) / (400 * math.pi**2)

    def exact(X):
        X = np.asarray(X)
        return (np.exp(-X[:, 0]) * np.sin(20 * np.pi * X[:, 1]))[:, None]

    return ProblemSpec(
        name="heat1d",
        coord_names=("t", "x"),
        domain_lo=np.array([0.0, 0.0]),
        domain_hi=np.array([1.0, 1.0]),
        networks=(NetworkConfig(2, 1, hidden_layers, hidden_width),),
        field_names=("u",),
        pairs=((1, 1),),
        hard_constraint=constraint,
        residual_operator=residual,
        exact_solution=exact,
    )


# --------------------------------------------------------------------------
# 2D Klein-Gordon equation


def kg_solution(coords):
    t, x, y = coords
    return (x + y) * jcos(t) + x * y * jsin(t)


def kg_source(X):
    # u_tt = -u and the Laplacian vanishes, so f = u^2 - u
    u = kg_solution(coordinates(X))
    return u * u - u


def klein_gordon2d(
    n_boundary: int = 300,
    seed: int = 0,
    t_max: float = 10.0,
    boundary_weight: float = 100.0,
    hidden_layers: int = 4,
    hidden_width: int = 80,
) -> ProblemSpec:
    """u_tt - (u_xx + u_yy) + u^2 = f on [0, t_max] x [0, 1]^2.

    The initial value is hard-enforced; the lateral boundary is penalised
    against the analytic solution with ``boundary_weight``.
    """

    def constraint(coords, raw):
        t, x, y = coords
        (u_nn,) = raw
        return (t * u_nn + x + y,)

    def residual(X, fields):
        (u,) = fields
        return u.d2(0, 0) - u.d2(1, 1) - u.d2(2, 2) + u.val**2 - kg_source(X)

    def exact(X):
        return np.asarray(kg_solution(coordinates(np.asarray(X))))[:, None]

    spec = ProblemSpec(
        name="kg2d",
        coord_names=("t", "x", "y"),
        domain_lo=np.array([0.0, 0.0, 0.0]),
        domain_hi=np.array([t_max, 1.0, 1.0]),
        networks=(NetworkConfig(3, 1, hidden_layers, hidden_width),),
        field_names=("u",),
        pairs=((0, 0), (1, 1), (2, 2)),
        hard_constraint=constraint,
        residual_operator=residual,
        exact_solution=exact,
        options={"t_max": t_max},
    )
    if n_boundary:
        pts = sample_uniform(spec, n_boundary, "boundary", _stream_seed(seed, "fixed"))
        bc = FixedLoss("boundary", pts, exact(pts)[:, 0], boundary_weight)
        object.__setattr__(spec, "fixed_losses", (bc,))
    return spec


# --------------------------------------------------------------------------
# 1D viscous Burgers equation


_HERMITE_NODES, _HERMITE_WEIGHTS = np.polynomial.hermite.hermgauss(200)


def burgers_reference(t, x, nu: float = BURGERS_NU) -> np.ndarray:
    """Viscous Burgers solution for u(0, x) = -sin(pi x) via Cole-Hopf.

    u(t, x) = -E[sin(pi y) phi(y)] / E[phi(y)] with y = x - sqrt(4 nu t) s,
    s ~ exp(-s^2), phi(y) = exp(-cos(pi y) / (2 pi nu)); both expectations
    use 200-node Gauss-Hermite quadrature, with the exponent shifted by its
    maximum to avoid overflow.
    """
    t, x = np.broadcast_arrays(np.asarray(t, dtype=np.float64), np.asarray(x, dtype=np.float64))
    out = np.empty(t.shape)
    flat_t, flat_x, flat_out = t.reshape(-1), x.reshape(-1), out.reshape(-1)
    initial = flat_t <= 0.0
    flat_out[initial] = -np.sin(np.pi * flat_x[initial])
    idx = np.nonzero(~initial)[0]
    for chunk in np.array_split(idx, max(1, len(idx) // 4096)):
        if chunk.size == 0:
            continue
        sigma = np.sqrt(4.0 * nu * flat_t[chunk])[:, None]
        y = flat_x[chunk, None] - sigma * _HERMITE_NODES
        log_phi = -np.cos(np.pi * y) / (2.0 * np.pi * nu)
        kernel = _HERMITE_WEIGHTS * np.exp(log_phi - log_phi.max(axis=1, keepdims=True))
        flat_out[chunk] = -(np.sin(np.pi * y) * kernel).sum(axis=1) / kernel.sum(axis=1)
    return out


def burgers1d(constraint: str = "printed", hidden_layers: int = 7, hidden_width: int = 20) -> ProblemSpec:
    """u_t + u u_x = (0.01/pi) u_xx on t in [0, 1], x in [-1, 1].

    ``constraint="printed"`` uses t (x - 1)^2 u_nn - sin(pi x), which pins
    x = 1 only; ``"symmetric"`` uses t (1 - x^2) u_nn - sin(pi x).
    """
    if constraint not in ("printed", "symmetric"):
        raise ValueError(f"burgers constraint must be 'printed' or 'symmetric', got {constraint!r}")

    def hard(coords, raw):
        t, x = coords
        (u_nn,) = raw
        factor = (x - 1) * (x - 1) if constraint == "printed" else 1 - x * x
        return (t * factor * u_nn - jsin(math.pi * x),)

    def residual(X, fields):
        (u,) = fields
        return u.d(0) + u.val * u.d(1) - BURGERS_NU * u.d2(1, 1)

    def exact(X):
        X = np.asarray(X)
        return burgers_reference(X[:, 0], X[:, 1])[:, None]

    return ProblemSpec(
        name="burgers1d",
        coord_names=("t", "x"),
        domain_lo=np.array([0.0, -1.0]),
        domain_hi=np.array([1.0, 1.0]),
        networks=(NetworkConfig(2, 1, hidden_layers, hidden_width),),
        field_names=("u",),
        pairs=((1, 1),),
        hard_constraint=hard,
        residual_operator=residual,
        exact_solution=exact,
        options={"burgers_constraint": constraint},
    )


# --------------------------------------------------------------------------
# inverse Poisson problem


def poisson_coefficient(coords):
    x, y = coords
    return 1.0 / (1 + x * x + y * y + (x - 1) * (x - 1) + (y - 1) * (y - 1))


def poisson_solution(coords):
    x, y = coords
    return jsin(math.pi * x) * jsin(math.pi * y)


def poisson_source(X):
    """Closed-form source term for -div(a grad u) = f."""
    x, y = X[:, 0], X[:, 1]
    D = 1 + x**2 + y**2 + (x - 1) ** 2 + (y - 1) ** 2
    pi = math.pi
    return (2 * pi**2 * jnp.sin(pi * x) * jnp.sin(pi * y) / D
            + 2 * pi * ((2 * x - 1) * jnp.cos(pi * x) * jnp.sin(pi * y)
                        + (2 * y - 1) * jnp.cos(pi * y) * jnp.sin(pi * x)) / D**2)


def poisson_inverse2d(
    n_obs: int = 60,
    n_boundary_per_edge: int = 10,
    noise_variance: float = 0.01,
    obs_weight: float = 10.0,
    boundary_weight: float = 10.0,
    seed: int = 0,
    hidden_layers: int = 4,
    hidden_width: int = 50,
) -> ProblemSpec:
    """Recover a(x, y) in -div(a grad u) = f from noisy samples of u.

    Two networks: the first predicts u, the second a. Observation noise is
    drawn once here from the experiment seed and then frozen.
    """

    def hard(coords, raw):
        return tuple(raw)

    def residual(X, fields):
        u, a = fields
        return -(a.d(0) * u.d(0) + a.d(1) * u.d(1) + a.val * (u.d2(0, 0) + u.d2(1, 1))) - poisson_source(X)

    def exact(X):
        coords = coordinates(np.asarray(X))
        return np.stack([np.asarray(poisson_solution(coords)), np.asarray(poisson_coefficient(coords))], axis=1)

    net = NetworkConfig(2, 1, hidden_layers, hidden_width)
    spec = ProblemSpec(
        name="poisson-inv",
        coord_names=("x", "y"),
        domain_lo=np.array([0.0, 0.0]),
        domain_hi=np.array([1.0, 1.0]),
        networks=(net, net),
        field_names=("u", "a"),
        pairs=((0, 0), (1, 1)),
        hard_constraint=hard,
        residual_operator=residual,
        exact_solution=exact,
        time_dependent=False,
    )
    terms = []
    observations = None
    if n_obs:
        pts = sample_uniform(spec, n_obs, "interior", _stream_seed(seed, "fixed"))
        noise_rng = np.random.default_rng(_stream_seed(seed, "noise"))
        values = exact(pts)[:, 0] + noise_rng.normal(0.0, math.sqrt(noise_variance), size=n_obs)
        observations = ObservationSet(pts, values, noise_variance)
        terms.append(FixedLoss("observation", pts, values, obs_weight, field=0))
    if n_boundary_per_edge:
        s = np.linspace(0.0, 1.0, n_boundary_per_edge)
        zeros, ones = np.zeros_like(s), np.ones_like(s)
        edges = np.concatenate([
            np.stack([s, zeros], 1), np.stack([s, ones], 1), np.stack([zeros, s], 1), np.stack([ones, s], 1),
        ])
        terms.append(FixedLoss("boundary", edges, exact(edges)[:, 1], boundary_weight, field=1))
    object.__setattr__(spec, "fixed_losses", tuple(terms))
    object.__setattr__(spec, "observations", observations)
    return spec


# --------------------------------------------------------------------------
# sampling

_STREAMS = {"init": 1, "collocation": 2, "neighbors": 3, "noise": 4, "fixed": 5, "test": 6}


def _stream_seed(seed: int, stream: str) -> list[int]:
    """Entropy for one independent RNG stream of an experiment seed."""
    return [int(seed), _STREAMS[stream]]


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(_stream_seed(seed, stream))


def sample_uniform(problem: ProblemSpec, n: int, region: str = "interior", seed=0) -> np.ndarray:
    """I.i.d. uniform points in the interior, spatial boundary or initial slice.

    Boundary points are spread over the faces of the spatial boundary (times
    the time interval for evolution problems) in proportion to face area.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if region not in problem.regions:
        raise ValueError(f"region {region!r} is not defined for problem {problem.name!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = problem.domain_lo, problem.domain_hi
    pts = lo + (hi - lo) * rng.random((n, problem.input_dim))
    if region == "initial":
        pts[:, 0] = lo[0]
    elif region == "boundary":
        first = 1 if problem.time_dependent else 0
        spatial = range(first, problem.input_dim)
        faces = [(k, side) for k in spatial for side in (0, 1)]
        widths = hi - lo
        areas = np.array([np.prod(np.delete(widths, k)) for k, _ in faces])
        choice = rng.choice(len(faces), size=n, p=areas / areas.sum())
        for f, (k, side) in enumerate(faces):
            mask = choice == f
            pts[mask, k] = hi[k] if side else lo[k]
    return pts


def sample_test_points(problem: ProblemSpec, n: int = 90_000, seed: int = 0) -> np.ndarray:
    return sample_uniform(problem, n, "interior", stream_rng(seed, "test"))


# --------------------------------------------------------------------------
# registry

PROBLEMS = {
    "heat1d": heat1d,
    "kg2d": klein_gordon2d,
    "burgers1d": burgers1d,
    "poisson-inv": poisson_inverse2d,
}


def get_problem(name: str, **kwargs) -> ProblemSpec:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; available: {sorted(PROBLEMS)}") from None
    return factory(**kwargs)


def grid_points(problem: ProblemSpec, shape: tuple[int, ...]) -> np.ndarray:
    """Tensor grid over the domain box, first coordinate varying slowest."""
    if len(shape) != problem.input_dim:
        raise ValueError(f"grid needs {problem.input_dim} sizes, got {len(shape)}")
    axes = [np.linspace(lo, hi, k) for lo, hi, k in zip(problem.domain_lo, problem.domain_hi, shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def export_reference_csv(problem: ProblemSpec, shape: tuple[int, ...], path) -> None:
    """Write the true solution on a grid: coordinates..., then one column per field."""
    if problem.exact_solution is None:
        raise ValueError(f"problem {problem.name!r} has no reference solution")
    pts = grid_points(problem, shape)
    truth = problem.exact_solution(pts)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(problem.coord_names) + list(problem.field_names))
        for row_pts, row_truth in zip(pts, truth):
            writer.writerow([repr(float(v)) for v in row_pts] + [repr(float(v)) for v in row_truth])
