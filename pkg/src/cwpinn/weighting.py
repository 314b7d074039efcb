"""Per-point residual weights and their update rules.

The rules are written over plain arrays so the same code runs eagerly on
numpy inputs and inside the jitted training step on jax inputs. Weight
updates read absolute residuals; the training loss uses squared residuals.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

logger = logging.getLogger(__name__)

SCHEMES = ("uniform", "sa", "rba", "cw", "cwp", "cwp_fix")
CW_FAMILY = ("cw", "cwp", "cwp_fix")
RESAMPLING_SCHEMES = ("cwp", "cwp_fix")
SA_FLOOR = 1e-12
MAX_REJECTIONS = 1000


def _xp(*arrays):
    return jnp if any(isinstance(a, jax.Array) for a in arrays) else np


def cw_rule(lambdas, smoothed, eta_lambda):
    """Convex step towards the sum-normalised smoothed residuals.

    An all-zero ``smoothed`` vector leaves the weights untouched. Eager
    inputs use a correctly rounded total, so the result does not depend on
    point order.
    """
    xp = _xp(lambdas, smoothed)
    total = math.fsum(smoothed) if xp is np else xp.sum(smoothed)
    positive = total > 0
    share = smoothed / xp.where(positive, total, 1.0)
    return xp.where(positive, (1.0 - eta_lambda) * lambdas + eta_lambda * share, lambdas)


def rba_rule(lambdas, abs_residuals, eta_lambda, eta_star):
    """Decay plus l-infinity normalised residual magnitude."""
    xp = _xp(lambdas, abs_residuals)
    peak = xp.max(abs_residuals)
    positive = peak > 0
    share = abs_residuals / xp.where(positive, peak, 1.0)
    return xp.where(positive, (1.0 - eta_lambda) * lambdas + eta_star * share, lambdas)


def sa_rule(lambdas, residuals, sa_lr):
    """One gradient-ascent step on sum(lambda * r**2) with respect to lambda."""
    xp = _xp(lambdas, residuals)
    return xp.maximum(lambdas + sa_lr * residuals * residuals, SA_FLOOR)


def initial_lambdas(scheme: str, n: int) -> np.ndarray:
    if scheme in CW_FAMILY:
        return np.full(n, 1.0 / n)
    if scheme == "rba":
        return np.zeros(n)
    if scheme in ("uniform", "sa"):
        return np.ones(n)
    raise ValueError(f"unknown weighting scheme {scheme!r}; choose from {SCHEMES}")


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "cwp"
    eta_lambda: float = 1e-3
    eta_star: float | None = None
    M: int = 4
    epsilon: float = 0.01
    sa_lr: float = 1e-3

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown weighting scheme {self.scheme!r}; choose from {SCHEMES}")
        if not 0.0 < self.eta_lambda < 1.0:
            raise ValueError("eta_lambda must lie in (0, 1)")
        if self.eta_star is not None and self.eta_star <= 0:
            raise ValueError("eta_star must be positive")
        if self.M < 0:
            raise ValueError("M must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.sa_lr <= 0:
            raise ValueError("sa_lr must be positive")

    @property
    def rba_eta_star(self) -> float:
        return self.eta_lambda if self.eta_star is None else self.eta_star

    def initial_state(self, n: int) -> "WeightState":
        return WeightState(initial_lambdas(self.scheme, n), **self.__dict__)


@dataclass(frozen=True)
class WeightState:
    lambdas: np.ndarray
    scheme: str = "cwp"
    eta_lambda: float = 1e-3
    eta_star: float | None = None
    M: int = 4
    epsilon: float = 0.01
    sa_lr: float = 1e-3

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=np.float64)
        if lam.ndim != 1:
            raise ValueError("lambdas must be a vector")
        if not np.all(np.isfinite(lam)) or np.any(lam < 0):
            raise ValueError("lambdas must be finite and non-negative")
        object.__setattr__(self, "lambdas", lam)
        self.config  # validates the scheme parameters

    @property
    def config(self) -> SchemeConfig:
        return SchemeConfig(self.scheme, self.eta_lambda, self.eta_star, self.M, self.epsilon, self.sa_lr)


@dataclass(frozen=True)
class SmoothedResiduals:
    """Neighbourhood-averaged absolute residuals plus the raw samples behind them.

    ``points`` are the locations whose residual entered as the centre term and
    ``neighbor_points``/``neighbor_residuals`` hold the M draws per point.
    """

    values: np.ndarray
    points: np.ndarray
    center_residuals: np.ndarray
    neighbor_points: np.ndarray
    neighbor_residuals: np.ndarray
    iteration: int | None = None
    centers: np.ndarray | None = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return self.neighbor_points.shape[1]


def draw_neighbors(centers, M: int, epsilon: float, lo, hi, rng: np.random.Generator) -> np.ndarray:
    """M uniform draws per centre from the open ball of radius epsilon, kept inside the box.

    Returns an array of shape (n, M, d). Draws landing outside the box are
    re-drawn; a slot rejected ``MAX_REJECTIONS`` times in a row is an error.
    """
    centers = np.asarray(centers, dtype=np.float64)
    n, d = centers.shape
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    out = np.empty((n * M, d))
    base = np.repeat(centers, M, axis=0)
    pending = np.arange(n * M)
    for _ in range(MAX_REJECTIONS):
        if pending.size == 0:
            return out.reshape(n, M, d)
        direction = rng.standard_normal((pending.size, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = epsilon * rng.random(pending.size) ** (1.0 / d)
        cand = base[pending] + radius[:, None] * direction
        ok = np.all((cand >= lo) & (cand <= hi), axis=1)
        out[pending[ok]] = cand[ok]
        pending = pending[~ok]
    if pending.size:
        raise RuntimeError(
            f"neighbour sampling rejected {MAX_REJECTIONS} consecutive draws for {pending.size} slots; "
            "is the domain degenerate relative to epsilon?"
        )
    return out.reshape(n, M, d)


def smoothing_average(center_abs, neighbor_abs):
    """(|r(x_i)| + sum_j |r(x_j)|) / (M + 1) for arrays (n,) and (n, M)."""
    xp = _xp(center_abs, neighbor_abs)
    M = neighbor_abs.shape[1]
    return (center_abs + xp.sum(neighbor_abs, axis=1)) / (M + 1)


def smooth_residuals(
    residual_fn: Callable[[np.ndarray], np.ndarray],
    points,
    M: int,
    epsilon: float,
    domain: tuple,
    seed=0,
    centers=None,
    iteration: int | None = None,
) -> SmoothedResiduals:
    """Monte-Carlo neighbourhood average of |r| at every point.

    ``residual_fn`` maps an (n, d) batch to n residuals. Neighbours are drawn
    around ``centers`` (defaults to ``points``); the fixed-neighbourhood
    variant passes its frozen original centres here.
    """
    if M < 0:
        raise ValueError("M must be non-negative")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    points = np.asarray(points, dtype=np.float64)
    centers = points if centers is None else np.asarray(centers, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = domain
    n, d = points.shape
    nbrs = draw_neighbors(centers, M, epsilon, lo, hi, rng)
    batch = np.concatenate([points, nbrs.reshape(-1, d)])
    r = np.abs(np.asarray(residual_fn(batch), dtype=np.float64)).reshape(-1)
    center_abs = r[:n]
    nbr_abs = r[n:].reshape(n, M)
    return SmoothedResiduals(
        values=smoothing_average(center_abs, nbr_abs),
        points=points,
        center_residuals=center_abs,
        neighbor_points=nbrs,
        neighbor_residuals=nbr_abs,
        iteration=iteration,
        centers=centers,
    )


def update_cw(state: WeightState, smoothed: SmoothedResiduals) -> WeightState:
    if state.scheme not in CW_FAMILY:
        raise ValueError(f"update_cw applies to {CW_FAMILY}, not {state.scheme!r}")
    values = np.asarray(smoothed.values, dtype=np.float64)
    if values.shape != state.lambdas.shape:
        raise ValueError("smoothed residuals and weights differ in length")
    if not np.any(values > 0):
        logger.info("all smoothed residuals vanish; weights left unchanged")
        return state
    return replace(state, lambdas=cw_rule(state.lambdas, values, state.eta_lambda))


def update_rba(state: WeightState, residuals) -> WeightState:
    if state.scheme != "rba":
        raise ValueError(f"update_rba applies to the rba scheme, not {state.scheme!r}")
    r = np.abs(np.asarray(residuals, dtype=np.float64))
    if r.shape != state.lambdas.shape:
        raise ValueError("residuals and weights differ in length")
    if not np.any(r > 0):
        logger.info("all residuals vanish; weights left unchanged")
        return state
    return replace(state, lambdas=rba_rule(state.lambdas, r, state.eta_lambda, state.config.rba_eta_star))


def update_sa(state: WeightState, residuals) -> WeightState:
    if state.scheme != "sa":
        raise ValueError(f"update_sa applies to the sa scheme, not {state.scheme!r}")
    r = np.asarray(residuals, dtype=np.float64)
    if r.shape != state.lambdas.shape:
        raise ValueError("residuals and weights differ in length")
    return replace(state, lambdas=sa_rule(state.lambdas, r, state.sa_lr))


def weighted_residual_loss(lambdas, residuals):
    """sum_i lambda_i r_i**2 with the weights held constant under differentiation."""
    if np.shape(lambdas) != np.shape(residuals):
        raise ValueError(f"weights {np.shape(lambdas)} and residuals {np.shape(residuals)} differ in shape")
    return jnp.sum(jax.lax.stop_gradient(jnp.asarray(lambdas)) * jnp.square(residuals))
