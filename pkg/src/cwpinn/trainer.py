"""Alternating primal-dual training loop.

Each iteration takes one Adam step on the network parameters with the
current point weights held fixed, then refreshes the weights from residuals
at the updated parameters, and every ``resample_K`` steps moves the
collocation points (resampling schemes only).

The weight refresh after step k and the gradient of step k + 1 need the
residuals at the same parameters and points, so unless the points move in
between, both are computed from a single forward pass.
"""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from .diffnet import init_params, load_checkpoint, save_checkpoint
from .metrics import TestSet, TrainingRecord, evaluate
from .problems import ProblemSpec, fixed_loss_terms, residuals, sample_uniform, stream_rng
from .resampling import CollocationSet, best_candidates, should_resample
from .weighting import (
    CW_FAMILY, SchemeConfig, WeightState, cw_rule, draw_neighbors, rba_rule, sa_rule,
    smoothing_average, weighted_residual_loss,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 50_000
    lr0: float = 1.5e-3
    decay_factor: float = 0.8
    decay_every: int = 2000
    lr_floor: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_update_stride: int = 1  # 0 disables weight updates
    resample_K: int = 200  # 0 disables resampling
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be at least 1")
        if self.lr_floor < 0:
            raise ValueError("lr_floor must be non-negative")
        if self.weight_update_stride < 0 or self.resample_K < 0:
            raise ValueError("strides must be non-negative")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be at least 1")


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Staircase exponential decay, optionally held at ``lr_floor``."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    lr = config.lr0 * config.decay_factor ** (iteration // config.decay_every)
    return max(config.lr_floor, lr) if config.lr_floor > 0 else lr


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(theta, grad, m, v, step, lr, beta1, beta2, eps):
    """Bias-corrected Adam on flat arrays; ``step`` is the 1-based step count."""
    xp = jnp if isinstance(theta, jax.Array) else np
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return theta - lr * m_hat / (xp.sqrt(v_hat) + eps), m, v


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam step over one or several parameter vectors sharing a state."""
    single = isinstance(params, np.ndarray) and params.ndim == 1
    plist = [params] if single else list(params)
    glist = [grads] if single else list(grads)
    if [np.shape(p) for p in plist] != [np.shape(g) for g in glist]:
        raise ValueError("parameter and gradient shapes differ")
    theta = np.concatenate([np.asarray(p, dtype=np.float64) for p in plist])
    g = np.concatenate([np.asarray(x, dtype=np.float64) for x in glist])
    if theta.shape != state.first_moment.shape:
        raise ValueError("optimizer state does not match the parameter count")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient; training diverged")
    step = state.step_count + 1
    theta, m, v = adam_update(theta, g, state.first_moment, state.second_moment, step, lr, beta1, beta2, eps)
    out, offset = [], 0
    for p in plist:
        out.append(theta[offset:offset + p.size])
        offset += p.size
    return (out[0] if single else out), AdamState(m, v, step)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class TrainResult:
    params: list[np.ndarray]
    history: list[TrainingRecord]
    weights: WeightState
    collocation: CollocationSet
    adam: AdamState
    iteration: int
    rng_state: dict = field(default_factory=dict)
    pending_update: bool = False  # weight update owed to the next step


CHUNK = 128  # points per block; keeps the jet working set cache-resident


def _blocks(X, chunk):
    """Pad X (by repeating its last row) to whole blocks of ``chunk`` rows."""
    n, d = X.shape
    pad = -n % chunk
    if pad:
        X = jnp.concatenate([X, jnp.broadcast_to(X[-1:], (pad, d))])
    return X.reshape(-1, chunk, d), pad


class _Kernels:
    """Jitted per-iteration computations for one problem and scheme.

    Residuals and their parameter gradients are computed block by block in a
    fixed order; padding rows get a zero cotangent, so they add exact zeros.
    """

    def __init__(self, problem: ProblemSpec, scheme: SchemeConfig, config: TrainConfig, chunk: int = CHUNK):
        self.problem = problem
        self.scheme = scheme
        sizes = [c.n_params for c in problem.networks]
        bounds = np.cumsum([0] + sizes)
        b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
        cw = scheme.scheme in CW_FAMILY

        def split(theta):
            return tuple(theta[a:b] for a, b in zip(bounds[:-1], bounds[1:]))

        def residual_at(theta, X):
            blocks, pad = _blocks(X, chunk)
            r = jax.lax.map(lambda x: residuals(problem, split(theta), x), blocks).reshape(-1)
            return r[: X.shape[0]]

        def residual_grad(theta, X, lam):
            """r, grad of sum(lam * r**2) and the loss itself; lam held constant."""
            blocks, pad = _blocks(X, chunk)
            lam_b = jnp.concatenate([lam, jnp.zeros(pad)]).reshape(blocks.shape[:2])

            def body(g, block):
                x, w = block
                r, pullback = jax.vjp(lambda th: residuals(problem, split(th), x), theta)
                (gb,) = pullback(2.0 * w * r)
                return g + gb, r

            g, r = jax.lax.scan(body, jnp.zeros_like(theta), (blocks, lam_b))
            r = r.reshape(-1)[: X.shape[0]]
            return r, g, weighted_residual_loss(lam, r)

        def fixed_total(theta):
            terms = fixed_loss_terms(problem, split(theta))
            return sum(terms) if terms else jnp.zeros(())

        def refresh(lam, r, r_nbrs):
            if cw:
                n = r.shape[0]
                smoothed = smoothing_average(jnp.abs(r), jnp.abs(r_nbrs).reshape(n, -1))
                return cw_rule(lam, smoothed, scheme.eta_lambda)
            if scheme.scheme == "rba":
                return rba_rule(lam, jnp.abs(r), scheme.eta_lambda, scheme.rba_eta_star)
            if scheme.scheme == "sa":
                return sa_rule(lam, r, scheme.sa_lr)
            return lam

        def primal(theta, m, v, step, lr, lam, X):
            lam = jax.lax.stop_gradient(lam)
            _, g_res, loss_res = residual_grad(theta, X, lam)
            fixed_val, g_fixed = jax.value_and_grad(fixed_total)(theta)
            g = g_res + g_fixed
            ok = jnp.all(jnp.isfinite(g)) & jnp.isfinite(loss_res) & jnp.isfinite(fixed_val)
            theta, m, v = adam_update(theta, g, m, v, step, lr, b1, b2, eps)
            return theta, m, v, loss_res, fixed_val, ok

        def dual(theta, lam_prev, X, nbrs):
            r = residual_at(theta, X)
            r_nbrs = residual_at(theta, nbrs) if cw else None
            return refresh(lam_prev, r, r_nbrs), r, r_nbrs

        def fused(theta, m, v, step, lr, lam_prev, X, nbrs):
            lam, _, _ = dual(theta, lam_prev, X, nbrs)
            return (lam,) + primal(theta, m, v, step, lr, lam, X)

        self.split = split
        self.primal = jax.jit(primal)
        self.fused = jax.jit(fused)
        self.dual = jax.jit(dual)
        self.residual_at = jax.jit(residual_at)
        self.residual_grad = jax.jit(residual_grad)
        self.fixed_total = jax.jit(fixed_total)


def initial_params(problem: ProblemSpec, seed: int) -> list[np.ndarray]:
    return [init_params(cfg, [int(seed), 1, k]) for k, cfg in enumerate(problem.networks)]


def initial_collocation(problem: ProblemSpec, n: int, seed: int) -> np.ndarray:
    return sample_uniform(problem, n, "interior", stream_rng(seed, "collocation"))


def train(
    problem: ProblemSpec,
    scheme: SchemeConfig | str,
    config: TrainConfig,
    n_collocation: int = 1000,
    test: TestSet | None = None,
    n_test: int = 90_000,
    points=None,
    resume: TrainResult | None = None,
    callback: Callable[[TrainResult], None] | None = None,
) -> TrainResult:
    """Train the problem's networks with the chosen weighting scheme.

    ``callback`` is invoked with the state after every checkpoint. A
    non-finite loss or gradient raises :class:`TrainingDiverged` carrying
    the state of the last checkpoint.
    """
    if isinstance(scheme, str):
        scheme = SchemeConfig(scheme)
    if test is None:
        test = TestSet.for_problem(problem, n_test, config.seed)
    kernels = _Kernels(problem, scheme, config)
    cw = scheme.scheme in CW_FAMILY
    lo, hi = problem.domain_lo, problem.domain_hi
    nbr_rng = stream_rng(config.seed, "neighbors")

    if resume is None:
        params = initial_params(problem, config.seed)
        if points is None:
            points = initial_collocation(problem, n_collocation, config.seed)
        else:
            points = np.asarray(points, dtype=np.float64)
            if not np.all(problem.contains(points)):
                raise ValueError("initial collocation points must lie inside the domain")
        theta = np.concatenate(params)
        weights = scheme.initial_state(len(points))
        cset = CollocationSet.from_points(points, weights.lambdas)
        adam = AdamState.zeros(theta.size)
        history: list[TrainingRecord] = []
        start = 0
    else:
        if resume.weights.config != scheme:
            raise ValueError("resume state was produced under a different weighting configuration")
        theta = np.concatenate(resume.params)
        weights, cset, adam = resume.weights, resume.collocation, resume.adam
        history = list(resume.history)
        start = resume.iteration
        if resume.rng_state:
            nbr_rng.bit_generator.state = resume.rng_state

    theta = jnp.asarray(theta)
    m, v = jnp.asarray(adam.first_moment), jnp.asarray(adam.second_moment)
    lam = jnp.asarray(weights.lambdas)
    X = np.array(cset.points)
    centers = np.array(cset.centers)
    last_resample = cset.last_resample_iter
    stride, K = config.weight_update_stride, config.resample_K
    updates_weights = stride > 0 and scheme.scheme != "uniform"
    M = scheme.M

    def neighbours():
        if not cw:
            return None
        return draw_neighbors(centers, M, scheme.epsilon, lo, hi, nbr_rng)

    def flat(nbrs):
        return None if nbrs is None else jnp.asarray(nbrs.reshape(-1, X.shape[1]))

    def snapshot(iteration) -> TrainResult:
        lam_np = np.asarray(lam)
        return TrainResult(
            params=[np.asarray(p) for p in kernels.split(np.asarray(theta))],
            history=list(history),
            weights=replace(weights, lambdas=lam_np),
            collocation=CollocationSet(X.copy(), centers.copy(), lam_np, last_resample),
            adam=AdamState(np.asarray(m), np.asarray(v), iteration),
            iteration=iteration,
            rng_state=nbr_rng.bit_generator.state,
            pending_update=pending,
        )

    pending = False if resume is None else resume.pending_update
    last_good = snapshot(start) if resume is None else resume
    X_dev = jnp.asarray(X)
    tick = time.perf_counter()
    since = 0
    for k in range(start, config.iterations):
        lr = lr_at(config, k)
        if pending:
            lam, theta, m, v, loss_res, loss_fix, ok = kernels.fused(theta, m, v, k + 1, lr, lam, X_dev,
                                                                      flat(neighbours()))
        else:
            theta, m, v, loss_res, loss_fix, ok = kernels.primal(theta, m, v, k + 1, lr, lam, X_dev)
        since += 1
        if not bool(ok):
            raise TrainingDiverged(f"non-finite loss or gradient at iteration {k}", last_good)
        done = k + 1
        due = updates_weights and done % stride == 0
        resample_now = K > 0 and should_resample(done, K, scheme.scheme)
        regular = done % config.checkpoint_every == 0
        checkpoint_now = regular or done == config.iterations
        # an off-cadence final checkpoint leaves the update pending, as a longer run would
        if resample_now or (due and regular):
            nbrs = neighbours()
            lam_new, r, r_nbrs = kernels.dual(theta, lam, X_dev, flat(nbrs))
            if due:
                lam = lam_new
            if resample_now:
                n = len(X)
                X, _ = best_candidates(X, nbrs, np.asarray(r), np.asarray(r_nbrs).reshape(n, M))
                if scheme.scheme == "cwp":
                    centers = X.copy()
                X_dev = jnp.asarray(X)
                last_resample = done
            pending = False
        else:
            pending = due
        if checkpoint_now:
            elapsed = (time.perf_counter() - tick) * 1000.0 / since
            params_now = kernels.split(np.asarray(theta))
            errors = evaluate(problem, params_now, test)
            loss_res_f, loss_fix_f = float(loss_res), float(loss_fix)
            u_name = problem.field_names[0]
            extra = {}
            for name in problem.field_names[1:]:
                extra[f"rel_l2_{name}"], extra[f"l_inf_{name}"] = errors[name]
            history.append(TrainingRecord(
                iteration=done,
                loss_total=loss_res_f + loss_fix_f,
                loss_residual=loss_res_f,
                loss_fixed=loss_fix_f,
                rel_l2=errors[u_name][0],
                l_inf=errors[u_name][1],
                lr=lr,
                wall_ms=elapsed,
                extra=extra,
            ))
            last_good = snapshot(done)
            if callback is not None:
                callback(last_good)
            tick = time.perf_counter()
            since = 0
    return last_good


STATE_FILES = ("state.ckpt", "state.npz", "state.json")


def save_state(directory, problem: ProblemSpec, result: TrainResult) -> None:
    """Everything needed to continue a run bit-exactly.

    ``state.ckpt`` holds the networks, ``state.npz`` the optimizer moments,
    weights, points and centres, and ``state.json`` the scheme, counters,
    neighbour RNG state (integers as decimal text) and the history so far.
    Files are written under temporary names and renamed, so an interrupted
    save leaves the previous state intact.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = {name: directory / (name + ".tmp") for name in STATE_FILES}
    save_checkpoint(tmp["state.ckpt"], problem.networks, result.params)
    with open(tmp["state.npz"], "wb") as fh:
        np.savez(fh, first_moment=result.adam.first_moment, second_moment=result.adam.second_moment,
                 lambdas=result.weights.lambdas, points=result.collocation.points,
                 centers=result.collocation.centers)
    w = result.weights
    meta = {
        "problem": problem.name,
        "iteration": result.iteration,
        "adam_step": result.adam.step_count,
        "last_resample_iter": result.collocation.last_resample_iter,
        "scheme": {"scheme": w.scheme, "eta_lambda": w.eta_lambda, "eta_star": w.eta_star,
                   "M": w.M, "epsilon": w.epsilon, "sa_lr": w.sa_lr},
        "rng_state": result.rng_state,
        "pending_update": result.pending_update,
        "history": [asdict(rec) for rec in result.history],
    }
    tmp["state.json"].write_text(json.dumps(meta, indent=1) + "\n")
    for name, path in tmp.items():
        path.replace(directory / name)


def load_state(directory, problem: ProblemSpec) -> TrainResult:
    directory = Path(directory)
    meta = json.loads((directory / "state.json").read_text())
    if meta["problem"] != problem.name:
        raise ValueError(f"state in {directory} belongs to problem {meta['problem']!r}, not {problem.name!r}")
    configs, params = load_checkpoint(directory / "state.ckpt")
    if tuple(configs) != tuple(problem.networks):
        raise ValueError(f"state in {directory} does not match the problem's networks")
    with np.load(directory / "state.npz") as arrays:
        a = {k: arrays[k] for k in arrays.files}
    weights = WeightState(a["lambdas"], **meta["scheme"])
    return TrainResult(
        params=params,
        history=[TrainingRecord(**rec) for rec in meta["history"]],
        weights=weights,
        collocation=CollocationSet(a["points"], a["centers"], a["lambdas"], meta["last_resample_iter"]),
        adam=AdamState(a["first_moment"], a["second_moment"], meta["adam_step"]),
        iteration=meta["iteration"],
        rng_state=meta["rng_state"],
        pending_update=meta.get("pending_update", False),
    )
