import math

import jax.numpy as jnp
import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwpinn.diffnet import Jet
from cwpinn.problems import (
    BURGERS_NU, burgers1d, burgers_reference, exact_jets, export_reference_csv, fixed_loss_terms, get_problem,
    grid_points, heat1d, klein_gordon2d, poisson_coefficient, poisson_inverse2d, poisson_solution,
    poisson_source, residuals, sample_test_points, sample_uniform, stream_rng,
)
from cwpinn.trainer import initial_params

PI = math.pi


def jet_from(val, grad, hess_cols, pairs):
    return Jet(jnp.asarray(val), jnp.asarray(np.stack(grad, 1)), jnp.asarray(np.stack(hess_cols, 1)), pairs)


# ---------------------------------------------------------------- residual-zero oracles


def test_heat_residual_vanishes_on_hand_derivatives():
    p = heat1d()
    X = np.random.default_rng(0).uniform(size=(1000, 2))
    t, x = X.T
    u = np.exp(-t) * np.sin(20 * PI * x)
    # u_t = -u, u_x = 20 pi e^-t cos(20 pi x), u_xx = -(20 pi)^2 u
    jet = jet_from(u, [-u, 20 * PI * np.exp(-t) * np.cos(20 * PI * x)], [-(20 * PI) ** 2 * u], p.pairs)
    assert np.max(np.abs(np.asarray(p.residual_operator(jnp.asarray(X), (jet,))))) < 1e-10


def test_kg_residual_vanishes_on_hand_derivatives():
    p = klein_gordon2d(n_boundary=0)
    X = sample_uniform(p, 1000, "interior", 3)
    t, x, y = X.T
    u = (x + y) * np.cos(t) + x * y * np.sin(t)
    grad = [-(x + y) * np.sin(t) + x * y * np.cos(t), np.cos(t) + y * np.sin(t), np.cos(t) + x * np.sin(t)]
    jet = jet_from(u, grad, [-u, np.zeros_like(u), np.zeros_like(u)], p.pairs)
    assert np.max(np.abs(np.asarray(p.residual_operator(jnp.asarray(X), (jet,))))) < 1e-10


@pytest.mark.parametrize("factory", [heat1d, lambda: klein_gordon2d(n_boundary=0)])
def test_residual_vanishes_on_exact_solution_jets(factory):
    from cwpinn.problems import heat_solution, kg_solution

    p = factory()
    sol = heat_solution if p.name == "heat1d" else kg_solution
    X = sample_uniform(p, 1000, "interior", 5)
    jets = exact_jets(X, sol, p.pairs)
    assert np.max(np.abs(np.asarray(p.residual_operator(jnp.asarray(X), jets)))) < 1e-10


def test_poisson_source_matches_divergence_of_exact_fields():
    p = poisson_inverse2d(n_obs=1)
    X = sample_uniform(p, 500, "interior", 2)
    u, a = exact_jets(X, lambda c: (poisson_solution(c), poisson_coefficient(c)), p.pairs)
    assert np.max(np.abs(np.asarray(p.residual_operator(jnp.asarray(X), (u, a))))) < 1e-8
    # independent second-order FD check of -div(a grad u) at a few points
    h = 1e-4
    for x, y in X[:5]:
        def flux(xx, yy, k):
            e = (h, 0) if k == 0 else (0, h)
            ua = math.sin(PI * (xx + e[0])) * math.sin(PI * (yy + e[1]))
            ub = math.sin(PI * (xx - e[0])) * math.sin(PI * (yy - e[1]))
            ac = 1 / (1 + xx**2 + yy**2 + (xx - 1) ** 2 + (yy - 1) ** 2)
            return ac * (ua - ub) / (2 * h)
        div = ((flux(x + h, y, 0) - flux(x - h, y, 0)) + (flux(x, y + h, 1) - flux(x, y - h, 1))) / (2 * h)
        f = float(poisson_source(jnp.asarray([[x, y]]))[0])
        assert f == pytest.approx(-div, rel=1e-5, abs=1e-6)


def test_poisson_oracle_values():
    c = (np.array([0.0]), np.array([0.0]))
    assert poisson_coefficient(c)[0] == pytest.approx(1 / 3)
    assert float(poisson_solution((jnp.array([0.5]), jnp.array([0.5])))[0]) == pytest.approx(1.0)


# ---------------------------------------------------------------- hard constraints


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_heat_constraint_pins_initial_and_boundary(seed):
    p = heat1d()
    rng = np.random.default_rng(seed)
    raw = rng.normal(0, 10, 100)
    s = rng.uniform(size=100)
    (u0,) = p.hard_constraint((np.zeros(100), s), (raw,))
    np.testing.assert_allclose(u0, np.sin(20 * PI * s), atol=1e-12)
    for edge in (0.0, 1.0):
        (ub,) = p.hard_constraint((s, np.full(100, edge)), (raw,))
        assert np.max(np.abs(ub)) < 1e-12


def test_kg_and_burgers_constraints_at_t0():
    rng = np.random.default_rng(1)
    raw = rng.normal(0, 10, 100)
    x, y = rng.uniform(size=(2, 100))
    (u,) = klein_gordon2d(n_boundary=0).hard_constraint((np.zeros(100), x, y), (raw,))
    np.testing.assert_allclose(u, x + y, atol=1e-12)
    xb = rng.uniform(-1, 1, 100)
    for variant in ("printed", "symmetric"):
        b = burgers1d(variant)
        (u,) = b.hard_constraint((np.zeros(100), xb), (raw,))
        np.testing.assert_allclose(u, -np.sin(PI * xb), atol=1e-12)
        (u1,) = b.hard_constraint((rng.uniform(size=100), np.ones(100)), (raw,))
        assert np.max(np.abs(u1)) < 1e-12
    # only the symmetric form also pins x = -1
    (um,) = burgers1d("symmetric").hard_constraint((rng.uniform(size=100), -np.ones(100)), (raw,))
    assert np.max(np.abs(um)) < 1e-12
    (um,) = burgers1d("printed").hard_constraint((np.full(100, 0.5), -np.ones(100)), (raw,))
    assert np.max(np.abs(um)) > 1.0


def test_burgers_rejects_unknown_constraint():
    with pytest.raises(ValueError):
        burgers1d("other")


# ---------------------------------------------------------------- Burgers oracle


def cole_hopf_mp(t, x):
    """Independent oracle: 30-digit adaptive quadrature of the Cole-Hopf integrals."""
    mp.mp.dps = 30
    nu = mp.mpf("0.01") / mp.pi
    sigma = mp.sqrt(4 * nu * mp.mpf(t))
    x = mp.mpf(x)

    def kern(s):
        return mp.exp(-mp.cos(mp.pi * (x - sigma * s)) / (2 * mp.pi * nu) - s * s)

    nodes = [-20, -10, -5, 0, 5, 10, 20]
    num = mp.quad(lambda s: mp.sin(mp.pi * (x - sigma * s)) * kern(s), nodes)
    return float(-num / mp.quad(kern, nodes))


@pytest.mark.parametrize("t,x", [(0.25, 0.3), (0.5, -0.6), (0.75, 0.1), (1.0, 0.02), (1.0, -0.8)])
def test_burgers_reference_matches_adaptive_quadrature(t, x):
    assert burgers_reference(t, x) == pytest.approx(cole_hopf_mp(t, x), abs=1e-10)


def test_burgers_reference_initial_condition_and_symmetry():
    x = np.linspace(-1, 1, 401)
    np.testing.assert_allclose(burgers_reference(0.0, x), -np.sin(PI * x), atol=1e-8)
    assert burgers_reference(0.0, 0.5) == pytest.approx(-1.0, abs=1e-12)
    t = np.linspace(0.01, 1, 50)
    assert np.max(np.abs(burgers_reference(t, 0.0))) < 1e-8
    rng = np.random.default_rng(0)
    tt, xx = rng.uniform(0, 1, 500), rng.uniform(-1, 1, 500)
    np.testing.assert_allclose(burgers_reference(tt, -xx), -burgers_reference(tt, xx), atol=1e-8)


def burgers_fd_residual(t, x, dt=1e-4, dx=1e-3):
    u = burgers_reference
    c = u(t, x)
    ut = (u(t + dt, x) - u(t - dt, x)) / (2 * dt)
    up, um = u(t, x + dx), u(t, x - dx)
    ux = (up - um) / (2 * dx)
    uxx = (up - 2 * c + um) / dx**2
    return ut + c * ux - BURGERS_NU * uxx


def test_burgers_reference_fd_residual_away_from_shock():
    # lattice on the dx = 1e-3 grid, |x| >= 0.05, t away from 0 (stencil stays inside t <= 1)
    x = np.arange(-999, 1000) * 1e-3
    x = x[np.abs(x) >= 0.05]
    t = np.linspace(0.02, 1.0 - 1e-4, 25)
    T, Xg = np.meshgrid(t, x, indexing="ij")
    r = burgers_fd_residual(T.ravel(), Xg.ravel())
    assert np.max(np.abs(r)) < 1e-3


# ---------------------------------------------------------------- sampling


def test_sampling_in_box_and_deterministic():
    p = heat1d()
    a = sample_uniform(p, 1000, "interior", 4)
    assert np.all((a >= 0) & (a <= 1))
    assert np.array_equal(a, sample_uniform(p, 1000, "interior", 4))
    assert not np.array_equal(a, sample_uniform(p, 1000, "interior", 5))


def test_sample_mean_near_centre():
    p = klein_gordon2d(n_boundary=0)
    pts = sample_uniform(p, 100_000, "interior", 9)
    centre = (p.domain_lo + p.domain_hi) / 2
    sigma = (p.domain_hi - p.domain_lo) / math.sqrt(12) / math.sqrt(len(pts))
    assert np.all(np.abs(pts.mean(0) - centre) < 3 * sigma)


def test_boundary_and_initial_regions():
    p = klein_gordon2d(n_boundary=0)
    b = sample_uniform(p, 2000, "boundary", 1)
    on_face = np.isclose(b[:, 1:], 0) | np.isclose(b[:, 1:], 1)
    assert np.all(on_face.any(axis=1))
    assert np.all(sample_uniform(p, 10, "initial", 1)[:, 0] == 0.0)
    with pytest.raises(ValueError, match="region"):
        sample_uniform(poisson_inverse2d(), 10, "initial", 0)
    with pytest.raises(ValueError):
        sample_uniform(p, 10, "nowhere", 0)


def test_training_and_test_streams_disjoint():
    p = heat1d()
    train = sample_uniform(p, 1000, "interior", stream_rng(1, "collocation"))
    test = sample_test_points(p, 90_000, 1)
    shared = set(map(tuple, train)) & set(map(tuple, test))
    assert not shared


# ---------------------------------------------------------------- problem data


def test_kg_boundary_loss_configuration():
    p = klein_gordon2d()
    (bc,) = p.fixed_losses
    assert bc.kind == "boundary" and len(bc.points) == 300 and bc.weight == 100.0
    t, x, y = bc.points.T
    np.testing.assert_allclose(bc.targets, (x + y) * np.cos(t) + x * y * np.sin(t))
    assert p.domain_hi[0] == 10.0


def test_poisson_problem_data():
    p = poisson_inverse2d(seed=3)
    obs, bc = p.fixed_losses
    assert obs.kind == "observation" and obs.field == 0 and len(obs.points) == 60 and obs.weight == 10
    assert bc.kind == "boundary" and bc.field == 1 and len(bc.points) == 40 and bc.weight == 10
    clean = np.sin(PI * obs.points[:, 0]) * np.sin(PI * obs.points[:, 1])
    noise = obs.targets - clean
    assert 0.003 < noise.var() < 0.03
    assert np.array_equal(obs.targets, poisson_inverse2d(seed=3).fixed_losses[0].targets)
    assert len(p.networks) == 2 and p.networks[0].hidden_width == 50


def test_fixed_losses_vanish_for_exact_boundary_prediction():
    p = klein_gordon2d()
    params = tuple(jnp.zeros(c.n_params) for c in p.networks)
    (term,) = fixed_loss_terms(p, params)
    (bc,) = p.fixed_losses
    x, y = bc.points[:, 1], bc.points[:, 2]
    expected = 100.0 * np.mean((x + y - bc.targets) ** 2)
    assert float(term) == pytest.approx(expected, rel=1e-12)


def test_registry_and_grid():
    assert get_problem("burgers1d").name == "burgers1d"
    with pytest.raises(ValueError, match="unknown problem"):
        get_problem("navier-stokes")
    g = grid_points(heat1d(), (3, 2))
    assert g.shape == (6, 2) and g[0].tolist() == [0.0, 0.0] and g[-1].tolist() == [1.0, 1.0]


def test_reference_export(tmp_path):
    path = tmp_path / "ref.csv"
    export_reference_csv(heat1d(), (2, 3), path)
    rows = path.read_text().splitlines()
    assert rows[0] == "t,x,u" and len(rows) == 7


def test_residuals_trace_through_networks():
    for name in ("heat1d", "burgers1d", "poisson-inv"):
        p = get_problem(name)
        params = tuple(jnp.asarray(v) for v in initial_params(p, 0))
        r = residuals(p, params, jnp.asarray(sample_uniform(p, 16, "interior", 0)))
        assert r.shape == (16,) and np.all(np.isfinite(r))
