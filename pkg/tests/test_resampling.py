import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwpinn.resampling import CollocationSet, best_candidates, resample, should_resample
from cwpinn.weighting import SmoothedResiduals, smooth_residuals

BOX = (np.zeros(2), np.ones(2))


def test_should_resample_examples():
    assert should_resample(200, 200, "cwp")
    assert should_resample(400, 200, "cwp_fix")
    assert not should_resample(200, 200, "rba")
    assert not should_resample(0, 200, "cwp")
    assert not should_resample(199, 200, "cwp")
    with pytest.raises(ValueError):
        should_resample(1, 0, "cwp")


def fixture_set(center_r, nbr_r, iteration=None):
    n, M = np.shape(nbr_r)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.1, 0.9, (n, 2))
    nbrs = pts[:, None, :] + rng.uniform(-0.005, 0.005, (n, M, 2))
    sm = SmoothedResiduals(np.zeros(n), pts, np.asarray(center_r, float), nbrs, np.asarray(nbr_r, float),
                           iteration=iteration)
    return CollocationSet.from_points(pts, np.full(n, 1 / n)), sm


def test_center_dominant_keeps_set():
    cset, sm = fixture_set([3.0, 2.0], [[1, 2, 0.5, 2.9], [0, 0, 1.9, 1]])
    out = resample(cset, sm, "cwp")
    np.testing.assert_array_equal(out.points, cset.points)


def test_picks_the_five():
    cset, sm = fixture_set([0.0], [[5, 1, 1, 1]])
    out = resample(cset, sm, "cwp", iteration=200)
    np.testing.assert_array_equal(out.points[0], sm.neighbor_points[0, 0])
    np.testing.assert_array_equal(out.centers, out.points)
    assert out.last_resample_iter == 200


def test_fix_variant_keeps_centres():
    cset, sm = fixture_set([0.0, 0.0], [[1, 5, 1, 1], [2, 2, 7, 2]])
    before = cset.centers.copy()
    out = resample(cset, sm, "cwp_fix")
    np.testing.assert_array_equal(out.centers, before)
    np.testing.assert_array_equal(out.points[1], sm.neighbor_points[1, 2])


def test_ties_keep_incumbent_then_lowest_index():
    _, choice = best_candidates(np.zeros((3, 1)), np.zeros((3, 3, 1)),
                                [2.0, 1.0, -4.0], [[2, 2, 1], [3, -3, 3], [4, 4, 0]])
    assert choice.tolist() == [0, 1, 0]


def brute_force(points, nbr_points, center_r, nbr_r):
    out = []
    for i in range(len(points)):
        best, best_val = points[i], abs(center_r[i])
        for j in range(len(nbr_r[i])):
            if abs(nbr_r[i][j]) > best_val:
                best, best_val = nbr_points[i][j], abs(nbr_r[i][j])
        out.append(best)
    return np.array(out)


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(42)
    for k in range(1000):
        n, M, d = rng.integers(1, 20), rng.integers(0, 7), rng.integers(1, 4)
        pts = rng.uniform(size=(n, d))
        nbrs = rng.uniform(size=(n, M, d))
        # integer-valued residuals force frequent ties
        cr = rng.integers(-3, 4, n).astype(float) if k % 2 else rng.normal(size=n)
        nr = rng.integers(-3, 4, (n, M)).astype(float) if k % 2 else rng.normal(size=(n, M))
        sm = SmoothedResiduals(np.zeros(n), pts, np.abs(cr), nbrs, np.abs(nr))
        out = resample(CollocationSet.from_points(pts, np.ones(n)), sm, "cwp_fix")
        assert np.array_equal(out.points, brute_force(pts, nbrs, cr, nr))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["cwp", "cwp_fix"]))
def test_real_smoothing_stays_in_box_and_ball(seed, scheme):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(200, 2))
    pts[:4] = [[0, 0], [1, 1], [0, 0.5], [1, 0.3]]
    lam = rng.dirichlet(np.ones(200))
    cset = CollocationSet.from_points(pts, lam)
    fn = lambda X: np.sin(9 * X[:, 0]) + X[:, 1] ** 3
    for it in (200, 400, 600):
        sm = smooth_residuals(fn, cset.points, 4, 0.01, BOX, seed=rng, centers=cset.centers, iteration=it)
        old = cset
        cset = resample(cset, sm, scheme, iteration=it)
        assert np.all((cset.points >= 0) & (cset.points <= 1))
        np.testing.assert_array_equal(cset.weights, lam)
        step = np.linalg.norm(cset.points - old.points, axis=1)
        if scheme == "cwp":
            assert np.all(step < 0.01)
            np.testing.assert_array_equal(cset.centers, cset.points)
        else:
            np.testing.assert_array_equal(cset.centers, pts)
            assert np.all(np.linalg.norm(cset.points - pts, axis=1) < 0.01)


def test_rejects_stale_or_foreign_smoothing():
    cset, sm = fixture_set([0.0], [[5, 1, 1, 1]], iteration=200)
    with pytest.raises(ValueError, match="stale"):
        resample(cset, sm, "cwp", iteration=400)
    other = CollocationSet.from_points(cset.points + 0.01, cset.weights)
    with pytest.raises(ValueError):
        resample(other, sm, "cwp")
    with pytest.raises(ValueError):
        resample(cset, sm, "rba")


def test_collocation_set_lengths_checked():
    with pytest.raises(ValueError):
        CollocationSet(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(2))
