import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cwpinn import PINNRegressor
from cwpinn.metrics import predict
from cwpinn.trainer import TrainConfig, initial_collocation, train

SMALL = dict(iterations=30, checkpoint_every=10, resample_K=10, n_collocation=32, n_test=200,
             problem_options={"hidden_layers": 1, "hidden_width": 6}, random_state=3)


@pytest.fixture(scope="module")
def fitted():
    return PINNRegressor(**SMALL).fit()


def test_params_round_trip_and_clone():
    est = PINNRegressor(scheme="rba", lr0=1e-3)
    assert est.get_params()["scheme"] == "rba"
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(M=6)
    assert est.M == 6


def test_fit_matches_direct_training(fitted):
    ref = train(fitted.problem_, "cwp",
                TrainConfig(iterations=30, checkpoint_every=10, resample_K=10, seed=3), n_collocation=32, n_test=200)
    for a, b in zip(fitted.params_, ref.params):
        assert np.array_equal(a, b)
    assert [r.iteration for r in fitted.history_] == [10, 20, 30]
    assert fitted.n_features_in_ == 2
    assert fitted.weights_.shape == (32,) and fitted.collocation_.shape == (32, 2)


def test_predict_and_score(fitted):
    X = np.random.default_rng(0).uniform(size=(50, 2))
    y = fitted.predict(X)
    assert y.shape == (50,)
    np.testing.assert_array_equal(y, predict(fitted.problem_, fitted.params_, X)[:, 0])
    assert fitted.predict(X, all_fields=True).shape == (50, 1)
    truth = fitted.problem_.exact_solution(X)[:, 0]
    assert fitted.score(X) == pytest.approx(fitted.score(X, truth))
    assert fitted.score(X, y) == 1.0


def test_fit_on_given_points():
    pts = initial_collocation(PINNRegressor(**SMALL)._build_problem(), 32, 3)
    est = PINNRegressor(**{**SMALL, "iterations": 10, "resample_K": 0}).fit(pts)
    np.testing.assert_array_equal(est.collocation_, pts)
    moved = PINNRegressor(**{**SMALL, "iterations": 10}).fit(pts).collocation_
    assert np.all(np.linalg.norm(moved - pts, axis=1) < 0.01)
    with pytest.raises(ValueError):
        PINNRegressor(**SMALL).fit(np.zeros((5, 3)))
    with pytest.raises(ValueError):
        PINNRegressor(**SMALL).fit(pts, np.zeros(32))


def test_input_validation(fitted):
    with pytest.raises(NotFittedError):
        PINNRegressor().predict(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        fitted.predict(np.array([[np.nan, 0.5]]))
