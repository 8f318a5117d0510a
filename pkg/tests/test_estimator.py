import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dyncoef.estimator import DynamicCoefficientField
from dyncoef.gradtensor import DimensionError, DomainError
from dyncoef.validation import check_colors, check_rays


def ray_table(ds, with_light=False):
    o, d, c, i = ds.rays()
    cols = [o, d] + ([i[:, None]] if with_light else [])
    return np.hstack(cols), c


def test_get_params_and_clone():
    est = DynamicCoefficientField(preset="smoke", n_basis=2, iterations=3)
    params = est.get_params()
    assert params["n_basis"] == 2 and params["preset"] == "smoke"
    assert clone(est).get_params() == params
    est.set_params(variant="a")
    assert est.variant == "a"


def test_fit_predict_score(tiny_scene):
    X, y = ray_table(tiny_scene[0])
    est = DynamicCoefficientField(preset="smoke", iterations=30, random_state=1).fit(X, y)
    pred = est.predict(X)
    assert pred.shape == y.shape
    assert pred.min() >= 0 and pred.max() <= 1
    assert est.score(X, y) == pytest.approx(-10 * np.log10(np.mean((pred - y) ** 2)))
    assert len(est.log_) > 0 and est.n_illuminations_ == 1


def test_same_seed_same_predictions(tiny_scene):
    X, y = ray_table(tiny_scene[0])
    a = DynamicCoefficientField(preset="smoke", iterations=5).fit(X, y).predict(X[:50])
    b = DynamicCoefficientField(preset="smoke", iterations=5).fit(X, y).predict(X[:50])
    assert np.array_equal(a, b)


def test_illumination_column(tiny_scene_two_lights):
    X, y = ray_table(tiny_scene_two_lights[0], with_light=True)
    est = DynamicCoefficientField(preset="smoke", iterations=3).fit(X, y)
    assert est.n_illuminations_ == 2
    assert est.model_.appearance.codes.active
    X_bad = X[:4].copy()
    X_bad[:, 6] = 5
    with pytest.raises(DomainError):
        est.predict(X_bad)


def test_declared_lights_too_few(tiny_scene_two_lights):
    X, y = ray_table(tiny_scene_two_lights[0], with_light=True)
    with pytest.raises(ValueError):
        DynamicCoefficientField(preset="smoke", iterations=1, n_illuminations=1).fit(X, y)


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        DynamicCoefficientField().predict(np.zeros((1, 6)) + [0, 0, 0, 0, 0, 1])


class TestValidation:
    def test_normalizes_directions(self):
        o, d, il = check_rays([[0, 0, 0, 0, 0, 2.0], [1, 1, 1, 3, 4, 0]])
        np.testing.assert_allclose(d, [[0, 0, 1], [0.6, 0.8, 0]])
        assert il is None

    @pytest.mark.parametrize("X, err", [
        (np.zeros((2, 5)), DimensionError),
        (np.zeros((2, 6)), DomainError),
        ([[0, 0, 0, 0, 0, 1, 0.5]], DomainError),
        ([[0, 0, 0, 0, 0, 1, -1]], DomainError),
        ([[0, 0, 0, 0, 0, np.nan]], ValueError),
    ])
    def test_bad_rays(self, X, err):
        with pytest.raises(err):
            check_rays(X)

    def test_light_index_bound(self):
        with pytest.raises(DomainError):
            check_rays([[0, 0, 0, 0, 0, 1, 2]], n_illuminations=2)

    def test_colors(self):
        with pytest.raises(DomainError):
            check_colors([[0, 0, 1.5]], 1)
        with pytest.raises(DimensionError):
            check_colors([[0, 0]], 1)
        with pytest.raises(ValueError):
            check_colors([[0, 0, 0]], 2)
