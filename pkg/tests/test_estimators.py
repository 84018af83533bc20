import numpy as np
import pytest
from sklearn.base import clone

from denn_svcca.estimators import DGMPoissonRegressor
from denn_svcca.net import forward_activations, input_derivatives


@pytest.fixture(scope="module")
def fitted():
    est = DGMPoissonRegressor(hidden_widths=(5, 5), max_epochs=60, eval_every=20, resample_every=10,
                              n_interior=40, n_per_edge=10, random_state=4)
    return est.fit()


def test_params_round_trip():
    est = DGMPoissonRegressor(hidden_widths=(8,), x_source=0.2)
    params = clone(est).get_params()
    assert params["hidden_widths"] == (8,) and params["x_source"] == 0.2
    assert est.set_params(layer=2).layer == 2


def test_predict_and_transform(fitted):
    pts = np.random.default_rng(0).uniform(-1, 1, (25, 2))
    np.testing.assert_array_equal(fitted.predict(pts), forward_activations(fitted.network_, pts)[-1][:, 0])
    assert fitted.transform(pts).shape == (25, 5)
    _, _, second = input_derivatives(fitted.network_, pts)
    np.testing.assert_allclose(fitted.laplacian(pts), second.sum(axis=1))
    assert fitted.record_.epochs_run > 0


def test_refit_is_deterministic(fitted):
    again = clone(fitted).fit()
    assert again.network_ == fitted.network_


def test_input_checks(fitted):
    with pytest.raises(ValueError, match="2"):
        fitted.predict(np.zeros((3, 3)))
    with pytest.raises(ValueError, match="layer"):
        clone(fitted).set_params(layer=3).fit().transform(np.zeros((2, 2)))


def test_unfitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        DGMPoissonRegressor().predict(np.zeros((1, 2)))
