import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dnt.config import ICARConfig
from dnt.features import FeatureStack, HeatMap, InputError, Layer
from dnt.icar import (
    DegenerateInputError,
    MixedSignals,
    closeness,
    extract,
    gaussian_logcosh_moment,
    logcosh,
    negentropy,
    solve,
    standardize,
    whiten,
)
from dnt.selftest import icar_trial


def test_gauss_moment_value():
    assert gaussian_logcosh_moment() == pytest.approx(0.3745672, abs=1e-7)
    draws = np.random.default_rng(0).standard_normal(2_000_000)
    vals = logcosh(draws)
    se = vals.std() / np.sqrt(vals.size)
    assert abs(vals.mean() - gaussian_logcosh_moment()) < 4 * se


def test_logcosh_stable():
    x = np.array([-1e4, -3.0, 0.0, 0.5, 800.0])
    out = logcosh(x)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[1:4], np.log(np.cosh(x[1:4])), rtol=1e-13)
    assert out[-1] == pytest.approx(800 - np.log(2))


def test_standardize_constant_raises():
    with pytest.raises(DegenerateInputError):
        standardize(np.ones(10))


@given(arrays(np.float64, 50, elements=st.floats(-100, 100)), arrays(np.float64, 50, elements=st.floats(-100, 100)))
def test_closeness_is_two_minus_two_rho(a, b):
    if a.std() < 1e-6 or b.std() < 1e-6:
        return
    rho = np.mean(standardize(a) * standardize(b))
    assert closeness(a, b) == pytest.approx(2 - 2 * rho, abs=1e-9)


def test_negentropy_near_zero_for_gaussian():
    y = np.random.default_rng(1).standard_normal(200_000)
    assert negentropy(y, ICARConfig()) < 1e-5
    lap = np.random.default_rng(1).laplace(0, 1 / np.sqrt(2), 200_000)
    assert negentropy(lap, ICARConfig()) > 100 * negentropy(y, ICARConfig())


def test_whitening_gives_identity_covariance(rng):
    X = rng.normal(size=(3, 3)) @ rng.normal(size=(3, 500))
    Z, T = whiten(MixedSignals(X, (20, 25)))
    cov = Z.X @ Z.X.T / 500
    np.testing.assert_allclose(cov, np.eye(3), atol=1e-10)
    assert T.shape == (3, 3) and Z.spatial_dims == (20, 25)


def test_whitening_drops_null_directions(rng):
    S = rng.normal(size=(2, 400))
    X = rng.normal(size=(5, 2)) @ S  # rank 2 in 5 channels
    Z, T = whiten(MixedSignals(X, (20, 20)))
    assert Z.X.shape == (2, 400)
    Z1, _ = whiten(MixedSignals(rng.normal(size=(6, 400)), (20, 20)), max_components=3)
    assert Z1.X.shape[0] == 3


def test_whitening_errors(rng):
    with pytest.raises(InputError):
        whiten(MixedSignals(rng.normal(size=(5, 5)), (1, 5)))
    with pytest.raises(DegenerateInputError):
        whiten(MixedSignals(np.ones((2, 50)), (5, 10)))


@pytest.mark.parametrize("seed", range(5))
def test_recovers_reference_source(seed):
    assert icar_trial(seed) > 0.95


def test_recovers_sub_gaussian_source():
    rng = np.random.default_rng(7)
    P = 2000
    S = np.vstack([rng.uniform(-np.sqrt(3), np.sqrt(3), P), rng.laplace(0, 1, P), rng.laplace(0, 1, P)])
    X = rng.normal(size=(3, 3)) @ S
    Z, _ = whiten(MixedSignals(X, (40, 50)))
    res = solve(Z, S[0] + rng.normal(0, 0.3, P), ICARConfig())
    assert res.converged
    assert abs(np.corrcoef(res.y, S[0])[0, 1]) > 0.95


def test_output_sign_and_range(rng):
    P = 1000
    S = np.vstack([rng.laplace(size=P), rng.uniform(-1, 1, P)])
    Z, _ = whiten(MixedSignals(rng.normal(size=(2, 2)) @ S, (25, 40)))
    ref = S[0] + 0.1 * rng.normal(size=P)
    trace = []
    res = solve(Z, ref, ICARConfig(), trace=trace)
    assert np.dot(res.y, ref) > 0
    assert res.v.values.shape == (25, 40)
    assert res.v.normalized and res.v.values.min() == 0 and res.v.values.max() == 1
    assert len(trace) == res.iterations_used
    assert np.linalg.norm(res.w) == pytest.approx(1)


def test_iteration_cap_reported(rng):
    P = 500
    Z, _ = whiten(MixedSignals(rng.normal(size=(3, P)), (10, 50)))
    res = solve(Z, rng.normal(size=P), ICARConfig(max_iters=2, tol=1e-15))
    assert res.iterations_used == 2 and not res.converged


def test_extract_on_stacks(rng):
    h, w = 12, 12
    blob = np.exp(-((np.arange(h)[:, None] - 5) ** 2 + (np.arange(w)[None] - 6) ** 2) / 8.0)
    mixtures = np.stack([blob + 0.1 * rng.normal(size=(h, w)) for _ in range(3)])
    prior = FeatureStack(np.stack([blob, blob]), Layer.LAYER1, 8)
    res = extract(FeatureStack(mixtures, Layer.LAYER1, 8), prior, ICARConfig())
    assert res.v.values.shape == (h, w)
    assert np.corrcoef(res.v.values.ravel(), blob.ravel())[0, 1] > 0.8
    # a reference at another resolution is resized to the mixture grid
    res2 = extract(mixtures, HeatMap(np.kron(blob, np.ones((2, 2)))), ICARConfig())
    assert res2.v.values.shape == (h, w)
