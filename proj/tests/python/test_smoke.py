import numpy as np
import pytest

import twfm


def make_params(p=30, q=25, seed=3):
    return twfm.sample_params(twfm.Dims(p, q, 1, 1), [8.0], [1.0], 0.01, seed)


def test_sample_shapes_and_determinism():
    t = make_params()
    a = twfm.sample(t, 5)
    b = twfm.sample(t, 5)
    assert a["X"].shape == (30, 25)
    assert a["F"].shape == (30, 1)
    assert a["E"].shape == (25, 1)
    np.testing.assert_array_equal(a["X"], b["X"])


def test_loglik_matches_dense_gaussian():
    t = twfm.sample_params(twfm.Dims(6, 5, 1, 2), [8.0], [3.0, 0.5], 0.2, 9)
    X = twfm.sample(t, 1)["X"]
    S = twfm.dense_sigma(t)
    x = X.reshape(-1)  # row-major vec
    _, logdet = np.linalg.slogdet(S)
    expected = -logdet - x @ np.linalg.solve(S, x)
    assert twfm.log_likelihood(t, X) == pytest.approx(expected, rel=1e-10)
    assert twfm.log_det_sigma(t) == pytest.approx(logdet, rel=1e-12)


def test_fit_recovers_loadings():
    # The larger factor sits in the role with fewer draws (p < q), where the
    # global maximum and the truth agree.
    t = make_params(50, 80)
    X = twfm.sample(t, 11)["X"]
    res = twfm.fit(X, 1, 1)
    assert res.converged
    assert res.stop_reason == "tolerance"
    trace = np.asarray(res.loglik_trace)
    assert np.all(np.diff(trace) >= -1e-8)
    assert res.loglik == pytest.approx(trace[-1])
    r2 = twfm.loading_r2(res.theta_hat.L, t.L)
    assert r2[0] > 0.9
    assert res.F.shape == (50, 1)


def test_square_tie_is_reported():
    # With p = q the row/column roles of the two factors give equal likelihoods.
    t = make_params(60, 60)
    res = twfm.fit(twfm.sample(t, 11)["X"], 1, 1)
    assert res.converged
    assert any("same likelihood" in w for w in res.warnings)


def test_params_json_round_trip():
    t = make_params()
    back = twfm.ModelParams.from_json(t.to_json())
    np.testing.assert_array_equal(back.L, t.L)
    assert back.sigma2 == t.sigma2


def test_errors_are_translated():
    with pytest.raises(twfm.TwfmError):
        twfm.sample_params(twfm.Dims(10, 10, 1, 1), [1.0], [1.0], 0.01, 1)
    ok, summary = twfm.validate(make_params())
    assert ok and summary == ""


def test_scalar_variance_pole():
    assert np.isinf(twfm.scalar_loading_variance(1.0, 1.0, 1.0, 1.0))
    assert twfm.scalar_loading_variance(1.0, 1.0, 1.0, 0.8) == pytest.approx(46.0)
    v = twfm.asymptotic_variances(make_params(), 1.2)
    assert v["sigma2"] == pytest.approx(2e-4)


def test_role_preference_follows_the_dimensions():
    # Same design transposed in size: the global maximum moves the large
    # factor to the column role, and the dense likelihood agrees.
    t = make_params(40, 25)
    X = twfm.sample(t, 11)["X"]
    res = twfm.fit(X, 1, 1)
    th = res.theta_hat
    assert th.psiE[0] > th.psiF[0]
    S = twfm.dense_sigma(th)
    x = X.reshape(-1)
    _, logdet = np.linalg.slogdet(S)
    assert res.loglik == pytest.approx(-logdet - x @ np.linalg.solve(S, x), rel=1e-10)
    assert res.loglik > twfm.log_likelihood(t, X)
