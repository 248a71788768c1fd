"""Tests for Fock distributions, sideband flopping traces and model fits.

Tags: [DERIVED] independent oracle, [PAPER] reference value, [TRIVIAL] identity.
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from iontransport import measurement_sim as ms
from iontransport.errors import FitError, ParseError

TWO_PI = 2 * math.pi
OMEGA0 = TWO_PI * 100e3
GAMMA = 3e3
TIMES = np.linspace(0.0, 100e-6, 201)
N_FOCK = 120


def trace_for(model, x, eta=0.479, gamma=GAMMA, sideband="MAS", times=TIMES):
    dist = ms.thermal_dist(x) if model == "thermal" else ms.coherent_dist(x)
    return ms.flopping_trace(dist, sideband, OMEGA0, eta, gamma, times)


# -- distributions ----------------------------------------------------------------

def test_thermal_examples():
    """[TRIVIAL] nbar = 0 is the ground state; [DERIVED] nbar = 1 gives 1/2, 1/4."""
    assert ms.thermal_dist(0).populations[0] == 1.0
    p = ms.thermal_dist(1.0).populations
    assert p[0] == pytest.approx(0.5, abs=1e-15)
    assert p[1] == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        ms.thermal_dist(-0.1)


@settings(max_examples=40, deadline=None)
@given(nbar=st.floats(0, ms.max_nbar("thermal")))
def test_thermal_mean_and_tail(nbar):
    """[DERIVED] the truncated distribution keeps the mean and the mass to 1e-6."""
    d = ms.thermal_dist(nbar)
    assert abs(d.mean - nbar) < 1e-6
    assert 1 - 1e-6 <= d.populations.sum() <= 1 + 1e-12


def test_coherent_examples():
    """[PAPER] |alpha| = 2.53 <-> 6.4 and 1.38 <-> 1.9 at caption rounding; [TRIVIAL] 0."""
    assert round(ms.coherent_dist(2.53).mean, 1) == 6.4
    assert round(ms.coherent_dist(1.38).mean, 1) == 1.9
    assert ms.coherent_dist(0).populations[0] == 1.0
    d = ms.coherent_dist(2.53)
    assert abs(d.mean - 2.53 ** 2) < 1e-6


def test_distribution_invariants():
    with pytest.raises(ValueError):
        ms.FockDistribution([0.5, 0.4])
    with pytest.raises(ValueError):
        ms.FockDistribution([1.2, -0.2])
    with pytest.raises(ValueError, match="truncates"):
        ms.thermal_dist(5.0, n_max=10)
    with pytest.raises(ValueError, match="cap"):
        ms.thermal_dist(1.01 * ms.max_nbar("thermal"))
    assert ms.max_nbar("thermal") < ms.max_nbar("coherent") < ms.N_CAP


# -- Rabi rates ----------------------------------------------------------------------

def brute_force_element(n, eta):
    """|<n| exp(i eta (a + a^dag)) |n + 1>| in a truncated Fock basis."""
    a = np.diag(np.sqrt(np.arange(1, N_FOCK)), 1)
    return abs(expm(1j * eta * (a + a.T))[n, n + 1])


def test_rabi_rate_examples():
    """[TRIVIAL] L_0^1 = 1 for the ground state; no lower state for MSS."""
    eta = 0.479
    assert ms.rabi_rate(0, "MAS", OMEGA0, eta) == pytest.approx(
        OMEGA0 * eta * math.exp(-eta ** 2 / 2), rel=1e-14)
    assert ms.rabi_rate(0, "MSS", OMEGA0, eta) == 0.0
    assert abs(ms.rabi_rate(5, "MAS", 1.0, eta) / brute_force_element(5, eta) - 1) < 1e-8
    np.testing.assert_array_equal(ms.rabi_rate(np.arange(1, 8), "MSS", 1.0, eta),
                                  ms.rabi_rate(np.arange(7), "MAS", 1.0, eta))
    with pytest.raises(ValueError):
        ms.rabi_rate(0, "carrier", 1.0, eta)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(0, 30), eta=st.floats(0.01, 0.6))
def test_rabi_rate_matches_matrix_exponential(n, eta):
    """[DERIVED] the Laguerre formula equals the brute-force matrix element to 1e-8."""
    ref = brute_force_element(n, eta)
    assert abs(ms.rabi_rate(n, "MAS", 1.0, eta) - ref) <= 1e-8 * ref


# -- traces ------------------------------------------------------------------------------

def test_trace_limits():
    """[TRIVIAL] P = 1 at t = 0 up to the truncated tail; full contrast for the
    ground state; 1/2 for fast decay."""
    tr = trace_for("thermal", 2.0)
    assert 1 - 1e-6 <= tr.p_down[0] <= 1.0
    ground = trace_for("thermal", 0.0, gamma=0.0)
    rate = ms.rabi_rate(0, "MAS", OMEGA0, 0.479)
    np.testing.assert_allclose(ground.p_down, 0.5 * (1 + np.cos(2 * rate * TIMES)),
                               atol=1e-15)
    decayed = trace_for("coherent", 1.5, gamma=1e12)
    assert np.max(np.abs(decayed.p_down[1:] - 0.5)) < 1e-12
    # without decay the MSS signal from the ground state never leaves |down>
    assert np.all(trace_for("thermal", 0.0, gamma=0.0, sideband="MSS").p_down == 1.0)


@settings(max_examples=40, deadline=None)
@given(model=st.sampled_from(ms.MODELS), x=st.floats(0, 8), eta=st.floats(0.01, 1.5),
       gamma=st.floats(0, 1e6), sideband=st.sampled_from(ms.SIDEBANDS))
def test_traces_are_probabilities(model, x, eta, gamma, sideband):
    """[TRIVIAL] every generated point lies in [0, 1]."""
    tr = trace_for(model, x, eta, gamma, sideband)
    assert np.all((tr.p_down >= 0) & (tr.p_down <= 1))


def test_trace_invariants():
    with pytest.raises(ValueError):
        ms.FloppingTrace([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        ms.FloppingTrace([0.0, 1.0], [1.0, 1.1])
    with pytest.raises(ValueError):
        ms.FloppingTrace([0.0, 1.0], [1.0, 1.0], sideband="RSB")


def test_binomial_noise_is_seeded():
    d = ms.thermal_dist(0.5)
    a = ms.flopping_trace(d, "MAS", OMEGA0, 0.479, GAMMA, TIMES, repetitions=100, seed=7)
    b = ms.flopping_trace(d, "MAS", OMEGA0, 0.479, GAMMA, TIMES, repetitions=100, seed=7)
    np.testing.assert_array_equal(a.p_down, b.p_down)
    np.testing.assert_allclose(a.p_down * 100, np.round(a.p_down * 100), atol=1e-9)
    with pytest.raises(ValueError):
        ms.flopping_trace(d, "MAS", OMEGA0, 0.479, GAMMA, TIMES, repetitions=0)


# -- fits ----------------------------------------------------------------------------------

def test_fit_thermal_round_trip():
    """[PAPER] nbar = 0.19 at eta = 0.479 is recovered within 1e-4 relative."""
    fit = ms.fit_distribution(trace_for("thermal", 0.19), "thermal")
    assert abs(fit.nbar / 0.19 - 1) < 1e-4
    assert abs(fit.gamma / GAMMA - 1) < 1e-4
    assert fit.nbar_sigma is not None and fit.nbar_sigma >= 0
    assert set(fit.to_dict()) == {"model", "nbar", "nbar_sigma", "gamma", "residual"}


def test_fit_coherent_round_trip():
    """[PAPER] |alpha| = 2.53 at eta = 0.486 is recovered within 1e-3 relative."""
    fit = ms.fit_distribution(trace_for("coherent", 2.53, eta=0.486), "coherent")
    assert abs(fit.alpha / 2.53 - 1) < 1e-3
    assert fit.alpha_sigma is not None
    assert fit.to_dict()["alpha"] == fit.alpha


@settings(max_examples=20, deadline=None)
@given(model=st.sampled_from(ms.MODELS), nbar=st.floats(0.05, 10))
def test_fit_round_trip_property(model, nbar):
    """[DERIVED] noiseless traces give back (nbar, gamma) to 1e-4 relative."""
    x = nbar if model == "thermal" else math.sqrt(nbar)
    fit = ms.fit_distribution(trace_for(model, x), model)
    assert abs(fit.nbar / nbar - 1) < 1e-4
    assert abs(fit.gamma / GAMMA - 1) < 1e-4


def test_fit_omega0_free():
    """[DERIVED] Omega0 can be fitted when it is a free parameter."""
    tr = trace_for("thermal", 0.4)
    fit = ms.fit_distribution(tr, "thermal", omega0=1.01 * OMEGA0, fit_omega0=True)
    assert abs(fit.omega0 / OMEGA0 - 1) < 1e-6
    assert fit.omega0_sigma is not None


def test_noise_bias_below_reported_sigma():
    """[DERIVED] Monte Carlo: Gaussian noise sigma = 0.02, 200 repeats; the
    estimator bias stays below its reported 1-sigma."""
    clean = trace_for("thermal", 0.19)
    rng = np.random.default_rng(20260418)
    est, sig = [], []
    for _ in range(200):
        y = np.clip(clean.p_down + rng.normal(0, 0.02, TIMES.size), 0, 1)
        fit = ms.fit_distribution(ms.FloppingTrace(TIMES, y, "MAS", 0.479, OMEGA0), "thermal")
        est.append(fit.nbar)
        sig.append(fit.nbar_sigma)
    bias = abs(np.mean(est) - 0.19)
    assert bias < np.mean(sig)
    # the reported sigma describes the actual scatter within a factor of two
    assert 0.5 < np.std(est) / np.mean(sig) < 2


@pytest.mark.parametrize("nbar", [1.0, 2.0, 6.4])
@pytest.mark.parametrize("truth", ms.MODELS)
def test_wrong_model_is_distinguishable(truth, nbar):
    """[DERIVED] the wrong family leaves at least 5x the right family's residual."""
    x = nbar if truth == "thermal" else math.sqrt(nbar)
    tr = trace_for(truth, x)
    wrong = "coherent" if truth == "thermal" else "thermal"
    right = ms.fit_distribution(tr, truth).residual
    other = ms.fit_distribution(tr, wrong).residual
    assert other >= 5 * right


def test_fit_errors():
    short = ms.FloppingTrace(TIMES[:10], np.ones(10), "MAS", 0.479, OMEGA0)
    with pytest.raises(FitError, match="20"):
        ms.fit_distribution(short, "thermal")
    brief = ms.FloppingTrace(np.linspace(0, 5e-6, 50), np.ones(50), "MAS", 0.479, OMEGA0)
    with pytest.raises(FitError, match="periods"):
        ms.fit_distribution(brief, "thermal")
    with pytest.raises(ValueError):
        ms.fit_distribution(ms.FloppingTrace(TIMES, np.ones(TIMES.size)), "thermal")
    with pytest.raises(ValueError):
        ms.fit_distribution(trace_for("thermal", 0.2), "squeezed")


def test_covariance_unavailable_when_singular():
    """[TRIVIAL] a rank-deficient Jacobian or no spare degrees of freedom flag the
    uncertainty as unavailable."""
    r = np.full(30, 1e-3)
    assert ms._covariance(np.zeros((30, 2)), r, 2) is None
    assert ms._covariance(np.ones((2, 2)), r[:2], 2) is None
    cov = ms._covariance(np.eye(30)[:, :2], r, 2)
    assert cov is not None and np.all(np.diag(cov) >= 0)


# -- files ------------------------------------------------------------------------------

def test_trace_csv_round_trip(tmp_path):
    tr = trace_for("coherent", 1.38)
    ms.write_trace_csv(tmp_path / "t.csv", tr)
    back = ms.read_trace_csv(tmp_path / "t.csv", eta=0.479, omega0=OMEGA0)
    np.testing.assert_array_equal(back.times, tr.times)
    np.testing.assert_array_equal(back.p_down, tr.p_down)


@pytest.mark.parametrize("text,line", [
    ("t_s,p_down\n0,1\n1e-6,abc\n", 3),
    ("t_s,p_down\n0,1\n1e-6,0.5,3\n", 3),
    ("t_s,p_down\n0,1\n0,0.5\n", 3),
    ("t_s,p_down\n0,1.5\n", 2),
    ("time,p\n0,1\n", 1),
])
def test_trace_csv_errors(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        ms.read_trace_csv(path)
    assert info.value.line == line


def test_empty_trace_file(tmp_path):
    """[TRIVIAL] an empty file or a header alone is a parse error."""
    for text in ("", "t_s,p_down\n"):
        path = tmp_path / "empty.csv"
        path.write_text(text)
        with pytest.raises(ParseError):
            ms.read_trace_csv(path)
    with pytest.raises(ParseError):
        ms.read_trace_csv(tmp_path / "missing.csv")
