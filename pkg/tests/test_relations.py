import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from flucrel import catalog
from flucrel.errors import InsufficientOverlap, SamplerUnavailable
from flucrel.fields import ScalarField
from flucrel.oracles import LinearModel
from flucrel.relations import (crooks_check, detailed_balance_check, detailed_fr_check,
                               deterministic_jarzynski, estimate, free_energy_estimate,
                               initial_for, jarzynski_check, log_ratio_regression,
                               mean_and_error, pathwise_symmetry_check, speck_seifert_check)
from flucrel.reversal import InversionScheme

from helpers import gibbs_quadratic, ou_spec


def scheme(proc, name):
    return InversionScheme(name, phi=proc.phi)


def test_complete_reversal_gives_constant_exponential():
    proc = catalog.build("double_well", tilt1=0.0)
    est = jarzynski_check(proc.spec, scheme(proc, "complete_reversal"), n=500, seed=1)
    assert est.mean == 1.0 and est.std_error == 0.0 and est.verdict


def test_jarzynski_breathing_ou_and_jensen():
    proc = catalog.build("breathing_ou")
    est = jarzynski_check(proc.spec, scheme(proc, "canonical"), n=20_000, seed=2)
    assert est.verdict, (est.mean, est.std_error)
    assert est.extras["jensen_ok"] and est.extras["mean_W"] > 0
    assert est.extras["escaped"] == 0


def test_deterministic_jarzynski_for_frictionless_oscillator():
    # a Hamiltonian flow preserves volume, so the quadrature sees only phi_T transported back
    proc = catalog.build("langevin_kramers", friction=0.0, k0=1.0, k1=2.0)
    val = deterministic_jarzynski(proc.spec, proc.phi, [[-9.0, 9.0], [-9.0, 9.0]], nodes=120)
    assert abs(val - 1.0) < 1e-6


def test_free_energy_estimate_of_constant_work():
    dF, se = free_energy_estimate(np.full(10, 0.7), beta=2.0)
    assert abs(dF - 0.7) < 1e-15 and se == 0.0


def test_crooks_on_zero_duration_has_no_overlap():
    proc = catalog.build("double_well", tilt1=0.0, horizon=1e-3)
    with pytest.raises(InsufficientOverlap):
        crooks_check(proc.spec, scheme(proc, "complete_reversal"), n=200, seed=3)


def test_log_ratio_regression_recovers_exponential_tilt():
    # Gaussian pair with means +-s^2/2 and variance s^2 satisfies the log-ratio law exactly
    rng = np.random.default_rng(0)
    s = 1.0
    wf = rng.normal(0.5 * s * s, s, 400_000)
    wb = rng.normal(0.5 * s * s, s, 400_000)
    _, _, _, used, coef, se = log_ratio_regression(wf, -wb, bins=30)
    assert used.sum() >= 5
    assert abs(coef[0] - 1.0) < 4 * se[0] and abs(coef[1]) < 4 * se[1]


def test_stationary_driven_evans_searles():
    # static drive, stationary start: the backward process is the forward one
    proc = catalog.build("linear")
    rep = crooks_check(proc.spec, scheme(proc, "reversed_protocol"), n=40_000, seed=4, bins=20)
    assert rep.verdict, (rep.slope, rep.intercept)


def test_speck_seifert_on_equilibrium_is_identically_one():
    proc = catalog.build("breathing_ou", k1=1.0)
    rep = speck_seifert_check(proc.spec, proc.phi, n=300, seed=5)
    assert np.allclose(rep.integral.mean, 1.0, atol=1e-10)
    assert rep.integral.std_error < 1e-10


def test_detailed_balance_binned_for_equilibrium_ou():
    proc = catalog.build("breathing_ou", k1=1.0)
    rep = detailed_balance_check(proc.spec, proc.phi, 0.5, n=100_000, h=1e-2, bins=5, seed=6)
    assert rep.passed, rep.residual


def test_detailed_balance_gaussian_needs_generalized_form_when_driven():
    model = LinearModel(np.eye(2), np.array([[0.0, 1.0], [-1.0, 0.0]]), np.eye(2))
    plain = detailed_balance_check(model, None, 0.7, route="gaussian", generalized=False)
    gen = detailed_balance_check(model, None, 0.7, route="gaussian", generalized=True)
    assert not plain.passed and plain.residual > 1e-3
    assert gen.passed


def test_detailed_balance_gaussian_undriven():
    model = LinearModel(np.diag([1.0, 2.0]), np.zeros((2, 2)), np.array([[2.0, 0.5], [0.5, 1.0]]))
    assert detailed_balance_check(model, None, 1.3, route="gaussian", generalized=False).passed


@pytest.mark.parametrize("exponent,ok", [(2.0, True), (1.0, False), (0.0, False)])
def test_lognormal_detailed_balance_selects_inverse_square(exponent, ok):
    rep = detailed_balance_check(1.0, None, 0.8, route="lognormal", exponent=exponent)
    assert rep.passed is ok


def test_detailed_fr_on_breathing_ou():
    proc = catalog.build("breathing_ou")
    rep = detailed_fr_check(proc.spec, scheme(proc, "canonical"), n=100_000, h=1e-2, seed=7,
                            y_bins=4, w_bins=6)
    assert rep.passed, rep.residual


def test_pathwise_symmetry_on_driven_linear():
    proc = catalog.build("linear", c1=[[2.0, 0.3], [0.3, 1.0]])
    rep = pathwise_symmetry_check(proc.spec, scheme(proc, "current_reversal"), n=50, seed=8)
    assert rep.passed, rep.max_residual


def test_missing_sampler_without_box():
    phi = ScalarField(lambda t, x: x[:, 0] ** 2)
    with pytest.raises(SamplerUnavailable):
        initial_for(phi, ou_spec())
    with pytest.raises(SamplerUnavailable):
        initial_for(None, ou_spec())


def test_rejection_sampler_reproduces_gaussian_moments():
    spec = ou_spec()
    spec.params["sample_box"] = [[-8.0, 8.0]]
    numeric = ScalarField(lambda t, x: 0.5 * x[:, 0] ** 2 + 0.5 * np.log(2 * np.pi))
    draw = initial_for(numeric, spec)
    gen = np.random.default_rng(0)
    xs = np.array([draw(gen)[0] for _ in range(4000)])
    m, se = mean_and_error(xs)
    assert abs(m) < 3 * se
    v, _ = mean_and_error(xs ** 2)
    assert abs(v - 1.0) < 3 * np.sqrt(2.0 / len(xs))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=200), st.floats(-1, 1))
def test_estimate_invariants(values, target):
    est = estimate(values, target, seed=0)
    assert est.n == len(values)
    assert int(est.histogram[1].sum()) == len(values)
    assert est.std_error >= 0
    assert est.verdict == (abs(est.mean - target) <= 3 * est.std_error)
    assert min(values) - 1e-9 <= est.mean <= max(values) + 1e-9


def test_gibbs_helper_sampler_is_normalised_density():
    phi = gibbs_quadratic(beta=2.0, k=3.0)
    xs = np.linspace(-6, 6, 20001)[:, None]
    dens = np.exp(-phi(np.zeros(len(xs)), xs))
    assert abs(integrate.trapezoid(dens, x=xs[:, 0]) - 1.0) < 1e-8
