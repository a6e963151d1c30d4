import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from flucrel import catalog
from flucrel.errors import InsufficientOverlap
from flucrel.relations import initial_for, mean_and_error
from flucrel.sde import RngStream, run_ensemble, sample_path
from flucrel.tangent import (Cocycle, KraichnanTangent, contraction_identity_check,
                             kraichnan_covariance, kraichnan_ensemble, linear_cocycle_check,
                             log_singular_values, multiplicative_fr_check, spectrum_of,
                             stretching_exponents, tangent_along)

from helpers import deterministic_spec, ou_spec

NON_NORMAL = np.array([[0.3, 2.0], [-0.4, -0.8]])


def along(spec, x0, h=1e-2, seed=0, **kw):
    return tangent_along(spec, sample_path(spec, x0, h, RngStream(seed, 0)), **kw)


def test_identity_cocycle_is_identity():
    assert np.array_equal(Cocycle.identity(3, 2).dense(), np.broadcast_to(np.eye(2), (3, 2, 2)))


def test_zero_noise_linear_flow_is_matrix_exponential():
    spec = deterministic_spec(NON_NORMAL, horizon=2.0)
    tan = along(spec, [0.5, -0.2])
    assert np.allclose(tan.dense()[0], expm(2.0 * NON_NORMAL), rtol=1e-12, atol=1e-12)
    assert abs(tan.log_det[0] - 2.0 * np.trace(NON_NORMAL)) < 1e-12


def test_contraction_of_relaxation_is_minus_horizon():
    spec = deterministic_spec([[-1.0]], horizon=1.0)
    tan = along(spec, [1.0])
    assert abs(tan.log_det[0] + 1.0) < 1e-12


def test_linear_ou_log_det_is_trace_times_horizon():
    proc = catalog.build("linear")
    run = {}

    def keep(batch):
        run["tan"] = tangent_along(proc.spec, batch)
        return {}

    run_ensemble(proc.spec, 20, 1e-2, 1, initial_for(proc.phi, proc.spec), reducer=keep, chunk=20)
    tan = run["tan"]
    want = proc.spec.horizon * np.trace(proc.model.m)
    assert np.allclose(tan.log_det, want, atol=1e-10)
    rep = contraction_identity_check(tan)
    assert rep.passed and rep.max_residual < 1e-10


def test_stretching_of_diagonal_matrix():
    assert np.allclose(spectrum_of(np.diag([2.0, 0.5])), [np.log(2.0), -np.log(2.0)], atol=1e-14)


def test_large_spread_uses_rotation_sweeps():
    # symmetric drift with eigenvalues +-25 over T = 2: singular values e^{+-50}
    q = np.array([[np.cos(0.4), -np.sin(0.4)], [np.sin(0.4), np.cos(0.4)]])
    m = q @ np.diag([25.0, -25.0]) @ q.T
    spec = deterministic_spec(m, horizon=2.0)
    tan = along(spec, [0.0, 0.0])
    rho = stretching_exponents(tan).rho[0]
    assert np.allclose(rho, [50.0, -50.0], atol=1e-8)
    assert abs(rho.sum() - tan.log_det[0]) < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.floats(-40, 40), st.floats(-40, 40), st.floats(-3, 3))
def test_log_singular_values_match_svd_for_triangular(a, b, off):
    w = np.array([[1.0, off], [0.0, 1.0]])
    w = w / np.linalg.norm(w, axis=0)
    got = log_singular_values(w[None], np.array([[a, b]]))[0]
    # dense reference after pulling out the larger scale
    x = w * np.exp(np.array([a, b]) - max(a, b))
    ref = np.log(np.linalg.svd(x, compute_uv=False)) + max(a, b)
    finite = ref > max(a, b) - 30  # svd loses the small value beyond double range
    assert np.allclose(got[finite], ref[finite], atol=1e-8)
    assert abs(got.sum() - (a + b + np.log(abs(np.linalg.det(w))))) < 1e-8


@pytest.mark.parametrize("k_qr", [1, 10, 100])
def test_reorthonormalization_interval_does_not_change_result(k_qr):
    spec = deterministic_spec(NON_NORMAL, horizon=2.0)
    ref = along(spec, [0.1, 0.1], k_qr=1)
    got = along(spec, [0.1, 0.1], k_qr=k_qr)
    assert np.allclose(stretching_exponents(got).rho, stretching_exponents(ref).rho, atol=1e-10)


def test_diagonal_metric_rescales_exponents():
    spec = deterministic_spec(np.diag([0.5, -1.0]), horizon=2.0)
    tan = along(spec, [0.0, 0.0])
    assert np.allclose(stretching_exponents(tan, metric=([1.0, 1.0], [1.0, 1.0])).rho,
                       stretching_exponents(tan).rho, atol=1e-13)
    # |X v|_g1 / |v|_g0 with g1 = diag(4, 1), g0 = diag(1, 9)
    rho = stretching_exponents(tan, metric=([1.0, 9.0], [4.0, 1.0])).rho[0]
    assert np.allclose(rho, [1.0 + np.log(2.0), -2.0 - np.log(3.0)], atol=1e-12)


def test_linear_cocycle_reversal_and_weight():
    rep = linear_cocycle_check(NON_NORMAL, 1.5)
    assert rep["location"] < 1e-12 and rep["weight"] < 1e-12


def kraichnan(dim, p=0.0, c=1.0, T=1.0):
    return KraichnanTangent(kraichnan_covariance(dim, p, c), T)


def test_kraichnan_1d_exponent_is_gaussian():
    c, T = 1.0, 1.0
    out = kraichnan_ensemble(kraichnan(1, c=c, T=T), 20_000, 1e-2, seed=3)
    rho = out["rho"][:, 0]
    m, se = mean_and_error(rho)
    assert abs(m + c * T / 2) < 3 * se
    v = rho.var(ddof=1)
    assert abs(v - c * T) < 3 * c * T * np.sqrt(2.0 / len(rho))


def test_kraichnan_spectrum_sums_to_log_det_and_k_qr_invariance():
    model = kraichnan(2, p=0.3)
    a = kraichnan_ensemble(model, 200, 1e-2, seed=4, k_qr=1)
    b = kraichnan_ensemble(model, 200, 1e-2, seed=4, k_qr=50)
    assert np.allclose(a["rho"].sum(axis=1), a["log_det"], atol=1e-10)
    assert np.allclose(a["rho"], b["rho"], atol=1e-9)


def test_kraichnan_right_multiplication_by_start_matrix():
    model = kraichnan(2, p=0.5)
    x0 = np.array([[2.0, 0.3], [0.0, 1.5]])
    plain = kraichnan_ensemble(model, 50, 1e-2, seed=5)
    moved = kraichnan_ensemble(model, 50, 1e-2, seed=5, x0=x0)
    assert np.allclose(moved["log_det"], plain["log_det"] + np.log(3.0), atol=1e-12)
    assert np.allclose(moved["rho"].sum(axis=1), moved["log_det"], atol=1e-9)


def test_incompressible_kraichnan_preserves_volume():
    out = kraichnan_ensemble(kraichnan(2, p=0.0), 100, 1e-2, seed=6)
    assert np.abs(out["log_det"]).max() < 1e-9


def test_kraichnan_covariance_validates_degree():
    with pytest.raises(ValueError):
        kraichnan_covariance(2, 1.5)


def test_multiplicative_fr_rejects_disjoint_samples():
    with pytest.raises(InsufficientOverlap):
        multiplicative_fr_check(np.zeros((10, 1)), np.full((10, 1), 5.0), min_count=5)


def test_ou_tangent_with_constant_noise_is_deterministic():
    spec = ou_spec(rate=2.0, horizon=0.5)
    a = along(spec, [1.0], seed=1)
    b = along(spec, [-3.0], seed=2)
    assert np.allclose(a.dense(), np.exp(-1.0), rtol=1e-12)
    assert np.allclose(a.dense(), b.dense(), rtol=1e-12)
