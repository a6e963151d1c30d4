import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flucrel import catalog
from flucrel.errors import MissingNoiseRecord, SingularDiffusion
from flucrel.fields import ConstantNoise, Involution, VectorField
from flucrel.functionals import (entropy_flux_integral, entropy_flux_steps, first_law_residual,
                                 functional_W, heat_work_langevin)
from flucrel.relations import initial_for
from flucrel.reversal import InversionScheme, resplit
from flucrel.sde import PathBatch, ProcessSpec, run_ensemble


def paths(proc, n=64, h=1e-3, seed=0, **kw):
    spec = proc.spec
    out = {}

    def keep(batch):
        out["batch"] = batch
        return {"x": batch.states[:, -1]}

    run_ensemble(spec, n, h, seed, initial_for(proc.phi, spec), reducer=keep, chunk=n, **kw)
    return out["batch"]


def scheme(proc, name):
    return InversionScheme(name, phi=proc.phi)


def test_complete_reversal_annihilates_W():
    proc = catalog.build("linear")
    batch = paths(proc)
    pf = functional_W(batch, proc.spec, scheme(proc, "complete_reversal"))
    assert np.all(pf.W == 0.0)
    # without the telescoping shortcut the integral still cancels delta phi to discretization accuracy
    raw = functional_W(batch, proc.spec, scheme(proc, "complete_reversal"), exact_telescoping=False)
    assert np.abs(raw.W).max() < 1e-10


def test_hat_plus_zero_on_deterministic_contraction():
    T = 1.5
    spec = ProcessSpec(1, VectorField.linear([[-1.0]]), VectorField.zero(1), ConstantNoise(0.0),
                       Involution.identity(1), T)
    run = run_ensemble(spec, 3, 1e-2, 0, np.array([[1.0], [-2.0], [0.5]]),
                       reducer=lambda b: {"j": entropy_flux_integral(b, spec, InversionScheme("hat_plus_zero"))})
    j = run["j"]
    assert np.allclose(j, T, rtol=0, atol=1e-12)


def test_canonical_flux_equals_beta_heat_for_static_hamiltonian():
    proc = catalog.build("double_well", tilt1=0.0, beta=2.0)
    batch = paths(proc, store_noise=True)
    j = entropy_flux_integral(batch, proc.spec, scheme(proc, "canonical"))
    Q, work, dU = heat_work_langevin(batch, proc.spec)
    assert np.all(work == 0.0)
    assert np.allclose(j, 2.0 * Q, rtol=1e-10, atol=1e-12)


def test_stationary_current_reversal_has_zero_excess():
    proc = catalog.build("linear")
    batch = paths(proc)
    ex = functional_W(batch, proc.spec, scheme(proc, "current_reversal"), variant="ex")
    assert np.abs(ex.W).max() < 1e-10


def test_housekeeping_is_total_minus_excess():
    proc = catalog.build("linear", c1=[[2.0, 0.3], [0.3, 1.0]])
    batch = paths(proc)
    s = scheme(proc, "current_reversal")
    tot = functional_W(batch, proc.spec, s, variant="tot")
    ex = functional_W(batch, proc.spec, s, variant="ex")
    hk = functional_W(batch, proc.spec, s, variant="hk")
    assert np.array_equal(hk.W, tot.W - ex.W)


def test_breathing_ou_W_is_dissipated_work():
    proc = catalog.build("breathing_ou")
    batch = paths(proc, store_noise=True)
    W = functional_W(batch, proc.spec, scheme(proc, "canonical")).W
    _, work, _ = heat_work_langevin(batch, proc.spec)
    assert np.allclose(W, work - 0.5 * math.log(2.0), rtol=0, atol=1e-10)


def test_static_hamiltonian_first_law_is_exact_for_quadratic_energy():
    proc = catalog.build("breathing_ou", k1=1.0)
    batch = paths(proc, store_noise=True)
    Q, work, dU = heat_work_langevin(batch, proc.spec)
    assert np.all(work == 0.0)
    assert np.allclose(dU, -Q, rtol=0, atol=1e-12)


def test_work_is_time_derivative_integral():
    proc = catalog.build("breathing_ou", k0=1.0, k1=3.0)
    batch = paths(proc, store_noise=True)
    _, work, _ = heat_work_langevin(batch, proc.spec)
    x2 = batch.states[:, :, 0] ** 2
    dk = 2.0  # (k1 - k0) / T
    # dH/dt = dk x^2 / 2, trapezoid in the state
    want = 0.5 * dk * batch.step * 0.5 * (x2[:, 1:] + x2[:, :-1]).sum(axis=1)
    assert np.allclose(work, want, rtol=1e-12)


def test_heat_needs_noise_record():
    proc = catalog.build("breathing_ou")
    with pytest.raises(MissingNoiseRecord):
        heat_work_langevin(paths(proc), proc.spec)


def test_degenerate_noise_rejects_total_variant():
    proc = catalog.build("langevin_kramers")
    with pytest.raises(SingularDiffusion):
        functional_W(paths(proc), proc.spec, scheme(proc, "canonical"), variant="tot")


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 998), st.sampled_from(["canonical", "reversed_protocol", "current_reversal"]))
def test_flux_integral_is_additive_over_split_paths(cut, name):
    proc = catalog.build("breathing_ou")
    batch = _cached_batch()
    split = resplit(proc.spec, scheme(proc, name))
    full = entropy_flux_steps(batch, split).sum(axis=1)
    parts = []
    for sl in (slice(0, cut + 1), slice(cut, None)):
        sub = PathBatch(batch.step, batch.times[sl], batch.states[:, sl], None, None, batch.indices,
                        batch.escaped, batch.seed)
        parts.append(entropy_flux_steps(sub, split).sum(axis=1))
    assert np.allclose(parts[0] + parts[1], full, rtol=1e-12, atol=1e-12)


_BATCH = {}


def _cached_batch():
    if "b" not in _BATCH:
        _BATCH["b"] = paths(catalog.build("breathing_ou"), n=16)
    return _BATCH["b"]


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["natural", "hat_plus_zero", "canonical", "reversed_protocol",
                        "current_reversal"]))
def test_W_is_boundary_plus_integral(name):
    proc = catalog.build("breathing_ou")
    pf = functional_W(_cached_batch(), proc.spec, scheme(proc, name))
    assert np.array_equal(pf.W, pf.delta_phi + pf.J_integral)


def test_first_law_residual_scale():
    res, scale = first_law_residual(np.array([1.0]), np.array([2.0]), np.array([0.5]))
    assert res[0] == 0.5 and scale[0] == 3.5
