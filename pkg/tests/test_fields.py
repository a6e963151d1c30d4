import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flucrel.errors import CovarianceNotPSD, NonFiniteDerivative
from flucrel.fields import (ConstantNoise, FieldNoise, Involution, KernelNoise, ScalarField,
                            VectorField, fd_gradient, fd_hessian, fd_jacobian, psd_factor,
                            reflect_scalar_field, reflect_vector_field)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def cubic_field():
    return VectorField(lambda t, x: np.stack([x[:, 0] ** 3 + t * x[:, 1], np.sin(x[:, 0] * x[:, 1])], 1))


def cubic_jac(t, x):
    a, b = x[:, 0], x[:, 1]
    return np.stack([np.stack([3 * a ** 2, t], 1),
                     np.stack([b * np.cos(a * b), a * np.cos(a * b)], 1)], 1)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (4, 2), elements=finite), st.floats(0, 2))
def test_fd_jacobian_matches_analytic(x, t):
    got = cubic_field().jac(t, x)
    want = cubic_jac(np.full(4, t), x)
    assert np.allclose(got, want, rtol=1e-7, atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 2), elements=finite))
def test_fd_hessian_and_gradient_of_polynomial(x):
    f = lambda t, y: y[:, 0] ** 2 * y[:, 1] + y[:, 1] ** 3
    g = fd_gradient(f, 0.0, x)
    assert np.allclose(g[:, 0], 2 * x[:, 0] * x[:, 1], atol=1e-6)
    assert np.allclose(g[:, 1], x[:, 0] ** 2 + 3 * x[:, 1] ** 2, atol=1e-6)
    hs = fd_hessian(f, 0.0, x)
    assert np.allclose(hs[:, 0, 0], 2 * x[:, 1], atol=1e-4)
    assert np.allclose(hs[:, 0, 1], 2 * x[:, 0], atol=1e-4)
    assert np.allclose(hs[:, 1, 1], 6 * x[:, 1], atol=1e-4)


def test_fd_probe_rejects_nonfinite_values():
    with pytest.raises(NonFiniteDerivative), np.errstate(invalid="ignore", divide="ignore"):
        fd_jacobian(lambda t, x: np.log(x), 0.0, np.array([[0.0]]))


def test_vector_field_algebra_keeps_divergence():
    a = VectorField.linear([[1.0, 2.0], [0.0, -3.0]])
    b = VectorField.linear([[0.5, 0.0], [1.0, 1.0]])
    x = np.array([[0.3, -0.2]])
    assert np.allclose((a - b)(0.0, x), a(0.0, x) - b(0.0, x))
    assert np.allclose((a + b).div(0.0, x), [-2.0 + 1.5])
    assert np.allclose((-a).jac(0.0, x), -a.jac(0.0, x))


def test_psd_factor_handles_singular_matrices():
    m = np.array([[1.0, 1.0], [1.0, 1.0]])
    l = psd_factor(m)
    assert np.allclose(l @ l.T, m)
    with pytest.raises(CovarianceNotPSD):
        psd_factor(np.array([[1.0, 0.0], [0.0, -1.0]]))


@settings(max_examples=30, deadline=None)
@given(arrays(float, (3, 3), elements=finite))
def test_psd_factor_reconstructs_random_gram_matrices(a):
    m = a @ a.T
    l = psd_factor(m)
    assert np.allclose(l @ l.T, m, atol=1e-9 * (1 + np.abs(m).max()))


def test_involution_must_square_to_identity():
    with pytest.raises(ValueError):
        Involution.linear([[0.0, 2.0], [1.0, 0.0]])
    r = Involution.linear([[1.0, 0.0], [0.0, -1.0]])
    x = np.array([[1.0, 2.0]])
    assert np.allclose(r(r(x)), x)
    assert np.allclose(r.log_sigma(x), 0.0)


def test_reflected_vector_field_applies_time_and_sign():
    f = VectorField(lambda t, x: t[:, None] * x)
    r = Involution.linear([[-1.0]])
    g = reflect_vector_field(f, r, 2.0, -1.0)
    x = np.array([[0.5]])
    # sign * r * f_{T-t}(r x) = -1 * -1 * (2-0.5) * (-0.5)
    assert np.allclose(g(0.5, x), [[-0.75]])


def test_reflected_potential_sampler_pushes_forward():
    phi = ScalarField(lambda t, x: x[:, 0] + t, grad=lambda t, x: np.ones_like(x),
                      sampler=lambda t, u: u + t[:, None], n_uniforms=1)
    r = Involution.linear([[-1.0]])
    ref = reflect_scalar_field(phi, r, 1.0)
    u = np.array([[0.25]])
    assert np.allclose(ref.sample(0.25, u), [[-1.0]])
    assert np.allclose(ref(0.25, np.array([[2.0]])), [-2.0 + 0.75])


def test_noise_divergences():
    const = ConstantNoise(np.diag([2.0, 1.0]))
    x = np.array([[0.3, 0.4]])
    assert np.all(const.div_x(0.0, x) == 0)
    # D(x, y) = x y in one dimension: d/dx D at y = x is x, d/dy is x
    lin = FieldNoise(lambda t, x: x[:, :, None], 1, 1)
    assert np.allclose(lin.div_x(0.0, np.array([[1.5]])), [[1.5]])
    kern = KernelNoise.from_noise(lin)
    assert np.allclose(kern.div_y(0.0, np.array([[1.5]])), [[1.5]], atol=1e-8)
