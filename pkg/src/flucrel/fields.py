"""Vector fields, scalar potentials, noise covariances and involutions.

Every callable in this module follows one batching convention: time is an
array of shape ``(n,)`` and points are an array of shape ``(n, d)``.  Vector
fields return ``(n, d)``, scalar fields ``(n,)`` and matrix fields
``(n, d, d)``.  Derivatives that are not supplied analytically are obtained
by central finite differences with a scale-aware step.
"""
from __future__ import annotations

import numpy as np

from .errors import CovarianceNotPSD, NonFiniteDerivative

FD_REL_STEP = 1e-5
FD_HESS_STEP = 1e-4


def as_times(t, n):
    """Broadcast a scalar or array time to shape ``(n,)``."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.full(n, float(t))
    return np.broadcast_to(t, (n,)).astype(float, copy=False)


def as_points(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :]
    return x


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteDerivative(f"finite-difference probe of {what} is not finite")
    return arr


def fd_jacobian(func, t, x, rel_step=FD_REL_STEP):
    """Central-difference Jacobian ``J[n, i, j] = d f^i / d x^j``."""
    x = as_points(x)
    n, d = x.shape
    t = as_times(t, n)
    step = rel_step * (1.0 + np.abs(x))
    cols = []
    for j in range(d):
        e = np.zeros_like(x)
        e[:, j] = step[:, j]
        fp = np.asarray(func(t, x + e), dtype=float)
        fm = np.asarray(func(t, x - e), dtype=float)
        cols.append((fp - fm) / (2.0 * step[:, j])[:, None])
    jac = np.stack(cols, axis=-1)
    return _check_finite(jac, "vector field")


def fd_gradient(func, t, x, rel_step=FD_REL_STEP):
    x = as_points(x)
    n, d = x.shape
    t = as_times(t, n)
    step = rel_step * (1.0 + np.abs(x))
    out = np.empty_like(x)
    for j in range(d):
        e = np.zeros_like(x)
        e[:, j] = step[:, j]
        out[:, j] = (np.asarray(func(t, x + e)) - np.asarray(func(t, x - e))) / (2.0 * step[:, j])
    return _check_finite(out, "scalar field")


def fd_hessian(func, t, x, rel_step=FD_HESS_STEP):
    """Second differences of a scalar field; the step balances truncation and round-off."""
    x = as_points(x)
    n, d = x.shape
    t = as_times(t, n)
    step = rel_step * (1.0 + np.abs(x))
    f0 = np.asarray(func(t, x), dtype=float)
    hess = np.empty((n, d, d))
    for i in range(d):
        ei = np.zeros_like(x)
        ei[:, i] = step[:, i]
        hess[:, i, i] = (func(t, x + ei) - 2.0 * f0 + func(t, x - ei)) / step[:, i] ** 2
        for j in range(i + 1, d):
            ej = np.zeros_like(x)
            ej[:, j] = step[:, j]
            val = (func(t, x + ei + ej) - func(t, x + ei - ej)
                   - func(t, x - ei + ej) + func(t, x - ei - ej)) / (4.0 * step[:, i] * step[:, j])
            hess[:, i, j] = val
            hess[:, j, i] = val
    return _check_finite(hess, "scalar field")


def fd_time_derivative(func, t, x, rel_step=FD_REL_STEP):
    x = as_points(x)
    t = as_times(t, x.shape[0])
    dt = rel_step * (1.0 + np.abs(t))
    out = (np.asarray(func(t + dt, x)) - np.asarray(func(t - dt, x))) / (2.0 * dt)
    return _check_finite(out, "time dependence")


class VectorField:
    """A time-dependent vector field with optional analytic Jacobian."""

    def __init__(self, func, jacobian=None, divergence=None, name=""):
        self.func = func
        self._jacobian = jacobian
        self._divergence = divergence
        self.name = name

    def __call__(self, t, x):
        x = as_points(x)
        return np.asarray(self.func(as_times(t, x.shape[0]), x), dtype=float)

    @property
    def has_jacobian(self):
        return self._jacobian is not None

    def jac(self, t, x):
        x = as_points(x)
        t = as_times(t, x.shape[0])
        if self._jacobian is not None:
            return np.asarray(self._jacobian(t, x), dtype=float)
        return fd_jacobian(self.func, t, x)

    def div(self, t, x):
        x = as_points(x)
        t = as_times(t, x.shape[0])
        if self._divergence is not None:
            return np.asarray(self._divergence(t, x), dtype=float)
        return np.trace(self.jac(t, x), axis1=1, axis2=2)

    @staticmethod
    def zero(dim):
        return VectorField(
            lambda t, x: np.zeros_like(x),
            jacobian=lambda t, x: np.zeros((x.shape[0], dim, dim)),
            divergence=lambda t, x: np.zeros(x.shape[0]),
            name="zero",
        )

    @staticmethod
    def linear(matrix, name="linear"):
        """The field ``x -> A x`` for a constant matrix ``A``."""
        a = np.array(matrix, dtype=float)
        return VectorField(
            lambda t, x: x @ a.T,
            jacobian=lambda t, x: np.broadcast_to(a, (x.shape[0],) + a.shape),
            divergence=lambda t, x: np.full(x.shape[0], np.trace(a)),
            name=name,
        )

    def __add__(self, other):
        return _combine(self, other, 1.0)

    def __sub__(self, other):
        return _combine(self, other, -1.0)

    def __neg__(self):
        return self.scaled(-1.0)

    def scaled(self, c):
        f, jac, div = self.func, self._jacobian, self._divergence
        return VectorField(
            lambda t, x: c * np.asarray(f(t, x)),
            jacobian=None if jac is None else (lambda t, x: c * np.asarray(jac(t, x))),
            divergence=None if div is None else (lambda t, x: c * np.asarray(div(t, x))),
            name=f"{c}*{self.name}",
        )


def _combine(a, b, sign):
    both_jac = a._jacobian is not None and b._jacobian is not None
    both_div = (a._divergence is not None or a._jacobian is not None) and (
        b._divergence is not None or b._jacobian is not None)

    def func(t, x):
        return np.asarray(a.func(t, x)) + sign * np.asarray(b.func(t, x))

    jac = (lambda t, x: a.jac(t, x) + sign * b.jac(t, x)) if both_jac else None
    div = (lambda t, x: a.div(t, x) + sign * b.div(t, x)) if both_div else None
    return VectorField(func, jacobian=jac, divergence=div, name=f"({a.name}{'+' if sign > 0 else '-'}{b.name})")


class ScalarField:
    """A time-dependent scalar function, typically a potential ``phi_t``.

    ``sampler(t, u)`` maps uniforms of shape ``(n, n_uniforms)`` to points
    distributed with density ``exp(-phi_t)``; it is optional.
    """

    def __init__(self, value, grad=None, hess=None, dt=None, sampler=None, n_uniforms=0, name=""):
        self.value = value
        self._grad = grad
        self._hess = hess
        self._dt = dt
        self.sampler = sampler
        self.n_uniforms = n_uniforms
        self.name = name

    def __call__(self, t, x):
        x = as_points(x)
        return np.asarray(self.value(as_times(t, x.shape[0]), x), dtype=float)

    def gradient(self, t, x):
        x = as_points(x)
        t = as_times(t, x.shape[0])
        if self._grad is not None:
            return np.asarray(self._grad(t, x), dtype=float)
        return fd_gradient(self.value, t, x)

    def hessian(self, t, x):
        x = as_points(x)
        t = as_times(t, x.shape[0])
        if self._hess is not None:
            return np.asarray(self._hess(t, x), dtype=float)
        if self._grad is not None:
            h = fd_jacobian(self._grad, t, x)
            return 0.5 * (h + np.swapaxes(h, 1, 2))
        return fd_hessian(self.value, t, x)

    def time_derivative(self, t, x):
        x = as_points(x)
        t = as_times(t, x.shape[0])
        if self._dt is not None:
            return np.asarray(self._dt(t, x), dtype=float)
        return fd_time_derivative(self.value, t, x)

    @property
    def can_sample(self):
        return self.sampler is not None

    def sample(self, t, uniforms):
        from .errors import SamplerUnavailable
        if self.sampler is None:
            raise SamplerUnavailable(f"no sampler attached to potential {self.name!r}")
        u = np.asarray(uniforms, dtype=float)
        return np.asarray(self.sampler(as_times(t, u.shape[0]), u), dtype=float)

    def gradient_field(self, scale=1.0):
        """The vector field ``scale * grad phi_t`` (Jacobian from the Hessian)."""
        return VectorField(
            lambda t, x: scale * self.gradient(t, x),
            jacobian=lambda t, x: scale * self.hessian(t, x),
            name=f"grad {self.name}",
        )

    def shifted(self, const):
        """Same field plus a constant (used to renormalize densities)."""
        return ScalarField(
            lambda t, x: self.value(t, x) + const,
            grad=self._grad, hess=self._hess, dt=self._dt,
            sampler=self.sampler, n_uniforms=self.n_uniforms, name=self.name,
        )


# --------------------------------------------------------------------------
# Involutions

class Involution:
    """A map ``x -> x*`` with ``(x*)* = x`` and its Jacobian."""

    def __init__(self, apply, jacobian, matrix=None, name="involution"):
        self._apply = apply
        self._jacobian = jacobian
        self.matrix = None if matrix is None else np.array(matrix, dtype=float)
        self.name = name

    @classmethod
    def linear(cls, r, name="linear"):
        r = np.array(r, dtype=float)
        if not np.allclose(r @ r, np.eye(r.shape[0]), atol=1e-12, rtol=0):
            raise ValueError("linear involution must square to the identity")
        return cls(lambda x: x @ r.T,
                   lambda x: np.broadcast_to(r, (x.shape[0],) + r.shape),
                   matrix=r, name=name)

    @classmethod
    def identity(cls, dim):
        return cls.linear(np.eye(dim), name="identity")

    @property
    def is_linear(self):
        return self.matrix is not None

    @property
    def is_identity(self):
        return self.is_linear and np.array_equal(self.matrix, np.eye(self.matrix.shape[0]))

    def __call__(self, x):
        return np.asarray(self._apply(as_points(x)), dtype=float)

    def jacobian(self, x):
        return np.asarray(self._jacobian(as_points(x)), dtype=float)

    def log_sigma(self, x):
        """``ln |det d x*/dx|`` at ``x``."""
        x = as_points(x)
        if self.is_linear:
            return np.full(x.shape[0], np.log(abs(np.linalg.det(self.matrix))))
        return np.linalg.slogdet(self.jacobian(x))[1]


def reflect_vector_field(field, involution, horizon, sign):
    """``sign * (dx*)(x*) field_{T-t}(x*)``; the backward-process transformation."""
    if involution.is_linear:
        r = involution.matrix

        def func(t, x):
            return sign * (field.func(horizon - t, x @ r.T) @ r.T)

        jac = None
        if field.has_jacobian:
            def jac(t, x):
                return sign * np.einsum("ij,njk,kl->nil", r, field.jac(horizon - t, x @ r.T), r)

        def div(t, x):
            return sign * field.div(horizon - t, x @ r.T)

        return VectorField(func, jacobian=jac, divergence=div, name=f"reflected {field.name}")

    def func(t, x):
        xs = involution(x)
        return sign * np.einsum("nij,nj->ni", involution.jacobian(xs), field.func(horizon - t, xs))

    return VectorField(func, name=f"reflected {field.name}")


def reflect_scalar_field(phi, involution, horizon, add_log_sigma=True):
    """``phi'_t(x) = phi_{T-t}(x*) + ln sigma(x*)`` with a pushed-forward sampler."""

    def value(t, x):
        xs = involution(x)
        out = phi.value(horizon - t, xs)
        if add_log_sigma:
            out = out + involution.log_sigma(xs)
        return out

    grad = None
    if involution.is_linear:
        r = involution.matrix

        def grad(t, x):
            return phi.gradient(horizon - t, x @ r.T) @ r

        def hess(t, x):
            return np.einsum("ji,njk,kl->nil", r, phi.hessian(horizon - t, x @ r.T), r)
    else:
        hess = None

    def dt(t, x):
        return -phi.time_derivative(horizon - t, involution(x))

    sampler = None
    if phi.sampler is not None:
        def sampler(t, u):
            return involution(phi.sampler(horizon - t, u))

    return ScalarField(value, grad=grad, hess=hess, dt=dt, sampler=sampler,
                       n_uniforms=phi.n_uniforms, name=f"reflected {phi.name}")


# --------------------------------------------------------------------------
# Noise covariances

def psd_factor(mat):
    """Factor symmetric PSD matrices as ``L L^T``; stacks are accepted.

    Cholesky first; on failure, a symmetric eigendecomposition in which
    negative eigenvalues smaller than ``1e-12 * trace`` are set to zero.
    """
    mat = np.asarray(mat, dtype=float)
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    sym = 0.5 * (mat + np.swapaxes(mat, -1, -2))
    w, v = np.linalg.eigh(sym)
    tr = np.trace(sym, axis1=-2, axis2=-1)[..., None]
    tol = 1e-12 * np.maximum(np.abs(tr), np.finfo(float).tiny)
    if np.any(w < -tol):
        raise CovarianceNotPSD(f"covariance has eigenvalue {w.min():.3e} below -1e-12*trace")
    w = np.where(w < tol, 0.0, w)
    return v * np.sqrt(w)[..., None, :]


class Noise:
    """Covariance ``D_t(x, y)`` of the white-noise velocity field."""

    dim: int
    noise_dim: int
    is_constant = False

    def kernel(self, t, x, y):
        raise NotImplementedError

    def matrix(self, t, x):
        x = as_points(x)
        return self.kernel(t, x, x)

    def factor(self, t, x):
        return psd_factor(self.matrix(t, x))

    def div_x(self, t, x):
        """``d/dx^j D^{ij}(x, y)`` at ``y = x``."""
        x = as_points(x)
        n, d = x.shape
        t = as_times(t, n)
        step = FD_REL_STEP * (1.0 + np.abs(x))
        out = np.zeros((n, d))
        for j in range(d):
            e = np.zeros_like(x)
            e[:, j] = step[:, j]
            diff = (self.kernel(t, x + e, x) - self.kernel(t, x - e, x))[:, :, j]
            out += diff / (2.0 * step[:, j])[:, None]
        return _check_finite(out, "covariance")

    def div_y(self, t, x):
        """``d/dy^j D^{ij}(x, y)`` at ``y = x``."""
        x = as_points(x)
        n, d = x.shape
        t = as_times(t, n)
        step = FD_REL_STEP * (1.0 + np.abs(x))
        out = np.zeros((n, d))
        for j in range(d):
            e = np.zeros_like(x)
            e[:, j] = step[:, j]
            diff = (self.kernel(t, x, x + e) - self.kernel(t, x, x - e))[:, :, j]
            out += diff / (2.0 * step[:, j])[:, None]
        return _check_finite(out, "covariance")

    def factor_jacobian(self, t, x):
        """``d E^i_a / d x^k`` as ``(n, d, m, d)``; only for explicit noise fields."""
        return None

    def reflected(self, involution, horizon):
        raise NotImplementedError


class ConstantNoise(Noise):
    """Additive noise with a constant covariance matrix."""

    is_constant = True

    def __init__(self, d):
        d = np.array(d, dtype=float)
        if d.ndim == 0:
            d = d.reshape(1, 1)
        if not np.allclose(d, d.T, atol=1e-14 * (1 + np.abs(d).max())):
            raise CovarianceNotPSD("constant covariance is not symmetric")
        self.d = d
        self.dim = d.shape[0]
        self.noise_dim = d.shape[0]
        self._factor = psd_factor(d)

    def kernel(self, t, x, y):
        x = as_points(x)
        return np.broadcast_to(self.d, (x.shape[0],) + self.d.shape)

    def factor(self, t, x):
        x = as_points(x)
        return np.broadcast_to(self._factor, (x.shape[0],) + self._factor.shape)

    def div_x(self, t, x):
        return np.zeros(as_points(x).shape)

    def div_y(self, t, x):
        return np.zeros(as_points(x).shape)

    def factor_jacobian(self, t, x):
        x = as_points(x)
        return np.zeros((x.shape[0], self.dim, self.noise_dim, self.dim))

    def reflected(self, involution, horizon):
        if involution.is_linear:
            r = involution.matrix
            return ConstantNoise(r @ self.d @ r.T)
        return KernelNoise.from_noise(self).reflected(involution, horizon)


class FieldNoise(Noise):
    """Noise ``v_t(x) = E_t(x) xi`` with ``D_t(x, y) = E_t(x) E_t(y)^T``."""

    def __init__(self, factor_fn, dim, noise_dim, factor_jac=None):
        self._e = factor_fn
        self._ejac = factor_jac
        self.dim = dim
        self.noise_dim = noise_dim

    def factor(self, t, x):
        x = as_points(x)
        return np.asarray(self._e(as_times(t, x.shape[0]), x), dtype=float)

    def kernel(self, t, x, y):
        return np.einsum("nia,nja->nij", self.factor(t, x), self.factor(t, y))

    def factor_jacobian(self, t, x):
        x = as_points(x)
        n, d = x.shape
        t = as_times(t, n)
        if self._ejac is not None:
            return np.asarray(self._ejac(t, x), dtype=float)

        def flat(tt, xx):
            return self._e(tt, xx).reshape(xx.shape[0], -1)

        jac = fd_jacobian(flat, t, x)
        return jac.reshape(n, d, self.noise_dim, d)

    def div_x(self, t, x):
        e = self.factor(t, x)
        de = self.factor_jacobian(t, x)
        return np.einsum("niaj,nja->ni", de, e)

    def div_y(self, t, x):
        e = self.factor(t, x)
        de = self.factor_jacobian(t, x)
        return np.einsum("nia,njaj->ni", e, de)

    def reflected(self, involution, horizon):
        if involution.is_linear:
            r = involution.matrix

            def factor_fn(t, x):
                return np.einsum("ij,nja->nia", r, self._e(horizon - t, x @ r.T))

            def factor_jac(t, x):
                de = self.factor_jacobian(horizon - t, x @ r.T)
                return np.einsum("ij,njak,kl->nial", r, de, r)

            return FieldNoise(factor_fn, self.dim, self.noise_dim, factor_jac)

        def factor_fn(t, x):
            xs = involution(x)
            return np.einsum("nij,nja->nia", involution.jacobian(xs), self._e(horizon - t, xs))

        return FieldNoise(factor_fn, self.dim, self.noise_dim)


class KernelNoise(Noise):
    """Noise specified only through its covariance kernel ``D_t(x, y)``."""

    def __init__(self, kernel_fn, dim):
        self._kernel = kernel_fn
        self.dim = dim
        self.noise_dim = dim

    @classmethod
    def from_noise(cls, noise):
        return cls(lambda t, x, y: noise.kernel(t, x, y), noise.dim)

    def kernel(self, t, x, y):
        x = as_points(x)
        y = as_points(y)
        return np.asarray(self._kernel(as_times(t, x.shape[0]), x, y), dtype=float)

    def reflected(self, involution, horizon):
        def kernel_fn(t, x, y):
            xs, ys = involution(x), involution(y)
            jx, jy = involution.jacobian(xs), involution.jacobian(ys)
            return np.einsum("nik,nkl,njl->nij", jx, self._kernel(horizon - t, xs, ys), jy)

        return KernelNoise(kernel_fn, self.dim)
