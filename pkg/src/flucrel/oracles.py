"""Closed-form and quadrature ground truth.

Two families are covered: the linear Langevin model ``dx = M x dt + zeta``
with ``<zeta zeta> = 2 Gamma / beta``, whose kernels are Gaussian, and the
one-dimensional flux model ``dx = -H'(x) dt + zeta`` with an odd-degree
polynomial ``H``, whose invariant density carries a constant current.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, linalg, special

from .errors import QuadratureFailure, SingularGamma, UnstableDrift, WrongParity


# --------------------------------------------------------------------------
# Linear model

def _check_stable(m):
    ev = np.linalg.eigvals(m)
    if np.any(ev.real >= 0):
        raise UnstableDrift(f"drift matrix has eigenvalue with Re = {ev.real.max():.3e} >= 0")


def lyapunov_solve(m, gamma):
    """Solve ``M C + C M^T = -2 Gamma`` through the Kronecker linear system."""
    m = np.atleast_2d(np.asarray(m, float))
    gamma = np.atleast_2d(np.asarray(gamma, float))
    _check_stable(m)
    d = m.shape[0]
    eye = np.eye(d)
    op = np.kron(eye, m) + np.kron(m, eye)
    c = np.linalg.solve(op, -2.0 * gamma.reshape(-1, order="F")).reshape(d, d, order="F")
    return 0.5 * (c + c.T)


def ct_integral(m, gamma, t):
    """``C_t = 2 int_0^t e^{sM} Gamma e^{sM^T} ds``; ``t = inf`` uses the Lyapunov equation."""
    m = np.atleast_2d(np.asarray(m, float))
    gamma = np.atleast_2d(np.asarray(gamma, float))
    if np.isinf(t):
        return lyapunov_solve(m, gamma)
    if t == 0:
        return np.zeros_like(gamma)

    def integrand(s):
        e = linalg.expm(s * m)
        return 2.0 * e @ gamma @ e.T

    val, err = integrate.quad_vec(integrand, 0.0, float(t), epsrel=1e-10, epsabs=1e-14)
    if not np.isfinite(err) or err > 1e-8 * max(1.0, np.abs(val).max()):
        raise QuadratureFailure(f"covariance integral error estimate {err:.2e}")
    return 0.5 * (val + val.T)


def pi_from(m, gamma, c):
    """``Pi = Gamma + M C``."""
    return np.asarray(gamma, float) + np.asarray(m, float) @ np.asarray(c, float)


def m_from(gamma, pi, c):
    """``M = -(Gamma - Pi) C^{-1}``."""
    return -(np.asarray(gamma, float) - np.asarray(pi, float)) @ np.linalg.inv(np.asarray(c, float))


@dataclass(frozen=True)
class LinearModel:
    """``M = -(Gamma - Pi) C^{-1}`` with Gibbs Hamiltonian ``H = x.C^{-1}x / 2``."""

    gamma: np.ndarray
    pi: np.ndarray
    c: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        for name in ("gamma", "pi", "c"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), float)))
        if np.abs(self.pi + self.pi.T).max() > 1e-12:
            raise ValueError("Pi must be antisymmetric")

    @classmethod
    def from_drift(cls, m, gamma, beta=1.0):
        c = lyapunov_solve(m, gamma)
        return cls(gamma, pi_from(m, gamma, c), c, beta)

    @property
    def dim(self):
        return self.gamma.shape[0]

    @property
    def m(self):
        return m_from(self.gamma, self.pi, self.c)


def gaussian_kernel(model, t, x):
    """Mean ``e^{tM} x`` and covariance ``C_t / beta`` of the transition kernel."""
    if t < 0:
        raise ValueError("time must be non-negative")
    m = model.m
    x = np.asarray(x, float)
    if np.isinf(t):
        return np.zeros_like(x), lyapunov_solve(m, model.gamma) / model.beta
    e = linalg.expm(t * m)
    return x @ e.T, ct_integral(m, model.gamma, t) / model.beta


def gaussian_joint_covariance(model, t):
    """Covariance of ``(x_0, x_t)`` when ``x_0`` is drawn from the Gibbs measure."""
    m = model.m
    cs = model.c / model.beta
    e = linalg.expm(t * m)
    ct = ct_integral(m, model.gamma, t) / model.beta
    top = np.hstack([cs, cs @ e.T])
    bot = np.hstack([e @ cs, e @ cs @ e.T + ct])
    return np.vstack([top, bot])


def stationary_entropy_rate(model):
    """``-tr(Pi Gamma^{-1} M)``: mean total entropy production per unit time."""
    if abs(np.linalg.det(model.gamma)) < 1e-300 or np.linalg.cond(model.gamma) > 1e12:
        raise SingularGamma("Gamma is not invertible")
    return float(-np.trace(model.pi @ np.linalg.solve(model.gamma, model.m)))


def free_energy_difference(h0, h1, beta=1.0, lo=-np.inf, hi=np.inf):
    """``-(1/beta) ln(Z_1 / Z_0)`` for one-dimensional Hamiltonians by quadrature."""
    z = []
    for h in (h0, h1):
        val, err = integrate.quad(lambda x: np.exp(-beta * h(x)), lo, hi, epsabs=0, epsrel=1e-12, limit=200)
        if not np.isfinite(val) or val <= 0:
            raise QuadratureFailure("partition function quadrature failed")
        z.append(val)
    return -np.log(z[1] / z[0]) / beta


# --------------------------------------------------------------------------
# Flux model

@dataclass(frozen=True)
class FluxModel:
    """``H(x) = sum coeffs[k] x^k`` (ascending powers) with odd degree >= 3."""

    coeffs: tuple
    beta: float = 1.0

    def __post_init__(self):
        c = tuple(float(v) for v in np.trim_zeros(np.asarray(self.coeffs, float), "b"))
        object.__setattr__(self, "coeffs", c)
        deg = len(c) - 1
        if deg < 3 or deg % 2 == 0:
            raise WrongParity(f"flux solutions need odd degree >= 3, got degree {deg}")

    @property
    def degree(self):
        return len(self.coeffs) - 1

    @property
    def leading(self):
        return self.coeffs[-1]

    @property
    def sign(self):
        """+1 when paths leave at -inf and return from +inf."""
        return 1 if self.leading > 0 else -1

    def h(self, x):
        return np.polynomial.polynomial.polyval(x, self.coeffs)

    def dh(self, x):
        return np.polynomial.polynomial.polyval(x, np.polynomial.polynomial.polyder(self.coeffs))

    def d2h(self, x):
        return np.polynomial.polynomial.polyval(x, np.polynomial.polynomial.polyder(self.coeffs, 2))

    @property
    def scale(self):
        """Typical width ``(beta |a|)^{-1/k}`` of the density."""
        return (self.beta * abs(self.leading)) ** (-1.0 / self.degree)


def _shifted_exponent(model, x, s):
    """``beta (H(x - sign s) - H(x))``: the integrand exponent of the inner integral."""
    return model.beta * (model.h(x - model.sign * s) - model.h(x))


def unnormalized_density(model, x):
    """``e^{-beta H(x)} int e^{beta H(y)} dy`` over the half line behind ``x``.

    The substitution ``y = x - sign * s`` folds ``e^{-beta H(x)}`` into the
    integrand, so only bounded exponentials are ever formed.
    """
    x = np.atleast_1d(np.asarray(x, float))
    return np.array([_inner(model, xi) for xi in x])


_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)


def _inner(model, xi):
    """Composite Gauss-Legendre in ``s`` with panels matched to the local decay scale."""
    scale = model.scale
    slope = model.beta * abs(model.dh(xi))
    w = min(scale, 1.0 / slope) if slope > 0 else scale
    roots = np.roots(np.polynomial.polynomial.polyder(model.coeffs)[::-1])
    reach = abs(xi) + (np.abs(roots).max() if roots.size else 0.0) + 12.0 * scale
    probe = np.unique(np.concatenate([w * np.geomspace(1e-3, 200.0, 60), np.linspace(0.0, reach, 801)]))
    e = _shifted_exponent(model, xi, probe)
    if not np.all(np.isfinite(e)):
        raise QuadratureFailure(f"inner integrand is not finite at x={xi}")
    top = max(0.0, float(e.max()))
    last = np.nonzero(e > top - 60.0)[0].max()
    if last == probe.size - 1:
        raise QuadratureFailure(f"inner integrand at x={xi} has not decayed at s={reach:g}")
    cut = probe[last + 1]
    geo = w * 2.0 ** np.arange(0, 64)
    geo = geo[geo < min(cut, scale)]
    start = geo[-1] if geo.size else 0.0
    n_lin = max(1, int(np.ceil((cut - start) / (0.25 * scale))))
    edges = np.concatenate([[0.0], geo, np.linspace(start, cut, n_lin + 1)[1:]])
    a, b = edges[:-1, None], edges[1:, None]
    nodes = (0.5 * (b - a) * _GL_X + 0.5 * (b + a)).ravel()
    weights = (0.5 * (b - a) * _GL_W).ravel()
    return float(np.exp(top) * np.dot(weights, np.exp(_shifted_exponent(model, xi, nodes) - top)))


def _tail_asymptotic(model, x):
    """Large-|x| expansion ``sign (g - g g')`` with ``g = 1/(beta H')`` of the unnormalized density."""
    g = 1.0 / (model.beta * model.dh(x))
    gp = -model.d2h(x) / (model.beta * model.dh(x) ** 2)
    return model.sign * (g - g * gp)


@dataclass
class FluxSolution:
    grid: np.ndarray
    density: np.ndarray
    normalization: float
    current: float
    current_residual: float


def _panel_nodes(model, cutoff, n_panels=120, order=24):
    """Gauss-Legendre nodes on ``[-cutoff, cutoff]`` with panels dense near the origin."""
    s = model.scale
    inner = np.linspace(-4 * s, 4 * s, n_panels // 2 + 1)
    outer = np.geomspace(4 * s, cutoff, n_panels // 4 + 1)[1:]
    edges = np.concatenate([-outer[::-1], inner, outer])
    xg, wg = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1, None], edges[1:, None]
    nodes = (0.5 * (b - a) * xg + 0.5 * (b + a)).ravel()
    weights = (0.5 * (b - a) * wg).ravel()
    return nodes, weights


def _cutoff(model):
    return 200.0 * model.scale


def flux_normalization(model):
    """``N``: integral of the unnormalized density (panel quadrature plus asymptotic tails)."""
    L = _cutoff(model)
    nodes, weights = _panel_nodes(model, L)
    body = float(np.dot(weights, unnormalized_density(model, nodes)))
    right, _ = integrate.quad(lambda x: _tail_asymptotic(model, x), L, np.inf, epsrel=1e-12)
    left, _ = integrate.quad(lambda x: _tail_asymptotic(model, x), -np.inf, -L, epsrel=1e-12)
    return body + right + left


def flux_invariant_density(model, grid):
    """Normalized flux density on ``grid``, ``N`` and the constant current.

    The current of ``rho = N^{-1} e^{-beta H} int e^{beta H}`` is
    ``j = -H' rho - rho' / beta = -sign / (beta N)``.  The returned residual
    compares a finite-difference current on the grid with that constant.
    """
    grid = np.asarray(grid, float)
    n = flux_normalization(model)
    rho = unnormalized_density(model, grid) / n
    j = -model.sign / (model.beta * n)
    residual = float("nan")
    if grid.size >= 3:
        h = 1e-4 * model.scale
        rp = unnormalized_density(model, grid + h) / n
        rm = unnormalized_density(model, grid - h) / n
        jj = -model.dh(grid) * rho - (rp - rm) / (2 * h) / model.beta
        residual = float(np.max(np.abs(jj - j)) / abs(j))
    return FluxSolution(grid, rho, n, j, residual)


def flux_mean(model, observable=None):
    """Principal-value mean of ``x`` (or of a bounded observable) under the flux density."""
    n = flux_normalization(model)
    L = _cutoff(model)
    if observable is not None:
        nodes, weights = _panel_nodes(model, L)
        body = np.dot(weights, observable(nodes) * unnormalized_density(model, nodes))
        tails = sum(integrate.quad(lambda x: float(observable(np.array([x]))[0]) * _tail_asymptotic(model, x),
                                   lo, hi, epsrel=1e-10)[0] for lo, hi in ((L, np.inf), (-np.inf, -L)))
        return float((body + tails) / n)
    # x [rho(x) - rho(-x)] on [0, L] plus the tail of the same combination
    nodes, weights = _panel_nodes(model, L)
    pos = nodes > 0
    xp, wp = nodes[pos], weights[pos]
    odd = unnormalized_density(model, xp) - unnormalized_density(model, -xp)
    body = np.dot(wp, xp * odd)
    tail, _ = integrate.quad(lambda x: x * (_tail_asymptotic(model, x) - _tail_asymptotic(model, -x)),
                             L, np.inf, epsrel=1e-10)
    return float((body + tail) / n)


def inertial_model(tau, c):
    """Flux model for ``dx = (-x^2 - x/tau) dt + zeta`` with ``<zeta zeta> = c``."""
    beta = 2.0 / c
    b = 0.0 if np.isinf(tau) else 1.0 / tau
    return FluxModel((0.0, 0.0, 0.5 * b, 1.0 / 3.0), beta)


def lyapunov_inertial(tau, c):
    """Top Lyapunov exponent of inertial particles: the flux-measure mean of ``x``."""
    if tau <= 0 or c <= 0:
        raise ValueError("tau and c must be positive")
    return flux_mean(inertial_model(tau, c))


def lyapunov_inertial_s_representation(tau, c):
    """Independent route: Gaussian x-integration first, leaving a one-dimensional s-integral."""
    beta = 2.0 / c
    b = 0.0 if np.isinf(tau) else 1.0 / tau

    def weight(s):
        return np.exp(beta * (b * b * s / 4.0 - s ** 3 / 12.0))

    # s^{-1/2} singularity removed by s = u^2
    num, _ = integrate.quad(lambda u: 2.0 * weight(u * u) * (u * u - b) / 2.0, 0.0, np.inf, epsrel=1e-12, limit=400)
    den, _ = integrate.quad(lambda u: 2.0 * weight(u * u), 0.0, np.inf, epsrel=1e-12, limit=400)
    return num / den


def lyapunov_zero_energy(beta):
    """Closed form of the undamped limit: ``(1/2)(12/beta)^{1/3} Gamma(1/2)/Gamma(1/6)``."""
    return 0.5 * (12.0 / beta) ** (1.0 / 3.0) * special.gamma(0.5) / special.gamma(1.0 / 6.0)
