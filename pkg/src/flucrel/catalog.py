"""Named processes with their potentials, samplers and applicable inversion schemes.

Every entry builds a :class:`Process` from keyword parameters.  Diffusion
entries carry a ``ProcessSpec`` whose ``params`` hold the family ``phi``
(normalized log-densities with a sampler), the equilibrium sampler
``gibbs`` when one exists, and the scheme names that make sense for it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import special

from .errors import ConfigInvalid
from .fields import Involution, ScalarField, psd_factor
from .oracles import FluxModel, LinearModel, flux_normalization, unnormalized_density
from .sde import langevin_spec
from .tangent import KraichnanTangent, kraichnan_covariance

ALL_SCHEMES = ("natural", "hat_plus_zero", "canonical", "reversed_protocol",
               "current_reversal", "complete_reversal")


@dataclass(frozen=True)
class Parameter:
    default: object
    doc: str


@dataclass
class Process:
    """A built catalog process.

    ``spec`` is ``None`` for non-diffusion entries (the Kraichnan tangent
    matrix process lives in ``model``).
    """

    name: str
    spec: object
    model: object = None
    phi: ScalarField | None = None
    gibbs: object = None
    schemes: tuple = ()
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    summary: str
    parameters: dict
    schemes: tuple
    builder: object

    def resolve(self, overrides=None, path="process.params"):
        values = {k: p.default for k, p in self.parameters.items()}
        for key, val in (overrides or {}).items():
            if key not in self.parameters:
                raise ConfigInvalid(f"{path}.{key}", f"unknown parameter for process {self.name!r}")
            values[key] = val
        return values

    def build(self, **overrides):
        values = self.resolve(overrides)
        proc = self.builder(**values)
        proc.params = values
        return proc

    def describe(self):
        return {
            "name": self.name,
            "summary": self.summary,
            "schemes": list(self.schemes),
            "parameters": {k: {"default": p.default, "doc": p.doc} for k, p in self.parameters.items()},
        }


def _ramp(a, b, horizon):
    slope = (b - a) / horizon
    return (lambda t: a + slope * np.asarray(t, float)), slope


def _gaussian_sampler(cov_at):
    """Sampler mapping uniforms to ``N(0, cov_at(t))``; ``cov_at`` takes a scalar time."""
    def sampler(t, u):
        z = special.ndtri(u)
        out = np.empty_like(z)
        for tv in np.unique(t):
            sel = t == tv
            out[sel] = z[sel] @ psd_factor(cov_at(float(tv))).T
        return out
    return sampler


# --------------------------------------------------------------------------
# breathing OU

def breathing_ou(k0=1.0, k1=2.0, beta=1.0, horizon=1.0):
    """``H_t = k_t x^2 / 2`` with ``k`` ramped linearly from ``k0`` to ``k1``."""
    k, dk = _ramp(k0, k1, horizon)
    H = ScalarField(
        lambda t, x: 0.5 * k(t) * x[:, 0] ** 2,
        grad=lambda t, x: k(t)[:, None] * x,
        hess=lambda t, x: k(t)[:, None, None] * np.ones((len(x), 1, 1)),
        dt=lambda t, x: 0.5 * dk * x[:, 0] ** 2,
        name="k_t x^2/2",
    )
    phi = ScalarField(
        lambda t, x: beta * 0.5 * k(t) * x[:, 0] ** 2 - 0.5 * np.log(beta * k(t) / (2 * np.pi)),
        grad=lambda t, x: beta * k(t)[:, None] * x,
        hess=lambda t, x: beta * k(t)[:, None, None] * np.ones((len(x), 1, 1)),
        dt=lambda t, x: 0.5 * beta * dk * x[:, 0] ** 2 - 0.5 * dk / k(t),
        sampler=lambda t, u: special.ndtri(u) / np.sqrt(beta * k(t))[:, None],
        n_uniforms=1, name="gibbs(k_t)",
    )
    spec = langevin_spec([[1.0]], [[0.0]], H, beta, horizon, family_tag="breathing_ou",
                         params={"phi": phi, "gibbs": phi, "sample_box": [[-8.0, 8.0]]})
    schemes = tuple(s for s in ALL_SCHEMES if s != "complete_reversal" or k0 == k1)
    return Process("breathing_ou", spec, phi=phi, gibbs=phi, schemes=schemes)


# --------------------------------------------------------------------------
# Langevin-Kramers

def langevin_kramers(mass=1.0, friction=1.0, k0=1.0, k1=1.0, beta=1.0, horizon=1.0):
    """Underdamped particle ``(q, p)`` in ``V_t = k_t q^2 / 2``; noise acts on ``p`` only."""
    k, dk = _ramp(k0, k1, horizon)

    def value(t, x):
        return 0.5 * x[:, 1] ** 2 / mass + 0.5 * k(t) * x[:, 0] ** 2

    def grad(t, x):
        return np.stack([k(t) * x[:, 0], x[:, 1] / mass], axis=1)

    def hess(t, x):
        out = np.zeros((len(x), 2, 2))
        out[:, 0, 0] = k(t)
        out[:, 1, 1] = 1.0 / mass
        return out

    H = ScalarField(value, grad=grad, hess=hess, dt=lambda t, x: 0.5 * dk * x[:, 0] ** 2,
                    name="p^2/2m + k_t q^2/2")
    lognorm = lambda t: 0.5 * np.log(beta * k(t) / (2 * np.pi)) + 0.5 * np.log(beta / (2 * np.pi * mass))
    phi = ScalarField(
        lambda t, x: beta * value(t, x) - lognorm(t),
        grad=lambda t, x: beta * grad(t, x),
        hess=lambda t, x: beta * hess(t, x),
        dt=lambda t, x: 0.5 * beta * dk * x[:, 0] ** 2 - 0.5 * dk / k(t),
        sampler=lambda t, u: special.ndtri(u) * np.stack(
            [1.0 / np.sqrt(beta * k(t)), np.full(len(t), np.sqrt(mass / beta))], axis=1),
        n_uniforms=2, name="gibbs(q, p)",
    )
    gamma = np.diag([0.0, friction])
    pi = np.array([[0.0, 1.0], [-1.0, 0.0]])
    spec = langevin_spec(gamma, pi, H, beta, horizon, involution=Involution.linear(np.diag([1.0, -1.0]),
                                                                                  name="(q,-p)"),
                         family_tag="langevin_kramers",
                         params={"phi": phi, "gibbs": phi, "sample_box": [[-8.0, 8.0], [-8.0, 8.0]]})
    schemes = ("canonical", "complete_reversal") if k0 == k1 else ("canonical",)
    return Process("langevin_kramers", spec, phi=phi, gibbs=phi, schemes=schemes)


# --------------------------------------------------------------------------
# tilted double well

_DW_NODES, _DW_WEIGHTS = np.polynomial.legendre.leggauss(400)


def double_well(depth=1.0, tilt0=0.0, tilt1=0.5, beta=1.0, horizon=1.0, table_points=20001):
    """``H_t = depth (x^2 - 1)^2 - f_t x`` with the tilt ``f`` ramped from ``tilt0`` to ``tilt1``."""
    f, df = _ramp(tilt0, tilt1, horizon)
    reach = 1.0 + (60.0 / (beta * depth)) ** 0.25 + abs(tilt0) + abs(tilt1)

    def energy(tv, y):
        return depth * (y ** 2 - 1.0) ** 2 - f(tv) * y

    @lru_cache(maxsize=4096)
    def log_z(tv):
        y = reach * _DW_NODES
        e = -beta * energy(tv, y)
        top = e.max()
        return float(top + np.log(reach * np.dot(_DW_WEIGHTS, np.exp(e - top))))

    def log_z_at(t):
        uniq, where = np.unique(t, return_inverse=True)
        return np.array([log_z(float(tv)) for tv in uniq])[where]

    @lru_cache(maxsize=64)
    def table(tv):
        y = np.linspace(-reach, reach, table_points)
        dens = np.exp(-beta * energy(tv, y) - log_z(tv))
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(y))])
        return y, cdf / cdf[-1]

    def sampler(t, u):
        out = np.empty(len(t))
        for tv in np.unique(t):
            sel = t == tv
            y, cdf = table(float(tv))
            out[sel] = np.interp(u[sel, 0], cdf, y)
        return out[:, None]

    H = ScalarField(
        lambda t, x: energy(t, x[:, 0]),
        grad=lambda t, x: (4 * depth * x[:, 0] * (x[:, 0] ** 2 - 1.0) - f(t))[:, None],
        hess=lambda t, x: (4 * depth * (3 * x[:, 0] ** 2 - 1.0))[:, None, None],
        dt=lambda t, x: -df * x[:, 0],
        name="double well",
    )

    @lru_cache(maxsize=4096)
    def mean_x(tv):
        y = reach * _DW_NODES
        w = np.exp(-beta * energy(tv, y) - log_z(tv)) * reach * _DW_WEIGHTS
        return float(np.dot(w, y))

    def dlogz(t):
        # d/dt ln Z = beta f' <x>
        uniq, where = np.unique(t, return_inverse=True)
        return beta * df * np.array([mean_x(float(tv)) for tv in uniq])[where]

    phi = ScalarField(
        lambda t, x: beta * energy(t, x[:, 0]) + log_z_at(t),
        grad=lambda t, x: beta * H.gradient(t, x),
        hess=lambda t, x: beta * H.hessian(t, x),
        dt=lambda t, x: -beta * df * x[:, 0] + dlogz(t),
        sampler=sampler, n_uniforms=1, name="gibbs(double well)",
    )
    spec = langevin_spec([[1.0]], [[0.0]], H, beta, horizon, family_tag="double_well",
                         params={"phi": phi, "gibbs": phi, "sample_box": [[-reach, reach]]})
    # natural inversions reverse the confining drift and the backward paths explode
    schemes = ("canonical", "reversed_protocol", "current_reversal") + (
        ("complete_reversal",) if tilt0 == tilt1 else ())
    return Process("double_well", spec, phi=phi, gibbs=phi, schemes=schemes)


# --------------------------------------------------------------------------
# linear Langevin

def linear(gamma=((1.0, 0.0), (0.0, 1.0)), pi=((0.0, 1.0), (-1.0, 0.0)),
           c=((1.0, 0.0), (0.0, 1.0)), c1=None, beta=1.0, horizon=1.0):
    """``dx = -(Gamma - Pi) C_t^{-1} x dt + noise`` with ``C_t`` ramped from ``c`` to ``c1``."""
    gamma = np.atleast_2d(np.asarray(gamma, float))
    pi = np.atleast_2d(np.asarray(pi, float))
    c0 = np.atleast_2d(np.asarray(c, float))
    c_end = c0 if c1 is None else np.atleast_2d(np.asarray(c1, float))
    model = LinearModel(gamma, pi, c0, beta)
    d = model.dim
    dc = (c_end - c0) / horizon

    @lru_cache(maxsize=4096)
    def inv_at(tv):
        return np.linalg.inv(c0 + dc * tv)

    @lru_cache(maxsize=4096)
    def logdet_at(tv):
        return float(np.linalg.slogdet(c0 + dc * tv)[1])

    def per_time(t, fn):
        uniq, where = np.unique(t, return_inverse=True)
        return np.stack([fn(float(tv)) for tv in uniq])[where]

    def prec(t):
        return per_time(t, inv_at)

    def value(t, x):
        return 0.5 * np.einsum("ni,nij,nj->n", x, prec(t), x)

    def grad(t, x):
        return np.einsum("nij,nj->ni", prec(t), x)

    def dt_value(t, x):
        # d/dt C^{-1} = -C^{-1} dC C^{-1}
        p = prec(t)
        y = np.einsum("nij,nj->ni", p, x)
        return -0.5 * np.einsum("ni,ij,nj->n", y, dc, y)

    def dt_logdet(t):
        return per_time(t, lambda tv: np.trace(inv_at(tv) @ dc))

    H = ScalarField(value, grad=grad, hess=lambda t, x: prec(t), dt=dt_value, name="x.C_t^{-1}x/2")
    lognorm = lambda t: (0.5 * d * np.log(2 * np.pi / beta)
                         + 0.5 * per_time(t, logdet_at))
    phi = ScalarField(
        lambda t, x: beta * value(t, x) + lognorm(t),
        grad=lambda t, x: beta * grad(t, x),
        hess=lambda t, x: beta * prec(t),
        dt=lambda t, x: beta * dt_value(t, x) + 0.5 * dt_logdet(t),
        sampler=_gaussian_sampler(lambda tv: (c0 + dc * tv) / beta),
        n_uniforms=d, name="gibbs(C_t)",
    )
    box = [[-8.0 * np.sqrt(s / beta), 8.0 * np.sqrt(s / beta)] for s in np.maximum(np.diag(c0), np.diag(c_end))]
    spec = langevin_spec(gamma, pi, H, beta, horizon, family_tag="linear",
                         params={"phi": phi, "gibbs": phi, "sample_box": box})
    static = c1 is None or np.array_equal(c0, c_end)
    # the canonical rules need an involution flipping Pi; the identity only works for Pi = 0
    schemes = tuple(s for s in ALL_SCHEMES if (s != "complete_reversal" or static)
                    and (s != "canonical" or not pi.any()))
    return Process("linear", spec, model=model, phi=phi, gibbs=phi, schemes=schemes)


# --------------------------------------------------------------------------
# Kraichnan tangent matrices

def kraichnan_tangent(dim=1, compressibility=0.0, strength=1.0, horizon=1.0):
    """Matrix process ``dX = dS X`` driven by the isotropic Kraichnan velocity gradient."""
    model = KraichnanTangent(kraichnan_covariance(int(dim), compressibility, strength), float(horizon))
    return Process("kraichnan_tangent", None, model=model)


# --------------------------------------------------------------------------
# one-dimensional flux process

def reinjection_boundary(model, x_max):
    """Paths that leave through ``-sign * x_max`` re-enter at ``+sign * x_max``."""
    s = model.sign

    def boundary(x):
        out = x.copy()
        gone = s * out[:, 0] < -x_max
        out[gone, 0] = s * x_max
        return out

    return boundary


def flux_sampler(model, x_max, points=4001):
    """Inverse-CDF sampler of the flux density restricted to ``[-x_max, x_max]``."""
    scale = model.scale
    inner = np.linspace(-6 * scale, 6 * scale, points)
    outer = np.geomspace(6 * scale, x_max, points // 4)[1:]
    grid = np.concatenate([-outer[::-1], inner, outer])
    dens = unnormalized_density(model, grid)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]

    def sampler(t, u):
        return np.interp(u[:, 0], cdf, grid)[:, None]

    return sampler


def flux_phi(model, x_max, points=4001):
    """``-ln rho`` of the flux density with its inverse-CDF sampler."""
    norm = flux_normalization(model)
    return ScalarField(
        lambda t, x: -np.log(unnormalized_density(model, x[:, 0]) / norm),
        sampler=flux_sampler(model, x_max, points), n_uniforms=1, name="flux density",
    )


def flux_process(model, x_max=None, horizon=1.0, points=4001):
    """``dx = -H'(x) dt + noise`` with re-injection; returns ``(spec, sampler)``."""
    x_max = 50.0 * model.scale if x_max is None else float(x_max)
    coeffs = np.asarray(model.coeffs)
    H = ScalarField(
        lambda t, x: model.h(x[:, 0]),
        grad=lambda t, x: model.dh(x[:, 0])[:, None],
        hess=lambda t, x: model.d2h(x[:, 0])[:, None, None],
        dt=lambda t, x: np.zeros(len(x)),
        name=f"H{tuple(coeffs)}",
    )
    phi = flux_phi(model, x_max, points)
    spec = langevin_spec([[1.0]], [[0.0]], H, model.beta, horizon, family_tag="flux1d",
                         params={"phi": phi, "gibbs": phi, "x_max": x_max})
    from dataclasses import replace
    spec = replace(spec, boundary=reinjection_boundary(model, x_max))
    return spec, phi


def flux1d(coeffs=(0.0, 0.0, 0.0, 1.0 / 3.0), beta=1.0, x_max=None, horizon=1.0):
    """Polynomial ``H`` of odd degree whose paths escape and re-enter from the other side."""
    model = FluxModel(tuple(coeffs), beta)
    spec, phi = flux_process(model, x_max, horizon)
    return Process("flux1d", spec, model=model, phi=phi, gibbs=phi, schemes=("natural",))


# --------------------------------------------------------------------------
# registry

def _p(default, doc):
    return Parameter(default, doc)


REGISTRY = {
    "breathing_ou": CatalogEntry(
        "breathing_ou", "1D overdamped particle in a harmonic trap whose stiffness is ramped",
        {"k0": _p(1.0, "initial stiffness"), "k1": _p(2.0, "final stiffness"),
         "beta": _p(1.0, "inverse temperature"), "horizon": _p(1.0, "duration T")},
        ALL_SCHEMES, breathing_ou),
    "langevin_kramers": CatalogEntry(
        "langevin_kramers", "underdamped particle (q, p) with momentum-flip involution",
        {"mass": _p(1.0, "particle mass"), "friction": _p(1.0, "friction on p"),
         "k0": _p(1.0, "initial trap stiffness"), "k1": _p(1.0, "final trap stiffness"),
         "beta": _p(1.0, "inverse temperature"), "horizon": _p(1.0, "duration T")},
        ("canonical", "complete_reversal"), langevin_kramers),
    "double_well": CatalogEntry(
        "double_well", "1D quartic double well with a linearly ramped tilt",
        {"depth": _p(1.0, "barrier height"), "tilt0": _p(0.0, "initial tilt force"),
         "tilt1": _p(0.5, "final tilt force"), "beta": _p(1.0, "inverse temperature"),
         "horizon": _p(1.0, "duration T"), "table_points": _p(20001, "inverse-CDF table size")},
        ("canonical", "reversed_protocol", "current_reversal", "complete_reversal"), double_well),
    "linear": CatalogEntry(
        "linear", "linear Langevin model with Gibbs matrix C_t ramped from c to c1",
        {"gamma": _p([[1.0, 0.0], [0.0, 1.0]], "symmetric dissipative matrix"),
         "pi": _p([[0.0, 1.0], [-1.0, 0.0]], "antisymmetric matrix"),
         "c": _p([[1.0, 0.0], [0.0, 1.0]], "initial Gibbs covariance matrix (times beta)"),
         "c1": _p(None, "final Gibbs matrix; null keeps it static"),
         "beta": _p(1.0, "inverse temperature"), "horizon": _p(1.0, "duration T")},
        ALL_SCHEMES, linear),
    "kraichnan_tangent": CatalogEntry(
        "kraichnan_tangent", "tangent matrices of the isotropic Kraichnan flow",
        {"dim": _p(1, "space dimension"), "compressibility": _p(0.0, "degree in [0, 1] (d >= 2)"),
         "strength": _p(1.0, "c in 1D, D otherwise"), "horizon": _p(1.0, "duration T")},
        (), kraichnan_tangent),
    "flux1d": CatalogEntry(
        "flux1d", "1D Langevin with odd-degree H and a constant-current invariant measure",
        {"coeffs": _p([0.0, 0.0, 0.0, 1.0 / 3.0], "ascending polynomial coefficients of H"),
         "beta": _p(1.0, "inverse temperature"),
         "x_max": _p(None, "re-injection radius; null uses 50 times the density scale"),
         "horizon": _p(1.0, "duration T")},
        ("natural",), flux1d),
}


def get(name, path="process.name"):
    try:
        return REGISTRY[name]
    except KeyError:
        raise ConfigInvalid(
            path, f"unknown process {name!r}; known: {', '.join(sorted(REGISTRY))}") from None


def build(name, **params):
    return get(name).build(**params)


def catalog_list():
    return [REGISTRY[k].describe() for k in sorted(REGISTRY)]
