"""Backward processes for the six time-inversion rules.

A time inversion is a choice of involution ``x -> x*`` together with a
split ``u = u_+ + u_-`` of the drift.  The backward process has
``u'_{t,+}(x) = (dx*)(x*) u_{T-t,+}(x*)``, ``u'_{t,-}(x) = -(dx*)(x*) u_{T-t,-}(x*)``
and the covariance transported by the involution.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvolutionIncompatible, SchemePreconditionFailed
from .fields import (
    FieldNoise, Involution, ScalarField, VectorField, as_points, as_times,
    reflect_scalar_field, reflect_vector_field,
)
from .sde import (
    LangevinData, ProcessSpec, adjoint_log_residual, density_current, generator_apply,
    langevin_drifts,
)

PRECONDITION_RTOL = 1e-5
INVOLUTIVE_TOL = 1e-8
SPLIT_GENERATOR_TOL = 1e-5


class SchemeKind(enum.Enum):
    NATURAL = "natural"
    HAT_PLUS_ZERO = "hat_plus_zero"
    CANONICAL = "canonical"
    REVERSED_PROTOCOL = "reversed_protocol"
    CURRENT_REVERSAL = "current_reversal"
    COMPLETE_REVERSAL = "complete_reversal"
    GIVEN = "given"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        # separators and case are ignored: "CanonicalLangevin", "hat-plus-zero", ...
        key = "".join(ch for ch in str(name).lower() if ch.isalnum())
        key = {"canonicallangevin": "canonical"}.get(key, key)
        for k in cls:
            if k.value.replace("_", "") == key:
                return k
        raise ValueError(f"unknown inversion scheme {name!r}")


SIX_SCHEMES = [k for k in SchemeKind if k is not SchemeKind.GIVEN]


@dataclass(frozen=True)
class InversionScheme:
    """Involution plus drift split.  ``phi`` is required by the two reversal kinds."""

    kind: SchemeKind
    involution: Involution | None = None
    phi: ScalarField | None = None
    noise_rule: str = "vector"

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind.parse(self.kind))
        if self.noise_rule not in ("vector", "pseudo"):
            raise ValueError("noise_rule must be 'vector' or 'pseudo'")
        if self.kind in (SchemeKind.CURRENT_REVERSAL, SchemeKind.COMPLETE_REVERSAL) and self.phi is None:
            raise SchemePreconditionFailed(f"{self.kind.value} needs a family of potentials phi_t")

    def involution_for(self, spec):
        return self.involution if self.involution is not None else spec.involution


@dataclass(frozen=True)
class BackwardProcess:
    spec: ProcessSpec
    forward: ProcessSpec
    scheme: InversionScheme
    phi: ScalarField | None

    def jacobian_sigma(self, x):
        """``sigma(x) = |det dx*/dx|``."""
        return np.exp(self.scheme.involution_for(self.forward).log_sigma(x))


# --------------------------------------------------------------------------
# Splits

def _potential_drift(spec, phi):
    """``-(1/2) d grad phi`` as a vector field."""
    noise = spec.noise

    def func(t, x):
        return -0.5 * np.einsum("nij,nj->ni", noise.matrix(t, x), phi.gradient(t, x))

    jac = None
    if noise.is_constant:
        def jac(t, x):
            return -0.5 * np.einsum("ij,njk->nik", noise.d, phi.hessian(t, x))

    return VectorField(func, jacobian=jac, name="-(1/2) d grad phi")


def _hat_shift(spec, sign):
    """``sign * (1/2) d_y D`` as a vector field; zero for constant noise."""
    if spec.noise.is_constant:
        return VectorField.zero(spec.dim)
    return VectorField(lambda t, x: sign * 0.5 * spec.noise.div_y(t, x), name="hat shift")


def resplit(spec, scheme):
    """Return ``spec`` with its drift split according to ``scheme`` (preconditions checked)."""
    kind = scheme.kind
    u = spec.drift_field()
    zero = VectorField.zero(spec.dim)
    if kind is SchemeKind.GIVEN:
        return spec
    if kind is SchemeKind.NATURAL:
        return spec.with_drifts(zero, u)
    if kind is SchemeKind.REVERSED_PROTOCOL:
        return spec.with_drifts(u, zero)
    if kind is SchemeKind.HAT_PLUS_ZERO:
        plus = _hat_shift(spec, +1.0)
        return spec.with_drifts(plus, u - plus)
    if kind is SchemeKind.CANONICAL:
        return _canonical_split(spec, scheme)
    check_potential_precondition(spec, scheme)
    plus = _potential_drift(spec, scheme.phi) + _hat_shift(spec, +1.0)
    return spec.with_drifts(plus, u - plus)


def _canonical_split(spec, scheme):
    data = spec.langevin
    if data is None:
        raise SchemePreconditionFailed("canonical inversion needs a Langevin-family process")
    inv = scheme.involution_for(spec)
    if not inv.is_linear:
        raise InvolutionIncompatible("canonical inversion needs a linear involution x* = r x")
    r = inv.matrix
    g_res = np.abs(r @ data.gamma @ r.T - data.gamma).max()
    p_res = np.abs(r @ data.pi @ r.T + data.pi).max()
    scale = 1e-12 * (1.0 + np.abs(data.gamma).max() + np.abs(data.pi).max())
    if g_res > scale or p_res > scale:
        raise InvolutionIncompatible(
            f"r Gamma r^T - Gamma = {g_res:.2e}, r Pi r^T + Pi = {p_res:.2e}")
    plus, minus = langevin_drifts(data, spec.dim)
    x = spec.probe_points(64)
    t = np.full(x.shape[0], 0.5 * spec.horizon)
    ref = spec.drift(t, x)
    res = np.abs(plus(t, x) + minus(t, x) - ref).max()
    if res > 1e-9 * (1.0 + np.abs(ref).max()):
        raise SchemePreconditionFailed("Langevin data do not reproduce the drift", residual=res)
    return spec.with_drifts(plus, minus)


def potential_residual(spec, scheme, n_probe=256, n_times=5):
    """Relative residual of ``L^dagger e^{-phi} = 0`` (or of its evolution form)."""
    phi = scheme.phi
    x = spec.probe_points(n_probe)
    worst = 0.0
    for t in np.linspace(0.0, spec.horizon, n_times):
        tt = np.full(x.shape[0], t)
        res = adjoint_log_residual(spec, tt, phi, x)
        if scheme.kind is SchemeKind.COMPLETE_REVERSAL:
            res = res + phi.time_derivative(tt, x)
        g = phi.gradient(tt, x)
        d = spec.noise.matrix(tt, x)
        scale = (np.abs(np.einsum("ni,ni->n", spec.drift(tt, x), g))
                 + np.abs(np.einsum("nij,ni,nj->n", d, g, g))
                 + np.abs(np.einsum("nij,nij->n", d, phi.hessian(tt, x))))
        worst = max(worst, float(np.max(np.abs(res) / (1.0 + scale))))
    return worst


def check_potential_precondition(spec, scheme):
    res = potential_residual(spec, scheme)
    if res > PRECONDITION_RTOL:
        what = "d/dt e^-phi = L^dagger e^-phi" if scheme.kind is SchemeKind.COMPLETE_REVERSAL \
            else "L^dagger e^-phi = 0"
        raise SchemePreconditionFailed(f"{what} violated (relative residual {res:.2e})", residual=res)
    return res


# --------------------------------------------------------------------------
# Transformation

def _reflect_noise(noise, involution, horizon, rule):
    out = noise.reflected(involution, horizon)
    if rule == "pseudo" and isinstance(out, FieldNoise):
        inner = out
        ejac = inner._ejac
        out = FieldNoise(lambda t, x: -inner._e(t, x), inner.dim, inner.noise_dim,
                         None if ejac is None else (lambda t, x: -ejac(t, x)))
    return out


def transform(spec, involution=None, noise_rule="vector", tag=None):
    """Apply the time inversion to an already split ``spec``."""
    inv = involution or spec.involution
    T = spec.horizon
    plus = reflect_vector_field(spec.drift_plus, inv, T, +1.0)
    minus = reflect_vector_field(spec.drift_minus, inv, T, -1.0)
    noise = _reflect_noise(spec.noise, inv, T, noise_rule)
    lang = None
    if spec.langevin is not None and inv.is_linear:
        d = spec.langevin
        lang = LangevinData(
            d.gamma, d.pi,
            reflect_scalar_field(d.hamiltonian, inv, T, add_log_sigma=False),
            None if d.force is None else reflect_vector_field(d.force, inv, T, -1.0),
            d.beta,
        )
    return replace(
        spec, drift_plus=plus, drift_minus=minus, noise=noise, involution=inv,
        langevin=lang, boundary=None,
        family_tag=tag or f"{spec.family_tag}:backward",
    )


def build_backward(spec, scheme):
    """The primed process for ``scheme``; raises on violated preconditions."""
    split = resplit(spec, scheme)
    inv = scheme.involution_for(spec)
    primed = transform(split, inv, scheme.noise_rule,
                       tag=f"{spec.family_tag}:backward[{scheme.kind.value}]")
    phi = None if scheme.phi is None else reflect_scalar_field(scheme.phi, inv, spec.horizon)
    return BackwardProcess(spec=primed, forward=split, scheme=scheme, phi=phi)


# --------------------------------------------------------------------------
# Structural checks

@dataclass
class ResidualReport:
    residual: float
    tolerance: float
    details: dict

    @property
    def passed(self):
        return bool(self.residual < self.tolerance)


def _rel(a, b):
    scale = max(float(np.max(np.abs(b))), 1.0)
    return float(np.max(np.abs(a - b))) / scale


def _probe_set(spec, n, seed):
    rng = np.random.default_rng(seed)
    x = spec.probe_points(n, seed=seed)
    y = spec.probe_points(n, seed=seed + 1)
    t = rng.uniform(0.0, spec.horizon, n)
    return t, x, y


def compare_specs(a, b, n=64, seed=0):
    """Max relative deviations of split drifts and covariance between two specs."""
    t, x, y = _probe_set(a, n, seed)
    return {
        "drift_plus": _rel(a.drift_plus(t, x), b.drift_plus(t, x)),
        "drift_minus": _rel(a.drift_minus(t, x), b.drift_minus(t, x)),
        "covariance": _rel(a.noise.kernel(t, x, y), b.noise.kernel(t, x, y)),
    }


def check_involutive(spec, scheme, n=64, seed=0):
    """Invert twice (keeping the first split) and compare with the original."""
    bp = build_backward(spec, scheme)
    twice = transform(bp.spec, scheme.involution_for(spec), scheme.noise_rule)
    details = compare_specs(twice, bp.forward, n, seed)
    return ResidualReport(max(details.values()), INVOLUTIVE_TOL, details)


def compose_involution(f, involution):
    """``(R f)(x) = f(x*)`` as a scalar field."""
    if involution.is_linear:
        r = involution.matrix
        return ScalarField(
            lambda t, x: f(t, x @ r.T),
            grad=lambda t, x: f.gradient(t, x @ r.T) @ r,
            hess=lambda t, x: np.einsum("ji,njk,kl->nil", r, f.hessian(t, x @ r.T), r),
            name=f"R {f.name}",
        )
    return ScalarField(lambda t, x: f(t, involution(x)), name=f"R {f.name}")


def check_split_generator(spec, scheme, probe_fns, n=64, seed=0):
    """Compare ``L'_{t,+-} f`` with ``+-(R L_{T-t,+-} R f)`` on probe points."""
    bp = build_backward(spec, scheme)
    inv = scheme.involution_for(spec)
    t, x, _ = _probe_set(spec, n, seed)
    xs = inv(x)
    worst = 0.0
    details = {}
    for j, f in enumerate(probe_fns):
        rf = compose_involution(f, inv)
        for sign, part in ((1.0, "+"), (-1.0, "-")):
            lhs = generator_apply(bp.spec, t, f, x, part=part)
            rhs = sign * generator_apply(bp.forward, spec.horizon - t, rf, xs, part=part)
            res = _rel(lhs, rhs)
            details[f"f{j}{part}"] = res
            worst = max(worst, res)
    return ResidualReport(worst, SPLIT_GENERATOR_TOL, details)


def is_time_reversible(spec, scheme, tol=1e-8, n=64, seed=0):
    """True when forward and backward drifts agree and the covariances coincide."""
    bp = build_backward(spec, scheme)
    t, x, y = _probe_set(spec, n, seed)
    du = _rel(bp.spec.drift(t, x), bp.forward.drift(t, x))
    dd = _rel(bp.spec.noise.kernel(t, x, y), bp.forward.noise.kernel(t, x, y))
    return max(du, dd) < tol


def backward_current_residual(bp, n=64, seed=0):
    """Check ``j'(x) = -(dx*)(x*) j(x*) sigma(x)`` in units of the densities."""
    spec = bp.forward
    inv = bp.scheme.involution_for(spec)
    t, x, _ = _probe_set(spec, n, seed)
    xs = inv(x)
    lhs = density_current(bp.spec, t, bp.phi, x)
    j = density_current(spec, spec.horizon - t, bp.scheme.phi, xs)
    rhs = -np.einsum("nij,nj->ni", inv.jacobian(xs), j)
    # both sides are divided by their densities, which agree up to sigma(x)
    return _rel(lhs, rhs)
