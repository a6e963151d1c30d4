"""Path functionals: the entropy-flux integral, W and its variants, heat and work.

All line integrals use midpoint states at midpoint times.  Functions accept
a single :class:`Trajectory` or a :class:`PathBatch` and return per-path
arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingNoiseRecord, SchemePreconditionFailed, SingularDiffusion
from .reversal import InversionScheme, SchemeKind, resplit
from .sde import as_batch

COND_LIMIT = 1e12
BLOCK_POINTS = 200_000


@dataclass
class PathFunctionals:
    W: np.ndarray
    J_integral: np.ndarray
    delta_phi: np.ndarray
    scheme: str
    variant: str = "generic"
    Q: np.ndarray | None = None
    work: np.ndarray | None = None
    delta_U: np.ndarray | None = None


class _InverseDiffusion:
    """Applies ``d^{-1}`` to ``hat u_+``; pseudo-inverse when ``hat u_+`` lies in range(d)."""

    def __init__(self, noise):
        self.noise = noise
        self.const = None
        if noise.is_constant:
            self.const = self._prepare(noise.d)

    @staticmethod
    def _prepare(d):
        cond = np.linalg.cond(d)
        if np.isfinite(cond) and cond <= COND_LIMIT:
            return np.linalg.inv(d), None
        pinv = np.linalg.pinv(d, rcond=1e-12)
        return pinv, d @ pinv

    def apply(self, t, x, v):
        if self.const is not None:
            inv, proj = self.const
            if proj is not None:
                self._check_range(v, v @ proj.T)
            return v @ inv.T
        d = self.noise.matrix(t, x)
        cond = np.linalg.cond(d)
        if np.all(cond <= COND_LIMIT):
            return np.linalg.solve(d, v[..., None])[..., 0]
        pinv = np.linalg.pinv(d, rcond=1e-12, hermitian=True)
        a = np.einsum("nij,nj->ni", pinv, v)
        self._check_range(v, np.einsum("nij,nj->ni", d, a))
        return a

    @staticmethod
    def _check_range(v, projected):
        scale = max(1.0, float(np.abs(v).max(initial=0.0)))
        if np.abs(projected - v).max(initial=0.0) > 1e-9 * scale:
            raise SingularDiffusion(
                f"diffusion matrix is singular (condition > {COND_LIMIT:g}) "
                "and the dissipative drift is not in its range")


def _midpoints(batch):
    x = batch.states
    xm = 0.5 * (x[:, 1:] + x[:, :-1])
    dx = x[:, 1:] - x[:, :-1]
    tm = 0.5 * (batch.times[1:] + batch.times[:-1])
    return xm, dx, tm


def entropy_flux_steps(traj, split_spec):
    """Per-step contributions ``J_k h`` of shape ``(n, N)`` for an already split spec."""
    batch = as_batch(traj)
    xm, dx, tm = _midpoints(batch)
    n, N, d = xm.shape
    h = batch.step
    inv = _InverseDiffusion(split_spec.noise)
    flat_x = xm.reshape(-1, d)
    flat_dx = dx.reshape(-1, d)
    flat_t = np.broadcast_to(tm, (n, N)).reshape(-1)
    out = np.empty(n * N)
    noise = split_spec.noise
    for s in range(0, n * N, BLOCK_POINTS):
        sl = slice(s, s + BLOCK_POINTS)
        t, x = flat_t[sl], flat_x[sl]
        hat_plus = split_spec.drift_plus(t, x)
        if not noise.is_constant:
            hat_plus = hat_plus - 0.5 * noise.div_y(t, x)
        if np.any(hat_plus):
            a = inv.apply(t, x, hat_plus)
            um = split_spec.drift_minus(t, x)
            val = 2.0 * np.einsum("ni,ni->n", a, flat_dx[sl] - h * um)
        else:
            val = np.zeros(x.shape[0])
        val -= h * split_spec.drift_minus.div(t, x)
        out[sl] = val
    return out.reshape(n, N)


def entropy_flux_integral(traj, spec, scheme=None):
    """``int_0^T J_t dt`` for every path in ``traj``."""
    split = spec if scheme is None else resplit(spec, scheme)
    return entropy_flux_steps(traj, split).sum(axis=1)


def _endpoint_phi(phi, t, x):
    return phi(np.full(x.shape[0], t), x)


def functional_W(traj, spec, scheme, phi0=None, phiT=None, variant="generic",
                 exact_telescoping=True):
    """``W = phi_T(x_T) - phi_0(x_0) + int J dt`` with optional variant.

    ``variant`` is one of ``generic`` (the scheme's split), ``tot`` (reversed
    protocol split), ``ex`` (current-reversal split, needs ``scheme.phi``) or
    ``hk`` (``tot - ex``).  For the complete reversal the integral telescopes
    to ``-delta_phi`` exactly, which is used unless ``exact_telescoping`` is off.
    """
    batch = as_batch(traj)
    if variant == "hk":
        tot = functional_W(batch, spec, scheme, phi0, phiT, "tot")
        ex = functional_W(batch, spec, scheme, phi0, phiT, "ex")
        return PathFunctionals(tot.W - ex.W, tot.J_integral - ex.J_integral, tot.delta_phi,
                               scheme.kind.value, "hk")
    if variant == "tot":
        use = InversionScheme(SchemeKind.REVERSED_PROTOCOL, scheme.involution)
    elif variant == "ex":
        if scheme.phi is None:
            raise SchemePreconditionFailed("the excess variant needs a family of potentials phi_t")
        use = InversionScheme(SchemeKind.CURRENT_REVERSAL, scheme.involution, scheme.phi)
    elif variant == "generic":
        use = scheme
    else:
        raise ValueError(f"unknown variant {variant!r}")
    phi0 = phi0 if phi0 is not None else scheme.phi
    phiT = phiT if phiT is not None else scheme.phi
    if phi0 is None or phiT is None:
        raise SchemePreconditionFailed("boundary potentials phi_0 and phi_T must be supplied")
    T = batch.times[-1]
    delta_phi = _endpoint_phi(phiT, T, batch.states[:, -1]) - _endpoint_phi(phi0, batch.times[0], batch.states[:, 0])
    if (use.kind is SchemeKind.COMPLETE_REVERSAL and exact_telescoping
            and phi0 is scheme.phi and phiT is scheme.phi):
        resplit(spec, use)
        j = -delta_phi
    else:
        j = entropy_flux_integral(batch, spec, use)
    return PathFunctionals(delta_phi + j, j, delta_phi, scheme.kind.value, variant)


def heat_work_langevin(traj, spec):
    """Heat ``Q``, work and ``delta_U`` for a Langevin-family process.

    The noise term of the heat uses the stored increments; ``grad H`` is
    taken at the midpoint and ``Gamma grad H`` at the left point so that
    ``beta Q`` matches the entropy-flux discretization when ``u_- = 0``.
    The explicit time dependence of ``H`` is averaged over both step ends.
    """
    batch = as_batch(traj)
    data = spec.langevin
    if data is None:
        raise SchemePreconditionFailed("heat and work need a Langevin-family process")
    if batch.noise_record is None:
        raise MissingNoiseRecord("integrate with store_noise=True to compute the heat")
    H = data.hamiltonian
    gamma = np.asarray(data.gamma, float)
    beta = data.beta
    xm, dx, tm = _midpoints(batch)
    n, N, d = xm.shape
    h = batch.step
    x_left = batch.states[:, :-1].reshape(-1, d)
    t_left = np.broadcast_to(batch.times[:-1], (n, N)).reshape(-1)
    t_mid = np.broadcast_to(tm, (n, N)).reshape(-1)
    x_mid = xm.reshape(-1, d)
    x_right = batch.states[:, 1:].reshape(-1, d)
    dv = batch.noise_record.reshape(-1, d)
    q = np.empty(n * N)
    w = np.empty(n * N)
    for s in range(0, n * N, BLOCK_POINTS):
        sl = slice(s, s + BLOCK_POINTS)
        gm = H.gradient(t_mid[sl], x_mid[sl])
        gl = H.gradient(t_left[sl], x_left[sl])
        q_blk = h * np.einsum("ni,ni->n", gm, gl @ gamma.T) - np.einsum("ni,ni->n", gm, dv[sl])
        # trapezoid in the state: the discrete chain rule for dU then closes
        # exactly for Hamiltonians quadratic in x and affine in t
        w_blk = 0.5 * h * (H.time_derivative(t_mid[sl], x_left[sl])
                           + H.time_derivative(t_mid[sl], x_right[sl]))
        if data.force is not None:
            g = data.force(t_mid[sl], x_mid[sl])
            div_g = data.force.div(t_mid[sl], x_mid[sl])
            q_blk -= h * div_g / beta
            w_blk += h * (np.einsum("ni,ni->n", gm, g) - div_g / beta)
        q[sl] = q_blk
        w[sl] = w_blk
    Q = q.reshape(n, N).sum(axis=1)
    work = w.reshape(n, N).sum(axis=1)
    dU = (H(np.full(n, batch.times[-1]), batch.states[:, -1])
          - H(np.full(n, batch.times[0]), batch.states[:, 0]))
    return Q, work, dU


def first_law_residual(Q, work, dU):
    """``|dU + Q - work|`` and the scale ``|dU| + |Q| + |work|``."""
    return np.abs(dU + Q - work), np.abs(dU) + np.abs(Q) + np.abs(work)
