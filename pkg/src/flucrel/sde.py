"""Diffusion processes with split drift, their integration and generators.

A process is ``dx = (u_+ + u_-)(t, x) dt + v_t(x)`` with Stratonovich white
noise ``v`` of covariance ``D_t(x, y)``.  Paths are produced by
Euler-Maruyama on the Ito-corrected drift.  Each trajectory owns its own
counter-based random stream, so ensembles are reproducible regardless of
how they are chunked or scheduled.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import Blowup, NonFiniteDerivative, SamplerUnavailable
from .fields import (
    ConstantNoise, Involution, ScalarField, VectorField, as_points, as_times, fd_jacobian,
)

BLOWUP_GUARD = 1e8
DEFAULT_CHUNK = 4096


@dataclass(frozen=True)
class LangevinData:
    """Langevin structure: ``u = -Gamma grad H + Pi grad H + G``, ``d = 2 Gamma / beta``."""

    gamma: np.ndarray
    pi: np.ndarray
    hamiltonian: ScalarField
    force: VectorField | None
    beta: float


@dataclass(frozen=True)
class ProcessSpec:
    dim: int
    drift_plus: VectorField
    drift_minus: VectorField
    noise: object
    involution: Involution
    horizon: float
    beta: float | None = None
    family_tag: str = "custom"
    langevin: LangevinData | None = None
    boundary: object = None
    params: dict = field(default_factory=dict)

    def drift(self, t, x):
        return self.drift_plus(t, x) + self.drift_minus(t, x)

    def drift_field(self):
        return self.drift_plus + self.drift_minus

    def with_drifts(self, plus, minus, **extra):
        return replace(self, drift_plus=plus, drift_minus=minus, **extra)

    def probe_points(self, n=256, seed=0):
        """Quasi-random points in ``params['probe_box']`` (default ``[-2, 2]^d``)."""
        from scipy.stats import qmc
        box = np.asarray(self.params.get("probe_box", [[-2.0, 2.0]] * self.dim), dtype=float)
        pts = qmc.Sobol(self.dim, scramble=True, seed=seed).random(n)
        return box[:, 0] + pts * (box[:, 1] - box[:, 0])


def langevin_drifts(data: LangevinData, dim):
    """Canonical split ``u_+ = -Gamma grad H``, ``u_- = Pi grad H + G``."""
    gamma, pi = np.asarray(data.gamma, float), np.asarray(data.pi, float)
    h = data.hamiltonian

    plus = VectorField(
        lambda t, x: -h.gradient(t, x) @ gamma.T,
        jacobian=lambda t, x: -np.einsum("ij,njk->nik", gamma, h.hessian(t, x)),
        name="-Gamma grad H",
    )
    cons = VectorField(
        lambda t, x: h.gradient(t, x) @ pi.T,
        jacobian=lambda t, x: np.einsum("ij,njk->nik", pi, h.hessian(t, x)),
        name="Pi grad H",
    )
    minus = cons if data.force is None else cons + data.force
    return plus, minus


def langevin_spec(gamma, pi, hamiltonian, beta, horizon, involution=None, force=None,
                  family_tag="langevin", params=None):
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    pi = np.atleast_2d(np.asarray(pi, dtype=float))
    dim = gamma.shape[0]
    data = LangevinData(gamma, pi, hamiltonian, force, float(beta))
    plus, minus = langevin_drifts(data, dim)
    return ProcessSpec(
        dim=dim, drift_plus=plus, drift_minus=minus,
        noise=ConstantNoise(2.0 / beta * gamma),
        involution=involution or Involution.identity(dim),
        horizon=float(horizon), beta=float(beta), family_tag=family_tag,
        langevin=data, params=dict(params or {}),
    )


# --------------------------------------------------------------------------
# Drift corrections and generators

def drift_corrections(spec, t, x):
    """Return ``(ito_correction, hat_correction)`` at the points ``x``.

    ``u + ito_correction`` is the Ito drift; ``u + hat_correction`` is the
    first-order coefficient of the generator.
    """
    x = as_points(x)
    return 0.5 * spec.noise.div_x(t, x), -0.5 * spec.noise.div_y(t, x)


def ito_drift(spec, t, x):
    return spec.drift(t, x) + 0.5 * spec.noise.div_x(t, x)


def _noise_divergence_field(spec):
    """``x -> d/dx^j d^{ij}(x)`` where ``d(x) = D(x, x)``."""
    return lambda t, x: spec.noise.div_x(t, x) + spec.noise.div_y(t, x)


def generator_apply(spec, t, f, x, adjoint=False, part=None):
    """Apply the generator (or its adjoint) to the scalar field ``f`` at ``x``.

    ``part`` selects ``'+'`` or ``'-'`` for the split generators
    ``L_+ = (u_+ + ito) . grad + (1/2) d : hess`` and ``L_- = u_- . grad``.
    """
    x = as_points(x)
    n = x.shape[0]
    t = as_times(t, n)
    if part is not None and adjoint:
        raise ValueError("split adjoints are not provided")
    if not adjoint:
        grad = f.gradient(t, x)
        if part == "-":
            return np.einsum("ni,ni->n", spec.drift_minus(t, x), grad)
        drift = spec.drift_plus(t, x) + 0.5 * spec.noise.div_x(t, x)
        if part is None:
            drift = drift + spec.drift_minus(t, x)
        d = spec.noise.matrix(t, x)
        return np.einsum("ni,ni->n", drift, grad) + 0.5 * np.einsum("nij,nij->n", d, f.hessian(t, x))

    rho = f(t, x)
    grad = f.gradient(t, x)
    hess = f.hessian(t, x)
    b, div_b, dd, ddd = _adjoint_coefficients(spec, t, x)
    d = spec.noise.matrix(t, x)
    return (-div_b * rho - np.einsum("ni,ni->n", b, grad)
            + 0.5 * (ddd * rho + 2.0 * np.einsum("nj,nj->n", dd, grad)
                     + np.einsum("nij,nij->n", d, hess)))


def _adjoint_coefficients(spec, t, x):
    """Ito drift ``b``, its divergence, ``d_i d^{ij}`` and ``d_i d_j d^{ij}``."""
    b = ito_drift(spec, t, x)
    div_u = spec.drift_plus.div(t, x) + spec.drift_minus.div(t, x)
    if spec.noise.is_constant:
        zeros = np.zeros(x.shape[0])
        return b, div_u, np.zeros_like(x), zeros
    dfield = _noise_divergence_field(spec)
    dd = dfield(t, x)
    ddd = np.trace(fd_jacobian(dfield, t, x), axis1=1, axis2=2)
    div_ito = 0.5 * np.trace(fd_jacobian(spec.noise.div_x, t, x), axis1=1, axis2=2)
    return b, div_u + div_ito, dd, ddd


def adjoint_log_residual(spec, t, phi, x):
    """``exp(phi) L^dagger exp(-phi)`` at ``x``; zero iff ``exp(-phi_t)`` is invariant.

    Working with the ratio avoids underflow of the density in the tails.
    """
    x = as_points(x)
    n = x.shape[0]
    t = as_times(t, n)
    g = phi.gradient(t, x)
    hess = phi.hessian(t, x)
    b, div_b, dd, ddd = _adjoint_coefficients(spec, t, x)
    d = spec.noise.matrix(t, x)
    quad = np.einsum("nij,ni,nj->n", d, g, g) - np.einsum("nij,nij->n", d, hess)
    return (-div_b + np.einsum("ni,ni->n", b, g)
            + 0.5 * (ddd - 2.0 * np.einsum("nj,nj->n", dd, g) + quad))


def density_current(spec, t, phi, x):
    """Probability current ``j = b rho - (1/2) d_j(d^{ij} rho)`` divided by ``rho = exp(-phi)``."""
    x = as_points(x)
    t = as_times(t, x.shape[0])
    b = ito_drift(spec, t, x)
    g = phi.gradient(t, x)
    d = spec.noise.matrix(t, x)
    dd = np.zeros_like(x) if spec.noise.is_constant else _noise_divergence_field(spec)(t, x)
    return b - 0.5 * dd + 0.5 * np.einsum("nij,nj->ni", d, g)


# --------------------------------------------------------------------------
# Random streams

@dataclass(frozen=True)
class RngStream:
    """Counter-based stream keyed by ``(seed, index)``.

    ``purpose`` separates independent uses: 0 for noise increments, 1 for
    the initial state.  Draws at step ``k`` depend only on ``(seed, index, k)``.
    """

    seed: int
    index: int
    position: int = 0

    def generator(self, purpose=0):
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.index, purpose])
        return np.random.Generator(np.random.Philox(ss))

    def normals(self, steps, width):
        g = self.generator(0)
        z = g.standard_normal((self.position + steps, width))
        return z[self.position:]


# --------------------------------------------------------------------------
# Trajectories

@dataclass
class Trajectory:
    """One discretized path; ``states`` has shape ``(N + 1, d)``."""

    step: float
    times: np.ndarray
    states: np.ndarray
    noise_record: np.ndarray | None
    stream_id: tuple
    wiener: np.ndarray | None = None

    def as_batch(self):
        return PathBatch(
            step=self.step, times=self.times, states=self.states[None],
            noise_record=None if self.noise_record is None else self.noise_record[None],
            wiener=None if self.wiener is None else self.wiener[None],
            indices=np.array([self.stream_id[1]]), escaped=np.zeros(1, bool),
            seed=self.stream_id[0],
        )

    def reversed(self, involution):
        """The path ``x~_t = (x_{T-t})*`` on the same grid."""
        return Trajectory(self.step, self.times, involution(self.states[::-1]), None, self.stream_id)


@dataclass
class PathBatch:
    """Several paths on a common grid; ``states`` has shape ``(n, N + 1, d)``."""

    step: float
    times: np.ndarray
    states: np.ndarray
    noise_record: np.ndarray | None
    wiener: np.ndarray | None
    indices: np.ndarray
    escaped: np.ndarray
    seed: int = 0

    def __len__(self):
        return self.states.shape[0]

    def path(self, i):
        return Trajectory(
            self.step, self.times, self.states[i],
            None if self.noise_record is None else self.noise_record[i],
            (self.seed, int(self.indices[i])),
            None if self.wiener is None else self.wiener[i],
        )

    def reversed(self, involution):
        n, m, d = self.states.shape
        flipped = involution(self.states[:, ::-1].reshape(-1, d)).reshape(n, m, d)
        return PathBatch(self.step, self.times, flipped, None, None, self.indices, self.escaped, self.seed)


def as_batch(traj):
    return traj.as_batch() if isinstance(traj, Trajectory) else traj


def step_count(horizon, h):
    if h <= 0:
        raise ValueError("step must be positive")
    n = round(horizon / h)
    if n < 1 or abs(n * h - horizon) > 1e-12 * max(1.0, abs(horizon)):
        raise ValueError(f"horizon {horizon} is not an integer multiple of step {h}")
    return n


def draw_initial(initial, indices, seed, dim, t0=0.0):
    """Initial states for the given trajectory indices.

    ``initial`` is a point, an ``(n, d)`` array aligned with ``indices``, a
    ``ScalarField`` with a sampler, or a callable ``gen -> point``.
    """
    c = len(indices)
    if isinstance(initial, ScalarField):
        if not initial.can_sample:
            raise SamplerUnavailable(f"potential {initial.name!r} has no sampler")
        u = np.stack([RngStream(seed, int(i)).generator(1).random(initial.n_uniforms) for i in indices])
        return initial.sample(np.full(c, t0), u).reshape(c, dim)
    if callable(initial):
        return np.stack([np.asarray(initial(RngStream(seed, int(i)).generator(1)), float).reshape(dim)
                         for i in indices])
    x0 = np.asarray(initial, dtype=float)
    if x0.ndim == 1 or (x0.ndim == 2 and x0.shape[0] == 1):
        return np.broadcast_to(x0.reshape(1, dim), (c, dim)).copy()
    return x0.reshape(c, dim).copy()


def _integrate_chunk(spec, x0, h, n_steps, seed, indices, store_noise, store_wiener, forcing,
                     guard, t0, keep_states):
    c, d = x0.shape
    noise = spec.noise
    m = noise.noise_dim
    xi = np.stack([RngStream(seed, int(i)).normals(n_steps, m) for i in indices])
    sqrt_h = np.sqrt(h)
    const_factor = noise.factor(0.0, x0[:1])[0] if noise.is_constant else None
    states = np.empty((c, n_steps + 1, d)) if keep_states else None
    rec = np.empty((c, n_steps, d)) if store_noise else None
    wie = xi * sqrt_h if store_wiener else None
    escaped = np.zeros(c, dtype=bool)
    x = x0.copy()
    if keep_states:
        states[:, 0] = x
    ito_zero = noise.is_constant
    for k in range(n_steps):
        t = t0 + k * h
        tt = np.full(c, t)
        drift = spec.drift(tt, x)
        if not ito_zero:
            drift = drift + 0.5 * noise.div_x(tt, x)
        db = xi[:, k] * sqrt_h
        if const_factor is not None:
            dv = db @ const_factor.T
        else:
            dv = np.einsum("nia,na->ni", noise.factor(tt, x), db)
        step = h * drift + dv
        if forcing is not None:
            step = step + forcing(k, tt, x)
        new = x + step
        if spec.boundary is not None:
            new = spec.boundary(new)
        bad = ~np.all(np.isfinite(new) & (np.abs(new) < guard), axis=1)
        if bad.any():
            escaped |= bad
            new[bad] = x[bad]
            dv[bad] = 0.0
        x = new
        if keep_states:
            states[:, k + 1] = x
        if store_noise:
            rec[:, k] = dv
    return x, states, rec, wie, escaped


def sample_path(spec, x0, h, stream, store_noise=True, store_wiener=False, forcing=None,
                guard=BLOWUP_GUARD, t0=0.0, horizon=None):
    """Integrate a single trajectory; raises ``Blowup`` on escape."""
    n_steps = step_count(spec.horizon if horizon is None else horizon, h)
    x0 = np.asarray(x0, dtype=float).reshape(1, spec.dim)
    _, states, rec, wie, escaped = _integrate_chunk(
        spec, x0, h, n_steps, stream.seed, [stream.index], store_noise, store_wiener,
        forcing, guard, t0, True)
    if escaped[0]:
        raise Blowup(f"trajectory {stream.index} left the guard box |x| < {guard:g}")
    return Trajectory(
        step=h, times=t0 + h * np.arange(n_steps + 1), states=states[0],
        noise_record=None if rec is None else rec[0], stream_id=(stream.seed, stream.index),
        wiener=None if wie is None else wie[0],
    )


@dataclass
class EnsembleRun:
    """Reductions of an ensemble; arrays are ordered by trajectory index."""

    values: dict
    escaped: np.ndarray
    seed: int
    step: float

    @property
    def n(self):
        return self.escaped.size

    @property
    def escape_fraction(self):
        return float(self.escaped.mean()) if self.escaped.size else 0.0

    def __getitem__(self, key):
        return self.values[key]


def _worker_count(workers):
    if workers is None:
        workers = int(os.environ.get("FLUCREL_WORKERS", "0")) or (os.cpu_count() or 1)
    return max(1, int(workers))


def run_ensemble(spec, n, h, seed, initial, reducer=None, store_noise=False, store_wiener=False,
                 forcing=None, guard=BLOWUP_GUARD, workers=None, chunk=DEFAULT_CHUNK,
                 index_offset=0, t0=0.0, horizon=None):
    """Integrate ``n`` trajectories and reduce each chunk with ``reducer(batch)``.

    ``reducer`` maps a :class:`PathBatch` to a dict of per-path arrays.
    Without one, the final states are returned under ``'final'``.  Chunks
    are processed by a thread pool; the result is independent of
    ``workers`` and ``chunk`` because every path has its own stream.
    """
    n_steps = step_count(spec.horizon if horizon is None else horizon, h)
    times = t0 + h * np.arange(n_steps + 1)
    keep = reducer is not None
    starts = list(range(0, n, chunk))

    def job(start):
        idx = np.arange(index_offset + start, index_offset + min(start + chunk, n))
        init = initial
        if isinstance(init, np.ndarray) and init.ndim == 2 and init.shape[0] == n and n > 1:
            init = init[start:start + idx.size]
        x0 = draw_initial(init, idx, seed, spec.dim, t0)
        final, states, rec, wie, esc = _integrate_chunk(
            spec, x0, h, n_steps, seed, idx, store_noise, store_wiener, forcing, guard, t0, keep)
        if reducer is None:
            return {"final": final}, esc
        batch = PathBatch(h, times, states, rec, wie, idx, esc, seed)
        return reducer(batch), esc

    nw = _worker_count(workers)
    if nw == 1 or len(starts) == 1:
        parts = [job(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            parts = list(pool.map(job, starts))
    keys = parts[0][0].keys() if parts else []
    values = {k: np.concatenate([np.asarray(p[0][k]) for p in parts]) for k in keys}
    escaped = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, bool)
    return EnsembleRun(values, escaped, seed, h)


def ensure_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteDerivative(f"{what} is not finite")
    return arr
