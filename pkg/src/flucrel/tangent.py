"""Tangent process, phase-space contraction and stretching exponents.

The cocycle ``X_t`` is stored in factored form ``X = Q diag(exp(l)) U``
with ``Q`` orthogonal and ``U`` unit upper triangular; the row log-scales
``l`` absorb all growth, so nothing overflows and small directions keep
their relative accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import DegenerateCocycle, InsufficientOverlap, NonFiniteDerivative
from .fields import psd_factor
from .sde import RngStream, as_batch, run_ensemble, sample_path, step_count

DENSE_SPREAD = 30.0
JACOBI_TOL = 1e-15
TINY_DIAG = 1e-300


# --------------------------------------------------------------------------
# Factored cocycle

@dataclass
class Cocycle:
    """``X = q @ diag(exp(logscale)) @ u`` for a stack of paths.

    ``u`` is upper triangular with unit diagonal.  Rows carry the growth, so
    a strongly graded product keeps its small directions to full relative
    accuracy.
    """

    q: np.ndarray
    u: np.ndarray
    logscale: np.ndarray
    log_det: np.ndarray
    det_sign: np.ndarray

    @classmethod
    def identity(cls, n, d):
        eye = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        return cls(eye, eye.copy(), np.zeros((n, d)), np.zeros(n), np.ones(n))

    def absorb(self, y):
        """Replace ``q`` by the orthogonal factor of ``y = A q`` and fold in the triangle."""
        if not np.all(np.isfinite(y)):
            raise NonFiniteDerivative("tangent propagator is not finite")
        q, r = np.linalg.qr(y)
        diag = np.diagonal(r, axis1=1, axis2=2)
        sgn = np.where(diag < 0, -1.0, 1.0)
        q = q * sgn[:, None, :]
        r = r * sgn[:, :, None]
        rd = np.abs(diag)
        if np.any(rd < TINY_DIAG):
            raise DegenerateCocycle("a diagonal entry of R underflowed")
        self.log_det += np.log(rd).sum(axis=1)
        self.det_sign *= np.sign(np.linalg.det(q))
        self.u, self.logscale = fold_triangle(r, self.u, self.logscale)
        self.q = q

    def dense(self):
        """``X`` itself; only sensible when the log-scales are moderate."""
        return (self.q * np.exp(self.logscale)[:, None, :]) @ self.u

    def graded_columns(self, right=None):
        """``(w, l)`` with ``X^T`` (times ``right^T`` on the left) equal to ``w diag(exp(l))``.

        Singular values of ``X right`` are those of this column-graded form.
        """
        w = np.swapaxes(self.u, 1, 2)
        if right is not None:
            w = np.swapaxes(right, -1, -2) @ w
        return w, self.logscale


def fold_triangle(r, u, logscale):
    """``r diag(e^s) u = diag(e^s') u'`` for upper triangular ``r`` with positive diagonal.

    Returns ``(u', s')``.
    """
    gap = logscale[:, None, :] - logscale[:, :, None]
    with np.errstate(over="ignore", invalid="ignore"):
        t = np.where(r == 0, 0.0, r * np.exp(np.triu(gap)))
    if not np.all(np.isfinite(t)):
        raise DegenerateCocycle("graded cocycle overflowed; directions are far out of order")
    rd = np.diagonal(r, axis1=1, axis2=2)
    return (t / rd[:, :, None]) @ u, logscale + np.log(rd)


def log_singular_values(w, logscale, max_sweeps=60):
    """Log singular values of ``w @ diag(exp(logscale))``, sorted non-increasing.

    Uses a dense SVD when the scales span less than ``DENSE_SPREAD`` nats and
    one-sided Jacobi on log-scaled columns otherwise.
    """
    w = np.array(w, dtype=float)
    l = np.array(logscale, dtype=float)
    n, d, _ = w.shape
    spread = l.max(axis=1) - l.min(axis=1)
    out = np.empty((n, d))
    dense = spread <= DENSE_SPREAD
    if dense.any():
        top = l[dense].max(axis=1, keepdims=True)
        b = w[dense] * np.exp(l[dense] - top)[:, None, :]
        s = np.linalg.svd(b, compute_uv=False)
        if np.any(s <= 0):
            raise DegenerateCocycle("singular cocycle")
        out[dense] = np.log(s) + top
    wide = ~dense
    if wide.any():
        out[wide] = _jacobi_log(w[wide], l[wide], max_sweeps)
    return -np.sort(-out, axis=1)


def _jacobi_log(w, l, max_sweeps):
    nrm = np.linalg.norm(w, axis=1)
    w = w / nrm[:, None, :]
    l = l + np.log(nrm)
    d = w.shape[2]
    for _ in range(max_sweeps):
        worst = 0.0
        for i in range(d - 1):
            for j in range(i + 1, d):
                m = np.maximum(l[:, i], l[:, j])
                si, sj = np.exp(l[:, i] - m), np.exp(l[:, j] - m)
                bi, bj = w[:, :, i] * si[:, None], w[:, :, j] * sj[:, None]
                a = si * si
                b = sj * sj
                g = np.einsum("nk,nk->n", bi, bj)
                cosang = np.abs(g) / np.maximum(np.sqrt(a * b), np.finfo(float).tiny)
                worst = max(worst, float(cosang.max()))
                zeta = (b - a) / np.where(g == 0, 1.0, 2.0 * g)
                t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
                t = np.where(zeta == 0, 1.0, t)
                t = np.where(g == 0, 0.0, t)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ni = c[:, None] * bi - s[:, None] * bj
                nj = s[:, None] * bi + c[:, None] * bj
                for col, new in ((i, ni), (j, nj)):
                    norm = np.linalg.norm(new, axis=1)
                    if np.any(norm == 0):
                        raise DegenerateCocycle("singular cocycle")
                    w[:, :, col] = new / norm[:, None]
                    l[:, col] = m + np.log(norm)
        if worst < JACOBI_TOL:
            break
    return l


# --------------------------------------------------------------------------
# Tangent integration along sampled paths

@dataclass
class TangentTrajectory:
    base: object
    cocycle: Cocycle
    midpoint_divergence: np.ndarray
    k_qr: int
    metric: tuple | None = None

    @property
    def log_det(self):
        return self.cocycle.log_det

    def dense(self):
        return self.cocycle.dense()


def _propagators(spec, batch, k, trap):
    """One-step tangent maps ``expm(h Jbar + dE dW)`` for step ``k`` of every path."""
    h = batch.step
    x0, x1 = batch.states[:, k], batch.states[:, k + 1]
    n = x0.shape[0]
    u = spec.drift_field()
    t0, t1 = np.full(n, batch.times[k]), np.full(n, batch.times[k + 1])
    tm = 0.5 * (t0 + t1)
    xm = 0.5 * (x0 + x1)
    if trap:
        gen = 0.5 * h * (u.jac(t0, x0) + u.jac(t1, x1))
    else:
        gen = h * u.jac(tm, xm)
    div = h * u.div(tm, xm)
    if not spec.noise.is_constant:
        if batch.wiener is None:
            raise ValueError("state-dependent noise needs the Wiener record (store_wiener=True)")
        de = spec.noise.factor_jacobian(tm, xm)
        dw = batch.wiener[:, k]
        noise_gen = np.einsum("niak,na->nik", de, dw)
        gen = gen + noise_gen
        div = div + np.trace(noise_gen, axis1=1, axis2=2)
    if not np.all(np.isfinite(gen)):
        raise NonFiniteDerivative("drift or noise Jacobian is not finite")
    return expm(gen), div


def tangent_along(spec, traj, k_qr=10, trap=False):
    """Integrate the cocycle along already sampled paths (one per batch row).

    Drift Jacobians enter at the step midpoint (the Stratonovich rule) unless
    ``trap`` asks for the average of the two step ends.
    """
    batch = as_batch(traj)
    n, m, d = batch.states.shape
    co = Cocycle.identity(n, d)
    y = co.q.copy()
    mid = np.zeros(n)
    for k in range(m - 1):
        a, div = _propagators(spec, batch, k, trap)
        y = a @ y
        mid += div
        if (k + 1) % k_qr == 0 or k == m - 2:
            co.absorb(y)
            y = co.q.copy()
    return TangentTrajectory(traj, co, mid, k_qr)


def evolve_tangent(spec, x0, h, stream, k_qr=10):
    """Sample one path and integrate its tangent process with the same noise."""
    traj = sample_path(spec, x0, h, stream, store_noise=False,
                       store_wiener=not spec.noise.is_constant)
    return tangent_along(spec, traj, k_qr)


def tangent_ensemble(spec, n, h, seed, initial, k_qr=10, workers=None, metric=None, horizon=None):
    """Stretching exponents, ``ln|det X|`` and the midpoint-divergence sum per path."""
    def reduce(batch):
        tan = tangent_along(spec, batch, k_qr)
        rho = stretching_exponents(tan, metric).rho
        return {"rho": rho, "log_det": tan.log_det, "det_sign": tan.cocycle.det_sign,
                "mid_div": tan.midpoint_divergence}

    return run_ensemble(spec, n, h, seed, initial, reducer=reduce, workers=workers,
                        store_wiener=not spec.noise.is_constant, horizon=horizon)


# --------------------------------------------------------------------------
# Spectra and identities

@dataclass
class StretchingSpectrum:
    rho: np.ndarray
    horizon: float

    @property
    def rates(self):
        return self.rho / self.horizon


def stretching_exponents(tan, metric=None):
    """Log singular values of ``X_T`` (optionally in a constant diagonal metric).

    ``metric`` is ``(g_start, g_end)``, each a length-``d`` vector of
    diagonal metric entries at ``x_0`` and ``x_T``.
    """
    co = tan.cocycle if isinstance(tan, TangentTrajectory) else tan
    if metric is None:
        w, l = co.graded_columns()
    else:
        g0, g1 = (np.sqrt(np.asarray(g, float)) for g in metric)
        # g1^(1/2) q = q' r' moves the end metric into the triangle
        _, r = np.linalg.qr(g1[None, :, None] * co.q)
        r = r * np.where(np.diagonal(r, axis1=1, axis2=2) < 0, -1.0, 1.0)[:, :, None]
        u, l = fold_triangle(r, co.u, co.logscale)
        w = np.swapaxes(u, 1, 2) / g0[None, :, None]
    rho = log_singular_values(w, l)
    base = getattr(tan, "base", None)
    horizon = float(as_batch(base).times[-1] - as_batch(base).times[0]) if base is not None else np.nan
    return StretchingSpectrum(rho, horizon)


def spectrum_of(matrices):
    """Stretching exponents of explicit matrices (stack or single)."""
    x = np.asarray(matrices, float)
    single = x.ndim == 2
    x = np.atleast_3d(x) if not single else x[None]
    q, r = np.linalg.qr(x)
    norms = np.linalg.norm(r, axis=1)
    rho = log_singular_values(r / norms[:, None, :], np.log(norms))
    return rho[0] if single else rho


@dataclass
class ContractionReport:
    residual: np.ndarray
    tolerance: float

    @property
    def max_residual(self):
        return float(np.max(self.residual))

    @property
    def passed(self):
        return bool(self.max_residual < self.tolerance)


def contraction_identity_check(tan, spec=None, rate=1e-3):
    """``|ln det X_T - sum_k h div(x_mid)|`` per path; tolerance ``rate * T``."""
    if isinstance(tan, TangentTrajectory):
        log_det, mid = tan.log_det, tan.midpoint_divergence
        T = float(as_batch(tan.base).times[-1] - as_batch(tan.base).times[0])
    else:
        log_det, mid, T = tan["log_det"], tan["mid_div"], tan["horizon"]
    return ContractionReport(np.abs(log_det - mid), rate * T)


# --------------------------------------------------------------------------
# Homogeneous Kraichnan model

def kraichnan_covariance(dim, compressibility=0.0, strength=1.0):
    """Isotropic ``C^{ij}_{kl} = A d_ij d_kl + B (d_ik d_jl + d_il d_jk)`` as ``(d,d,d,d)``.

    Indices are ``[i, j, k, l]``.  In one dimension ``strength`` is the
    variance ``c`` itself.  For ``d >= 2``: ``A = 2 D (d + 1 - 2 p)``,
    ``B = 2 D (d p - 1)`` with compressibility degree ``p``.
    """
    if not 0.0 <= compressibility <= 1.0:
        raise ValueError("compressibility must lie in [0, 1]")
    e = np.eye(dim)
    if dim == 1:
        return np.full((1, 1, 1, 1), float(strength))
    A = 2.0 * strength * (dim + 1 - 2 * compressibility)
    B = 2.0 * strength * (dim * compressibility - 1)
    return (A * np.einsum("ij,kl->ijkl", e, e)
            + B * (np.einsum("ik,jl->ijkl", e, e) + np.einsum("il,jk->ijkl", e, e)))


@dataclass(frozen=True)
class KraichnanTangent:
    """Matrix process ``dX = dS X`` (Ito) with ``<dS^i_k dS^j_l> = C^{ij}_{kl} dt``."""

    cov: np.ndarray
    horizon: float

    @property
    def dim(self):
        return self.cov.shape[0]

    @property
    def contraction(self):
        """``Cbar^i_l = C^{ik}_{kl}``."""
        return np.einsum("ikkl->il", self.cov)

    @property
    def noise_factor(self):
        d = self.dim
        flat = np.transpose(self.cov, (0, 2, 1, 3)).reshape(d * d, d * d)
        # eigen factor keeps null directions (e.g. the trace when incompressible)
        # exactly null, which a Cholesky of a singular matrix does not
        w, v = np.linalg.eigh(0.5 * (flat + flat.T))
        if w.min() < -1e-12 * max(w.max(), 1e-300):
            psd_factor(flat)
        w = np.where(w < 1e-12 * w.max(), 0.0, w)
        return v * np.sqrt(w)[None, :]

    @property
    def lyapunov_1d(self):
        return -0.5 * float(self.cov.ravel()[0])


def kraichnan_ensemble(model, n, h, seed, x0=None, k_qr=10, workers=None, index_offset=0,
                       chunk=4096):
    """Stretching exponents and ``ln det X_T`` for ``n`` independent matrix paths.

    Steps use ``expm(dS - Cbar h / 2)``.  ``x0`` (a fixed matrix) is applied
    on the right: ``X_T = X_path X_0``.
    """
    from concurrent.futures import ThreadPoolExecutor
    from .sde import _worker_count
    d = model.dim
    steps = step_count(model.horizon, h)
    fac = model.noise_factor
    drift = -0.5 * h * model.contraction
    sqrt_h = np.sqrt(h)

    def job(start):
        idx = np.arange(index_offset + start, index_offset + min(start + chunk, n))
        xi = np.stack([RngStream(seed, int(i)).normals(steps, fac.shape[1]) for i in idx])
        c = idx.size
        co = Cocycle.identity(c, d)
        y = co.q.copy()
        mid = np.zeros(c)
        for k in range(steps):
            ds = (xi[:, k] @ fac.T * sqrt_h).reshape(c, d, d)
            gen = ds + drift
            mid += np.trace(gen, axis1=1, axis2=2)
            y = expm(gen) @ y
            if (k + 1) % k_qr == 0 or k == steps - 1:
                co.absorb(y)
                y = co.q.copy()
        if x0 is not None:
            x0m = np.asarray(x0, float)
            rho = log_singular_values(*co.graded_columns(right=x0m))
            log_det = co.log_det + np.log(abs(np.linalg.det(x0m)))
        else:
            rho = log_singular_values(*co.graded_columns())
            log_det = co.log_det
        return {"rho": rho, "log_det": log_det, "mid_div": mid, "det_sign": co.det_sign}

    starts = list(range(0, n, chunk))
    nw = _worker_count(workers)
    if nw == 1 or len(starts) == 1:
        parts = [job(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            parts = list(pool.map(job, starts))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# --------------------------------------------------------------------------
# Multiplicative fluctuation relation

@dataclass
class MultiplicativeReport:
    max_z: float
    cells: int
    edges: list
    forward: np.ndarray
    backward: np.ndarray

    @property
    def passed(self):
        return bool(self.max_z < 4.0)


def multiplicative_fr_check(rho_forward, rho_backward, bins=30, min_count=100):
    """``P(d rho) exp(sum rho) = P'(d(-rho reversed))`` bin-wise.

    ``rho_backward`` are spectra from an independent backward ensemble (for
    the time-reversible Kraichnan model, a second forward ensemble).
    """
    rf = np.atleast_2d(np.asarray(rho_forward, float).T).T
    rb = np.atleast_2d(np.asarray(rho_backward, float).T).T
    neg = -rb[:, ::-1]
    weight = np.exp(rf.sum(axis=1))
    d = rf.shape[1]
    edges = []
    for j in range(d):
        lo = max(np.quantile(rf[:, j], 0.001), np.quantile(neg[:, j], 0.001))
        hi = min(np.quantile(rf[:, j], 0.999), np.quantile(neg[:, j], 0.999))
        if hi < lo:
            raise InsufficientOverlap(f"exponent {j}: forward and backward ranges are disjoint")
        if hi == lo:
            edges.append(np.array([lo - 0.5, hi + 0.5]))
        else:
            edges.append(np.linspace(lo, hi, bins + 1))
    hf, _ = np.histogramdd(rf, bins=edges, weights=weight)
    hf2, _ = np.histogramdd(rf, bins=edges, weights=weight ** 2)
    cf, _ = np.histogramdd(rf, bins=edges)
    hb, _ = np.histogramdd(neg, bins=edges)
    nf, nb = rf.shape[0], neg.shape[0]
    mask = (cf >= min_count) & (hb >= min_count)
    if not mask.any():
        raise InsufficientOverlap(f"no bin has >= {min_count} counts in both ensembles")
    pf, pb = hf / nf, hb / nb
    var = hf2 / nf ** 2 + hb / nb ** 2
    z = np.abs(pf - pb)[mask] / np.sqrt(var[mask])
    return MultiplicativeReport(float(z.max()), int(mask.sum()), edges, pf, pb)


def linear_cocycle_check(m, horizon):
    """Deterministic linear flow: ``rho' = -reversed(rho)`` and ``sum rho = T tr M``."""
    m = np.asarray(m, float)
    rho = spectrum_of(expm(horizon * m))
    rho_back = spectrum_of(expm(-horizon * m))
    return {
        "rho": rho,
        "location": float(np.max(np.abs(rho_back + rho[::-1]))),
        "weight": float(abs(rho.sum() - horizon * np.trace(m))),
    }
