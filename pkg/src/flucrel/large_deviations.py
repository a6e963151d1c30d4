"""Empirical rate functions and the stationary fluctuation symmetries.

Samples arrive per horizon.  Two estimators are provided: a histogram of
``W / T`` and a Legendre transform of the scaled cumulant generating
function.  Both are extrapolated linearly in ``1 / T``.  Bands are
``BAND_SIGMAS`` times a block-bootstrap standard deviation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import InsufficientOverlap, InsufficientSamples, NonConvexCGF

MIN_SAMPLES = 10_000
MIN_ESS = 100.0
BAND_SIGMAS = 3.0
N_BLOCKS = 200
N_BOOT = 200
GRID_POINTS = 41
GC_SLACK = 0.05


@dataclass
class RateFunctionEstimate:
    grid: np.ndarray
    zeta: np.ndarray
    band: np.ndarray
    horizons: list
    method: str
    details: dict = field(default_factory=dict)

    @property
    def finite(self):
        return np.isfinite(self.zeta) & np.isfinite(self.band)

    @property
    def minimizer(self):
        z = np.where(np.isfinite(self.zeta), self.zeta, np.inf)
        return float(self.grid[int(np.argmin(z))])

    def at(self, w):
        """Linear interpolation; ``inf`` outside the finite window."""
        ok = self.finite
        w = np.asarray(w, float)
        if ok.sum() < 2:
            return np.where(np.isclose(w, self.grid[ok][0]) if ok.any() else False, 0.0, np.inf)
        g = self.grid[ok]
        out = np.interp(w, g, self.zeta[ok])
        return np.where((w < g[0]) | (w > g[-1]), np.inf, out)

    def band_at(self, w):
        ok = self.finite
        w = np.asarray(w, float)
        if ok.sum() < 2:
            return np.zeros_like(w)
        return np.interp(w, self.grid[ok], self.band[ok])


def _prepare(samples, horizons):
    if isinstance(samples, dict):
        horizons = sorted(samples) if horizons is None else list(horizons)
        samples = [samples[T] for T in horizons]
    horizons = [float(T) for T in horizons]
    samples = [np.asarray(s, float).ravel() for s in samples]
    if len(horizons) < 2 or len(samples) != len(horizons):
        raise InsufficientSamples("need samples at >= 2 horizons")
    for T, s in zip(horizons, samples):
        if s.size < MIN_SAMPLES:
            raise InsufficientSamples(f"horizon {T}: {s.size} samples < {MIN_SAMPLES}")
    order = np.argsort(horizons)
    return [horizons[i] for i in order], [samples[i] for i in order]


def default_grid(samples, horizons, points=GRID_POINTS):
    """``points`` values spanning mean +- 4 std of ``W / T`` at the largest horizon."""
    rate = samples[-1] / horizons[-1]
    m, s = float(np.mean(rate)), float(np.std(rate))
    if s == 0.0:
        s = 1e-3 * max(abs(m), 1.0)
    return np.linspace(m - 4 * s, m + 4 * s, points)


def _extrapolate(values, horizons):
    """Intercept of a least-squares line in ``1 / T`` per column; ``inf`` propagates."""
    values = np.asarray(values, float)
    inv = 1.0 / np.asarray(horizons, float)
    out = np.full(values.shape[1], np.inf)
    ok = np.all(np.isfinite(values), axis=0)
    if ok.any():
        A = np.stack([np.ones_like(inv), inv], 1)
        coef, *_ = np.linalg.lstsq(A, values[:, ok], rcond=None)
        out[ok] = coef[0]
    return out


def _blocks(x, n_blocks):
    return np.array_split(x, n_blocks)


def _block_hist(x, T, edges):
    return np.stack([np.histogram(b / T, edges)[0] for b in _blocks(x, N_BLOCKS)])


def _hist_zeta(counts, n, T, width):
    with np.errstate(divide="ignore"):
        return -np.log(counts / (n * width)) / T


def _edges(grid):
    step = np.diff(grid)
    width = float(step[0]) if step.size else 1.0
    return np.concatenate([grid - 0.5 * width, [grid[-1] + 0.5 * width]]), width


def _bootstrap(stat, n_blocks, seed):
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, n_blocks, size=(N_BOOT, n_blocks))
    return np.stack([stat(p) for p in picks])


def _band(draws):
    with np.errstate(invalid="ignore"):
        finite = np.all(np.isfinite(draws), axis=0)
        sd = np.where(finite, np.std(np.where(np.isfinite(draws), draws, 0.0), axis=0), np.inf)
    return BAND_SIGMAS * sd


def _vertex_min(grid, zeta):
    """Minimum of ``zeta`` refined by a parabola through the lowest grid point and its neighbours.

    The histogram estimate carries a ``w``-independent offset from the
    density prefactor; subtracting the refined minimum removes it without the
    grid-spacing bias of the raw minimum.
    """
    finite = np.isfinite(zeta)
    if not finite.any():
        return 0.0
    i = int(np.argmin(np.where(finite, zeta, np.inf)))
    if 0 < i < zeta.size - 1 and finite[i - 1] and finite[i + 1]:
        a, b, c = zeta[i - 1], zeta[i], zeta[i + 1]
        curv = a - 2 * b + c
        if curv > 0:
            return float(b - (c - a) ** 2 / (8 * curv))
    return float(zeta[i])


def histogram_rate(samples, horizons=None, grid=None, seed=0):
    horizons, samples = _prepare(samples, horizons)
    grid = default_grid(samples, horizons) if grid is None else np.asarray(grid, float)
    edges, width = _edges(grid)
    blocks = [_block_hist(s, T, edges) for s, T in zip(samples, horizons)]
    sizes = [np.array([b.size for b in _blocks(s, N_BLOCKS)]) for s in samples]

    def zeta_from(pick):
        rows = []
        for T, bc, sz in zip(horizons, blocks, sizes):
            c = bc[pick].sum(0) if pick is not None else bc.sum(0)
            n = sz[pick].sum() if pick is not None else sz.sum()
            rows.append(_hist_zeta(c, n, T, width))
        return _extrapolate(rows, horizons)

    zeta = zeta_from(None)
    draws = _bootstrap(zeta_from, N_BLOCKS, seed)
    draws = draws - np.array([_vertex_min(grid, d) for d in draws])[:, None]
    zeta = zeta - _vertex_min(grid, zeta)
    band = _band(draws)
    band = np.where(np.isfinite(zeta), band, np.inf)
    counts = sum(b.sum(0) for b in blocks)
    return RateFunctionEstimate(grid, zeta, band, horizons, "histogram",
                                {"counts_total": counts})


def _block_lse(x, k):
    """``ln sum exp(-k x)`` per block, shape ``(N_BLOCKS, len(k))``, and block sizes."""
    bl = _blocks(x, N_BLOCKS)
    return (np.stack([logsumexp(-np.outer(k, b), axis=1) for b in bl]),
            np.array([b.size for b in bl]))


def _log_mean_exp(lse, sizes, groups=20):
    """``ln <exp(-k x)>`` from block sums with a grouped-jackknife bias correction."""
    full = logsumexp(lse, axis=0) - np.log(sizes.sum())
    parts = np.array_split(np.arange(lse.shape[0]), groups)
    loo = []
    for p in parts:
        keep = np.ones(lse.shape[0], bool)
        keep[p] = False
        loo.append(logsumexp(lse[keep], axis=0) - np.log(sizes[keep].sum()))
    return groups * full - (groups - 1) * np.mean(loo, axis=0)


def _ess(x, k):
    a = -np.outer(k, x)
    a -= a.max(axis=1, keepdims=True)
    w = np.exp(a)
    return w.sum(1) ** 2 / (w * w).sum(1)


def scgf(samples, horizons, k):
    """Extrapolated ``lambda(k) = lim (1/T) ln <exp(-k W)>`` and the usable ``k`` mask."""
    rows, usable = [], np.ones(k.size, bool)
    for s, T in zip(samples, horizons):
        lse, sizes = _block_lse(s, k)
        rows.append(_log_mean_exp(lse, sizes) / T)
        usable &= _ess(s, k) > MIN_ESS
    return _extrapolate(rows, horizons), usable


def _legendre(lam, k, grid):
    """``zeta(w) = sup_k [-k w - lambda(k)]``; ``inf`` when the sup sits on the k-range edge."""
    vals = -np.outer(grid, k) - lam[None, :]
    arg = np.argmax(vals, axis=1)
    rows = np.arange(grid.size)
    out = vals[rows, arg]
    edge = (arg == 0) | (arg == k.size - 1)
    # parabolic refinement of the discrete sup (uniform k spacing)
    i = np.clip(arg, 1, k.size - 2)
    a, b, c = vals[rows, i - 1], vals[rows, i], vals[rows, i + 1]
    curv = a - 2 * b + c
    refined = b - (c - a) ** 2 / (8 * np.where(curv < 0, curv, -np.inf))
    out = np.where(~edge & (curv < 0), np.maximum(out, refined), out)
    return np.where(edge, np.inf, out)


def legendre_rate(samples, horizons=None, grid=None, seed=0, k_points=121):
    horizons, samples = _prepare(samples, horizons)
    grid = default_grid(samples, horizons) if grid is None else np.asarray(grid, float)
    T = horizons[-1]
    rate = samples[-1] / T
    if all(np.ptp(x) == 0 for x in samples):
        # deterministic W/T: the cumulant function is linear and its transform a point mass
        zeta = np.full(grid.size, np.inf)
        zeta[int(np.argmin(np.abs(grid - rate[0])))] = 0.0
        return RateFunctionEstimate(grid, zeta, np.where(np.isfinite(zeta), 0.0, np.inf),
                                    horizons, "legendre", {"degenerate": True})
    s = float(np.std(rate)) or 1e-3
    # the slope -lambda'(k) reaches w at k ~ -(w - mean) / (T var(W / T))
    kmax = 1.2 * float(np.max(np.abs(grid - rate.mean()))) / (T * s * s)
    k = np.linspace(-kmax, kmax, k_points)
    k = k[_ess(samples[-1], k) > MIN_ESS]
    if k.size < 3:
        raise InsufficientSamples("too few k values with effective sample size > 100")
    cached = [_block_lse(x, k) for x in samples]
    lam = _extrapolate([_log_mean_exp(lse, sz) / Th for (lse, sz), Th in zip(cached, horizons)],
                       horizons)
    second = np.diff(lam, 2)
    zeta = _legendre(lam, k, grid)

    def zeta_from(pick):
        rows = [(logsumexp(lse[pick], axis=0) - np.log(sz[pick].sum())) / Th
                for (lse, sz), Th in zip(cached, horizons)]
        return _legendre(_extrapolate(rows, horizons), k, grid)

    # lambda(0) = 0 exactly, so no offset has to be removed
    draws = _bootstrap(zeta_from, N_BLOCKS, seed)
    finite = np.isfinite(zeta)
    band = _band(draws)
    noise = np.median(band[np.isfinite(band)]) if np.isfinite(band).any() else 0.0
    if second.size and second.min() < -max(noise, 1e-12):
        warnings.warn("empirical cumulant generating function is not convex beyond noise",
                      NonConvexCGF, stacklevel=2)
    return RateFunctionEstimate(grid, zeta, np.where(finite, band, np.inf), horizons, "legendre",
                                {"k": k, "lambda": lam})


def estimate_rate_function(samples, horizons=None, grid=None, method="histogram", seed=0):
    """Rate function of ``W / T``; ``method='both'`` returns ``(histogram, legendre)``."""
    if method == "histogram":
        return histogram_rate(samples, horizons, grid, seed)
    if method == "legendre":
        return legendre_rate(samples, horizons, grid, seed)
    if method == "both":
        return (histogram_rate(samples, horizons, grid, seed),
                legendre_rate(samples, horizons, grid, seed))
    raise ValueError(f"unknown method {method!r}")


def convexity_violation(est):
    """Fraction of interior finite grid points where the second difference is below ``-band``."""
    ok = est.finite
    z, b = est.zeta[ok], est.band[ok]
    if z.size < 3:
        return 0.0
    sec = z[2:] - 2 * z[1:-1] + z[:-2]
    return float(np.mean(sec < -(b[2:] + 2 * b[1:-1] + b[:-2])))


# --------------------------------------------------------------------------
# Symmetry checks

@dataclass
class SymmetryReport:
    residual: float
    excess: float
    window: tuple
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.excess <= 0.0)


def gc_symmetry_check(forward, backward, slack=GC_SLACK):
    """``zeta(w) = zeta'(-w) - w`` on the window where both estimates are finite.

    ``excess`` is ``max(|residual| - band_f - band_b - slack)``; pass iff it is <= 0.
    """
    w = forward.grid[forward.finite]
    if w.size == 0:
        raise InsufficientOverlap("forward estimate has no finite points")
    zb = backward.at(-w)
    ok = np.isfinite(zb)
    if ok.sum() == 0:
        raise InsufficientOverlap("forward and reflected backward windows do not overlap")
    w = w[ok]
    diff = forward.at(w) - zb[ok] + w
    tol = forward.band_at(w) + backward.band_at(-w) + slack
    return SymmetryReport(float(np.max(np.abs(diff))), float(np.max(np.abs(diff) - tol)),
                          (float(w.min()), float(w.max())), {"w": w, "difference": diff})


@dataclass
class MultiplicativeRateReport:
    lyapunov: np.ndarray
    lyapunov_band: np.ndarray
    symmetry: SymmetryReport | None
    sum_rate: RateFunctionEstimate | None
    marginals: list

    @property
    def passed(self):
        return self.symmetry is None or self.symmetry.passed


def lyapunov_from_spectra(spectra, horizons=None):
    """Extrapolated mean stretching rates and 3-SE bands (linear fit in ``1/T``)."""
    if isinstance(spectra, dict):
        horizons = sorted(spectra)
        spectra = [spectra[T] for T in horizons]
    horizons = np.asarray(horizons, float)
    means = np.stack([np.mean(np.atleast_2d(np.asarray(r).T).T, axis=0) / T
                      for r, T in zip(spectra, horizons)])
    ses = np.stack([np.std(np.atleast_2d(np.asarray(r).T).T, axis=0, ddof=1)
                    / np.sqrt(len(r)) / T for r, T in zip(spectra, horizons)])
    inv = 1.0 / horizons
    A = np.stack([np.ones_like(inv), inv], 1)
    pinv = np.linalg.pinv(A)
    lam = pinv[0] @ means
    se = np.sqrt((pinv[0] ** 2) @ (ses ** 2))
    return lam, BAND_SIGMAS * se


def multiplicative_rate_check(spectra, backward=None, horizons=None, grid=None, seed=0):
    """Symmetry ``Z(s) - s = Z'(-s)`` for the summed rate and Lyapunov exponents.

    ``spectra`` maps horizons to ``(n, d)`` stretching exponents.  The
    symmetry is checked on ``s = sum sigma_i``, a consequence of the full
    relation that also covers ``d = 1`` completely.  Degenerate sums (zero
    spread, e.g. incompressible flows) skip the check.
    """
    if isinstance(spectra, dict):
        horizons = sorted(spectra)
        spectra = [np.atleast_2d(np.asarray(spectra[T]).T).T for T in horizons]
    if backward is not None and isinstance(backward, dict):
        backward = [np.atleast_2d(np.asarray(backward[T]).T).T for T in horizons]
    lam, band = lyapunov_from_spectra(spectra, horizons)
    d = spectra[0].shape[1]
    marg = []
    for j in range(d):
        col = [r[:, j] for r in spectra]
        if np.ptp(col[-1]) > 0:
            marg.append(histogram_rate(col, horizons, seed=seed))
    sums = [r.sum(1) for r in spectra]
    spread = np.ptp(sums[-1]) / horizons[-1]
    if spread < 1e-8:
        return MultiplicativeRateReport(lam, band, None, None, marg)
    # W = -sum rho turns the relation into zeta(w) = zeta'(-w) - w
    fwd = histogram_rate([-s for s in sums], horizons, grid, seed)
    if backward is None:
        bwd = fwd
    else:
        bwd = histogram_rate([-r.sum(1) for r in backward], horizons, grid, seed + 1)
    return MultiplicativeRateReport(lam, band, gc_symmetry_check(fwd, bwd), fwd, marg)
