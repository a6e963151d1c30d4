"""Monte Carlo verifiers for the integral and detailed fluctuation identities.

Every verifier integrates an ensemble with :func:`run_ensemble`, reduces the
paths to per-path functionals and returns an estimate with a k-sigma verdict.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.integrate import solve_ivp

from .errors import (
    DimensionTooLarge, InsufficientCounts, InsufficientOverlap, SamplerUnavailable,
    SchemePreconditionFailed,
)
from .fields import ScalarField, VectorField, reflect_scalar_field
from .functionals import functional_W
from .oracles import gaussian_joint_covariance, lyapunov_solve
from .reversal import (
    InversionScheme, SchemeKind, build_backward, check_potential_precondition,
)
from .sde import run_ensemble

TRIM_FRACTION = 1e-4
CROOKS_MIN_COUNT = 50
CROOKS_MIN_BINS = 5
JOINT_MIN_COUNT = 100
BINNED_MIN_COUNT = 20
Z_LIMIT = 4.0


@dataclass
class EnsembleEstimate:
    mean: float
    std_error: float
    n: int
    histogram: tuple
    seed: int
    verdict: bool
    k: float = 3.0
    target: float | None = None
    extras: dict = field(default_factory=dict)

    def as_record(self, name):
        rec = {"check": name, "mean": self.mean, "std_error": self.std_error, "n": self.n,
               "seed": self.seed, "verdict": "pass" if self.verdict else "fail", "k": self.k}
        if self.target is not None:
            rec["target"] = self.target
        rec.update({k: v for k, v in self.extras.items() if np.isscalar(v)})
        return rec


def mean_and_error(values):
    """Compensated mean and ``sample_std / sqrt(n)``."""
    values = np.asarray(values, dtype=float)
    n = values.size
    mean = math.fsum(values) / n
    se = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return mean, se


def estimate(values, target, seed, k=3.0, histogram_of=None, bins=50, extras=None):
    """Build an :class:`EnsembleEstimate` with verdict ``|mean - target| <= k SE``."""
    mean, se = mean_and_error(values)
    hist_src = np.asarray(values if histogram_of is None else histogram_of, dtype=float)
    counts, edges = np.histogram(hist_src, bins=bins)
    return EnsembleEstimate(
        mean=mean, std_error=se, n=int(np.asarray(values).size), histogram=(edges, counts),
        seed=seed, verdict=bool(abs(mean - target) <= k * se), k=k, target=target,
        extras=dict(extras or {}),
    )


# --------------------------------------------------------------------------
# Initial distributions

def rejection_initial(phi, t, box, n_probe=4096, safety=2.0):
    """Sampler ``gen -> point`` for ``exp(-phi_t)`` restricted to ``box`` by rejection."""
    from scipy.stats import qmc
    box = np.asarray(box, dtype=float)
    dim = box.shape[0]
    lo, width = box[:, 0], box[:, 1] - box[:, 0]
    probe = lo + qmc.Sobol(dim, seed=0).random(n_probe) * width
    log_env = float(np.max(-phi(np.full(n_probe, t), probe))) + np.log(safety)

    def draw(gen):
        while True:
            x = lo + gen.random(dim) * width
            if np.log(gen.random()) <= -phi(np.array([t]), x[None])[0] - log_env:
                return x

    return draw


def initial_for(phi, spec, t=0.0):
    if phi is None:
        raise SamplerUnavailable("no initial potential supplied")
    if phi.can_sample:
        return phi
    box = spec.params.get("sample_box")
    if box is None:
        raise SamplerUnavailable(
            f"potential {phi.name!r} has no sampler and the process has no 'sample_box'")
    return rejection_initial(phi, t, box)


def _finite(run, key):
    vals = run[key]
    return vals[~run.escaped], int(run.escaped.sum())


# --------------------------------------------------------------------------
# Jarzynski

def _w_reducer(spec, scheme, phi0, phiT, variant):
    def reduce(batch):
        return {"W": functional_W(batch, spec, scheme, phi0, phiT, variant).W}
    return reduce


def jarzynski_check(spec, scheme, phi0=None, phiT=None, n=100_000, h=1e-3, seed=0, k=3.0,
                    variant="generic", workers=None, bins=50):
    """Estimate ``<exp(-W)>`` with paths started from ``exp(-phi_0)``.

    ``extras`` carries the Jensen check (``mean W >= -k SE``), the trimmed
    diagnostic and the escape count.
    """
    phi0 = phi0 if phi0 is not None else scheme.phi
    phiT = phiT if phiT is not None else scheme.phi
    run = run_ensemble(spec, n, h, seed, initial_for(phi0, spec),
                       reducer=_w_reducer(spec, scheme, phi0, phiT, variant), workers=workers)
    W, escaped = _finite(run, "W")
    expw = np.exp(-W)
    w_mean, w_se = mean_and_error(W)
    extras = {
        "mean_W": w_mean, "se_W": w_se, "jensen_ok": bool(w_mean >= -k * w_se),
        "trimmed_mean": float(stats.trim_mean(expw, TRIM_FRACTION)),
        "escaped": escaped, "W": W,
    }
    return estimate(expw, 1.0, seed, k, histogram_of=W, bins=bins, extras=extras)


def free_energy_estimate(work, beta):
    """``-beta^{-1} ln <exp(-beta work)>`` with a delta-method standard error."""
    x = np.exp(-beta * (np.asarray(work, float) - np.min(work)))
    m, se = mean_and_error(x)
    return float(np.min(work) - np.log(m) / beta), float(se / (m * beta))


def deterministic_jarzynski(spec, phiT, box, nodes=400, rtol=1e-11):
    """Left side of the deterministic Jarzynski identity by quadrature over ``x_0``.

    Integrates ``x_0 -> (x_T, int div u dt)`` for a tensor Gauss-Legendre grid
    on ``box`` and sums ``exp(int div u) exp(-phi_T(x_T))``.
    """
    box = np.asarray(box, float)
    d = spec.dim
    if d > 2:
        raise DimensionTooLarge("quadrature is provided for d <= 2")
    g, w = np.polynomial.legendre.leggauss(nodes)
    axes = [0.5 * (b[1] - b[0]) * g + 0.5 * (b[1] + b[0]) for b in box]
    wts = [0.5 * (b[1] - b[0]) * w for b in box]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    weight = np.prod(np.stack(np.meshgrid(*wts, indexing="ij"), -1).reshape(-1, d), axis=1)
    m = grid.shape[0]
    u = spec.drift_field()

    def rhs(t, y):
        x = y[: m * d].reshape(m, d)
        tt = np.full(m, t)
        return np.concatenate([u(tt, x).ravel(), u.div(tt, x)])

    sol = solve_ivp(rhs, (0.0, spec.horizon), np.concatenate([grid.ravel(), np.zeros(m)]),
                    method="DOP853", rtol=rtol, atol=1e-13)
    xT = sol.y[: m * d, -1].reshape(m, d)
    contraction = sol.y[m * d:, -1]
    vals = np.exp(contraction - phiT(np.full(m, spec.horizon), xT))
    return float(np.sum(weight * vals))


# --------------------------------------------------------------------------
# Backward ensembles

def backward_setup(spec, scheme, phi0, phiT):
    """Backward process, its scheme and boundary potentials ``(phi'_0, phi'_T)``."""
    phi0 = phi0 if phi0 is not None else scheme.phi
    phiT = phiT if phiT is not None else scheme.phi
    if phi0 is None or phiT is None:
        raise SchemePreconditionFailed("boundary potentials phi_0 and phi_T must be supplied")
    bp = build_backward(spec, scheme)
    inv = scheme.involution_for(spec)
    back_scheme = InversionScheme(SchemeKind.GIVEN, inv, bp.phi)
    start = reflect_scalar_field(phiT, inv, spec.horizon)
    end = reflect_scalar_field(phi0, inv, spec.horizon)
    return bp, back_scheme, start, end


def backward_W(batch, bp, back_scheme, start, end):
    return functional_W(batch, bp.spec, back_scheme, start, end).W


def entropy_rate_check(spec, phi, rate, n=100_000, h=1e-3, seed=0, k=3.0, workers=None):
    """Stationary ``<W^tot> / T`` against an exact ``rate``; paths start from ``exp(-phi)``."""
    scheme = InversionScheme(SchemeKind.REVERSED_PROTOCOL, spec.involution)
    T = spec.horizon
    run = run_ensemble(spec, n, h, seed, initial_for(phi, spec), workers=workers,
                       reducer=lambda b: {"W": functional_W(b, spec, scheme, phi, phi).W})
    W, _ = _finite(run, "W")
    return estimate(W / T, float(rate), seed, k, extras={"horizon": T})


def kernel_moment_check(spec, model, t, x0, n=100_000, h=1e-3, seed=0, k=3.0, workers=None):
    """Sample mean and covariance after time ``t`` from ``x0`` against the Gaussian kernel.

    Returns the largest absolute z-score over all mean components and
    covariance entries, with the per-entry scores in ``extras``.
    """
    from .oracles import gaussian_kernel
    x0 = np.asarray(x0, float).reshape(1, -1)
    run = run_ensemble(spec, n, h, seed, x0, workers=workers, horizon=t)
    x = run["final"]
    mean_exact, cov_exact = gaussian_kernel(model, t, x0)
    mean_exact = mean_exact[0]
    m, se = x.mean(0), x.std(0, ddof=1) / np.sqrt(n)
    z_mean = (m - mean_exact) / se
    dev = x - mean_exact
    prods = np.einsum("ni,nj->nij", dev, dev)
    c_hat = prods.mean(0)
    c_se = prods.std(0, ddof=1) / np.sqrt(n)
    z_cov = (c_hat - cov_exact) / c_se
    worst = float(max(np.abs(z_mean).max(), np.abs(z_cov).max()))
    return EnsembleEstimate(worst, 1.0, n, (), seed, worst <= k, k, 0.0,
                            {"z_mean": z_mean, "z_cov": z_cov, "mean": m, "cov": c_hat,
                             "mean_exact": mean_exact, "cov_exact": cov_exact})


@dataclass
class PathwiseReport:
    residual: np.ndarray
    forward: np.ndarray
    backward: np.ndarray
    tolerance: float

    @property
    def max_residual(self):
        return float(np.max(self.residual))

    @property
    def passed(self):
        return bool(self.max_residual <= self.tolerance)


def pathwise_symmetry_check(spec, scheme, phi0=None, phiT=None, n=1000, h=1e-3, seed=0,
                            tolerance=1e-8, workers=None):
    """``W'(x~) = -W(x)`` path by path, with ``x~`` the inverted time-reversed path.

    The forward functional is evaluated by quadrature even for the complete
    reversal so that both sides go through the same discrete sums.
    """
    bp, back_scheme, start, end = backward_setup(spec, scheme, phi0, phiT)
    phi0 = phi0 if phi0 is not None else scheme.phi
    phiT = phiT if phiT is not None else scheme.phi
    inv = scheme.involution_for(spec)

    def reduce(batch):
        w = functional_W(batch, spec, scheme, phi0, phiT, exact_telescoping=False).W
        return {"W": w, "Wb": backward_W(batch.reversed(inv), bp, back_scheme, start, end)}

    run = run_ensemble(spec, n, h, seed, initial_for(phi0, spec), reducer=reduce, workers=workers)
    w, wb = run["W"], run["Wb"]
    residual = np.abs(wb + w) / np.maximum(1.0, np.abs(w))
    return PathwiseReport(residual, w, wb, tolerance)


@dataclass
class CrooksReport:
    edges: np.ndarray
    forward_counts: np.ndarray
    backward_counts: np.ndarray
    used: np.ndarray
    slope: float
    intercept: float
    slope_se: float
    intercept_se: float
    verdict: bool
    forward: EnsembleEstimate
    seed: int

    def as_record(self, name="crooks"):
        return {"check": name, "slope": self.slope, "intercept": self.intercept,
                "slope_se": self.slope_se, "intercept_se": self.intercept_se,
                "bins_used": int(self.used.sum()), "n": self.forward.n, "seed": self.seed,
                "verdict": "pass" if self.verdict else "fail"}


def log_ratio_regression(w_fwd, w_bwd_neg, bins=40, min_count=CROOKS_MIN_COUNT):
    """Weighted fit of ``ln p(W) - ln p'(-W)`` against ``W`` on common bins.

    ``w_bwd_neg`` holds the negated backward samples ``-W'``.
    """
    pooled = np.concatenate([w_fwd, w_bwd_neg])
    if isinstance(bins, int):
        lo, hi = np.quantile(pooled, [0.0005, 0.9995])
        if not hi > lo:
            raise InsufficientOverlap("W has degenerate support; no bins to compare")
        edges = np.linspace(lo, hi, bins + 1)
    else:
        edges = np.asarray(bins, float)
    cf, _ = np.histogram(w_fwd, edges)
    cb, _ = np.histogram(w_bwd_neg, edges)
    used = (cf >= min_count) & (cb >= min_count)
    if used.sum() < CROOKS_MIN_BINS:
        raise InsufficientOverlap(
            f"only {int(used.sum())} bins have >= {min_count} counts in both ensembles")
    centers = 0.5 * (edges[1:] + edges[:-1])[used]
    y = np.log(cf[used] / w_fwd.size) - np.log(cb[used] / w_bwd_neg.size)
    var = 1.0 / cf[used] + 1.0 / cb[used]
    A = np.stack([centers, np.ones_like(centers)], 1) / np.sqrt(var)[:, None]
    coef, *_ = np.linalg.lstsq(A, y / np.sqrt(var), rcond=None)
    cov = np.linalg.inv(A.T @ A)
    return edges, cf, cb, used, coef, np.sqrt(np.diag(cov))


def crooks_check(spec, scheme, phi0=None, phiT=None, n=100_000, h=1e-3, bins=40, seed=0,
                 workers=None, slope_tol=0.1, intercept_tol=0.1):
    """Paired forward/backward ensembles and the log-ratio regression."""
    bp, back_scheme, start, end = backward_setup(spec, scheme, phi0, phiT)
    fwd = jarzynski_check(spec, scheme, phi0, phiT, n, h, seed, workers=workers)
    W_f = fwd.extras["W"]
    run_b = run_ensemble(
        bp.spec, n, h, seed, initial_for(start, bp.spec), workers=workers, index_offset=n,
        reducer=lambda b: {"W": backward_W(b, bp, back_scheme, start, end)})
    W_b, _ = _finite(run_b, "W")
    edges, cf, cb, used, coef, se = log_ratio_regression(W_f, -W_b, bins)
    ok = abs(coef[0] - 1.0) <= slope_tol and abs(coef[1]) <= intercept_tol
    return CrooksReport(edges, cf, cb, used, float(coef[0]), float(coef[1]), float(se[0]),
                        float(se[1]), bool(ok), fwd, seed)


# --------------------------------------------------------------------------
# Speck-Seifert

def auxiliary_process(spec, phi):
    """The process with ``hat u'' = -hat u - d grad phi`` (all of it dissipative)."""
    noise = spec.noise
    u = spec.drift_field()

    def func(t, x):
        out = -u(t, x) - np.einsum("nij,nj->ni", noise.matrix(t, x), phi.gradient(t, x))
        if not noise.is_constant:
            out = out + noise.div_y(t, x)
        return out

    jac = None
    if noise.is_constant and u.has_jacobian:
        def jac(t, x):
            return -u.jac(t, x) - np.einsum("ij,njk->nik", noise.d, phi.hessian(t, x))

    plus = VectorField(func, jacobian=jac, name="auxiliary drift")
    return spec.with_drifts(plus, VectorField.zero(spec.dim), langevin=None,
                            family_tag=f"{spec.family_tag}:auxiliary")


@dataclass
class SpeckSeifertReport:
    integral: EnsembleEstimate
    functionals: list
    verdict: bool

    def as_record(self, name="speck_seifert"):
        return {"check": name, "mean": self.integral.mean, "std_error": self.integral.std_error,
                "n": self.integral.n, "seed": self.integral.seed,
                "functional_z": [f["z"] for f in self.functionals],
                "verdict": "pass" if self.verdict else "fail"}


def speck_seifert_check(spec, phi, n=100_000, h=1e-3, test_functionals=(), seed=0, k=3.0,
                        workers=None, check_precondition=True):
    """``<exp(-W_hk)> = 1`` and ``<F exp(-W_hk)> = <F>''`` for each supplied ``F``.

    ``test_functionals`` are callables ``batch -> per-path values``.
    """
    scheme = InversionScheme(SchemeKind.CURRENT_REVERSAL, phi=phi)
    if check_precondition:
        check_potential_precondition(spec, scheme)
    fs = list(test_functionals)

    def reduce(batch):
        out = {"W": functional_W(batch, spec, scheme, phi, phi, "hk").W}
        for j, f in enumerate(fs):
            out[f"F{j}"] = np.asarray(f(batch), float)
        return out

    init = initial_for(phi, spec)
    run = run_ensemble(spec, n, h, seed, init, reducer=reduce, workers=workers)
    keep = ~run.escaped
    weight = np.exp(-run["W"][keep])
    integral = estimate(weight, 1.0, seed, k, histogram_of=run["W"][keep])
    results = []
    if fs:
        aux = auxiliary_process(spec, phi)
        run2 = run_ensemble(
            aux, n, h, seed, init, workers=workers, index_offset=n,
            reducer=lambda b: {f"F{j}": np.asarray(f(b), float) for j, f in enumerate(fs)})
        keep2 = ~run2.escaped
        for j in range(len(fs)):
            m1, s1 = mean_and_error(run[f"F{j}"][keep] * weight)
            m2, s2 = mean_and_error(run2[f"F{j}"][keep2])
            comb = float(np.hypot(s1, s2))
            z = abs(m1 - m2) / comb if comb > 0 else (0.0 if m1 == m2 else np.inf)
            results.append({"weighted": m1, "weighted_se": s1, "auxiliary": m2,
                            "auxiliary_se": s2, "z": float(z), "verdict": bool(z <= k)})
    ok = integral.verdict and all(r["verdict"] for r in results)
    return SpeckSeifertReport(integral, results, bool(ok))


# --------------------------------------------------------------------------
# Detailed balance

@dataclass
class BalanceReport:
    route: str
    residual: float
    tolerance: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.residual < self.tolerance)


def _quantile_edges(samples, bins):
    """Equal-probability edges per coordinate, open at both ends."""
    edges = []
    for j in range(samples.shape[1]):
        q = np.quantile(samples[:, j], np.linspace(0, 1, bins + 1)[1:-1])
        edges.append(np.concatenate([[-np.inf], q, [np.inf]]))
    return edges


def _joint_counts(x, y, edges):
    pts = np.concatenate([x, y], axis=1)
    counts, _ = np.histogramdd(pts, bins=edges + edges)
    return counts


def detailed_balance_binned(spec, phi, t, n=1_000_000, h=1e-3, bins=6, seed=0, scheme=None,
                            workers=None, min_count=BINNED_MIN_COUNT):
    """Binned comparison of ``mu(dx) P_t(x, dy)`` with its reversed counterpart.

    Without ``scheme`` the plain relation ``mu(dx)P(x,dy) = mu(dy)P(y,dx)``
    is tested by transposing one joint histogram.  With a scheme an
    independent ensemble of the backward process supplies the right side.
    """
    if spec.dim > 2:
        raise DimensionTooLarge("binned kernels are limited to d <= 2")
    init = initial_for(phi, spec)
    fwd = run_ensemble(spec, n, h, seed, init, horizon=t, workers=workers,
                       reducer=lambda b: {"x": b.states[:, 0], "y": b.states[:, -1]})
    keep = ~fwd.escaped
    x, y = fwd["x"][keep], fwd["y"][keep]
    edges = _quantile_edges(x, bins)
    cf = _joint_counts(x, y, edges)
    d = spec.dim
    if scheme is None:
        axes = list(range(d, 2 * d)) + list(range(d))
        cb = np.transpose(cf, axes)
        nb = x.shape[0]
        # the two sides are disjoint cells of one multinomial sample
        mask = (cf + cb) >= min_count
        var = cf + cb
    else:
        bp = build_backward(spec, scheme)
        inv = scheme.involution_for(spec)
        start = reflect_scalar_field(phi, inv, spec.horizon)
        bwd = run_ensemble(bp.spec, n, h, seed, initial_for(start, bp.spec), horizon=t,
                           workers=workers, index_offset=n, t0=spec.horizon - t,
                           reducer=lambda b: {"x": b.states[:, 0], "y": b.states[:, -1]})
        kb = ~bwd.escaped
        xb, yb = inv(bwd["y"][kb]), inv(bwd["x"][kb])
        nb = xb.shape[0]
        cb = _joint_counts(xb, yb, edges) * (x.shape[0] / nb)
        mask = (cf >= min_count) & (cb >= min_count)
        var = cf + cb * (x.shape[0] / nb)
    if not mask.any():
        raise InsufficientCounts(f"no cell has >= {min_count} transitions")
    z = np.abs(cf - cb)[mask] / np.sqrt(var[mask])
    return BalanceReport("binned", float(z.max()), Z_LIMIT,
                         {"cells": int(mask.sum()), "n": int(x.shape[0])})


def gaussian_detailed_balance(model, t, involution=None, generalized=True):
    """Analytic check for the stationary linear model.

    Forward: ``(x_0, x_t)`` zero-mean Gaussian with cross covariance
    ``S e^{t M^T}``.  Backward (current reversal with ``phi = beta H``):
    drift ``-r (Gamma + Pi) C^{-1} r``, stationary covariance ``r S r^T``.
    ``generalized=False`` uses the forward process itself as the backward one.
    """
    from scipy.linalg import expm
    d = model.dim
    r = np.eye(d) if involution is None else np.asarray(involution, float)
    S = model.c / model.beta
    M = model.m
    cross_f = S @ expm(t * M).T
    if generalized:
        Mb = -r @ (model.gamma + model.pi) @ np.linalg.inv(model.c) @ r
        Sb = r @ S @ r.T
    else:
        r = np.eye(d)
        Mb, Sb = M, S
    # pairs (x, y) = (r x'_t, r x'_0): cov(x, y) = r e^{t M'} S' r^T
    cross_b = r @ expm(t * Mb) @ Sb @ r.T
    res = float(np.max(np.abs(cross_f - cross_b)))
    stat_b = lyapunov_solve(Mb, r @ model.gamma @ r.T) / model.beta
    res_marg = float(np.max(np.abs(stat_b - Sb)))
    return BalanceReport("gaussian", max(res, res_marg), 1e-10,
                         {"cross": res, "marginal": res_marg,
                          "joint_forward": gaussian_joint_covariance(model, t)})


def lognormal_kernel(x, y, c, t):
    """Density of ``y`` given ``x`` for ``dX = X dS`` (Ito), ``<dS dS> = c dt``."""
    s2 = c * t
    z = np.log(y / x) + 0.5 * s2
    return np.exp(-z * z / (2 * s2)) / (y * np.sqrt(2 * np.pi * s2))


def lognormal_detailed_balance(c, t, exponent=2.0, grid=None):
    """``rho(x) P_t(x, y) = rho(y) P_t(y, x)`` for ``rho = x^{-exponent}`` on a grid.

    The relative cellwise mismatch is the residual; it vanishes iff
    ``exponent = 2`` (that is ``phi = 2 ln X`` in one dimension).
    """
    g = np.geomspace(0.05, 20.0, 60) if grid is None else np.asarray(grid, float)
    X, Y = np.meshgrid(g, g, indexing="ij")
    lhs = X ** -exponent * lognormal_kernel(X, Y, c, t)
    rhs = Y ** -exponent * lognormal_kernel(Y, X, c, t)
    mask = (lhs > 1e-300) & (rhs > 1e-300)
    res = float(np.max(np.abs(np.log(lhs[mask]) - np.log(rhs[mask]))))
    return BalanceReport("lognormal", res, 1e-10, {"exponent": exponent})


def detailed_balance_check(spec, phi, t, grid=None, route="binned", **kw):
    """Dispatch to the binned, Gaussian or log-normal route."""
    if route == "binned":
        return detailed_balance_binned(spec, phi, t, **kw)
    if route == "gaussian":
        return gaussian_detailed_balance(spec, t, **kw)
    if route == "lognormal":
        return lognormal_detailed_balance(spec, t, grid=grid, **kw)
    raise ValueError(f"unknown route {route!r}")


# --------------------------------------------------------------------------
# Detailed fluctuation relation

def detailed_fr_check(spec, scheme, phi0=None, phiT=None, n=1_000_000, h=1e-3, grid=None,
                      seed=0, workers=None, min_count=JOINT_MIN_COUNT, y_bins=8, w_bins=12):
    """Joint ``(y, W)`` histograms against reweighted backward ``(x'_0*, -W')``.

    The backward samples enter with weight ``exp(-W')``.  ``grid`` may give
    ``(y_edges, w_edges)`` for ``d = 1``.
    """
    if spec.dim > 2:
        raise DimensionTooLarge("joint histograms are limited to d <= 2")
    phi0 = phi0 if phi0 is not None else scheme.phi
    phiT = phiT if phiT is not None else scheme.phi
    bp, back_scheme, start, end = backward_setup(spec, scheme, phi0, phiT)
    inv = scheme.involution_for(spec)
    fwd = run_ensemble(spec, n, h, seed, initial_for(phi0, spec), workers=workers,
                       reducer=lambda b: {"y": b.states[:, -1],
                                          "W": functional_W(b, spec, scheme, phi0, phiT).W})
    bwd = run_ensemble(bp.spec, n, h, seed, initial_for(start, bp.spec), workers=workers,
                       index_offset=n,
                       reducer=lambda b: {"x": b.states[:, 0],
                                          "W": backward_W(b, bp, back_scheme, start, end)})
    kf, kb = ~fwd.escaped, ~bwd.escaped
    yf, wf = fwd["y"][kf], fwd["W"][kf]
    yb, wb = inv(bwd["x"][kb]), -bwd["W"][kb]
    weight = np.exp(wb)
    if grid is None:
        edges = _quantile_edges(yf, y_bins)
        spread = np.ptp(wf)
        if spread == 0:
            w_edges = np.array([wf[0] - 0.5, wf[0] + 0.5])
        else:
            w_edges = np.quantile(np.concatenate([wf, wb]), np.linspace(0, 1, w_bins + 1))
            w_edges = np.unique(w_edges)
            w_edges[0], w_edges[-1] = -np.inf, np.inf
        edges = edges + [w_edges]
    else:
        edges = [np.asarray(g, float) for g in grid]
    cf, _ = np.histogramdd(np.column_stack([yf, wf]), bins=edges)
    cb, _ = np.histogramdd(np.column_stack([yb, wb]), bins=edges, weights=weight)
    cb2, _ = np.histogramdd(np.column_stack([yb, wb]), bins=edges, weights=weight ** 2)
    raw_b, _ = np.histogramdd(np.column_stack([yb, wb]), bins=edges)
    nf, nb = yf.shape[0], yb.shape[0]
    mask = (cf >= min_count) & (raw_b >= min_count)
    if not mask.any():
        raise InsufficientCounts(f"no joint cell has >= {min_count} counts in both ensembles")
    pf, pb = cf / nf, cb / nb
    var = cf / nf ** 2 + cb2 / nb ** 2
    z = np.abs(pf - pb)[mask] / np.sqrt(var[mask])
    return BalanceReport("detailed_fr", float(z.max()), Z_LIMIT,
                         {"cells": int(mask.sum()), "n_forward": nf, "n_backward": nb,
                          "edges": edges, "forward": pf, "backward": pb})
