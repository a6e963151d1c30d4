"""Linear-response checks: Green-Kubo, Onsager reciprocity, FDT and its flux deformation.

Responses are measured by explicit perturbation runs at ``+eps`` and
``-eps`` that share noise streams with each other (and with the unperturbed
run), so the per-path differences carry most of the signal.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import BurnInNotConverged, InvolutionIncompatible, SchemePreconditionFailed
from .fields import ScalarField, VectorField
from .reversal import InversionScheme, SchemeKind, is_time_reversible
from .sde import run_ensemble, step_count


@dataclass
class ResponseExperiment:
    """Perturbation amplitude, lag grid and ensemble sizes for one response measurement."""

    eps: float = 0.05
    n: int = 4000
    h: float = 1e-2
    burn_in: float = 10.0
    window: float = 40.0
    lags: np.ndarray | None = None
    max_lag: float = 10.0
    seed: int = 0
    workers: int | None = None
    k: float = 3.0


def _mean_se(values, axis=0):
    values = np.asarray(values, float)
    n = values.shape[axis]
    return values.mean(axis=axis), values.std(axis=axis, ddof=1) / np.sqrt(n)


def flux_field(spec, force):
    """``J = beta grad H . G - div G`` for a Langevin-family process."""
    data = spec.langevin
    if data is None:
        raise SchemePreconditionFailed("fluxes need a Langevin-family process")
    beta, H = data.beta, data.hamiltonian

    def value(t, x):
        return beta * np.einsum("ni,ni->n", H.gradient(t, x), force(t, x)) - force.div(t, x)

    return value


def perturbed(spec, forces, couplings):
    """``spec`` with the extra force ``sum_a g_a G^a`` added to the conservative drift."""
    extra = None
    for g, f in zip(couplings, forces):
        if g == 0:
            continue
        term = f.scaled(g)
        extra = term if extra is None else extra + term
    if extra is None:
        return spec
    return spec.with_drifts(spec.drift_plus, spec.drift_minus + extra)


def _gibbs_initial(spec, initial):
    if initial is None:
        initial = spec.params.get("gibbs")
    if initial is None:
        raise SchemePreconditionFailed("an equilibrium sampler is needed (pass initial=)")
    return initial


def _flat_eval(fn, batch):
    n, m, d = batch.states.shape
    t = np.broadcast_to(batch.times, (n, m)).reshape(-1)
    return fn(t, batch.states.reshape(-1, d)).reshape(n, m)


def _burn_in_diagnostic(shift, what):
    """Mean shift between the two quarters of the second half of burn-in must stay below 2 SE."""
    m, se = _mean_se(shift)
    z = abs(m) / se if se > 0 else 0.0
    if z > 2.0:
        raise BurnInNotConverged(f"{what}: mean drifts by {z:.2f} SE over the second half of burn-in")
    return float(z)


def stationary_means(spec, fluxes, experiment, initial=None, index_offset=0):
    """Per-path time averages of each flux over ``[burn_in, burn_in + window]``."""
    ex = experiment
    total = ex.burn_in + ex.window

    def reduce(batch):
        out = {}
        t = batch.times
        keep = t >= ex.burn_in
        q2 = (t >= 0.5 * ex.burn_in) & (t < 0.75 * ex.burn_in)
        q3 = (t >= 0.75 * ex.burn_in) & (t < ex.burn_in)
        for j, f in enumerate(fluxes):
            series = _flat_eval(f, batch)
            out[f"mean{j}"] = series[:, keep].mean(1)
            if q2.any() and q3.any():
                out[f"shift{j}"] = series[:, q3].mean(1) - series[:, q2].mean(1)
        return out

    run = run_ensemble(spec, ex.n, ex.h, ex.seed, _gibbs_initial(spec, initial), reducer=reduce,
                       workers=ex.workers, horizon=total, index_offset=index_offset)
    for j in range(len(fluxes)):
        if f"shift{j}" in run.values:
            _burn_in_diagnostic(run[f"shift{j}"], f"flux {j}")
    return [run[f"mean{j}"] for j in range(len(fluxes))]


def transport_coefficient(spec, forces, a, b, experiment, initial=None, eps=None):
    """Per-path estimates of ``d<J^a>_st / d g_b`` from antithetic ``+-eps`` runs."""
    eps = experiment.eps if eps is None else eps
    fa = flux_field(spec, forces[a])
    g = np.zeros(len(forces))
    g[b] = eps
    plus = stationary_means(perturbed(spec, forces, g), [fa], experiment, initial)[0]
    minus = stationary_means(perturbed(spec, forces, -g), [fa], experiment, initial)[0]
    return (plus - minus) / (2 * eps)


def _transport_mean_se(values, experiment):
    """Mean and error of per-path transport estimates.

    Antithetic runs on shared noise cancel the fluctuations exactly for
    linear dynamics, leaving a sample error at rounding level; the error is
    floored by the accumulated rounding of a time average over all steps.
    """
    mean, se = _mean_se(values)
    steps = (experiment.burn_in + experiment.window) / experiment.h
    floor = np.finfo(float).eps * np.sqrt(steps) * abs(mean)
    return mean, float(np.hypot(se, floor))


def _xcorr_lags(a, b, max_lag):
    """Per-path ``mean_t a[t + s] b[t]`` for ``s = 0..max_lag`` via FFT."""
    n, m = a.shape
    size = 1 << int(np.ceil(np.log2(2 * m)))
    fa = np.fft.rfft(a, size, axis=1)
    fb = np.fft.rfft(b, size, axis=1)
    full = np.fft.irfft(fa * np.conj(fb), size, axis=1)[:, : max_lag + 1]
    return full / (m - np.arange(max_lag + 1))[None, :]


def equilibrium_correlation(spec, fa, fb, experiment, initial=None, index_offset=0):
    """Per-path lagged correlations ``<f_a(x_{t+s}) f_b(x_t)>`` in equilibrium."""
    ex = experiment
    lag_steps = int(round(ex.max_lag / ex.h))

    def reduce(batch):
        sa = _flat_eval(fa, batch)
        sb = sa if fb is fa else _flat_eval(fb, batch)
        return {"corr": _xcorr_lags(sa, sb, lag_steps), "mean_a": sa.mean(1)}

    run = run_ensemble(spec, ex.n, ex.h, ex.seed, _gibbs_initial(spec, initial), reducer=reduce,
                       workers=ex.workers, horizon=ex.window, index_offset=index_offset)
    return run["corr"], run["mean_a"]


def _window_integral(corr, h):
    """Trapezoid integrals up to the noise-floor window and 1.5 times it."""
    mean, se = _mean_se(corr)
    below = np.nonzero(np.abs(mean) < 2 * se)[0]
    L = int(below[0]) if below.size else corr.shape[1] - 1
    L = max(L, 2)
    L_ext = min(int(1.5 * L), corr.shape[1] - 1)

    def integral(stop):
        w = np.ones(stop + 1)
        w[0] = w[-1] = 0.5
        return h * corr[:, : stop + 1] @ w

    return integral(L), integral(L_ext), L * h


@dataclass
class GreenKuboReport:
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    rhs_extended: float
    window: float
    equilibrium_mean: float
    equilibrium_se: float
    z: float
    k: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.z <= self.k)

    def as_record(self, name="green_kubo"):
        return {"check": name, "lhs": self.lhs, "lhs_se": self.lhs_se, "rhs": self.rhs,
                "rhs_se": self.rhs_se, "z": self.z, "window": self.window,
                "equilibrium_mean": self.equilibrium_mean,
                "verdict": "pass" if self.passed else "fail"}


def green_kubo_check(spec, forces, experiment=None, a=0, b=0, initial=None):
    """``d<J^a>_st/dg_b`` against ``int_0^inf <J^a_s J^b_0>_0 ds``."""
    ex = experiment or ResponseExperiment()
    forces = list(forces)
    lhs_paths = transport_coefficient(spec, forces, a, b, ex, initial)
    lhs, lhs_se = _transport_mean_se(lhs_paths, ex)
    fa, fb = flux_field(spec, forces[a]), flux_field(spec, forces[b])
    corr, mean_a = equilibrium_correlation(spec, fa, fb, ex, initial, index_offset=ex.n)
    integ, integ_ext, window = _window_integral(corr, ex.h)
    rhs, rhs_se = _mean_se(integ)
    eq_mean, eq_se = _mean_se(mean_a)
    z = abs(lhs - rhs) / np.hypot(lhs_se, rhs_se)
    return GreenKuboReport(float(lhs), float(lhs_se), float(rhs), float(rhs_se),
                           float(integ_ext.mean()), window, float(eq_mean), float(eq_se),
                           float(z), ex.k, {"window_shift_se": float(abs(integ_ext.mean() - rhs) / rhs_se)})


@dataclass
class OnsagerReport:
    t_ab: float
    t_ba: float
    se: float
    skipped: bool
    k: float

    @property
    def z(self):
        return abs(self.t_ab - self.t_ba) / self.se if self.se > 0 else 0.0

    @property
    def passed(self):
        return bool(self.skipped or self.z <= self.k)


def onsager_check(spec, forces, experiment=None, a=0, b=1, initial=None):
    """``T_ab = T_ba`` for the transport matrix; skipped with a warning off reversibility."""
    ex = experiment or ResponseExperiment()
    forces = list(forces)
    try:
        reversible = is_time_reversible(spec, InversionScheme(SchemeKind.CANONICAL, spec.involution))
    except (InvolutionIncompatible, SchemePreconditionFailed):
        reversible = False
    if not reversible:
        warnings.warn("Onsager reciprocity needs time-reversible equilibrium dynamics; skipped",
                      stacklevel=2)
        return OnsagerReport(np.nan, np.nan, np.nan, True, ex.k)
    ab = transport_coefficient(spec, forces, a, b, ex, initial)
    if a == b:
        return OnsagerReport(float(ab.mean()), float(ab.mean()), 0.0, False, ex.k)
    ba = transport_coefficient(spec, forces, b, a, ex, initial)
    # all four runs share noise streams, so the paired difference has the honest error
    _, se = _transport_mean_se(ab - ba, ex)
    return OnsagerReport(float(ab.mean()), float(ba.mean()), float(se), False, ex.k)


# --------------------------------------------------------------------------
# Fluctuation-dissipation

def kick_field(spec, observable):
    """Displacement from ``H -> H - eps O`` applied for one step: ``(Gamma - Pi) grad O``."""
    data = spec.langevin
    if data is None:
        raise SchemePreconditionFailed("the response kick needs a Langevin-family process")
    mat = np.asarray(data.gamma) - np.asarray(data.pi)
    return lambda t, x: observable.gradient(t, x) @ mat.T


@dataclass
class FDTReport:
    lags: np.ndarray
    correlation_slope: np.ndarray
    response: np.ndarray
    difference: np.ndarray
    se: np.ndarray
    k: float
    correction: np.ndarray | None = None
    correction_se: np.ndarray | None = None

    @property
    def z(self):
        target = 0.0 if self.correction is None else self.correction
        extra = 0.0 if self.correction_se is None else self.correction_se
        return np.abs(self.difference - target) / np.hypot(self.se, extra)

    @property
    def max_z(self):
        return float(np.max(self.z))

    @property
    def passed(self):
        return bool(self.max_z <= self.k)


def _response_paths(spec, obs_a, kick, experiment, initial, lag_steps, beta):
    """Per-path ``R(s) / beta`` from antithetic kicks at time 0 sharing noise streams."""
    ex = experiment
    horizon = (lag_steps.max() + 1) * ex.h

    def forcing_for(sign):
        def forcing(k, t, x):
            return sign * ex.eps * kick(t, x) if k == 0 else 0.0
        return forcing

    def reduce(batch):
        return {"a": _flat_eval(obs_a, batch)[:, lag_steps]}

    vals = [run_ensemble(spec, ex.n, ex.h, ex.seed, initial, reducer=reduce,
                         forcing=forcing_for(sign), workers=ex.workers, horizon=horizon)["a"]
            for sign in (1.0, -1.0)]
    return (vals[0] - vals[1]) / (2 * ex.eps) / beta


def _correlation_slope(spec, obs_a, obs_b, experiment, initial, lags, delta):
    """Per-path ``-dC/ds`` by central differences of width ``2 delta`` on time-averaged correlations."""
    ex = experiment
    sub = ResponseExperiment(**{**ex.__dict__, "max_lag": float(lags.max() + delta) + ex.h})
    corr, _ = equilibrium_correlation(spec, obs_a, obs_b, sub, initial, index_offset=2 * ex.n)
    up = np.rint((lags + delta) / ex.h).astype(int)
    down = np.rint((lags - delta) / ex.h).astype(int)
    return -(corr[:, up] - corr[:, down]) / (2 * delta)


def fdt_check(spec, obs_a, obs_b, experiment=None, initial=None, lags=None, delta=0.05):
    """``-d/ds <O^a_s O^b_0>_0 = beta^{-1} <O^a_s R^b_0>_0`` on a lag grid.

    The correlation comes from time-averaged equilibrium runs and the
    response from independent antithetic kick runs; their standard errors
    are combined.
    """
    ex = experiment or ResponseExperiment(n=20_000, h=1e-3, window=20.0)
    lags = np.asarray(lags if lags is not None else (ex.lags if ex.lags is not None
                                                     else np.linspace(0.2, 2.0, 7)), float)
    beta = spec.langevin.beta if spec.langevin is not None else spec.beta
    initial = _gibbs_initial(spec, initial)
    lag_steps = np.rint(lags / ex.h).astype(int)
    resp = _response_paths(spec, obs_a, kick_field(spec, obs_b), ex, initial, lag_steps, beta)
    slope = _correlation_slope(spec, obs_a, obs_b, ex, initial, lags, delta)
    s_mean, s_se = _mean_se(slope)
    r_mean, r_se = _mean_se(resp)
    return FDTReport(lags, s_mean, r_mean, s_mean - r_mean, np.hypot(s_se, r_se), ex.k)


# --------------------------------------------------------------------------
# Deformed FDT for the flux model

def bump(center=0.0, width=1.0, height=1.0):
    """Smooth compactly supported observable ``height * exp(1 - 1/(1 - r^2))``."""
    def _r(x):
        return (x[:, 0] - center) / width

    def value(t, x):
        r = _r(x)
        inside = np.abs(r) < 1
        out = np.zeros_like(r)
        out[inside] = height * np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
        return out

    def grad(t, x):
        r = _r(x)
        inside = np.abs(r) < 1
        out = np.zeros_like(r)
        ri = r[inside]
        out[inside] = (height * np.exp(1.0 - 1.0 / (1.0 - ri ** 2))
                       * (-2.0 * ri / (1.0 - ri ** 2) ** 2) / width)
        return out[:, None]

    return ScalarField(value, grad=grad, name=f"bump({center}, {width})")


def deformed_observable(model, observable, support, grid):
    """``O_hat(x) = int_{-sign inf}^x O e^{beta H} / int_{-sign inf}^x e^{beta H}`` on ``grid``.

    Both integrals are scaled by ``exp(-beta H(x))``; the denominator is the
    unnormalized flux density and the numerator a quadrature over the
    compact ``support``.
    """
    from .oracles import unnormalized_density
    lo, hi = support
    g, w = np.polynomial.legendre.leggauss(64)
    grid = np.asarray(grid, float)
    num = np.zeros_like(grid)
    sign = model.sign
    for i, x in enumerate(grid):
        # integration runs from -sign*inf up to x
        a, b = (lo, min(hi, x)) if sign > 0 else (max(lo, x), hi)
        if b <= a:
            continue
        y = 0.5 * (b - a) * g + 0.5 * (b + a)
        vals = observable(np.zeros(y.size), y[:, None])
        num[i] = 0.5 * (b - a) * np.sum(w * vals * np.exp(model.beta * (model.h(y) - model.h(x))))
    den = unnormalized_density(model, grid)
    return num / den


def deformed_fdt_check(model, obs_a, obs_b, support_a, support_b, experiment=None, lags=None,
                       use_deformed=True, x_max=None, grid_points=4001, seed_offset=0,
                       delta=0.05):
    """Naive-FDT residual of the flux process against the flux correction term.

    ``use_deformed=False`` replaces ``A = O - O_hat`` by ``O`` itself.
    """
    from .catalog import flux_process
    from .oracles import flux_invariant_density
    ex = experiment or ResponseExperiment(n=1_000_000, h=1e-3)
    lags = np.asarray(lags if lags is not None else np.linspace(0.2, 1.0, 5), float)
    spec, sampler = flux_process(model, x_max=x_max)
    x_max = spec.params["x_max"]
    if use_deformed:
        lo_a, hi_a = support_a
        near = np.linspace(lo_a - 20.0, hi_a + 20.0, grid_points)
        right = np.geomspace(hi_a + 20.0, max(x_max, hi_a + 21.0), 400)[1:]
        left = -np.geomspace(-(lo_a - 20.0), max(x_max, 21.0 - lo_a), 400)[1:][::-1] if lo_a - 20.0 < 0 \
            else np.zeros(0)
        table = np.concatenate([left, near, right])
        o_hat = deformed_observable(model, obs_a, support_a, table)

        def o_hat_at(x):
            return np.interp(x, table, o_hat)
    else:
        def o_hat_at(x):
            return np.zeros_like(x)

    A = ScalarField(lambda t, x: obs_a(t, x) - o_hat_at(x[:, 0]), name="A")
    lag_steps = np.rint(lags / ex.h).astype(int)
    resp = _response_paths(spec, A, kick_field(spec, obs_b), ex, sampler, lag_steps, model.beta)
    slope = _correlation_slope(spec, A, obs_b, ex, sampler, lags, delta)
    s_mean, s_se = _mean_se(slope)
    r_mean, r_se = _mean_se(resp)
    # correction j int O_b'(x) E_x[A(x_s)] dx with x uniform on the support of O_b
    sol = flux_invariant_density(model, np.array([0.0]))
    lo_b, hi_b = support_b
    width = hi_b - lo_b
    rng_seed = ex.seed + 7919 + seed_offset

    def start(gen):
        return np.array([lo_b + width * gen.random()])

    horizon = (lag_steps.max() + 1) * ex.h

    def reduce(batch):
        x0 = batch.states[:, 0]
        dob = obs_b.gradient(np.zeros(len(x0)), x0)[:, 0]
        vals = _flat_eval(A, batch)[:, lag_steps]
        return {"v": width * dob[:, None] * vals}

    corr_run = run_ensemble(spec, ex.n, ex.h, rng_seed, start, reducer=reduce,
                            workers=ex.workers, horizon=horizon)
    c_mean, c_se = _mean_se(corr_run["v"])
    j = sol.current
    return FDTReport(lags, s_mean, r_mean, s_mean - r_mean, np.hypot(s_se, r_se), ex.k,
                     correction=j * c_mean, correction_se=abs(j) * c_se)
