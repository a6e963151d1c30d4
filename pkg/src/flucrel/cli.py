"""Command-line front door: ``run`` a named check, list the ``catalog``, ``simulate`` raw paths.

A run reads a JSON experiment document, builds the named catalog process,
executes the check and writes ``samples.csv``, ``estimates.jsonl`` and
``manifest.json`` into the output directory.  Data files depend only on the
configuration, never on the worker count.

Exit codes: 0 all verdicts pass, 1 a check failed, 2 invalid configuration,
3 runtime error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, catalog
from .errors import ConfigInvalid, Error
from .fields import ScalarField, VectorField
from .reversal import InversionScheme, SchemeKind

SCHEMA_VERSION = 1
TOP_KEYS = {"schema_version", "process", "scheme", "check", "n", "h", "T", "horizons", "seed",
            "workers", "out", "options"}

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


# --------------------------------------------------------------------------
# Configuration

@dataclass
class ExperimentConfig:
    process: str
    process_params: dict = field(default_factory=dict)
    scheme: str | None = None
    scheme_options: dict = field(default_factory=dict)
    check: str | None = None
    n: int = 10_000
    h: float = 1e-3
    T: float | None = None
    horizons: list = field(default_factory=list)
    seed: int = 0
    workers: int | None = None
    out: str = "flucrel_out"
    options: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        doc = {
            "schema_version": self.schema_version,
            "process": {"name": self.process, "params": self.process_params},
            "check": self.check, "n": self.n, "h": self.h, "T": self.T,
            "horizons": self.horizons, "seed": self.seed, "workers": self.workers,
            "out": self.out, "options": self.options,
        }
        if self.scheme is not None:
            doc["scheme"] = {"name": self.scheme, "options": self.scheme_options}
        return doc


def _number(doc, key, kind, positive=True, optional=False):
    if key not in doc or doc[key] is None:
        if optional:
            return None
        raise ConfigInvalid(key, "required")
    val = doc[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigInvalid(key, f"expected a number, got {val!r}")
    if kind is int:
        if float(val) != int(val):
            raise ConfigInvalid(key, f"expected an integer, got {val!r}")
        val = int(val)
    else:
        val = float(val)
    if positive and not val > 0:
        raise ConfigInvalid(key, f"must be positive, got {val!r}")
    return val


def parse_config(doc, need_check=True):
    """Validate an experiment document; errors name the offending field path."""
    if not isinstance(doc, dict):
        raise ConfigInvalid("<root>", "expected a JSON object")
    unknown = sorted(set(doc) - TOP_KEYS)
    if unknown:
        raise ConfigInvalid(unknown[0], "unknown key")
    if "schema_version" not in doc:
        raise ConfigInvalid("schema_version", "required")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigInvalid("schema_version", f"unsupported version {doc['schema_version']!r}")

    proc = doc.get("process")
    if isinstance(proc, str):
        proc = {"name": proc}
    if not isinstance(proc, dict) or "name" not in proc:
        raise ConfigInvalid("process.name", "required")
    entry = catalog.get(proc["name"], "process.name")
    params = proc.get("params", {}) or {}
    if not isinstance(params, dict):
        raise ConfigInvalid("process.params", "expected an object")
    entry.resolve(params)

    scheme, scheme_opts = None, {}
    if doc.get("scheme") is not None:
        sch = doc["scheme"]
        if isinstance(sch, str):
            sch = {"name": sch}
        if not isinstance(sch, dict) or "name" not in sch:
            raise ConfigInvalid("scheme.name", "required")
        try:
            scheme = SchemeKind.parse(sch["name"]).value
        except ValueError:
            raise ConfigInvalid("scheme.name", f"unknown scheme {sch['name']!r}") from None
        if scheme not in entry.schemes:
            raise ConfigInvalid("scheme.name", f"{scheme!r} is not applicable to {entry.name!r}; "
                                f"applicable: {', '.join(entry.schemes) or 'none'}")
        scheme_opts = sch.get("options", {}) or {}

    check = doc.get("check")
    if need_check:
        if check is None:
            raise ConfigInvalid("check", "required")
        if check not in CHECKS:
            raise ConfigInvalid("check", f"unknown check {check!r}; known: {', '.join(sorted(CHECKS))}")
        spec_check = CHECKS[check]
        if spec_check.processes and entry.name not in spec_check.processes:
            raise ConfigInvalid("process.name", f"check {check!r} needs one of "
                                f"{', '.join(spec_check.processes)}")
        if spec_check.needs_scheme and scheme is None:
            raise ConfigInvalid("scheme.name", "required by check " + repr(check))

    horizons = doc.get("horizons") or []
    if not isinstance(horizons, list):
        raise ConfigInvalid("horizons", "expected a list")
    for i, v in enumerate(horizons):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise ConfigInvalid(f"horizons[{i}]", "must be a positive number")
    workers = _number(doc, "workers", int, optional=True)
    options = doc.get("options", {}) or {}
    if not isinstance(options, dict):
        raise ConfigInvalid("options", "expected an object")
    out = doc.get("out", "flucrel_out")
    if not isinstance(out, str):
        raise ConfigInvalid("out", "expected a string")
    seed = _number(doc, "seed", int, positive=False) if "seed" in doc else 0
    if seed < 0:
        raise ConfigInvalid("seed", "must be non-negative")
    return ExperimentConfig(
        process=entry.name, process_params=dict(params), scheme=scheme,
        scheme_options=dict(scheme_opts), check=check,
        n=_number(doc, "n", int) if "n" in doc else 10_000,
        h=_number(doc, "h", float) if "h" in doc else 1e-3,
        T=_number(doc, "T", float, optional=True),
        horizons=[float(v) for v in horizons], seed=seed, workers=workers, out=out,
        options=dict(options),
    )


def apply_overrides(doc, overrides):
    """Apply ``key.sub=value`` assignments; values are parsed as JSON when possible."""
    doc = copy.deepcopy(doc)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigInvalid(f"--override {item!r}", "expected key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            if isinstance(node.get(p), str) and p in ("process", "scheme"):
                node[p] = {"name": node[p]}
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigInvalid(key, "cannot descend into a non-object")
        node[parts[-1]] = value
    return doc


def load_config(path, overrides=None):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigInvalid("--config", f"file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid("--config", f"invalid JSON ({exc})") from None
    return apply_overrides(doc, overrides)


# --------------------------------------------------------------------------
# Check registry

@dataclass
class CheckResult:
    records: list
    samples: dict | None = None

    @property
    def passed(self):
        return all(r.get("verdict") == "pass" for r in self.records)


@dataclass(frozen=True)
class Check:
    name: str
    doc: str
    runner: object
    processes: tuple = ()
    needs_scheme: bool = False


class Context:
    def __init__(self, config):
        self.config = config
        params = dict(config.process_params)
        entry = catalog.get(config.process)
        if config.T is not None and "horizon" in entry.parameters:
            params["horizon"] = config.T
        self.process = entry.build(**params)
        self.opts = config.options

    @property
    def spec(self):
        if self.process.spec is None:
            raise ConfigInvalid("process.name", f"{self.config.process!r} is not a diffusion process")
        return self.process.spec

    def scheme(self):
        c = self.config
        if c.scheme not in self.process.schemes:
            raise ConfigInvalid("scheme.name", f"{c.scheme!r} does not apply to {c.process!r} with "
                                f"these parameters; applicable: {', '.join(self.process.schemes)}")
        return InversionScheme(c.scheme, phi=self.process.phi,
                               noise_rule=c.scheme_options.get("noise_rule", "vector"))

    def common(self):
        c = self.config
        return {"n": c.n, "h": c.h, "seed": c.seed, "workers": c.workers}


def _run_jarzynski(ctx):
    from .relations import jarzynski_check
    r = jarzynski_check(ctx.spec, ctx.scheme(), variant=ctx.opts.get("variant", "generic"),
                        **ctx.common())
    return CheckResult([r.as_record("jarzynski")], {"W": r.extras["W"]})


def _run_crooks(ctx):
    from .relations import crooks_check
    r = crooks_check(ctx.spec, ctx.scheme(), bins=ctx.opts.get("bins", 40), **ctx.common())
    return CheckResult([r.as_record()], {"W": r.forward.extras["W"]})


def _run_pathwise(ctx):
    from .relations import pathwise_symmetry_check
    r = pathwise_symmetry_check(ctx.spec, ctx.scheme(), tolerance=ctx.opts.get("tolerance", 1e-8),
                                **ctx.common())
    rec = {"check": "pathwise_symmetry", "max_residual": r.max_residual, "tolerance": r.tolerance,
           "n": int(r.forward.size), "verdict": "pass" if r.passed else "fail"}
    return CheckResult([rec], {"W": r.forward, "W_backward": r.backward})


def _run_first_law(ctx):
    from .functionals import first_law_residual, heat_work_langevin
    from .relations import initial_for
    from .sde import run_ensemble
    spec, c = ctx.spec, ctx.config
    tol = ctx.opts.get("tolerance", 5e-3)

    def reduce(batch):
        Q, w, dU = heat_work_langevin(batch, spec)
        return {"Q": Q, "work": w, "deltaU": dU}

    run = run_ensemble(spec, c.n, c.h, c.seed, initial_for(ctx.process.phi, spec), reducer=reduce,
                       store_noise=True, workers=c.workers)
    res, scale = first_law_residual(run["Q"], run["work"], run["deltaU"])
    ratio = float(np.max(res / np.maximum(scale, np.finfo(float).tiny)))
    rec = {"check": "first_law", "max_relative_residual": ratio, "tolerance": tol, "n": c.n,
           "verdict": "pass" if ratio <= tol else "fail"}
    return CheckResult([rec], {"Q": run["Q"], "work": run["work"], "deltaU": run["deltaU"]})


def _path_mean_functional(batch):
    return batch.states[:, :, 0].mean(axis=1)


def _endpoint_square(batch):
    return batch.states[:, -1, 0] ** 2


def _run_speck_seifert(ctx):
    from .relations import speck_seifert_check
    r = speck_seifert_check(ctx.spec, ctx.process.phi,
                            test_functionals=(_path_mean_functional, _endpoint_square),
                            **ctx.common())
    return CheckResult([r.as_record()])


def _run_detailed_fr(ctx):
    from .relations import detailed_fr_check
    r = detailed_fr_check(ctx.spec, ctx.scheme(), **ctx.common())
    rec = {"check": "detailed_fr", "max_z": r.residual, "limit": r.tolerance,
           "cells": r.details["cells"], "verdict": "pass" if r.passed else "fail"}
    return CheckResult([rec])


def _run_entropy_rate(ctx):
    from .oracles import stationary_entropy_rate
    from .relations import entropy_rate_check
    rate = stationary_entropy_rate(ctx.process.model)
    r = entropy_rate_check(ctx.spec, ctx.process.phi, rate, **ctx.common())
    return CheckResult([r.as_record("entropy_rate")])


def _run_kernel_moments(ctx):
    from .relations import kernel_moment_check
    d = ctx.spec.dim
    x0 = ctx.opts.get("x0", [1.0] * d)
    t = float(ctx.opts.get("t", ctx.spec.horizon))
    r = kernel_moment_check(ctx.spec, ctx.process.model, t, x0, **ctx.common())
    rec = {"check": "kernel_moments", "max_z": r.mean, "k": r.k, "n": r.n,
           "verdict": "pass" if r.verdict else "fail"}
    return CheckResult([rec])


def _run_contraction(ctx):
    from .relations import initial_for
    from .sde import run_ensemble
    from .tangent import contraction_identity_check, tangent_along
    spec, c = ctx.spec, ctx.config

    def reduce(batch):
        tan = tangent_along(spec, batch, ctx.opts.get("k_qr", 10))
        return {"log_det": tan.log_det, "mid_div": tan.midpoint_divergence}

    run = run_ensemble(spec, c.n, c.h, c.seed, initial_for(ctx.process.phi, spec), reducer=reduce,
                       workers=c.workers, store_wiener=not spec.noise.is_constant)
    rep = contraction_identity_check({"log_det": run["log_det"], "mid_div": run["mid_div"],
                                      "horizon": spec.horizon}, rate=ctx.opts.get("rate", 1e-3))
    rec = {"check": "contraction_identity", "max_residual": rep.max_residual,
           "tolerance": rep.tolerance, "verdict": "pass" if rep.passed else "fail"}
    return CheckResult([rec], {"log_det": run["log_det"]})


def _experiment(ctx, **defaults):
    from .response import ResponseExperiment
    c = ctx.config
    keys = ("eps", "burn_in", "window", "max_lag", "k")
    kw = {k: ctx.opts[k] if k in ctx.opts else defaults[k]
          for k in keys if k in ctx.opts or k in defaults}
    return ResponseExperiment(n=c.n, h=c.h, seed=c.seed, workers=c.workers, **kw)


def axis_force(dim, axis, center=None, width=None):
    """Unit force along ``axis``; localized by a Gaussian envelope when ``width`` is given."""
    e = np.zeros(dim)
    e[axis] = 1.0
    if width is None:
        return VectorField(lambda t, x: np.broadcast_to(e, x.shape).copy(),
                           jacobian=lambda t, x: np.zeros((len(x), dim, dim)),
                           divergence=lambda t, x: np.zeros(len(x)), name=f"e_{axis}")
    c0 = np.zeros(dim) if center is None else np.asarray(center, float)

    def env(x):
        return np.exp(-0.5 * np.sum((x - c0) ** 2, axis=1) / width ** 2)

    def jac(t, x):
        g = -(x - c0) / width ** 2 * env(x)[:, None]
        out = np.zeros((len(x), dim, dim))
        out[:, axis, :] = g
        return out

    return VectorField(lambda t, x: env(x)[:, None] * e, jacobian=jac,
                       divergence=lambda t, x: -(x[:, axis] - c0[axis]) / width ** 2 * env(x),
                       name=f"localized e_{axis}")


def _forces(ctx):
    d = ctx.spec.dim
    spec_forces = ctx.opts.get("forces") or [{"axis": i} for i in range(d)]
    return [axis_force(d, f.get("axis", 0), f.get("center"), f.get("width")) for f in spec_forces]


def _run_green_kubo(ctx):
    from .response import green_kubo_check
    a, b = ctx.opts.get("a", 0), ctx.opts.get("b", 0)
    r = green_kubo_check(ctx.spec, _forces(ctx), _experiment(ctx), a, b)
    return CheckResult([r.as_record()])


def _run_onsager(ctx):
    import warnings
    from .response import onsager_check
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        forces = _forces(ctx)
        r = onsager_check(ctx.spec, forces, _experiment(ctx), ctx.opts.get("a", 0),
                          ctx.opts.get("b", min(1, len(forces) - 1)))
    rec = {"check": "onsager", "t_ab": r.t_ab, "t_ba": r.t_ba, "se": r.se, "skipped": r.skipped,
           "verdict": "pass" if r.passed else "fail"}
    if caught:
        rec["warning"] = str(caught[0].message)
    return CheckResult([rec])


def coordinate(axis):
    return ScalarField(lambda t, x: x[:, axis],
                       grad=lambda t, x: np.eye(x.shape[1])[axis][None, :].repeat(len(x), 0),
                       name=f"x_{axis}")


def _lags(ctx, default):
    return np.asarray(ctx.opts.get("lags", default), float)


def _fdt_record(name, r):
    return {"check": name, "lags": r.lags.tolist(), "difference": r.difference.tolist(),
            "se": r.se.tolist(), "correction": None if r.correction is None else r.correction.tolist(),
            "max_z": r.max_z, "k": r.k, "verdict": "pass" if r.passed else "fail"}


def _run_fdt(ctx):
    from .response import fdt_check
    r = fdt_check(ctx.spec, coordinate(ctx.opts.get("axis_a", 0)), coordinate(ctx.opts.get("axis_b", 0)),
                  _experiment(ctx, window=20.0), lags=_lags(ctx, [0.2, 0.5, 1.0, 1.5]),
                  delta=ctx.opts.get("delta", 0.05))
    return CheckResult([_fdt_record("fdt", r)])


def _run_deformed_fdt(ctx):
    from .response import bump, deformed_fdt_check
    o = ctx.opts
    ca, wa = o.get("center_a", 0.0), o.get("width_a", 1.0)
    cb, wb = o.get("center_b", 0.3), o.get("width_b", 1.0)
    r = deformed_fdt_check(ctx.process.model, bump(ca, wa), bump(cb, wb), (ca - wa, ca + wa),
                           (cb - wb, cb + wb), _experiment(ctx, window=5.0),
                           lags=_lags(ctx, [0.2, 0.4, 0.6, 0.8, 1.0]),
                           use_deformed=o.get("use_deformed", True),
                           x_max=ctx.process.spec.params["x_max"], delta=o.get("delta", 0.05))
    return CheckResult([_fdt_record("deformed_fdt", r)])


def _kraichnan_rho(ctx, horizon, index_offset=0):
    from dataclasses import replace
    from .tangent import kraichnan_ensemble
    c = ctx.config
    model = replace(ctx.process.model, horizon=float(horizon))
    return kraichnan_ensemble(model, c.n, c.h, c.seed, workers=c.workers,
                              index_offset=index_offset)["rho"]


def _rho_samples(rho):
    rho = np.atleast_2d(rho.T).T
    return {f"rho_{j + 1}": rho[:, j] for j in range(rho.shape[1])}


def _run_multiplicative_fr(ctx):
    from .tangent import multiplicative_fr_check
    T = ctx.process.model.horizon
    fwd = _kraichnan_rho(ctx, T)
    bwd = _kraichnan_rho(ctx, T, index_offset=ctx.config.n)
    r = multiplicative_fr_check(fwd, bwd, bins=ctx.opts.get("bins", 30))
    rec = {"check": "multiplicative_fr", "max_z": r.max_z, "cells": r.cells,
           "verdict": "pass" if r.passed else "fail"}
    return CheckResult([rec], _rho_samples(fwd))


def _run_rate_function(ctx):
    from .large_deviations import multiplicative_rate_check
    T = ctx.process.model.horizon
    horizons = ctx.config.horizons or [T, 2 * T, 4 * T]
    spectra = {float(H): _kraichnan_rho(ctx, H, index_offset=i * ctx.config.n)
               for i, H in enumerate(horizons)}
    r = multiplicative_rate_check(spectra, seed=ctx.config.seed)
    rec = {"check": "rate_function", "lyapunov": r.lyapunov.tolist(),
           "lyapunov_band": r.lyapunov_band.tolist(),
           "symmetry_excess": None if r.symmetry is None else r.symmetry.excess,
           "verdict": "pass" if r.passed else "fail"}
    return CheckResult([rec], _rho_samples(spectra[float(horizons[-1])]))


DIFFUSIONS = ("breathing_ou", "langevin_kramers", "double_well", "linear", "flux1d")
LANGEVIN = ("breathing_ou", "langevin_kramers", "double_well", "linear")
EQUILIBRIUM = ("breathing_ou", "langevin_kramers", "double_well", "linear")

CHECKS = {c.name: c for c in [
    Check("jarzynski", "<exp(-W)> = 1 within k SE", _run_jarzynski, DIFFUSIONS, True),
    Check("crooks", "log-ratio regression of forward and backward W histograms", _run_crooks,
          DIFFUSIONS, True),
    Check("pathwise_symmetry", "W'(reversed path) = -W(path) per path", _run_pathwise,
          DIFFUSIONS, True),
    Check("first_law", "per-path dU + Q - work against the energy scale", _run_first_law, LANGEVIN),
    Check("speck_seifert", "<exp(-W_hk)> = 1 and the auxiliary-process identity",
          _run_speck_seifert, LANGEVIN),
    Check("detailed_fr", "joint (x_T, W) histograms against reweighted backward ones",
          _run_detailed_fr, DIFFUSIONS, True),
    Check("entropy_rate", "stationary <W_tot>/T against -tr(Pi Gamma^-1 M)", _run_entropy_rate,
          ("linear",)),
    Check("kernel_moments", "transition mean and covariance against the Gaussian kernel",
          _run_kernel_moments, ("linear",)),
    Check("contraction_identity", "ln det X_T against the summed drift divergence",
          _run_contraction, DIFFUSIONS),
    Check("green_kubo", "transport coefficient against the integrated flux correlation",
          _run_green_kubo, EQUILIBRIUM),
    Check("onsager", "symmetry of the transport matrix", _run_onsager, EQUILIBRIUM),
    Check("fdt", "correlation slope against the kick response", _run_fdt, EQUILIBRIUM),
    Check("deformed_fdt", "naive FDT residual against the flux correction", _run_deformed_fdt,
          ("flux1d",)),
    Check("multiplicative_fr", "P(rho) exp(sum rho) = P'(-reversed rho) bin-wise",
          _run_multiplicative_fr, ("kraichnan_tangent",)),
    Check("rate_function", "stretching rate functions, Lyapunov exponents and their symmetry",
          _run_rate_function, ("kraichnan_tangent",)),
]}


# --------------------------------------------------------------------------
# Output

def _jsonable(obj):
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_samples(path, samples):
    cols = list(samples)
    data = np.column_stack([np.arange(len(samples[cols[0]]))] + [np.asarray(samples[c], float)
                                                                 for c in cols])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["trajectory_index"] + cols) + "\n")
        np.savetxt(fh, data, fmt="%.17g", delimiter=",")


def _finite_or_null(obj):
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_null(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not np.isfinite(obj):
        return None
    return obj


def write_records(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_finite_or_null(rec), sort_keys=True, default=_jsonable,
                                allow_nan=False) + "\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(config, out=None):
    """Execute the configured check, write outputs and return the manifest dict."""
    out_dir = Path(out or config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = CHECKS[config.check].runner(Context(config))
    wall = time.perf_counter() - start
    files = {}
    if result.samples:
        write_samples(out_dir / "samples.csv", result.samples)
        files["samples.csv"] = _sha256(out_dir / "samples.csv")
    write_records(out_dir / "estimates.jsonl", result.records)
    files["estimates.jsonl"] = _sha256(out_dir / "estimates.jsonl")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "code_version": __version__,
        "seed": config.seed,
        "wall_time_s": wall,
        "verdicts": {r.get("check", config.check): r.get("verdict") for r in result.records},
        "passed": result.passed,
        "files": files,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                      default=_jsonable) + "\n")
    return manifest


def simulate(config, out=None):
    """Write raw paths (or Kraichnan stretching exponents) to ``paths.csv``."""
    out_dir = Path(out or config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = Context(config)
    if ctx.process.spec is None:
        rho = _kraichnan_rho(ctx, ctx.process.model.horizon)
        write_samples(out_dir / "paths.csv", _rho_samples(rho))
        return out_dir / "paths.csv"
    from .relations import initial_for
    from .sde import run_ensemble
    spec, c = ctx.spec, config
    stride = int(ctx.opts.get("stride", 1))
    initial = ctx.opts.get("x0")
    if initial is None:
        initial = initial_for(ctx.process.phi, spec)

    def reduce(batch):
        return {"x": batch.states[:, ::stride]}

    run_out = run_ensemble(spec, c.n, c.h, c.seed, initial, reducer=reduce, workers=c.workers)
    x = run_out["x"]
    n, m, d = x.shape
    steps = np.arange(0, step_count_for(spec, c.h) + 1, stride)
    cols = [np.repeat(np.arange(n), m), np.tile(steps, n), np.tile(steps * c.h, n)]
    cols += [x[:, :, j].reshape(-1) for j in range(d)]
    with open(out_dir / "paths.csv", "w", newline="") as fh:
        fh.write(",".join(["trajectory_index", "step", "t"] + [f"x_{j + 1}" for j in range(d)]) + "\n")
        np.savetxt(fh, np.column_stack(cols), fmt="%.17g", delimiter=",")
    return out_dir / "paths.csv"


def step_count_for(spec, h):
    from .sde import step_count
    return step_count(spec.horizon, h)


def catalog_document():
    """Processes, schemes and checks, each process with a ready-to-parse example config."""
    procs = []
    for desc in catalog.catalog_list():
        example = {"schema_version": SCHEMA_VERSION,
                   "process": {"name": desc["name"], "params": {}}}
        checks = [c.name for c in CHECKS.values() if not c.processes or desc["name"] in c.processes]
        scheme_free = [c for c in checks if not CHECKS[c].needs_scheme]
        if desc["schemes"]:
            example["scheme"] = {"name": desc["schemes"][0]}
            example["check"] = checks[0]
        elif scheme_free:
            example["check"] = scheme_free[0]
        desc = dict(desc, checks=checks, example_config=example)
        procs.append(desc)
    return {
        "schema_version": SCHEMA_VERSION,
        "processes": procs,
        "schemes": [k.value for k in SchemeKind if k is not SchemeKind.GIVEN],
        "checks": {c.name: c.doc for c in CHECKS.values()},
    }


def _print_catalog(doc, stream):
    for p in doc["processes"]:
        stream.write(f"{p['name']}: {p['summary']}\n")
        stream.write(f"  schemes: {', '.join(p['schemes']) or '-'}\n")
        stream.write(f"  checks:  {', '.join(p['checks'])}\n")
        for k, v in p["parameters"].items():
            stream.write(f"    {k} = {json.dumps(v['default'])}  ({v['doc']})\n")
    stream.write("checks:\n")
    for k, v in doc["checks"].items():
        stream.write(f"  {k}: {v}\n")


def _parser():
    ap = argparse.ArgumentParser(prog="flucrel", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "simulate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment JSON document")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    cp = sub.add_parser("catalog")
    cp.add_argument("--json", action="store_true", help="machine-readable listing")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "catalog":
        doc = catalog_document()
        if args.json:
            sys.stdout.write(json.dumps(doc, indent=2, default=_jsonable) + "\n")
        else:
            _print_catalog(doc, sys.stdout)
        return EXIT_PASS
    try:
        doc = load_config(args.config, args.override)
        if args.seed is not None:
            doc["seed"] = args.seed
        if args.workers is not None:
            doc["workers"] = args.workers
        config = parse_config(doc, need_check=args.command == "run")
    except ConfigInvalid as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    try:
        if args.command == "simulate":
            path = simulate(config, args.out)
            sys.stdout.write(f"wrote {path}\n")
            return EXIT_PASS
        manifest = run(config, args.out)
    except ConfigInvalid as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except Error as exc:
        sys.stderr.write(f"{config.check} on {config.process}: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - rendered with context, not swallowed
        sys.stderr.write(f"{config.check} on {config.process}: unexpected {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME
    for name, verdict in manifest["verdicts"].items():
        sys.stdout.write(f"{name}: {verdict}\n")
    return EXIT_PASS if manifest["passed"] else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
