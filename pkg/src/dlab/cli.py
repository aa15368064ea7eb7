"""Configuration-driven experiment runner: ``dlab run | validate | plot``.

A run config is a TOML document::

    kind = "dissipation-time"
    seed = 0

    [grid]
    n = 64

    [flow]
    kind = "none"

    [params]
    gamma = 1.0
    order = 1.0

    [ladder]
    refine = false
    max_n = 256
    rtol = 0.02

Every config expands into independent jobs.  Each job computes a primary
scalar; with ``ladder.refine`` the job is rerun on doubled grids until that
scalar changes by less than ``rtol``.  Outputs are written atomically and
indexed in ``manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .spectral import ConfigurationError, Grid

KINDS = ("decay", "dissipation-time", "sweep", "diffusivity", "nonlinear", "liouvillean",
         "tau-relation")
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """A config field is missing, mistyped or out of range."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ---------------------------------------------------------------------------
# Field validation

_MISSING = object()


def _check(block: dict, prefix: str, schema: dict) -> dict:
    """Validate ``block`` against ``schema`` (name -> (converter, default)).

    Unknown keys are rejected so that typos surface before any compute.
    """
    unknown = sorted(set(block) - set(schema))
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}", "unknown field")
    out = {}
    for name, (conv, default) in schema.items():
        path = f"{prefix}.{name}"
        if name not in block:
            if default is _MISSING:
                raise ConfigError(path, "required field is missing")
            out[name] = default
            continue
        out[name] = conv(path, block[name])
    return out


def _number(lo=None, hi=None, *, strict=True, integer=False, allow_none=False):
    def conv(path, v):
        if v is None and allow_none:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(path, f"expected a number, got {v!r}")
        if integer and (not isinstance(v, int)):
            raise ConfigError(path, f"expected an integer, got {v!r}")
        if not math.isfinite(v):
            raise ConfigError(path, f"must be finite, got {v!r}")
        if lo is not None and (v <= lo if strict else v < lo):
            raise ConfigError(path, f"must be {'>' if strict else '>='} {lo}, got {v!r}")
        if hi is not None and v > hi:
            raise ConfigError(path, f"must be <= {hi}, got {v!r}")
        return int(v) if integer else float(v)
    return conv


def _choice(*options):
    def conv(path, v):
        if v not in options:
            raise ConfigError(path, f"must be one of {', '.join(map(str, options))}; got {v!r}")
        return v
    return conv


def _boolean(path, v):
    if not isinstance(v, bool):
        raise ConfigError(path, f"expected true or false, got {v!r}")
    return v


def _list_of(conv, *, min_len=1):
    def inner(path, v):
        if not isinstance(v, list):
            v = [v]
        if len(v) < min_len:
            raise ConfigError(path, f"needs at least {min_len} entries")
        return [conv(f"{path}[{i}]", x) for i, x in enumerate(v)]
    return inner


def _fraction(path, v):
    try:
        if isinstance(v, str):
            f = Fraction(v)
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            f = Fraction(v).limit_denominator(10**12)
        else:
            raise ValueError
    except (ValueError, ZeroDivisionError):
        raise ConfigError(path, f"expected a number or 'n/d' string, got {v!r}") from None
    if f <= 0:
        raise ConfigError(path, f"must be > 0, got {v!r}")
    return str(f)


_FLOW = {
    "kind": (_choice("none", "cellular", "shear"), "none"),
    "cells": (_number(0, integer=True), 1),
    "amplitude": (_number(), 1.0),
    "rescale": (_number(0, integer=True), 1),
}


def _flow(path, v):
    if not isinstance(v, dict):
        raise ConfigError(path, "expected a table")
    return _check(v, path, _FLOW)


_EVOLVE_METHODS = _choice("rk4", "exact")
_NORM_METHODS = _choice("auto", "exact", "power")

_PARAMS = {
    "decay": {
        "gamma": (_number(0, strict=False), 1.0),
        "order": (_number(1, strict=False), 1.0),
        "T": (_number(0), _MISSING),
        "dt": (_number(0, allow_none=True), None),
        "sample_interval": (_number(0, allow_none=True), None),
        "method": (_EVOLVE_METHODS, "rk4"),
        "initial": (_choice("sin", "two-mode", "random"), "two-mode"),
        "norm": (_number(0), 1.0),
    },
    "dissipation-time": {
        "gamma": (_number(0), _MISSING),
        "order": (_list_of(_number(1, strict=False)), [1.0]),
        "tol": (_number(0, 0.49), 0.01),
        "method": (_NORM_METHODS, "auto"),
        "per_decade": (_number(0, integer=True), 64),
        "decades": (_number(0, integer=True), 8),
    },
    "sweep": {
        "gamma": (_number(0), _MISSING),
        "ms": (_list_of(_number(0, integer=True)), _MISSING),
        "As": (_list_of(_number(0, strict=False)), _MISSING),
        "orders": (_list_of(_number(1, strict=False)), [1.0]),
        "tol": (_number(0, 0.49), 0.01),
        "method": (_NORM_METHODS, "auto"),
    },
    "tau-relation": {
        "gamma": (_number(0), _MISSING),
        "tol": (_number(0, 0.49), 0.005),
        "method": (_NORM_METHODS, "auto"),
        "flows": (_list_of(_flow), None),
    },
    "diffusivity": {
        "dt": (_number(0), 1e-3),
        "T": (_number(0), 10.0),
        "paths": (_number(99, integer=True), 10_000),
        "batch": (_number(0, integer=True), 500),
        "n_times": (_number(2, integer=True), 40),
        "interpolation": (_choice("auto", "spectral", "bicubic"), "auto"),
        "scheme": (_choice("heun", "euler-maruyama"), "heun"),
        "oracle": (_boolean, True),
        "flows": (_list_of(_flow), None),
    },
    "nonlinear": {
        "equation": (_list_of(_choice("CH", "KS", "TF", "PME", "PLAP")), _MISSING),
        "T": (_number(0, allow_none=True), None),
        "gamma": (_number(0, allow_none=True), None),
        "p": (_number(1, allow_none=True), None),
        "q": (_number(1, allow_none=True), None),
        "nu": (_number(0, allow_none=True), None),
        "h": (_number(0, 0.999, allow_none=True), None),
        "samples": (_number(2, integer=True, allow_none=True), None),
        "ladder": (_list_of(_list_of(_number(0, strict=False), min_len=2)), None),
    },
    "liouvillean": {
        "schedule": (_choice("toy", "canonical"), "toy"),
        "K": (_number(0, integer=True), 3),
        "C": (_fraction, None),
        "lam": (_number(0), 1.0),
        "samples": (_number(999, integer=True), 1000),
        "F_n": (_number(3, integer=True), 32),
        "psi": (_choice("bump", "one", "zero"), "bump"),
        "profile_n": (_number(1, integer=True), 64),
    },
}

_LADDER = {
    "refine": (_boolean, False),
    "max_n": (_number(0, integer=True), 256),
    "rtol": (_number(0, 1), 0.02),
}
_TOP = {
    "kind": (_choice(*KINDS), _MISSING),
    "seed": (_number(0, strict=False, integer=True), 0),
    "out": (lambda p, v: str(v), None),
    "grid": (None, None),
    "flow": (None, None),
    "params": (None, None),
    "ladder": (None, None),
}


@dataclass
class RunConfig:
    """A validated run configuration; ``to_dict`` is the hashed canonical form."""

    kind: str
    params: dict
    n: int
    flow: dict
    ladder: dict
    seed: int
    out: Optional[str] = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "n": self.n, "flow": self.flow,
                "ladder": self.ladder, "seed": self.seed}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _table(raw: dict, name: str) -> dict:
    v = raw.get(name, {})
    if not isinstance(v, dict):
        raise ConfigError(name, "expected a table")
    return v


def validate_config(raw: dict, env: Optional[dict] = None) -> RunConfig:
    """Check every field of a parsed config; raise :class:`ConfigError` naming the first bad one."""
    env = os.environ if env is None else env
    unknown = sorted(set(raw) - set(_TOP))
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    if "kind" not in raw:
        raise ConfigError("kind", "required field is missing")
    kind = _choice(*KINDS)("kind", raw["kind"])
    seed = _number(0, strict=False, integer=True)("seed", raw.get("seed", 0))
    if env.get("DLAB_SEED"):
        try:
            seed = int(env["DLAB_SEED"])
        except ValueError:
            raise ConfigError("DLAB_SEED", f"expected an integer, got {env['DLAB_SEED']!r}") from None
    grid = _check(_table(raw, "grid"), "grid", {"n": (_number(0, integer=True), 64)})
    n = grid["n"]
    if n < 8 or n & (n - 1):
        raise ConfigError("grid.n", f"must be a power of two >= 8, got {n}")
    flow = _flow("flow", _table(raw, "flow"))
    params = _check(_table(raw, "params"), "params", _PARAMS[kind])
    ladder = _check(_table(raw, "ladder"), "ladder", _LADDER)
    if ladder["refine"] and ladder["max_n"] < n:
        raise ConfigError("ladder.max_n", f"must be >= grid.n = {n}")
    if flow["kind"] == "cellular" and n < 8 * flow["cells"]:
        raise ConfigError("flow.cells", f"{flow['cells']} cells need grid.n >= {8 * flow['cells']}")
    for i, f in enumerate(params.get("flows") or []):
        if f["kind"] == "cellular" and n < 8 * f["cells"]:
            raise ConfigError(f"params.flows[{i}].cells",
                              f"{f['cells']} cells need grid.n >= {8 * f['cells']}")
    if kind == "sweep":
        worst = max(params["ms"])
        if n < 8 * worst:
            raise ConfigError("params.ms", f"{worst} cells need grid.n >= {8 * worst}")
    if kind == "diffusivity" and params["paths"] % params["batch"]:
        raise ConfigError("params.paths", "must be a multiple of params.batch")
    if kind == "diffusivity":
        from .diffusivity import SdeConfig
        if params["T"] < 100 * params["dt"]:
            raise ConfigError("params.T", "must be >= 100 * params.dt")
        sde = SdeConfig(dt=params["dt"], T=params["T"], paths=params["paths"],
                        batch=params["batch"])
        for f in params["flows"] or [flow]:
            try:
                sde.validate(_velocity(f, n))
            except ConfigurationError as exc:
                raise ConfigError("params.dt", str(exc)) from None
    if kind == "nonlinear":
        _nonlinear_problems(params, n, flow, seed)  # constructor checks ranges
    if kind == "liouvillean" and params["schedule"] == "canonical" and params["K"] > 3:
        raise ConfigError("params.K", "canonical schedules beyond K=3 exceed exact-arithmetic budgets")
    return RunConfig(kind, params, n, flow, ladder, seed, raw.get("out"))


def load_config(path, env: Optional[dict] = None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"not valid TOML: {exc}") from None
    return validate_config(raw, env)


# ---------------------------------------------------------------------------
# Jobs

@dataclass
class JobResult:
    primary: float
    summary: str
    files: dict  # relative name -> bytes
    record: dict = field(default_factory=dict)


@dataclass
class Job:
    """One isolated unit of work; ``n`` is the starting grid of the ladder."""

    id: str
    kind: str
    params: dict
    flow: dict
    n: int
    seed: int
    ladder: dict


def _clean(v: Any) -> Any:
    """JSON-safe copy: numpy scalars to Python, non-finite floats and big ints to strings."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        v = int(v)
        return v if abs(v) < 2**53 else str(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}"
    return v


def dumps(obj) -> bytes:
    return (json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode()


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{x:.17g}" if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue().encode()


def _capture(write: Callable[[str], None]) -> bytes:
    """Bytes produced by a ``write(path)`` method, without touching the output directory."""
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "f")
        write(p)
        return Path(p).read_bytes()


def _flow_label(f: dict) -> str:
    if f["kind"] == "none":
        return "none"
    s = f"{f['kind']}(m={f['cells']},A={f['amplitude']:g})"
    return s if f["rescale"] == 1 else f"{s}@{f['rescale']}"


def _velocity(f: dict, n: int):
    from .flows import FlowSpec, build_flow
    if f["kind"] == "none":
        return None
    return build_flow(FlowSpec(f["kind"], f["cells"], f["amplitude"], f["rescale"]), Grid(n))


def _job_decay(job: Job, n: int) -> JobResult:
    from .evolve import EvolveConfig, energy_residual, evolve
    from .nonlinear import initial_field
    p = job.params
    cfg = EvolveConfig(order=p["order"], gamma=p["gamma"], T=p["T"], dt=p["dt"],
                       sample_interval=p["sample_interval"], method=p["method"])
    theta0 = initial_field(Grid(n), p["initial"], p["norm"], 0.0, job.seed)
    _, traj = evolve(theta0, _velocity(job.flow, n), cfg)
    res = energy_residual(traj) if p["method"] == "rk4" else math.nan
    final = float(traj.l2[-1])
    record = {"final_l2": final, "initial_l2": float(traj.l2[0]), "dt": traj.dt,
              "energy_residual": res, "steps": len(traj.times) - 1}
    return JobResult(final, f"final l2={final:.6g} energy residual={res:.3g}",
                     {"trajectory.csv": _capture(traj.to_csv), "decay.json": dumps(record)},
                     record)


def _job_tau(job: Job, n: int) -> JobResult:
    from .dissipation import dissipation_time
    p, order = job.params, job.params["order"]
    rep = dissipation_time(_velocity(job.flow, n), p["gamma"], order, p["tol"], Grid(n),
                           method=p["method"], per_decade=p["per_decade"],
                           decades=p["decades"], seed=job.seed, flow=job.flow)
    tag = f"a{order:g}"
    rec = rep.to_dict()
    rec.pop("samples")
    return JobResult(rep.tau, f"tau={rep.tau:.6g} bracket=[{rep.t_lo:.6g}, {rep.t_hi:.6g}]",
                     {f"tau_{tag}.json": dumps(rec),
                      f"samples_{tag}.csv": _capture(rep.samples_csv)},
                     {"tau": rep.tau, "t_lo": rep.t_lo, "t_hi": rep.t_hi,
                      "diverged": rep.diverged})


def _job_sweep_cell(job: Job, n: int) -> JobResult:
    from .dissipation import dissipation_time
    p = job.params
    rep = dissipation_time(_velocity(job.flow, n), p["gamma"], p["alpha"], p["tol"], Grid(n),
                           method=p["method"], seed=job.seed, flow=job.flow)
    name = f"samples/{job.id}.csv"
    return JobResult(rep.tau, f"tau={rep.tau:.6g}", {name: _capture(rep.samples_csv)},
                     {"m": job.flow["cells"], "A": job.flow["amplitude"], "alpha": p["alpha"],
                      "gamma": p["gamma"], "tau": rep.tau, "t_lo": rep.t_lo, "t_hi": rep.t_hi,
                      "samples_file": name})


def _job_relation(job: Job, n: int) -> JobResult:
    from .dissipation import tau_relation_check
    p = job.params
    t1, t2, c = tau_relation_check(_velocity(job.flow, n), p["gamma"], Grid(n), tol=p["tol"],
                                   method=p["method"], seed=job.seed)
    return JobResult(c, f"tau1={t1:.6g} tau2={t2:.6g} C_min={c:.6g}", {},
                     {"flow": _flow_label(job.flow), "tau1": t1, "tau2": t2, "c_min": c})


def _job_diffusivity(job: Job, n: int) -> JobResult:
    from .diffusivity import SdeConfig, d_min
    p = job.params
    cfg = SdeConfig(dt=p["dt"], T=p["T"], paths=p["paths"], seed=job.seed,
                    interpolation=p["interpolation"], n_times=p["n_times"], batch=p["batch"],
                    scheme=p["scheme"])
    u = _velocity(job.flow, n)
    cfg.validate(u)
    rep = d_min(u, cfg, oracle=p["oracle"])
    primary = rep.D_oracle if rep.D_oracle is not None else rep.D
    oracle = "n/a" if rep.D_oracle is None else f"{rep.D_oracle:.6g}"
    rec = asdict(rep)
    rec["flow"] = job.flow
    return JobResult(primary, f"D={rep.D:.6g} oracle={oracle} lower bound ok={rep.lower_bound_ok}",
                     {f"{job.id}.json": dumps(rec)},
                     {"flow": _flow_label(job.flow), "D": rep.D, "D_oracle": rep.D_oracle,
                      "lower_bound_ok": rep.lower_bound_ok})


def _nonlinear_problems(params: dict, n: int, flow: dict, seed: int) -> list:
    from .flows import FlowSpec
    from .nonlinear import NonlinearProblem
    keys = ("T", "gamma", "p", "q", "nu", "h", "samples")
    over = {k: params[k] for k in keys if params.get(k) is not None}
    if params.get("ladder"):
        over["ladder"] = tuple((int(m), float(A)) for m, A, *_ in params["ladder"])
    if flow["kind"] != "none":
        over["flow"] = FlowSpec(flow["kind"], flow["cells"], flow["amplitude"], flow["rescale"])
    probs = []
    for i, eq in enumerate(params["equation"]):
        try:
            probs.append(NonlinearProblem.scenario(eq, n=n, seed=seed, **over))
        except ConfigurationError as exc:
            raise ConfigError(f"params.equation[{i}]", str(exc)) from None
    return probs


def _job_nonlinear(job: Job, n: int) -> JobResult:
    from .nonlinear import suppression_experiment
    prob = _nonlinear_problems(job.params, n, job.flow, job.seed)[0]
    rep = suppression_experiment(prob)
    final = rep.flow_l2[-1] if rep.flow_l2 else math.nan
    flow = _flow_label(rep.flow) if rep.flow else "none"
    status = "passed" if rep.passed else "did not pass"
    return JobResult(final, f"{rep.equation}: {status} (flow {flow}, criterion {rep.criterion})",
                     {f"{job.id}.json": dumps(asdict(rep)),
                      f"{job.id}.csv": _capture(rep.to_csv)},
                     {"equation": rep.equation, "passed": rep.passed, "flow_pass": rep.flow_pass,
                      "noflow_fails": rep.noflow_fails, "partial": rep.partial})


def _job_liouville(job: Job, n: int) -> JobResult:
    from . import liouville as lv
    p = job.params
    sched = lv.build_schedule(p["schedule"], p["K"], Fraction(p["C"]) if p["C"] else None)
    hp = lv.assemble_partials(sched)
    residual = [lv.homology_residual(hp, p["samples"], K=k, seed=job.seed)
                for k in range(1, hp.K + 1)]
    sob = lv.sobolev_growth(hp)
    rl = lv.r_lambda_diagnostics(hp, p["lam"])
    l4 = lv.level_l4_norms(hp)
    psi = None if p["psi"] == "bump" else p["psi"]
    F, info = lv.build_F(hp, n=n if job.ladder["refine"] else p["F_n"], psi=psi)
    xs, rs = lv.r_profile(hp, p["profile_n"])
    summary = {"schedule": sched.to_dict(), "support_measure": hp.support_measure,
               "sign": hp.sign, "homology_residual": residual, "sobolev_flags": sob.flags,
               "r_lambda_flags": rl.flags, "l4": l4, "F": info}
    worst = max(residual)
    files = {"schedule.json": dumps(sched.to_dict()), "partials.json": hp.to_json().encode(),
             "sobolev.csv": _capture(sob.to_csv), "r_lambda.csv": _capture(rl.to_csv),
             "profile.csv": _csv(["x", "R"], zip(xs, rs)), "liouville.json": dumps(summary)}
    return JobResult(info["min_F"], f"{sched.label()} K={sched.K}: residual={worst:.3g} "
                     f"min F={info['min_F']:.6g}", files,
                     {"residual": worst, "min_F": info["min_F"], **sob.flags})


_RUNNERS = {"decay": _job_decay, "dissipation-time": _job_tau, "sweep": _job_sweep_cell,
            "tau-relation": _job_relation, "diffusivity": _job_diffusivity,
            "nonlinear": _job_nonlinear, "liouvillean": _job_liouville}


def plan_jobs(cfg: RunConfig) -> list[Job]:
    """Expand a config into jobs, in a fixed order."""
    mk = lambda id, params, flow: Job(id, cfg.kind, params, flow, cfg.n, cfg.seed, cfg.ladder)
    p = cfg.params
    if cfg.kind == "dissipation-time":
        return [mk(f"tau_a{a:g}", {**p, "order": a}, cfg.flow) for a in p["order"]]
    if cfg.kind == "sweep":
        jobs = []
        for m in p["ms"]:
            for A in p["As"]:
                for a in p["orders"]:
                    flow = {"kind": "cellular" if A else "none", "cells": m, "amplitude": A,
                            "rescale": 1}
                    jobs.append(mk(f"m{m}_A{A:g}_a{a:g}", {**p, "alpha": a}, flow))
        return jobs
    if cfg.kind in ("tau-relation", "diffusivity"):
        flows = p["flows"] or [cfg.flow]
        prefix = "relation" if cfg.kind == "tau-relation" else "diffusivity"
        return [mk(f"{prefix}_{i}", p, f) for i, f in enumerate(flows)]
    if cfg.kind == "nonlinear":
        return [mk(f"nonlinear_{eq}", {**p, "equation": [eq]}, cfg.flow) for eq in p["equation"]]
    return [mk(cfg.kind, p, cfg.flow)]


def execute(job: Job) -> dict:
    """Run one job (with its resolution ladder).  Never raises."""
    run = _RUNNERS[job.kind]
    history, n = [], job.n
    try:
        res = run(job, n)
        history.append({"n": n, "primary": res.primary})
        status = "ok"
        if job.ladder["refine"]:
            status = "unconverged"
            while 2 * n <= job.ladder["max_n"]:
                n *= 2
                prev, res = res.primary, run(job, n)
                history.append({"n": n, "primary": res.primary})
                scale = max(abs(prev), abs(res.primary))
                if scale == 0 or abs(res.primary - prev) < job.ladder["rtol"] * scale:
                    status = "ok"
                    break
        return {"id": job.id, "status": status, "summary": res.summary, "files": res.files,
                "record": res.record, "ladder": history, "error": None}
    except Exception as exc:  # isolated per job; reported in the manifest
        return {"id": job.id, "status": "failed", "summary": "", "files": {}, "record": {},
                "ladder": history, "error": f"{type(exc).__name__}: {exc}"}


def _aggregate(cfg: RunConfig, outcomes: list[dict]) -> dict:
    """Kind-level tables built from per-job records."""
    if cfg.kind == "sweep":
        rows = []
        for o in outcomes:
            r = o["record"]
            rows.append([r.get("m", ""), r.get("A", ""), r.get("alpha", ""), r.get("gamma", ""),
                         r.get("tau", ""), r.get("t_lo", ""), r.get("t_hi", ""), o["status"],
                         r.get("samples_file", "")])
        return {"sweep.csv": _csv(["m", "A", "alpha", "gamma", "tau", "t_lo", "t_hi", "status",
                                   "samples_file"], rows)}
    if cfg.kind == "tau-relation":
        rows = [[o["record"].get(k, "") for k in ("flow", "tau1", "tau2", "c_min")] + [o["status"]]
                for o in outcomes]
        cs = [o["record"]["c_min"] for o in outcomes if o["status"] != "failed"]
        summary = {"max_c_min": max(cs) if cs else None, "finite": bool(cs) and all(
            math.isfinite(c) for c in cs), "rows": [o["record"] for o in outcomes]}
        return {"tau_relation.csv": _csv(["flow", "tau1", "tau2", "c_min", "status"], rows),
                "tau_relation.json": dumps(summary)}
    if cfg.kind == "diffusivity":
        rows = [[o["record"].get(k, "") for k in ("flow", "D", "D_oracle", "lower_bound_ok")]
                + [o["status"]] for o in outcomes]
        rows = [["" if x is None else x for x in r] for r in rows]
        return {"diffusivity.csv": _csv(["flow", "D", "D_oracle", "lower_bound_ok", "status"],
                                        rows)}
    return {}


def write_atomic(path: Path, data: bytes) -> None:
    """Write via a temporary sibling and rename, so readers never see a partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run(cfg: RunConfig, out: Path, workers: int = 1, stream=None) -> int:
    """Execute ``cfg`` into ``out``; returns the exit code."""
    stream = stream or sys.stdout
    jobs = plan_jobs(cfg)
    start = time.perf_counter()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            outcomes = list(pool.map(execute, jobs))
    else:
        outcomes = [execute(j) for j in jobs]
    files = {}
    for o in outcomes:
        for name, data in o["files"].items():
            if name in files:
                raise RuntimeError(f"two jobs wrote {name}")
            files[name] = data
        label = o["summary"] if o["status"] != "failed" else o["error"]
        extra = ""
        if len(o["ladder"]) > 1:
            extra = " ladder " + " -> ".join(f"n={h['n']}:{h['primary']:.6g}" for h in o["ladder"])
        print(f"[{o['status']}] {cfg.kind} {o['id']}: {label}{extra}", file=stream)
    files.update(_aggregate(cfg, outcomes))
    for name in sorted(files):
        write_atomic(out / name, files[name])
    manifest = {
        "config_hash": cfg.config_hash(), "config": cfg.to_dict(), "version": __version__,
        "wall_clock_seconds": round(time.perf_counter() - start, 3),
        "jobs": [{k: o[k] for k in ("id", "status", "summary", "error", "ladder", "record")}
                 for o in outcomes],
        "files": [{"path": name, "bytes": len(files[name]),
                   "sha256": hashlib.sha256(files[name]).hexdigest()} for name in sorted(files)],
    }
    write_atomic(out / MANIFEST, dumps(manifest))
    return EXIT_RUNTIME if any(o["status"] == "failed" for o in outcomes) else EXIT_OK


# ---------------------------------------------------------------------------
# Plotting

_SCHEMAS = {
    ("time", "l2", "hs_alpha", "min", "max"): ("trajectory", "time", [("l2", "l2", False)]),
    ("time", "flow", "noflow", "envelope"): ("suppression", "time",
                                             [("flow", "flow", False), ("noflow", "no flow", False),
                                              ("envelope", "envelope", True)]),
    ("t", "norm"): ("operator-norm", "t", [("norm", "norm", False)]),
    ("x", "R"): ("profile", "x", [("R", "R", False)]),
}
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")
W, H, ML, MR, MT, MB = 640, 400, 70, 150, 30, 50


class PlotError(ValueError):
    pass


def _read_series(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PlotError(f"{path} is empty")
    header, body = tuple(rows[0]), rows[1:]
    if header in _SCHEMAS:
        schema, xkey, cols = _SCHEMAS[header]
        xi = header.index(xkey)
        series = []
        for key, label, dashed in cols:
            j = header.index(key)
            pts = [(float(r[xi]), float(r[j])) for r in body if r[j] not in ("", "nan")]
            pts = [(x, y) for x, y in pts if math.isfinite(y)]
            if pts:
                series.append((label, pts, dashed))
        return schema, xkey, series
    if header[:1] == ("time",) and all(h.startswith("msd_e") for h in header[1:]) and header[1:]:
        series = [(h, [(float(r[0]), float(r[j])) for r in body], False)
                  for j, h in enumerate(header) if j]
        return "msd", "time", series
    if header[:5] == ("m", "A", "alpha", "gamma", "tau"):
        groups: dict = {}
        for r in body:
            if r[4] not in ("", "inf"):
                groups.setdefault((r[0], r[2]), []).append((float(r[1]), float(r[4])))
        series = [(f"m={m} alpha={a}", sorted(pts), False) for (m, a), pts in groups.items()]
        return "sweep", "A", series
    if header == ("K", "s", "norm", "increment", "ratio"):
        groups = {}
        for r in body:
            groups.setdefault(r[1], []).append((float(r[0]), float(r[2])))
        return "sobolev", "K", [(f"s={s}", pts, False) for s, pts in groups.items()]
    raise PlotError(f"unknown report schema with header {','.join(header)}")


def _ticks(lo, hi, k=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (k - 1) for i in range(k)]


def render_svg(series, *, xlabel: str, log_y: bool, meta: dict) -> str:
    if log_y:
        series = [(lab, [(x, math.log10(y)) for x, y in pts if y > 0], d) for lab, pts, d in series]
        series = [s for s in series if s[1]]
    if not series:
        raise PlotError("nothing to plot")
    xs = [x for _, pts, _ in series for x, _ in pts]
    ys = [y for _, pts, _ in series for _, y in pts]
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = W - ML - MR, H - MT - MB
    X = lambda x: ML + (x - x0) / (x1 - x0) * pw
    Y = lambda y: MT + (y1 - y) / (y1 - y0) * ph
    comment = "; ".join(f"{k}={meta[k]}" for k in sorted(meta)).replace("--", "- -")
    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f"<!-- dlab plot; {comment} -->",
           f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{X(t):.2f}" y1="{MT + ph}" x2="{X(t):.2f}" y2="{MT + ph + 4}" '
                   'stroke="black"/>')
        out.append(f'<text x="{X(t):.2f}" y="{MT + ph + 16}" text-anchor="middle">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        lab = f"1e{t:.3g}" if log_y else f"{t:.4g}"
        out.append(f'<line x1="{ML - 4}" y1="{Y(t):.2f}" x2="{ML}" y2="{Y(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{ML - 6}" y="{Y(t) + 4:.2f}" text-anchor="end">{lab}</text>')
    out.append(f'<text x="{ML + pw / 2:.2f}" y="{H - 12}" text-anchor="middle">{xlabel}</text>')
    if log_y:
        out.append(f'<text x="14" y="{MT + ph / 2:.2f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {MT + ph / 2:.2f})">log10 scale</text>')
    for i, (label, pts, dashed) in enumerate(series):
        color = "black" if dashed else _COLORS[i % len(_COLORS)]
        dash = ' stroke-dasharray="6 4"' if dashed else ""
        coords = " ".join(f"{X(x):.2f},{Y(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} '
                   f'points="{coords}"/>')
        ly = MT + 14 + 16 * i
        out.append(f'<line x1="{W - MR + 10}" y1="{ly - 4}" x2="{W - MR + 30}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="1.5"{dash}/>')
        out.append(f'<text x="{W - MR + 35}" y="{ly}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(report: Path, *, log_y: bool = False, output: Optional[Path] = None) -> Path:
    schema, xlabel, series = _read_series(report)
    data = report.read_bytes()
    manifest = report.parent / MANIFEST
    config_hash = "none"
    if manifest.exists():
        config_hash = json.loads(manifest.read_text()).get("config_hash", "none")
    meta = {"schema": schema, "config_hash": config_hash, "source": report.name,
            "source_sha256": hashlib.sha256(data).hexdigest(), "log_y": str(log_y).lower(),
            "version": __version__}
    svg = render_svg(series, xlabel=xlabel, log_y=log_y, meta=meta)
    output = output or report.with_suffix(".svg")
    write_atomic(output, svg.encode())
    return output


# ---------------------------------------------------------------------------
# Entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"dlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", type=Path)
    r.add_argument("--workers", type=int, default=1, help="parallel jobs (default 1)")
    r.add_argument("--out", type=Path, default=None,
                   help="output directory (default: config 'out' or ./runs/<config stem>)")
    v = sub.add_parser("validate", help="check a config without computing")
    v.add_argument("config", type=Path)
    p = sub.add_parser("plot", help="render a report CSV to SVG")
    p.add_argument("report", type=Path)
    p.add_argument("--log-y", action="store_true")
    p.add_argument("-o", "--output", type=Path, default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "plot":
        try:
            path = plot(args.report, log_y=args.log_y, output=args.output)
        except (OSError, PlotError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        print(path)
        return EXIT_OK
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "validate":
        print(f"ok: {cfg.kind}, {len(plan_jobs(cfg))} job(s), config hash {cfg.config_hash()}")
        return EXIT_OK
    if args.workers < 1:
        print("invalid arguments: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    out = args.out or Path(cfg.out or Path("runs") / args.config.stem)
    code = run(cfg, out, args.workers)
    print(f"manifest: {out / MANIFEST}")
    return code


if __name__ == "__main__":
    sys.exit(main())
