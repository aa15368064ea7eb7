"""Dissipation times: the first t at which the solution operator halves every
mean-zero L^2 datum, measured through operator-norm estimates.

For autonomous divergence-free flows the solution operator ``S_t`` is a
contraction semigroup, so ``t -> |S_t|`` is non-increasing and the first
crossing of 1/2 on the scan ladder can be located by binary search over the
ladder without evaluating every rung.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .evolve import Advection
from .flows import FlowSpec, build_flow
from .propagator import BlockTooLarge, LinearPropagator, dissipation_symbol
from .spectral import TWO_PI, ConfigurationError, Grid, VelocityField, c2_norm
from .stepping import LawsonRK4

logger = logging.getLogger(__name__)

__all__ = ["NormEstimate", "DissipationReport", "SweepResult", "power_norm", "NormOracle",
           "operator_norm", "dissipation_time", "enhancement_sweep", "tau_relation_check",
           "pure_diffusion_tau"]

LN2 = math.log(2.0)
REMARK_EXPONENT = 2 + 15 / 113


def pure_diffusion_tau(gamma: float, order: float) -> float:
    """ln 2 / (gamma (2 pi)^(2 order)): the first-shell mode sets the norm."""
    return LN2 / (gamma * TWO_PI ** (2 * order))


@dataclass
class NormEstimate:
    value: float
    method: str
    iterations: int = 0
    converged: bool = True
    rayleigh: list = field(default_factory=list)


def power_norm(apply: Callable, apply_adjoint: Callable, grid: Grid, *, seed: int = 0,
               starts: int = 3, iters: int = 200, rtol: float = 1e-4,
               modes: Optional[int] = None) -> NormEstimate:
    """Largest singular value of a linear map on mean-zero fields by power
    iteration on ``S* S``.

    Each start is a seeded random mean-zero field (dealiased, optionally
    restricted to the first ``modes`` Laplacian eigenvalues).  The Rayleigh
    quotients ``|S x_k|^2`` are non-decreasing; this is asserted.  The maximum
    over starts is returned, which is a lower bound on the true norm.
    """
    mask = grid.dealias_mask & (grid.k2 > 0)
    if modes is not None:
        lam = grid.k2[grid.k2 > 0]
        cutoff = np.sort(lam, axis=None)[min(modes, lam.size) - 1]
        mask &= grid.k2 <= cutoff
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(starts)]
    best = NormEstimate(0.0, "power", converged=False)
    for rng in rngs:
        x = np.fft.fftn(rng.standard_normal(grid.shape)) * mask
        x /= np.linalg.norm(x)
        history = []
        converged = False
        for it in range(1, iters + 1):
            y = apply(x)
            rq = float(np.vdot(y, y).real)
            if history and rq < history[-1] * (1 - 1e-8):
                raise AssertionError(f"Rayleigh quotient decreased: {history[-1]} -> {rq}")
            history.append(rq)
            if len(history) > 1 and abs(history[-1] - history[-2]) <= rtol * history[-1]:
                converged = True
                break
            z = apply_adjoint(y) * mask
            nz = np.linalg.norm(z)
            if nz == 0:
                converged = True
                break
            x = z / nz
        est = NormEstimate(math.sqrt(max(history[-1], 0.0)), "power", it, converged, history)
        if est.value >= best.value:
            best = est
    if not best.converged:
        logger.warning("power iteration did not converge in %d iterations", iters)
    return best


class NormOracle:
    """``t -> |S_t|`` for one (u, gamma, order) on one grid.

    ``method="exact"`` uses the block semigroup's exact norm, ``"power"`` power
    iteration with the integrating-factor RK4 solver and its adjoint, and
    ``"auto"`` prefers exact when the velocity couples few enough modes.
    """

    def __init__(self, u: VelocityField | None, gamma: float, order: float, grid: Grid,
                 method: str = "auto", seed: int = 0, iters: int = 200,
                 modes: Optional[int] = None, cfl: float = 0.5, rtol: float = 1e-4):
        if gamma <= 0:
            raise ConfigurationError(f"gamma must be positive, got {gamma}")
        self.u, self.gamma, self.order, self.grid = u, gamma, order, grid
        self.seed, self.iters, self.modes, self.cfl = seed, iters, modes, cfl
        self.rtol = rtol
        self.symbol = dissipation_symbol(grid, gamma, order)
        self.prop = None
        if method in ("auto", "exact"):
            try:
                self.prop = LinearPropagator(grid, u, self.symbol)
            except BlockTooLarge:
                if method == "exact":
                    raise
        self.method = "exact" if self.prop is not None and method != "power" else "power"
        self.samples: list[tuple[float, float]] = []
        self.iterations: list[int] = []
        self.flags: list[str] = []

    def _rk4_maps(self, t: float):
        speed = self.u.sup_norm() if self.u is not None else 0.0
        steps = max(1, math.ceil(t * speed / (self.cfl * self.grid.spacing))) if speed else 1
        stepper = LawsonRK4(self.symbol, t / steps)
        fwd, bwd = Advection(self.u), Advection(self.u, sign=-1.0)

        def run(adv):
            def apply(w):
                for _ in range(steps):
                    w = stepper.step(w, adv) if adv.active else stepper.full * w
                return w
            return apply
        return run(fwd), run(bwd)

    def estimate(self, t: float) -> NormEstimate:
        if t < 0:
            raise ValueError("t must be non-negative")
        if t == 0:
            est = NormEstimate(1.0, "identity")
        elif self.method == "exact":
            est = NormEstimate(self.prop.semigroup(t).norm(), "exact")
        else:
            if self.prop is not None:
                sg = self.prop.semigroup(t)
                fwd, bwd = sg.apply, sg.apply_adjoint
            else:
                fwd, bwd = self._rk4_maps(t)
            est = power_norm(fwd, bwd, self.grid, seed=self.seed, iters=self.iters,
                             rtol=self.rtol, modes=self.modes)
            if not est.converged:
                self.flags.append(f"power iteration unconverged at t={t:.6g}")
        self.samples.append((t, est.value))
        self.iterations.append(est.iterations)
        return est

    def __call__(self, t: float) -> float:
        return self.estimate(t).value


def operator_norm(u: VelocityField | None, gamma: float, order: float, t: float,
                  grid: Grid | None = None, *, modes: Optional[int] = None, iters: int = 200,
                  seed: int = 0, method: str = "power", rtol: float = 1e-4) -> NormEstimate:
    """Norm of the solution operator at time ``t`` on mean-zero L^2.

    With power iteration the stopping rule is a relative change below ``rtol``
    between successive Rayleigh quotients, so the value can sit below the true
    norm by roughly ``rtol`` when the top two singular values are close.
    """
    grid = grid or (u.grid if u is not None else None)
    if grid is None:
        raise ConfigurationError("need a grid when u is None")
    return NormOracle(u, gamma, order, grid, method, seed, iters, modes,
                      rtol=rtol).estimate(t)


@dataclass
class DissipationReport:
    """Measured dissipation time.  ``tau == t_hi``, the smallest time at which
    the norm was certified <= 1/2; ``t_lo`` has norm > 1/2."""

    flow: dict
    order: float
    gamma: float
    tau: float
    t_lo: float
    t_hi: float
    samples: list
    iterations: list
    grid_n: int
    method: str
    tol: float
    per_decade: int
    convention: str = "physical"
    start_time_reduction: str = "autonomous flow: s = 0 suffices"
    diverged: bool = False
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def samples_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("t,norm\r\n")
            for t, v in sorted(self.samples):
                fh.write(f"{t:.17g},{v:.17g}\r\n")


def dissipation_time(u: VelocityField | None, gamma: float, order: float, tol: float = 0.01,
                     grid: Grid | None = None, *, method: str = "auto", per_decade: int = 64,
                     decades: int = 8, seed: int = 0, flow: Optional[dict] = None,
                     oracle: Optional[NormOracle] = None) -> DissipationReport:
    """Locate the first time the solution-operator norm drops to 1/2.

    The ladder is ``t_max * 10**(-j / per_decade)`` for ``j = 0 .. decades *
    per_decade`` with ``t_max = 10 ln2 / (gamma (2 pi)^(2 order))``.  The first
    rung with norm <= 1/2 is found by binary search (valid because the norm is
    monotone in t) and the bracket it forms with the previous rung is bisected
    to relative width ``tol``.
    """
    if not 0 < tol < 0.5:
        raise ConfigurationError(f"tol must lie in (0, 0.5), got {tol}")
    grid = grid or (u.grid if u is not None else None)
    oracle = oracle or NormOracle(u, gamma, order, grid, method, seed)
    cache: dict[float, float] = {}

    def norm(t):
        if t not in cache:
            cache[t] = oracle(t)
        return cache[t]

    t_max = 10 * pure_diffusion_tau(gamma, order)
    total = decades * per_decade
    ladder = t_max * 10.0 ** (-np.arange(total, -1, -1) / per_decade)  # ascending
    report_kw = dict(flow=flow or {}, order=order, gamma=gamma, grid_n=grid.n,
                     method=oracle.method, tol=tol, per_decade=per_decade)
    if norm(ladder[-1]) > 0.5:
        return DissipationReport(tau=math.inf, t_lo=ladder[-1], t_hi=math.inf,
                                 samples=oracle.samples, iterations=oracle.iterations,
                                 diverged=True, flags=oracle.flags + ["no crossing before t_max"],
                                 **report_kw)
    if norm(ladder[0]) <= 0.5:
        raise ConfigurationError("norm already <= 1/2 at the bottom of the ladder; "
                                 "increase decades")
    lo, hi = 0, len(ladder) - 1  # norm(lo) > 1/2 >= norm(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if norm(ladder[mid]) <= 0.5:
            hi = mid
        else:
            lo = mid
    t_lo, t_hi = float(ladder[lo]), float(ladder[hi])
    while t_hi - t_lo > tol * t_hi:
        mid = 0.5 * (t_lo + t_hi)
        if norm(mid) <= 0.5:
            t_hi = mid
        else:
            t_lo = mid
    return DissipationReport(tau=t_hi, t_lo=t_lo, t_hi=t_hi, samples=list(oracle.samples),
                             iterations=list(oracle.iterations), flags=list(oracle.flags),
                             **report_kw)


@dataclass
class SweepResult:
    rows: list  # dicts: m, A, alpha, gamma, report (DissipationReport or None), error
    monotone_in_A: dict  # (m, alpha) -> bool
    diagonal: list = field(default_factory=list)
    diagonal_decreasing: dict = field(default_factory=dict)  # alpha -> bool
    advection_never_hurts: bool = True
    violations: list = field(default_factory=list)


def _sweep_job(args):
    m, A, order, gamma, n, tol, method, seed = args
    grid = Grid(n)
    spec = FlowSpec("cellular", cells=m, amplitude=A)
    try:
        u = build_flow(spec, grid) if A != 0 else None
        rep = dissipation_time(u, gamma, order, tol, grid, method=method, seed=seed,
                               flow=spec.to_dict())
        return rep, None
    except Exception as exc:  # recorded per cell; the sweep continues
        return None, f"{type(exc).__name__}: {exc}"


def _run_jobs(jobs, workers):
    if workers <= 1:
        return [_sweep_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_job, jobs))


def enhancement_sweep(ms: Sequence[int], As: Sequence[float], orders: Sequence[float],
                      gamma: float, n: int = 64, *, tol: float = 0.01, method: str = "auto",
                      seed: int = 0, workers: int = 1, diagonal: bool = False) -> SweepResult:
    """Dissipation times over the cross product of cell counts, amplitudes and orders.

    Rows come back in cross-product order regardless of ``workers``.  With
    ``diagonal=True`` the flows ``m^(2 + 15/113) u(m x)`` (amplitude
    ``m^(1 + 15/113)`` in the :func:`dlab.flows.cellular` convention) are also run
    and ``diagonal_decreasing`` records whether tau falls along them.
    """
    cells = [(m, A, a) for m in ms for A in As for a in orders]
    jobs = [(m, A, a, gamma, n, tol, method, seed) for m, A, a in cells]
    results = _run_jobs(jobs, workers)
    rows = [dict(m=m, A=A, alpha=a, gamma=gamma, report=r, error=e)
            for (m, A, a), (r, e) in zip(cells, results)]
    monotone = {}
    for m in ms:
        for a in orders:
            taus = [row["report"].tau for row in rows
                    if row["m"] == m and row["alpha"] == a and row["report"] is not None]
            ordered = [row["A"] for row in rows if row["m"] == m and row["alpha"] == a]
            monotone[(m, a)] = (len(taus) == len(ordered) and ordered == sorted(ordered)
                                and all(x >= y for x, y in zip(taus, taus[1:])))
    violations = []
    for row in rows:
        rep = row["report"]
        if rep is not None and rep.tau > pure_diffusion_tau(gamma, row["alpha"]) * (1 + 1e-3):
            violations.append((row["m"], row["A"], row["alpha"]))
    res = SweepResult(rows, monotone, advection_never_hurts=not violations,
                      violations=violations)
    if diagonal:
        dcells = [(m, m ** (REMARK_EXPONENT - 1), a) for m in sorted(ms) for a in orders]
        djobs = [(m, A, a, gamma, n, tol, method, seed) for m, A, a in dcells]
        dres = _run_jobs(djobs, workers)
        res.diagonal = [dict(m=m, A=A, alpha=a, gamma=gamma, report=r, error=e)
                        for (m, A, a), (r, e) in zip(dcells, dres)]
        for a in orders:
            taus = [r["report"].tau for r in res.diagonal
                    if r["alpha"] == a and r["report"] is not None]
            res.diagonal_decreasing[a] = all(x >= y for x, y in zip(taus, taus[1:]))
    return res


def tau_relation_check(u: VelocityField | None, gamma: float, grid: Grid | None = None, *,
                       tol: float = 0.005, method: str = "auto", seed: int = 0):
    """Return ``(tau1, tau2, C_min)`` with ``C_min = tau2 / (tau1 (1 + |u|_C2 tau1))``."""
    grid = grid or u.grid
    r1 = dissipation_time(u, gamma, 1.0, tol, grid, method=method, seed=seed)
    r2 = dissipation_time(u, gamma, 2.0, tol, grid, method=method, seed=seed)
    c2 = c2_norm(u) if u is not None else 0.0
    return r1.tau, r2.tau, r2.tau / (r1.tau * (1 + c2 * r1.tau))
