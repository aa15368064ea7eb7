"""Time integration of the advection-(hyper)diffusion equation

    theta_t + u . grad theta + gamma (-Laplacian)^order theta = 0

on the unit torus, plus energy and viscous/inviscid diagnostics.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .propagator import LinearPropagator, dissipation_symbol
from .spectral import (ConfigurationError, Grid, ScalarField, VelocityField,
                       derivative_symbols, fft, ifft)
from .stepping import LawsonRK4, SolverError, check_finite

logger = logging.getLogger(__name__)

__all__ = ["EvolveConfig", "Trajectory", "InapplicableError", "SolverError", "evolve",
           "adjoint_evolve", "energy_residual", "conditional_decay_check",
           "viscous_inviscid_gap", "swap_conjugate", "Advection"]


class InapplicableError(RuntimeError):
    """The hypothesis of a conditional check is not met by the data."""


@dataclass(frozen=True)
class EvolveConfig:
    """Parameters of one linear evolution.

    ``dt=None`` picks the largest step allowed by ``cfl`` (and exactly ``T`` or
    ``sample_interval`` when there is no advection).  ``sample_interval=None``
    records every step.  ``method="exact"`` replaces RK4 by the exact block
    semigroup of :mod:`dlab.propagator` (advection and diffusion together).
    """

    order: float = 1.0
    gamma: float = 1.0
    T: float = 1.0
    dt: Optional[float] = None
    cfl: float = 0.5
    dealias: bool = True
    sample_interval: Optional[float] = None
    keep_snapshots: bool = False
    method: str = "rk4"

    def __post_init__(self):
        if self.order < 1:
            raise ConfigurationError(f"order must be >= 1, got {self.order}")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        if not self.T > 0:
            raise ConfigurationError(f"T must be positive, got {self.T}")
        if self.dt is not None and not (0 < self.dt <= self.T):
            raise ConfigurationError(f"dt must satisfy 0 < dt <= T, got {self.dt}")
        if not 0 < self.cfl <= 0.5:
            raise ConfigurationError(f"cfl must lie in (0, 0.5], got {self.cfl}")
        if self.sample_interval is not None and not 0 < self.sample_interval <= self.T:
            raise ConfigurationError("sample_interval must lie in (0, T]")
        if self.method not in ("rk4", "exact"):
            raise ConfigurationError(f"unknown method {self.method!r}")


@dataclass
class Trajectory:
    """Sampled norms of one run.  ``hs_alpha`` uses the physical convention."""

    times: np.ndarray
    l2: np.ndarray
    hs_alpha: np.ndarray
    min: np.ndarray
    max: np.ndarray
    gamma: float
    order: float
    dt: float
    snapshots: list = field(default_factory=list, repr=False)
    mean: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "l2", "hs_alpha", "min", "max"])
            for row in zip(self.times, self.l2, self.hs_alpha, self.min, self.max):
                w.writerow([f"{v:.17g}" for v in row])

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"no sample at t={t}")
        return i


class Advection:
    """Dealiased pseudo-spectral ``-u . grad`` acting on coefficient arrays."""

    def __init__(self, u: VelocityField | None, dealias: bool = True, sign: float = 1.0):
        self.u = u
        self.active = u is not None and u.sup_norm() > 0
        if self.active:
            self.grid = u.grid
            self.comps = [sign * c.values for c in u.components]
            self.syms = derivative_symbols(u.grid)
            self.mask = u.grid.dealias_mask if dealias else None

    def __call__(self, w: np.ndarray) -> np.ndarray:
        if not self.active:
            return np.zeros_like(w)
        g = self.grid
        prod = sum(c * ifft(g, s * w) for c, s in zip(self.comps, self.syms))
        out = -fft(g, prod)
        if self.mask is not None:
            out = out * self.mask
        out.flat[0] = 0.0
        return out


def _step_size(u: VelocityField | None, cfg: EvolveConfig, grid: Grid) -> tuple[float, int]:
    """Return (dt, steps per sample) with the sample interval an exact multiple of dt."""
    interval = cfg.sample_interval
    speed = u.sup_norm() if u is not None else 0.0
    limit = cfg.cfl * grid.spacing / speed if speed > 0 and cfg.method == "rk4" else math.inf
    if cfg.dt is not None:
        if cfg.dt > limit * (1 + 1e-12):
            raise ConfigurationError(
                f"dt={cfg.dt:.3e} violates CFL limit {limit:.3e} (cfl={cfg.cfl})")
        dt = cfg.dt
        if interval is None:
            return dt, 1
        per = max(1, round(interval / dt))
        if abs(per * dt - interval) > 1e-9 * interval:
            raise ConfigurationError("sample_interval must be a multiple of dt")
        return dt, per
    span = interval if interval is not None else cfg.T
    per = max(1, math.ceil(span / limit)) if math.isfinite(limit) else 1
    if interval is None:
        return span / per, 1
    return interval / per, per


def _sample(grid, w, order):
    vals = ifft(grid, w)
    lam = (2 * np.pi) ** 2 * grid.k2
    l2 = math.sqrt(float(np.sum(np.abs(w) ** 2)))
    hs = math.sqrt(float(np.sum(np.abs(w) ** 2 * lam**order)))
    return vals, l2, hs


def evolve(theta0: ScalarField, u: VelocityField | None, cfg: EvolveConfig,
           *, propagator: LinearPropagator | None = None):
    """Advance ``theta0`` to ``cfg.T``.  Returns ``(theta_T, Trajectory)``."""
    grid = theta0.grid
    if u is not None and u.grid != grid:
        raise ConfigurationError("velocity and scalar live on different grids")
    w = fft(grid, theta0.values)
    if abs(w.flat[0]) > 1e-12:
        logger.info("subtracting mean %.3e from initial data", w.flat[0].real)
    w.flat[0] = 0.0
    dt, per = _step_size(u, cfg, grid)
    nsteps = round(cfg.T / dt)
    if abs(nsteps * dt - cfg.T) > 1e-9 * cfg.T:
        raise ConfigurationError("T must be a multiple of dt")
    symbol = dissipation_symbol(grid, cfg.gamma, cfg.order)

    if cfg.method == "exact":
        prop = propagator or LinearPropagator(grid, u, symbol)
        sg = prop.semigroup(dt * per)
    else:
        adv = Advection(u, cfg.dealias)
        stepper = LawsonRK4(symbol, dt)

    times, l2s, hss, mins, maxs, snaps = [], [], [], [], [], []

    def record(t, w):
        vals, l2, hs = _sample(grid, w, cfg.order)
        times.append(t), l2s.append(l2), hss.append(hs)
        mins.append(vals.min()), maxs.append(vals.max())
        if cfg.keep_snapshots:
            snaps.append(vals)

    record(0.0, w)
    step = 0
    while step < nsteps:
        if cfg.method == "exact":
            w = sg.apply(w)
            step += per
        else:
            for _ in range(per):
                w = stepper.step(w, adv) if adv.active else stepper.full * w
                step += 1
        w.flat[0] = 0.0
        check_finite(w, step)
        record(step * dt, w)
    traj = Trajectory(np.array(times), np.array(l2s), np.array(hss), np.array(mins),
                      np.array(maxs), cfg.gamma, cfg.order, dt, snaps)
    return ScalarField(grid, ifft(grid, w)), traj


def adjoint_evolve(theta0: ScalarField, u: VelocityField | None, cfg: EvolveConfig):
    """Adjoint of the solution operator: evolve with the velocity negated."""
    v = None if u is None else u.scaled(-1.0)
    return evolve(theta0, v, cfg)


def swap_conjugate(f: ScalarField) -> ScalarField:
    """f(x2, x1).  For a cellular flow u(swap x) = -swap u(x), so this map
    intertwines the solution operators of u and -u."""
    return ScalarField(f.grid, f.values.T.copy())


def energy_residual(traj: Trajectory) -> float:
    """Largest relative defect in d/dt |theta|^2 = -2 gamma |theta|_{H^alpha}^2.

    Each sample interval compares the difference quotient of the squared L^2
    norm with the trapezoidal mean of the dissipation rate on that interval.
    """
    if len(traj.times) < 3:
        raise ValueError("need at least 3 samples")
    e = traj.l2**2
    d = traj.hs_alpha**2
    dt = np.diff(traj.times)
    lhs = np.diff(e) / dt
    rhs = -traj.gamma * (d[1:] + d[:-1])
    return float(np.max(np.abs(lhs - rhs)) / e[0])


def conditional_decay_check(traj: Trajectory, N: float, a: float, b: float,
                            hyp_rtol: float = 1e-10) -> bool:
    """Check |theta(b)|^2 <= exp(-2 gamma N (b - a)) |theta(a)|^2.

    Raises :class:`InapplicableError` when some sample in [a, b] has
    |theta|_{H^alpha}^2 < N |theta|^2.
    """
    ia, ib = traj.index_of(a), traj.index_of(b)
    sl = slice(ia, ib + 1)
    h2, l2 = traj.hs_alpha[sl] ** 2, traj.l2[sl] ** 2
    bad = h2 < N * l2 * (1 - hyp_rtol)
    if np.any(bad):
        t = traj.times[sl][np.argmax(bad)]
        raise InapplicableError(f"H^alpha lower bound fails at t={t:.6g}")
    bound = math.exp(-2 * traj.gamma * N * (b - a)) * traj.l2[ia] ** 2
    return bool(traj.l2[ib] ** 2 <= bound * (1 + 1e-6))


def viscous_inviscid_gap(theta0: ScalarField, u: VelocityField | None, cfg: EvolveConfig,
                         tau: float, tail_tol: float = 0.01):
    """Return ``(gap, bound)`` comparing viscous and inviscid runs up to ``tau``.

    ``gap`` is the largest sampled squared L^2 distance between the two runs and
    ``bound = gamma/2 * int_0^tau |theta_inviscid|_{H^alpha}^2 dt`` (trapezoid).
    Both runs share the time grid.
    """
    grid = theta0.grid
    viscous_cfg = replace(cfg, T=tau, keep_snapshots=True)
    dt, _ = _step_size(u, viscous_cfg, grid)
    viscous_cfg = replace(viscous_cfg, dt=dt)
    inviscid_cfg = replace(viscous_cfg, gamma=0.0)
    _, tv = evolve(theta0, u, viscous_cfg)
    _, t0 = evolve(theta0, u, inviscid_cfg)
    # tail = upper half of the retained band
    kmax = np.max(np.abs(np.stack(np.broadcast_arrays(*grid.wavenumbers))), axis=0)
    tail = kmax > grid.n // 6
    for snap in t0.snapshots:
        w = np.abs(fft(grid, snap)) ** 2
        total = w.sum()
        if total > 0 and w[tail].sum() > tail_tol * total:
            raise SolverError("inviscid run under-resolved: spectral tail above "
                              f"{tail_tol:.0%} of energy")
    gap = max(float(np.mean((a - b) ** 2)) for a, b in zip(tv.snapshots, t0.snapshots))
    h2 = t0.hs_alpha**2
    bound = 0.5 * cfg.gamma * float(np.sum(0.5 * (h2[1:] + h2[:-1]) * np.diff(t0.times)))
    return gap, bound
