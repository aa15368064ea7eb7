"""Integrating-factor Runge-Kutta stepping for stiff diagonal linear parts."""
from __future__ import annotations

from typing import Callable

import numpy as np


class SolverError(RuntimeError):
    """A time integration produced non-finite or out-of-bounds values."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class LawsonRK4:
    """Classical RK4 applied to ``v = exp(-t L) w`` for ``w_t = L w + N(w)``.

    ``L`` is diagonal with symbol ``symbol``; it is propagated exactly, so the
    step size is limited only by ``N``.
    """

    def __init__(self, symbol: np.ndarray, dt: float):
        self.dt = dt
        self.full = np.exp(dt * symbol)
        self.half = np.exp(0.5 * dt * symbol)

    def step(self, w: np.ndarray, rhs: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        dt, E, Eh = self.dt, self.full, self.half
        k1 = rhs(w)
        k2 = rhs(Eh * (w + 0.5 * dt * k1))
        k3 = rhs(Eh * w + 0.5 * dt * k2)
        k4 = rhs(E * w + dt * Eh * k3)
        return E * w + (dt / 6.0) * (E * k1 + 2.0 * Eh * (k2 + k3) + k4)


def check_finite(w: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(w)):
        raise SolverError("non-finite values in state", step)


def lawson_rk4_step(w, rhs, full, half, dt):
    """One Lawson RK4 step with propagators given as callables.

    ``full`` and ``half`` apply ``exp(dt L)`` and ``exp(dt L / 2)``; they may be
    non-diagonal (e.g. exact advection blocks).
    """
    k1 = rhs(w)
    k2 = rhs(half(w + 0.5 * dt * k1))
    hw = half(w)
    k3 = rhs(hw + 0.5 * dt * k2)
    k4 = rhs(full(w) + dt * half(k3))
    return full(w) + (dt / 6.0) * (full(k1) + 2.0 * half(k2 + k3) + k4)


def lawson_rk2_step(w, rhs, full, dt):
    """One Lawson-Heun (second order) step; ``full`` applies ``exp(dt L)``."""
    k1 = rhs(w)
    k2 = rhs(full(w + dt * k1))
    return full(w + 0.5 * dt * k1) + 0.5 * dt * k2
