"""Independent reference computations used to check the library.

None of these import the routine they check; they are slow, direct versions
of the same mathematics (explicit sums, dense grids, closed forms).
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def direct_dft(values: np.ndarray) -> np.ndarray:
    """Fourier coefficients on the unit torus by explicit O(N^2) summation.

    ``c[k] = (1/N) sum_j f[j] exp(-2 pi i k.j / n)`` in numpy's index order.
    """
    n = values.shape[0]
    dim = values.ndim
    idx = np.arange(n)
    kk = np.fft.fftfreq(n, 1.0 / n).round().astype(int)
    out = np.zeros(values.shape, dtype=complex)
    if dim == 1:
        for a, k in enumerate(kk):
            out[a] = np.sum(values * np.exp(-2j * np.pi * k * idx / n)) / n
        return out
    for a, k1 in enumerate(kk):
        e1 = np.exp(-2j * np.pi * k1 * idx / n)
        for b, k2 in enumerate(kk):
            e2 = np.exp(-2j * np.pi * k2 * idx / n)
            out[a, b] = np.sum(values * np.outer(e1, e2)) / n**2
    return out


def direct_idft(coeffs: np.ndarray) -> np.ndarray:
    n = coeffs.shape[0]
    idx = np.arange(n)
    kk = np.fft.fftfreq(n, 1.0 / n).round().astype(int)
    out = np.zeros(coeffs.shape, dtype=complex)
    for a, k1 in enumerate(kk):
        e1 = np.exp(2j * np.pi * k1 * idx / n)
        for b, k2 in enumerate(kk):
            out += coeffs[a, b] * np.outer(e1, np.exp(2j * np.pi * k2 * idx / n))
    return out.real


def dense_max_speed_cellular(m: int, A: float, points: int = 2001) -> float:
    """max |A grad^perp sin(2 pi m x) sin(2 pi m y)| over a fine grid of one cell."""
    x = np.linspace(0.0, 1.0 / m, points)
    X, Y = np.meshgrid(x, x, indexing="ij")
    k = 2 * np.pi * m
    u1 = -A * k * np.sin(k * X) * np.cos(k * Y)
    u2 = A * k * np.cos(k * X) * np.sin(k * Y)
    return float(np.sqrt(u1**2 + u2**2).max())


def shear_cell_diffusivity(A: float) -> float:
    """Closed form for u = (A sin(2 pi y), 0): chi = -A sin(2 pi y)/(4 pi^2)."""
    # D = 1 + <|grad chi|^2> = 1 + A^2 (2 pi)^2 / (16 pi^4) * 1/2
    return 1.0 + A**2 / (8 * np.pi**2)


def heat_gap(coeffs: np.ndarray, k2: np.ndarray, gamma: float, order: float, tau: float) -> float:
    """Squared L^2 distance between heat and identity evolution at time tau.

    Mean over grid points of (theta_visc - theta_invisc)^2 = sum |c|^2 (1 - e^{-lam tau})^2.
    """
    lam = gamma * (4 * np.pi**2 * k2) ** order
    return float(np.sum(np.abs(coeffs) ** 2 * (1 - np.exp(-lam * tau)) ** 2))


def second_difference_laplacian(values: np.ndarray) -> np.ndarray:
    """-f'' on a periodic 1-D grid of spacing 1/n by central differences."""
    n = values.size
    return -(np.roll(values, -1) - 2 * values + np.roll(values, 1)) * n**2


def interval_union_measure(intervals) -> Fraction:
    """Exact length of a union of closed intervals given as Fraction pairs, mod 1."""
    pieces = []
    for lo, hi in intervals:
        lo_r = lo - math.floor(lo)
        hi_r = lo_r + (hi - lo)
        if hi_r <= 1:
            pieces.append((lo_r, hi_r))
        else:
            pieces.append((lo_r, Fraction(1)))
            pieces.append((Fraction(0), hi_r - 1))
    pieces.sort()
    total = Fraction(0)
    cur_lo, cur_hi = None, None
    for lo, hi in pieces:
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return total


def smoothstep_bump(t, plateau=1 / 16, support=1 / 8, edge=1 / 100):
    """Independent evaluation of the library's bump profile.

    Ramp slope is M = 1/(support - plateau - edge) with shoulders where the slope
    follows M * s(u), s the degree-7 smoothstep, so theta is built by
    integrating the slope with a cumulative trapezoid rule.
    """
    t = np.abs(np.asarray(t, dtype=float))
    M = 1.0 / (support - plateau - edge)

    def s7(u):
        u = np.clip(u, 0, 1)
        return u**4 * (35 - 84 * u + 70 * u**2 - 20 * u**3)

    def slope(x):
        # |theta'| as a function of distance x from the outer edge
        d = support - plateau
        up = s7(x / edge)
        down = s7((d - x) / edge)
        return M * np.minimum(up, down)

    grid = np.linspace(0.0, support - plateau, 200001)
    sl = slope(grid)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (sl[1:] + sl[:-1]) * np.diff(grid))])
    out = np.interp(support - t, grid, cum)
    out[t >= support] = 0.0
    out[t <= plateau] = 1.0
    return out


def bump_fourier_quad(xi: float, points: int = 400001) -> float:
    """theta_hat(xi) by trapezoid on a dense grid of the independent bump."""
    t = np.linspace(-1 / 8, 1 / 8, points)
    f = smoothstep_bump(t) * np.cos(2 * np.pi * xi * t)
    return float(np.trapezoid(f, t))
