"""Rotation numbers with super-polynomial rational approximations and the
associated cohomological construction on the circle.

Everything that must be exact (rotation numbers, approximant bounds, atom
positions, support measures) is done with :class:`fractions.Fraction` and big
integers.  Bump values are floats evaluated at exactly computed arguments.

Functions are built from *atoms* ``sign * theta(S (x - c))``: a bump ``theta``
rescaled by a huge integer ``S`` and centred at an exact rational ``c``.  An
:class:`AtomFamily` is an arithmetic progression of centres ``offset + l*step``
(``l < count``), so a family with 10**10 atoms costs nothing to store.  Point
queries ("which atoms cover x") and counting queries ("how many centres lie in
an arc") reduce to linear congruences and are answered in O(log denominator)
big-integer steps.

Conventions: the circle is [0, 1); ``Hdot^s`` norms are homogeneous,
``|f|^2 = sum_{n != 0} (2 pi |n|)^(2s) |f_n|^2``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.legendre import leggauss

from .spectral import Grid, ScalarField

__all__ = ["ConstructionError", "ResolutionError", "Bump", "DEFAULT_BUMP", "LiouvilleSchedule",
           "build_schedule", "AtomFamily", "HomologyPartial", "assemble_partials",
           "qtilde_eval", "qtilde_coeff", "qtilde_norm", "translation_increment",
           "homology_residual", "sobolev_growth", "r_lambda_diagnostics", "build_F",
           "r_profile", "SobolevTable", "support_union_measure"]


class ConstructionError(RuntimeError):
    """A certificate of the construction failed; nothing is silently weakened."""


class ResolutionError(RuntimeError):
    """A semi-analytic sum could not be closed within its tail or size budget."""


# ---------------------------------------------------------------------------
# Piecewise polynomials and the bump profile

class PiecewisePoly:
    """Compactly supported piecewise polynomial; piece i is ``polys[i](s)`` with
    ``t = breaks[i] + s * (breaks[i+1] - breaks[i])``, ``s`` in [0, 1]."""

    def __init__(self, breaks: Sequence[float], polys: Sequence[Polynomial]):
        self.breaks = np.asarray(breaks, dtype=float)
        self.polys = list(polys)
        self.widths = np.diff(self.breaks)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        idx = np.searchsorted(self.breaks, t, side="right") - 1
        for i, p in enumerate(self.polys):
            sel = idx == i
            if np.any(sel):
                out[sel] = p((t[sel] - self.breaks[i]) / self.widths[i])
        # the right end of the support belongs to the last piece
        end = t == self.breaks[-1]
        if np.any(end):
            out[end] = self.polys[-1](1.0)
        return out

    def deriv(self, k: int = 1) -> "PiecewisePoly":
        return PiecewisePoly(self.breaks, [p.deriv(k) / w**k if k else p
                                           for p, w in zip(self.polys, self.widths)])

    def antideriv(self) -> "PiecewisePoly":
        """Integral from the left end; constant beyond the right end."""
        polys, acc = [], 0.0
        for p, w in zip(self.polys, self.widths):
            q = p.integ() * w
            q = q - q(0.0) + acc
            polys.append(q)
            acc = q(1.0)
        return _Clamped(self.breaks, polys, acc)

    def power_integral(self, power: int) -> float:
        return float(sum(w * (p**power).integ()(1.0) - w * (p**power).integ()(0.0)
                         for p, w in zip(self.polys, self.widths)))

    def jumps(self, k: int) -> list[tuple[float, float]]:
        """(t_j, f^(k)(t_j+) - f^(k)(t_j-)) at every break point."""
        d = self.deriv(k)
        out = []
        for j, t in enumerate(self.breaks):
            left = d.polys[j - 1](1.0) if j > 0 else 0.0
            right = d.polys[j](0.0) if j < len(d.polys) else 0.0
            out.append((float(t), float(right - left)))
        return out


class _Clamped(PiecewisePoly):
    def __init__(self, breaks, polys, total):
        super().__init__(breaks, polys)
        self.total = total

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = super().__call__(t)
        return np.where(t > self.breaks[-1], self.total, out)


def _smoothstep7_integral() -> Polynomial:
    # antiderivative of 35 s^4 - 84 s^5 + 70 s^6 - 20 s^7, zero at 0, equal to 1/2 at 1
    return Polynomial([0, 0, 0, 0, 0, 7.0, -14.0, 10.0, -2.5])


@dataclass(frozen=True)
class Bump:
    """Even C^4 bump: 1 on |t| <= plateau, 0 for |t| >= support.

    On each ramp the slope profile is flat at ``M = 1/(support - plateau - edge)``
    with degree-7 smoothstep shoulders of width ``edge``, so ``max|theta'| = M``.
    """

    plateau: float = 1.0 / 16
    support: float = 1.0 / 8
    edge: float = 1.0 / 100
    slope_bound: float = 20.0

    def __post_init__(self):
        a, b, d = self.plateau, self.support, self.edge
        if not 0 < a < b or not 0 < 2 * d <= b - a:
            raise ConstructionError("bump needs 0 < plateau < support and 2*edge <= ramp")
        if self.max_slope > self.slope_bound:
            raise ConstructionError(f"bump slope {self.max_slope:.4g} exceeds {self.slope_bound}")

    @property
    def max_slope(self) -> float:
        return 1.0 / (self.support - self.plateau - self.edge)

    @cached_property
    def profile(self) -> PiecewisePoly:
        a, b, d = self.plateau, self.support, self.edge
        M = self.max_slope
        I7 = _smoothstep7_integral()
        flip = Polynomial([1.0, -1.0])
        h = b - a - 2 * d
        one = Polynomial([1.0])
        pieces = [
            M * d * I7,
            Polynomial([M * d / 2, M * h]),
            one - M * d * I7(flip),
            one,
            one - M * d * I7,
            Polynomial([1 - M * d / 2, -M * h]),
            M * d * I7(flip),
        ]
        breaks = [-b, -b + d, -a - d, -a, a, a + d, b - d, b]
        return PiecewisePoly(breaks, pieces)

    def __call__(self, t):
        # clipping only removes rounding at the support ends
        return np.clip(self.profile(t), 0.0, 1.0)

    @cached_property
    def _antideriv(self):
        return self.profile.antideriv()

    def antiderivative(self, t):
        return self._antideriv(t)

    def derivative(self, t, k: int = 1):
        return self.profile.deriv(k)(t)

    @cached_property
    def moments(self) -> dict[int, float]:
        """``I_p = int theta^p`` for p = 1..4 (exact polynomial integration)."""
        return {p: self.profile.power_integral(p) for p in range(1, 5)}

    def energy(self, r: int) -> float:
        """``int (theta^(r))^2``."""
        return self.profile.deriv(r).power_integral(2)

    # Fourier transform theta_hat(xi) = int theta(t) exp(-2 pi i xi t) dt, two routes

    def fourier_quadrature(self, xi, panels: int = 16, nodes: int = 16) -> np.ndarray:
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        x, w = leggauss(nodes)
        ts, ws = [], []
        for lo, hi in zip(self.profile.breaks[:-1], self.profile.breaks[1:]):
            edges = np.linspace(lo, hi, panels + 1)
            for p0, p1 in zip(edges[:-1], edges[1:]):
                ts.append(0.5 * (p1 - p0) * x + 0.5 * (p1 + p0))
                ws.append(0.5 * (p1 - p0) * w)
        t = np.concatenate(ts)
        wt = np.concatenate(ws) * self.profile(t)
        out = np.empty(xi.shape)
        for i in range(0, xi.size, 2048):
            out[i:i + 2048] = np.cos(2 * math.pi * np.outer(xi[i:i + 2048], t)) @ wt
        return out

    def fourier_jumps(self, xi) -> np.ndarray:
        """Exact for xi != 0 by summing derivative jumps; loses accuracy as xi -> 0."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        omega = 2 * math.pi * xi
        total = np.zeros(xi.shape, dtype=complex)
        for k in range(9):
            for t, jump in self.profile.jumps(k):
                if jump != 0.0:
                    total += jump * np.exp(-1j * omega * t) / (1j * omega) ** (k + 1)
        return total.real

    @cached_property
    def even_moments(self) -> np.ndarray:
        """``int t^(2k) theta(t) dt`` for k < 40 (Gauss-Legendre, exact for these degrees)."""
        x, w = leggauss(48)
        br = self.profile.breaks
        t = np.concatenate([0.5 * (hi - lo) * x + 0.5 * (hi + lo) for lo, hi in zip(br[:-1], br[1:])])
        wt = np.concatenate([0.5 * (hi - lo) * w for lo, hi in zip(br[:-1], br[1:])]) * self.profile(t)
        return np.array([np.sum(wt * t ** (2 * k)) for k in range(40)])

    def fourier_taylor(self, xi) -> np.ndarray:
        """Power series in xi; accurate to rounding for |xi| <= 1."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        z = (2 * math.pi * xi) ** 2
        coef = [(-1) ** k * m / math.factorial(2 * k) for k, m in enumerate(self.even_moments)]
        out = np.zeros_like(xi)
        for c in reversed(coef):
            out = out * z + c
        return out

    def fourier(self, xi, crossover: float = 64.0) -> np.ndarray:
        xi = np.abs(np.atleast_1d(np.asarray(xi, dtype=float)))
        out = np.empty_like(xi)
        tiny = xi <= 1.0
        low = (xi <= crossover) & ~tiny
        if np.any(tiny):
            out[tiny] = self.fourier_taylor(xi[tiny])
        if np.any(low):
            out[low] = self.fourier_quadrature(xi[low])
        high = ~(tiny | low)
        if np.any(high):
            out[high] = self.fourier_jumps(xi[high])
        return out

    def autocorrelation(self, tau: float, r: int = 0) -> float:
        """``int theta^(r)(t) theta^(r)(t + tau) dt`` by piecewise Gauss-Legendre."""
        f = self.profile.deriv(r)
        b = self.support
        if abs(tau) >= 2 * b:
            return 0.0
        pts = np.unique(np.concatenate([f.breaks, f.breaks - tau]))
        pts = pts[(pts >= -b) & (pts <= b)]
        x, w = leggauss(12)
        total = 0.0
        for lo, hi in zip(pts[:-1], pts[1:]):
            t = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
            total += float(np.sum(0.5 * (hi - lo) * w * f(t) * f(t + tau)))
        return total

    def to_dict(self) -> dict:
        return {"profile": "degree-7 smoothstep shoulders", "plateau": self.plateau,
                "support": self.support, "edge": self.edge, "max_slope": self.max_slope,
                "slope_bound": self.slope_bound}


DEFAULT_BUMP = Bump()


def _theta_at(bump: Bump, arg: Fraction) -> float:
    return float(bump(np.array([float(arg)]))[0])


def qtilde_eval(q: int, x, bump: Bump = DEFAULT_BUMP) -> float:
    """``theta(q^6 x)`` with x reduced to [-1/2, 1/2); exact when x is a Fraction."""
    x = Fraction(x) if isinstance(x, (int, Fraction)) else x
    if isinstance(x, Fraction):
        d = x - math.floor(x + Fraction(1, 2))
        return _theta_at(bump, d * q**6)
    d = x - math.floor(x + 0.5)
    return float(bump(np.array([d * q**6]))[0])


def qtilde_coeff(q: int, n, bump: Bump = DEFAULT_BUMP) -> np.ndarray:
    """Fourier coefficient ``theta_hat(n / q^6) / q^6`` (scaling law)."""
    S = float(q) ** 6
    return bump.fourier(np.asarray(n, dtype=float) / S) / S


def qtilde_norm(q: int, r: int, power: int = 2, bump: Bump = DEFAULT_BUMP) -> float:
    """``|theta(q^6 .)|`` in Hdot^r (power 2) or in L^power (r = 0)."""
    S = float(q) ** 6
    if power != 2:
        if r != 0:
            raise ValueError("L^p norms are for r = 0")
        return (bump.moments[power] / S) ** (1.0 / power)
    return math.sqrt(S ** (2 * r - 1) * bump.energy(r))


def translation_increment(q: int, shift, r: int, bump: Bump = DEFAULT_BUMP) -> float:
    """``|a(. - shift) - a|`` in Hdot^r for ``a = theta(q^6 .)`` on the circle.

    Uses the autocorrelation identity ``S^(2r-1) (2 A_r(0) - 2 A_r(S shift))``,
    exact while the support plus the shift is shorter than the period.
    """
    S = q**6
    d = Fraction(shift) if isinstance(shift, (int, Fraction)) else shift
    if isinstance(d, Fraction):
        d = d - round(d)
    arg = float(d * S)
    val = 2 * bump.autocorrelation(0.0, r) - 2 * bump.autocorrelation(arg, r)
    return math.sqrt(max(val, 0.0) * float(S) ** (2 * r - 1))


# ---------------------------------------------------------------------------
# Schedules

def _frac_str(f: Fraction) -> str:
    return f"{f.numerator}/{f.denominator}"


def _parse_frac(s: str) -> Fraction:
    num, den = s.split("/")
    return Fraction(int(num), int(den))


@dataclass
class LiouvilleSchedule:
    """Approximants ``(q_k, p_k)`` with certified ``|rotation q_k + p_k| <= C / q_k^k``."""

    kind: str
    K: int
    C: Fraction
    rotation: Fraction
    q: list[int]
    p: list[int]
    bounds: list[Fraction] = field(default_factory=list)

    def certify(self) -> None:
        if len(self.q) < self.K or len(self.p) < self.K:
            raise ConstructionError("fewer approximants than levels")
        for k, (q, p) in enumerate(zip(self.q, self.p), start=1):
            if q < k:
                raise ConstructionError(f"q_{k} = {q} < {k}")
            if k > 1 and q <= self.q[k - 2]:
                raise ConstructionError("approximant denominators must increase")
            err = abs(self.rotation * q + p)
            if err > self.C / Fraction(q) ** k:
                raise ConstructionError(f"bound fails at level {k}: |rotation*q+p| = "
                                        f"{float(err):.6e} > C/q^k = {float(self.C / q**k):.6e}")
        self.bounds = [abs(self.rotation * q + p) for q, p in zip(self.q, self.p)]

    def label(self) -> str:
        return "toy schedule (desk scale)" if self.kind == "toy" else "canonical schedule"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "label": self.label(), "K": self.K, "C": _frac_str(self.C),
                "rotation": _frac_str(self.rotation), "rotation_float": float(self.rotation),
                "q": [str(q) for q in self.q], "p": [str(p) for p in self.p],
                "bounds": [_frac_str(b) for b in self.bounds]}

    @classmethod
    def from_dict(cls, d: dict) -> "LiouvilleSchedule":
        s = cls(d["kind"], int(d["K"]), _parse_frac(d["C"]), _parse_frac(d["rotation"]),
                [int(q) for q in d["q"]], [int(p) for p in d["p"]])
        s.certify()
        return s


def build_schedule(kind: str = "toy", K: int = 3, C=None) -> LiouvilleSchedule:
    """Exact schedule with K certified approximants.

    ``canonical``: rotation = sum_{n=0}^{K+2} 10^(-n!), q_k = 10^(k!).  Its
    level-k error is slightly above q_k^(-k), so the default C is 101/100.
    ``toy``: q_1 = 8, q_{k+1} = q_k^(k+2), rotation = sum_{k<=K+1} 1/q_k; the
    default C is 1.
    """
    if K < 1:
        raise ConstructionError("K must be at least 1")
    if kind == "canonical":
        C = Fraction(101, 100) if C is None else Fraction(C)
        rotation = sum(Fraction(1, 10 ** math.factorial(n)) for n in range(K + 3))
        qs = [10 ** math.factorial(k) for k in range(1, K + 1)]
    elif kind == "toy":
        C = Fraction(1) if C is None else Fraction(C)
        qs = [8]
        while len(qs) < K + 1:
            qs.append(qs[-1] ** (len(qs) + 2))
        rotation = sum(Fraction(1, q) for q in qs)
        qs = qs[:K]
    else:
        raise ConstructionError(f"unknown schedule kind {kind!r}")
    ps = [-round(rotation * q) for q in qs]
    sched = LiouvilleSchedule(kind, K, C, rotation, qs, ps)
    sched.certify()
    return sched


# ---------------------------------------------------------------------------
# Linear-congruence queries on big integers

def _floor_sum(n: int, m: int, a: int, b: int) -> int:
    """sum_{i<n} floor((a i + b) / m) for m > 0."""
    ans = 0
    if a < 0 or a >= m:
        ans += n * (n - 1) // 2 * (a // m)
        a %= m
    if b < 0 or b >= m:
        ans += n * (b // m)
        b %= m
    while True:
        if a >= m:
            ans += n * (n - 1) // 2 * (a // m)
            a %= m
        if b >= m:
            ans += n * (b // m)
            b %= m
        y = a * n + b
        if y < m:
            return ans
        n, b, m, a = y // m, y % m, a, m


def _first_hit(A: int, M: int, L: int, R: int) -> Optional[int]:
    """Smallest x >= 0 with L <= (A x mod M) <= R, for 0 <= L <= R < M."""
    A %= M
    if L == 0:
        return 0
    if A == 0:
        return None
    k = -(-L // A)
    if A * k <= R:
        return k
    y = _first_hit(M % A, A, (-R) % A, (-L) % A)
    if y is None:
        return None
    return -(-(L + M * y) // A)


def _split(L: int, R: int, M: int) -> list[tuple[int, int]]:
    """The residues of [L, R] modulo M as at most two plain intervals."""
    if R < L:
        return []
    if R - L >= M - 1:
        return [(0, M - 1)]
    lo = L % M
    hi = lo + (R - L)
    if hi < M:
        return [(lo, hi)]
    return [(lo, M - 1), (0, hi - M)]


def _hits(A: int, M: int, L: int, R: int, stop: int, cap: int) -> list[int]:
    """All x in [0, stop) with (A x mod M) in [L, R] (taken mod M)."""
    out: list[int] = []
    start = 0
    while start < stop:
        shift = A * start
        best = None
        for lo, hi in _split(L - shift, R - shift, M):
            x = _first_hit(A, M, lo, hi)
            if x is not None and (best is None or x < best):
                best = x
        if best is None or start + best >= stop:
            break
        out.append(start + best)
        if len(out) > cap:
            raise ResolutionError(f"more than {cap} atoms in a query window")
        start += best + 1
    return out


def _count(A: int, B: int, M: int, L: int, R: int, n: int) -> int:
    """#{x in [0, n): ((A x + B) mod M) in [L, R] mod M}."""
    total = 0
    for lo, hi in _split(L, R, M):
        total += _floor_sum(n, M, A, B - lo) - _floor_sum(n, M, A, B - hi - 1)
    return total


def _centered(d: Fraction) -> Fraction:
    return d - math.floor(d + Fraction(1, 2))


# ---------------------------------------------------------------------------
# Atom families and the level partials

@dataclass(frozen=True)
class AtomFamily:
    """Atoms ``sign * theta(scale (x - offset - l step))`` for ``l < count``."""

    scale: int
    offset: Fraction
    step: Fraction
    count: int
    sign: int
    level: int
    role: str = "R"

    @property
    def radius(self) -> Fraction:
        return Fraction(1, 8 * self.scale)

    def center(self, l: int) -> Fraction:
        c = self.offset + l * self.step
        return c - math.floor(c)

    def _ints(self, *xs: Fraction):
        M = math.lcm(self.offset.denominator, self.step.denominator,
                     *(x.denominator for x in xs))
        return M, (self.step * M).numerator % M, (self.offset * M).numerator % M, \
            [(x * M).numerator for x in xs]

    def near(self, x: Fraction, width: Fraction, cap: int = 10_000) -> list[int]:
        """Indices whose centre is within ``width`` of ``x`` on the circle."""
        M, A, O, (X, W) = self._ints(x, width)
        return _hits(A, M, X - W - O, X + W - O, self.count, cap)

    def count_in(self, a: Fraction, b: Fraction) -> int:
        """Centres in the closed arc from a to b (0 <= b - a < 1)."""
        if b < a:
            return 0
        M, A, O, (La, Lb) = self._ints(a, b)
        return _count(A, O, M, La, Lb, self.count)

    def value(self, x: Fraction, bump: Bump) -> float:
        total = 0.0
        for l in self.near(x, self.radius):
            total += _theta_at(bump, _centered(x - self.center(l)) * self.scale)
        return self.sign * total

    def mass(self, bump: Bump) -> float:
        return bump.moments[1] / self.scale

    def integral(self, a: Fraction, b: Fraction, bump: Bump) -> float:
        """``int_a^b`` of the family, for an arc with 0 <= b - a < 1."""
        r = self.radius
        full = self.count_in(a + r, b - r) if b - a >= 2 * r else 0
        total = full * self.mass(bump)
        seen = set()
        for end in (a, b):
            for l in self.near(end, r):
                if l in seen:
                    continue
                seen.add(l)
                c = self.center(l)
                # an arc close to the whole circle can meet two copies of one atom
                j0 = math.ceil(a - r - c)
                for j in (j0, j0 + 1):
                    lo = float((a - c - j) * self.scale)
                    hi = float((b - c - j) * self.scale)
                    if hi <= -bump.support or lo >= bump.support:
                        continue
                    total += (float(bump.antiderivative(np.array([hi]))[0])
                              - float(bump.antiderivative(np.array([lo]))[0])) / self.scale
                if b - a >= 2 * r and (c - a - r) % 1 <= b - a - 2 * r:
                    total -= self.mass(bump)  # already counted in ``full``
        return self.sign * total

    def to_dict(self) -> dict:
        return {"scale": str(self.scale), "offset": _frac_str(self.offset),
                "step": _frac_str(self.step), "count": str(self.count), "sign": self.sign,
                "level": self.level, "role": self.role}

    @classmethod
    def from_dict(cls, d: dict) -> "AtomFamily":
        return cls(int(d["scale"]), _parse_frac(d["offset"]), _parse_frac(d["step"]),
                   int(d["count"]), int(d["sign"]), int(d["level"]), d.get("role", "R"))


def _phases(ns: list[int], x: Fraction) -> np.ndarray:
    """(n x mod 1) as floats, reduced exactly before rounding."""
    P, D = x.numerator, x.denominator
    return np.array([((k * P) % D) / D for k in ns], dtype=float)


def _geometric(ns: list[int], step: Fraction, count: int) -> np.ndarray:
    """sum_{l<count} exp(-2 pi i n l step) in closed form."""
    phi = _phases(ns, step)
    full = _phases(ns, step * count)
    out = np.full(len(ns), complex(count))
    nz = phi != 0
    out[nz] = (1 - np.exp(-2j * math.pi * full[nz])) / (1 - np.exp(-2j * math.pi * phi[nz]))
    return out


@dataclass
class HomologyPartial:
    """Level-K partial sums: R-tilde families (one per level) and Q-tilde atoms."""

    schedule: LiouvilleSchedule
    K: int
    rtilde: list[AtomFamily]
    qtilde: list[AtomFamily]
    support_measure: Fraction
    bump: Bump = DEFAULT_BUMP
    sign: Optional[int] = None

    @property
    def rotation(self) -> Fraction:
        return self.schedule.rotation

    def families(self, K: Optional[int] = None, role: str = "R") -> list[AtomFamily]:
        K = self.K if K is None else K
        fams = self.rtilde if role == "R" else self.qtilde
        return [f for f in fams if f.level <= K]

    def rtilde_at(self, x: Fraction, K: Optional[int] = None) -> float:
        return sum(f.value(x, self.bump) for f in self.families(K))

    def qtilde_at(self, x: Fraction, K: Optional[int] = None) -> float:
        return sum(f.value(x, self.bump) for f in self.families(K, "Q"))

    def rtilde_mean(self, K: Optional[int] = None) -> float:
        return sum(f.sign * f.count * f.mass(self.bump) for f in self.families(K))

    def rtilde_integral(self, a: Fraction, b: Fraction, K: Optional[int] = None) -> float:
        return sum(f.integral(a, b, self.bump) for f in self.families(K))

    def rtilde_coeff(self, n, K: Optional[int] = None) -> np.ndarray:
        """Fourier coefficients of R-tilde_K at integer frequencies ``n``."""
        ns = [int(v) for v in np.atleast_1d(n)]
        total = np.zeros(len(ns), dtype=complex)
        for f in self.families(K):
            chat = self.bump.fourier(np.array(ns, dtype=float) / float(f.scale)) / float(f.scale)
            total += f.sign * chat * _geometric(ns, f.step, f.count) * \
                np.exp(-2j * math.pi * _phases(ns, f.offset))
        return total

    def to_dict(self) -> dict:
        return {"schedule": self.schedule.to_dict(), "K": self.K, "sign": self.sign,
                "rtilde": [f.to_dict() for f in self.rtilde],
                "qtilde": [f.to_dict() for f in self.qtilde],
                "support_measure": _frac_str(self.support_measure),
                "support_measure_float": float(self.support_measure),
                "bump": self.bump.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "HomologyPartial":
        b = d["bump"]
        bump = Bump(b["plateau"], b["support"], b["edge"], b["slope_bound"])
        return cls(LiouvilleSchedule.from_dict(d["schedule"]), int(d["K"]),
                   [AtomFamily.from_dict(f) for f in d["rtilde"]],
                   [AtomFamily.from_dict(f) for f in d["qtilde"]],
                   _parse_frac(d["support_measure"]), bump, d["sign"])


def assemble_partials(schedule: LiouvilleSchedule, K: Optional[int] = None,
                      bump: Bump = DEFAULT_BUMP) -> HomologyPartial:
    """Atom families for levels 1..K plus the exact support-measure certificate.

    Level k: R-tilde_{q} = -sum_{l<q} theta(q^12 (x - l rotation)) and the two
    Q-tilde atoms theta(q^12 (x - q rotation)) - theta(q^12 x).
    """
    K = schedule.K if K is None else K
    if K > len(schedule.q):
        raise ConstructionError(f"schedule has {len(schedule.q)} approximants, need {K}")
    a = schedule.rotation
    rt, qt = [], []
    measure = Fraction(0)
    for k in range(1, K + 1):
        q = schedule.q[k - 1]
        S = q**12
        rt.append(AtomFamily(S, Fraction(0), a, q, -1, k, "R"))
        qt.append(AtomFamily(S, _centered(q * a) % 1, Fraction(0), 1, 1, k, "Q+"))
        qt.append(AtomFamily(S, Fraction(0), Fraction(0), 1, -1, k, "Q-"))
        level = q * 2 * rt[-1].radius
        if level > Fraction(1, 4) / Fraction(q) ** 11:
            raise ConstructionError(f"support measure certificate fails at level {k}")
        measure += level
    if measure >= Fraction(1, 2):
        raise ConstructionError(f"total support measure {float(measure)} is not below 1/2")
    hp = HomologyPartial(schedule, K, rt, qt, measure, bump)
    _certify_separation(hp)
    return hp


def _certify_separation(hp: HomologyPartial) -> None:
    """Within a level, atom supports are pairwise disjoint (exact)."""
    for f in hp.rtilde:
        probe = replace(f, offset=f.step, count=f.count - 1) if f.count > 1 else None
        if probe is not None and probe.near(Fraction(0), 2 * f.radius, cap=0):
            raise ConstructionError(f"level {f.level} atoms overlap")


def support_union_measure(hp: HomologyPartial, K: Optional[int] = None) -> Fraction:
    """Exact Lebesgue measure of the union of R-tilde atom supports up to level K."""
    fams = hp.families(K)
    total = sum(f.count * 2 * f.radius for f in fams)
    clusters = _overlap_clusters(hp, fams)
    for members in clusters:
        ivs = sorted((c - r, c + r) for (_, _, c, r) in members)
        union = Fraction(0)
        cur_lo, cur_hi = ivs[0]
        for lo, hi in ivs[1:]:
            if lo > cur_hi:
                union += cur_hi - cur_lo
                cur_lo, cur_hi = lo, hi
            else:
                cur_hi = max(cur_hi, hi)
        union += cur_hi - cur_lo
        total -= sum(2 * r for (_, _, _, r) in members) - union
    return total


def _overlap_pairs(hp: HomologyPartial, fams: list[AtomFamily]):
    """(coarse family idx, l, fine family idx, l, exact displacement fine - coarse)."""
    pairs = []
    for j, fj in enumerate(fams):
        for k in range(j + 1, len(fams)):
            fk = fams[k]
            if fj.count > 100_000:
                raise ResolutionError("too many coarse atoms to scan for overlaps")
            for lj in range(fj.count):
                cj = fj.center(lj)
                for lk in fk.near(cj, fj.radius + fk.radius):
                    pairs.append((j, lj, k, lk, _centered(fk.center(lk) - cj)))
    return pairs


def _overlap_clusters(hp, fams):
    pairs = _overlap_pairs(hp, fams)
    parent: dict = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for j, lj, k, lk, _ in pairs:
        parent[find((j, lj))] = find((k, lk))
    groups: dict = {}
    for node in list(parent):
        groups.setdefault(find(node), []).append(node)
    out = []
    for nodes in groups.values():
        anchor = fams[nodes[0][0]].center(nodes[0][1])
        members = []
        for (i, l) in nodes:
            c = anchor + _centered(fams[i].center(l) - anchor)
            members.append((i, l, c, fams[i].radius))
        out.append(members)
    return out


# ---------------------------------------------------------------------------
# The homology identity

def determine_sign(hp: HomologyPartial) -> int:
    """Sign s with R~(x - a) - R~(x) = s Q~(x), measured at level 1."""
    x = hp.qtilde[0].offset  # centre of the shifted level-1 Q-tilde atom
    lhs = hp.rtilde_at(x - hp.rotation, 1) - hp.rtilde_at(x, 1)
    rhs = hp.qtilde_at(x, 1)
    if abs(rhs) < 0.5:
        raise ConstructionError("level-1 probe point is not on a Q-tilde plateau")
    return int(round(lhs / rhs))


def _probe_points(hp: HomologyPartial, K: int, samples: int, atoms_per_level: int,
                  seed: int) -> list[Fraction]:
    rng = np.random.default_rng(seed)
    pts = [Fraction(i, samples) + Fraction(int(u), samples << 32)
           for i, u in enumerate(rng.integers(0, 2**32, samples))]
    a = hp.rotation
    offsets = [Fraction(0), Fraction(1, 2), Fraction(-1, 2), Fraction(1), Fraction(-1),
               Fraction(3, 4), Fraction(-3, 4), Fraction(1, 4), Fraction(-1, 4)]
    for f in hp.families(K) + hp.families(K, "Q"):
        n = f.count
        chosen = {0, n - 1, min(1, n - 1), min(2, n - 1)}
        if n > 4:
            chosen |= {int(v) for v in rng.integers(0, n, atoms_per_level)}
        r = f.radius
        ramp = Fraction(hp.bump.plateau + hp.bump.edge) * 8 * r
        for l in chosen:
            c = f.center(l)
            for off in offsets + [ramp, -ramp]:
                x = c + off * r if abs(off) <= 1 else c + off
                pts.append(x % 1)
                pts.append((x + a) % 1)
    return pts


def homology_residual(hp: HomologyPartial, samples: int = 1000, K: Optional[int] = None,
                      atoms_per_level: int = 16, seed: int = 0) -> float:
    """max |R~_K(x - a) - R~_K(x) - s Q~_K(x)| over stratified and atom-anchored points.

    The sign ``s`` is measured at level 1 (see :func:`determine_sign`) and stored
    on ``hp``.  Each sampled atom contributes its centre, plateau and ramp points
    and support endpoints, both at x and at x + rotation.
    """
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    K = hp.K if K is None else K
    if hp.sign is None:
        hp.sign = determine_sign(hp)
    worst = 0.0
    for x in _probe_points(hp, K, samples, atoms_per_level, seed):
        lhs = hp.rtilde_at(x - hp.rotation, K) - hp.rtilde_at(x, K)
        worst = max(worst, abs(lhs - hp.sign * hp.qtilde_at(x, K)))
    return worst


# ---------------------------------------------------------------------------
# Norms of the partial sums

@dataclass
class _LevelIntegrals:
    K: int
    mean: float
    p2: float  # int (R~ - mean)^2
    p4: float  # int (R~ - mean)^4
    energy: float  # int (R~')^2
    overlaps: int


def _level_integrals(hp: HomologyPartial, K: int) -> _LevelIntegrals:
    """Exact-structure integrals of R~_K.

    Distinct scales differ by factors above 10^20, so over a fine atom every
    coarser atom is constant to double precision; each atom contributes
    ``int [(V + a)^p - V^p]`` with V the background (coarser atoms minus the
    mean) at its centre.  Same-level atoms are certified disjoint.
    """
    bump = hp.bump
    fams = hp.families(K)
    I = bump.moments
    E1 = bump.energy(1)
    m = hp.rtilde_mean(K)
    background: dict = {}
    curvature: dict = {}
    for j, lj, k, lk, d in _overlap_pairs(hp, fams):
        fj = fams[j]
        v = fj.sign * _theta_at(bump, d * fj.scale)
        dd = fj.sign * float(bump.derivative(np.array([float(d * fj.scale)]), 2)[0]) * \
            float(fj.scale) ** 2
        background[(k, lk)] = background.get((k, lk), 0.0) + v
        curvature[(k, lk)] = curvature.get((k, lk), 0.0) + dd

    def excess(p, V, f):
        return sum(math.comb(p, i) * V ** (p - i) * f.sign**i * I[i] for i in range(1, p + 1)) \
            / f.scale

    p2 = m**2
    p4 = m**4
    energy = 0.0
    for k, f in enumerate(fams):
        if float(f.count) * float(f.scale) > 1e300:
            raise ResolutionError(f"level {f.level} exceeds floating range")
        p2 += f.count * excess(2, -m, f)
        p4 += f.count * excess(4, -m, f)
        energy += f.count * float(f.scale) * E1
    for (k, lk), v in background.items():
        f = fams[k]
        p2 += excess(2, v - m, f) - excess(2, -m, f)
        p4 += excess(4, v - m, f) - excess(4, -m, f)
        energy += -2.0 * curvature[(k, lk)] * f.sign * f.mass(bump)
    # int (R~ - m)^2 = int R~^2 - m^2 etc. are implied by the expansion above
    return _LevelIntegrals(K, m, p2, p4, energy, len(background))


def _h0_norm(hp: HomologyPartial, K: int, rel_tail: float = 0.01,
             max_terms: int = 1 << 20) -> tuple[float, int, float]:
    """|R_K|_{L^2} (mean removed) by Parseval with an analytic tail bound.

    |R~_hat(n)| <= B = sum_k q_k I_1 / S_k, so the tail beyond N is at most
    2 B^2 / (4 pi^2 N).
    """
    fams = hp.families(K)
    B = sum(f.count * f.mass(hp.bump) for f in fams)
    partial, n, N = 0.0, 0, 256
    while True:
        ks = np.arange(n + 1, N + 1)
        c = hp.rtilde_coeff(ks, K)
        partial += float(np.sum(2 * np.abs(c) ** 2 / (2 * math.pi * ks) ** 2))
        n = N
        tail = 2 * B**2 / (4 * math.pi**2 * N)
        if tail <= rel_tail * partial:
            return math.sqrt(partial), N, tail
        if N >= max_terms:
            raise ResolutionError(f"Parseval tail {tail:.3e} above {rel_tail} of the sum")
        N *= 2


@dataclass
class SobolevTable:
    rows: list[dict]
    flags: dict
    label: str = ""

    def to_csv(self, path) -> None:
        keys = ["K", "s", "norm", "increment", "ratio"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for r in self.rows:
                w.writerow([r["K"], r["s"]] + [f"{r[k]:.17g}" for k in keys[2:]])


def _table(norms: dict, s_list, K_list, label: str) -> SobolevTable:
    rows = []
    for s in s_list:
        prev = None
        for K in K_list:
            v = norms[(K, s)]
            inc = abs(v - prev) if prev is not None else math.nan
            ratio = v / prev if prev not in (None, 0.0) else math.nan
            rows.append({"K": K, "s": s, "norm": v, "increment": inc, "ratio": ratio})
            prev = v
    flags = {}
    Ks = list(K_list)
    if 2 in s_list and len(Ks) > 1:
        flags["h2_doubles"] = all(r["ratio"] >= 2 for r in rows if r["s"] == 2 and r["K"] != Ks[0])
    if 1 in s_list and len(Ks) > 1:
        last = [r for r in rows if r["s"] == 1][-1]
        base = [r for r in rows if r["s"] == 1][-2]["norm"]
        flags["h1_increment_ratio"] = last["increment"] / base if base else math.inf
        flags["h1_stabilizes"] = flags["h1_increment_ratio"] <= 0.05
    return SobolevTable(rows, flags, label)


def sobolev_growth(hp: HomologyPartial, s_list=(0, 1, 2), K_list=None) -> SobolevTable:
    """Hdot^s norms of ``R_K = int_0^x (R~_K - mean)`` for each K.

    s = 2 and s = 1 come from the atom integrals (``|R''| = |R~'|``,
    ``|R'| = |R~ - mean|``); s = 0 from Parseval over the exact coefficients.
    """
    K_list = list(range(1, hp.K + 1)) if K_list is None else sorted(K_list)
    if any(s not in (0, 1, 2) for s in s_list):
        raise ValueError("s must be 0, 1 or 2")
    norms = {}
    for K in K_list:
        li = _level_integrals(hp, K)
        for s in s_list:
            if s == 2:
                norms[(K, s)] = math.sqrt(li.energy)
            elif s == 1:
                norms[(K, s)] = math.sqrt(li.p2)
            else:
                norms[(K, s)] = _h0_norm(hp, K)[0]
    return _table(norms, s_list, K_list, hp.schedule.label())


def r_lambda_diagnostics(hp: HomologyPartial, lam: float, K_list=None) -> SobolevTable:
    """Hdot^1 and Hdot^2 norms of ``exp(i lam R_K)``.

    Since ``|exp(i lam R)| = 1``: ``|.|_{H1}^2 = lam^2 int R'^2`` and
    ``|.|_{H2}^2 = lam^2 int R''^2 + lam^4 int R'^4``.
    """
    K_list = list(range(1, hp.K + 1)) if K_list is None else sorted(K_list)
    norms = {}
    for K in K_list:
        li = _level_integrals(hp, K)
        norms[(K, 1)] = abs(lam) * math.sqrt(li.p2)
        norms[(K, 2)] = math.sqrt(lam**2 * li.energy + lam**4 * li.p4)
    return _table(norms, (1, 2), K_list, hp.schedule.label())


def level_l4_norms(hp: HomologyPartial) -> list[dict]:
    """``|R~_{q_k}|_{L^4}`` per level against ``C q_k^-2`` with ``C = |theta|_{L^4}``."""
    C = hp.bump.moments[4] ** 0.25
    out = []
    for f in hp.rtilde:
        q = hp.schedule.q[f.level - 1]
        norm = (f.count * hp.bump.moments[4] / f.scale) ** 0.25
        out.append({"level": f.level, "q": q, "norm": norm, "bound": C / float(q) ** 2,
                    "certified": norm <= C / float(q) ** 2})
    return out


# ---------------------------------------------------------------------------
# Primitive, the smooth cocycle and the positive weight F

def r_profile(hp: HomologyPartial, n: int, K: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """``R_K(x) = int_0^x (R~_K - mean)`` at x = i/n."""
    K = hp.K if K is None else K
    m = hp.rtilde_mean(K)
    xs = [Fraction(i, n) for i in range(n)]
    vals = [hp.rtilde_integral(Fraction(0), x, K) - m * float(x) for x in xs]
    return np.array([float(x) for x in xs]), np.array(vals)


def cocycle(hp: HomologyPartial, x: Fraction, K: Optional[int] = None) -> float:
    """``Q(x) = R(x + a) - R(x)``; mean zero and smooth."""
    a = hp.rotation
    return hp.rtilde_integral(x, x + a, K) - hp.rtilde_mean(K) * float(a)


def build_F(hp: HomologyPartial, n: int = 32, psi: Callable | str | None = None,
            K: Optional[int] = None) -> tuple[ScalarField, dict]:
    """``F(x, y) = b + psi(y) (Qp(x - a y) - b)`` on an n x n grid.

    ``Qp = 1 + c Q`` with ``c = 1 / (2 B)`` and ``B`` a rigorous bound on
    ``|Q|``, so ``Qp`` lies in [1/2, 3/2] with mean 1; ``b = min(Qp) / 2``.
    ``psi`` is a callable on [-1/2, 1/2), ``"one"``, ``"zero"``, or None for
    ``theta(y / 2)``.
    """
    K = hp.K if K is None else K
    a = hp.rotation
    fams = hp.families(K)
    B = sum(f.count * f.mass(hp.bump) for f in fams) * (1 + float(a))
    c = 1.0 / (2 * B)
    ys = np.arange(n) / n
    yc = ys - np.floor(ys + 0.5)
    if psi is None:
        psi_v = hp.bump(yc / 2)
    elif psi == "one":
        psi_v = np.ones(n)
    elif psi == "zero":
        psi_v = np.zeros(n)
    else:
        psi_v = np.asarray(psi(yc), dtype=float)
    Qp = np.empty((n, n))
    for j in range(n):
        shift = a * Fraction(j, n)
        for i in range(n):
            Qp[i, j] = 1.0 + c * cocycle(hp, (Fraction(i, n) - shift) % 1, K)
    b = 0.5 * float(Qp.min())
    F = b + psi_v[None, :] * (Qp - b)
    if not F.min() >= b / 2 > 0:
        raise ConstructionError(f"F fails positivity: min F = {F.min():.3e}, b = {b:.3e}")
    info = {"b": b, "scale": c, "bound": B, "min_F": float(F.min()),
            "mean_Qp_slice": float(Qp[:, 0].mean()), "K": K, "n": n}
    return ScalarField(Grid(n), F), info


def parseval_norm(hp: HomologyPartial, K: int, s: int, N: int) -> float:
    """Hdot^s norm of R_K from coefficients |n| <= N only (no tail bound).

    An independent route to the atom integrals, usable when every scale is
    small enough for N to cover the coefficient decay.
    """
    ks = np.arange(1, N + 1)
    c = hp.rtilde_coeff(ks, K)
    w = (2 * math.pi * ks) ** (2 * s - 2)
    return math.sqrt(float(np.sum(2 * w * np.abs(c) ** 2)))
