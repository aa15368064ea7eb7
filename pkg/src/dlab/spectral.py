"""Fourier analysis on the unit torus [0, 1]^d, d in {1, 2}.

Coefficients are true Fourier coefficients, ``f_hat(n) = int f(x) exp(-2 pi i n.x) dx``,
so the coefficient at n = 0 is the spatial mean.  Arrays are stored in numpy's
FFT ordering; :attr:`Grid.wavenumbers` gives the lattice index of every slot.
"""
from __future__ import annotations

import enum
import json
import struct
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * np.pi


class ConfigurationError(ValueError):
    """Raised for grids or fields that cannot be represented as requested."""


class NormConvention(str, enum.Enum):
    """Weight used in homogeneous Sobolev norms.

    ``LATTICE`` weights mode n by |n|; ``PHYSICAL`` by 2 pi |n|, the square root
    of the -Laplacian eigenvalue on the unit torus.
    """

    LATTICE = "lattice"
    PHYSICAL = "physical"


@dataclass(frozen=True)
class Grid:
    """Uniform grid with ``n`` points per direction on the unit torus."""

    n: int
    dim: int = 2

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigurationError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 8 or self.n & (self.n - 1):
            raise ConfigurationError(f"n must be a power of two >= 8, got {self.n}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Integer lattice index per axis, broadcastable to :attr:`shape`."""
        k = np.fft.fftfreq(self.n, d=1.0 / self.n).round().astype(np.int64)
        if self.dim == 1:
            return (k,)
        return (k[:, None], k[None, :])

    @cached_property
    def k2(self) -> np.ndarray:
        """|n|^2 on the full spectral array."""
        out = np.zeros(self.shape)
        for k in self.wavenumbers:
            out = out + k.astype(float) ** 2
        return out

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        x = np.arange(self.n) / self.n
        if self.dim == 1:
            return (x,)
        return tuple(np.meshgrid(x, x, indexing="ij"))

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """True on modes kept by the 2/3 rule (every |n_i| <= n/3)."""
        mask = np.ones(self.shape, dtype=bool)
        for k in self.wavenumbers:
            mask = mask & (np.abs(k) <= self.n // 3)
        return mask

    def laplacian_eigenvalues(self) -> np.ndarray:
        """Distinct positive eigenvalues of -Laplacian resolved by the grid, ascending."""
        return np.unique((TWO_PI**2) * self.k2[self.k2 > 0])


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ConfigurationError(
                f"values shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", values)

    def mean(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True, eq=False)
class SpectrumField:
    grid: Grid
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=complex)
        if coeffs.shape != self.grid.shape:
            raise ConfigurationError(
                f"coeffs shape {coeffs.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "coeffs", coeffs)

    def coefficient(self, *n: int) -> complex:
        """Coefficient at lattice index n (negative indices allowed)."""
        return complex(self.coeffs[tuple(i % self.grid.n for i in n)])


@dataclass(frozen=True, eq=False)
class VelocityField:
    """A vector field on the grid, one :class:`ScalarField` per direction."""

    grid: Grid
    components: tuple[ScalarField, ...]
    incompressible: bool = True

    def __post_init__(self):
        comps = tuple(c if isinstance(c, ScalarField) else ScalarField(self.grid, c)
                      for c in self.components)
        if len(comps) != self.grid.dim:
            raise ConfigurationError("need one component per dimension")
        object.__setattr__(self, "components", comps)

    @classmethod
    def zero(cls, grid: Grid) -> "VelocityField":
        return cls(grid, tuple(np.zeros(grid.shape) for _ in range(grid.dim)))

    def array(self) -> np.ndarray:
        """Components stacked along a leading axis."""
        return np.stack([c.values for c in self.components])

    def sup_norm(self) -> float:
        return float(np.sqrt((self.array() ** 2).sum(axis=0)).max())

    def scaled(self, factor: float) -> "VelocityField":
        return VelocityField(self.grid, tuple(factor * c.values for c in self.components),
                             self.incompressible)


def fft(grid: Grid, values: np.ndarray) -> np.ndarray:
    return np.fft.fftn(values) / grid.n**grid.dim


def ifft(grid: Grid, coeffs: np.ndarray) -> np.ndarray:
    return np.fft.ifftn(coeffs * grid.n**grid.dim).real


def forward_transform(f: ScalarField) -> SpectrumField:
    return SpectrumField(f.grid, fft(f.grid, f.values))


def inverse_transform(f: SpectrumField) -> ScalarField:
    return ScalarField(f.grid, ifft(f.grid, f.coeffs))


def _as_spectrum(f) -> SpectrumField:
    return forward_transform(f) if isinstance(f, ScalarField) else f


def mode_weight(grid: Grid, convention=NormConvention.PHYSICAL) -> np.ndarray:
    """|n| or 2 pi |n| over the spectral array."""
    convention = NormConvention(convention)
    w = np.sqrt(grid.k2)
    return TWO_PI * w if convention is NormConvention.PHYSICAL else w


def hs_norm(f, s: float, convention=NormConvention.PHYSICAL) -> float:
    """Homogeneous Sobolev norm, summing over nonzero modes only.

    ``f`` may be a :class:`ScalarField` or a :class:`SpectrumField`.
    """
    F = _as_spectrum(f)
    w = mode_weight(F.grid, convention)
    nz = F.grid.k2 > 0
    return float(np.sqrt(np.sum(np.abs(F.coeffs[nz]) ** 2 * w[nz] ** (2 * s))))


def l2_norm(f) -> float:
    """Full L^2 norm (mean included)."""
    F = _as_spectrum(f)
    return float(np.sqrt(np.sum(np.abs(F.coeffs) ** 2)))


def fractional_laplacian(f: SpectrumField, order: float) -> SpectrumField:
    """Apply (-Laplacian)^order, i.e. multiply mode n by (2 pi |n|)^(2 order)."""
    if order < 0:
        raise ValueError(f"order must be non-negative, got {order}")
    sym = (TWO_PI**2 * f.grid.k2) ** order
    sym[f.grid.k2 == 0] = 0.0
    return SpectrumField(f.grid, f.coeffs * sym)


def derivative_symbols(grid: Grid) -> tuple[np.ndarray, ...]:
    """2 pi i n_j per axis with the Nyquist mode zeroed (odd derivatives)."""
    out = []
    for k in grid.wavenumbers:
        kk = k.astype(float).copy()
        kk[kk == -grid.n // 2] = 0.0
        out.append(1j * TWO_PI * kk)
    return tuple(out)


def gradient(f) -> tuple[SpectrumField, ...]:
    F = _as_spectrum(f)
    return tuple(SpectrumField(F.grid, F.coeffs * d) for d in derivative_symbols(F.grid))


def perp_gradient(psi) -> VelocityField:
    """Return (-d2 psi, d1 psi)."""
    F = _as_spectrum(psi)
    if F.grid.dim != 2:
        raise ConfigurationError("perp_gradient needs a 2-D grid")
    d1, d2 = derivative_symbols(F.grid)
    return VelocityField(F.grid, (ifft(F.grid, -d2 * F.coeffs), ifft(F.grid, d1 * F.coeffs)))


def divergence(u: VelocityField) -> SpectrumField:
    grid = u.grid
    total = np.zeros(grid.shape, dtype=complex)
    for d, c in zip(derivative_symbols(grid), u.components):
        total += d * fft(grid, c.values)
    return SpectrumField(grid, total)


def dealias(f: SpectrumField) -> SpectrumField:
    return SpectrumField(f.grid, np.where(f.grid.dealias_mask, f.coeffs, 0.0))


def project_modes(f: SpectrumField, N: int) -> SpectrumField:
    """Orthogonal projection onto the first ``N`` -Laplacian eigenvalues.

    Eigenvalues are counted with multiplicity and every mode sharing the N-th
    eigenvalue is kept, so the projection never splits a degenerate shell.  The
    mean (eigenvalue 0) is removed.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    lam = TWO_PI**2 * f.grid.k2
    positive = np.sort(lam[lam > 0], axis=None)
    cutoff = positive[min(N, positive.size) - 1]
    keep = (lam > 0) & (lam <= cutoff * (1 + 1e-12))
    return SpectrumField(f.grid, np.where(keep, f.coeffs, 0.0))


def c2_norm(u: VelocityField, *, warn_tol: float = 1e-6) -> float:
    """max|u| + max|grad u| + max|grad^2 u| on the grid, using spectral derivatives.

    Pointwise magnitudes are Euclidean/Frobenius.  Warns when the velocity
    spectrum has not decayed below ``warn_tol`` (relative) at the dealiasing cutoff.
    """
    grid = u.grid
    syms = derivative_symbols(grid)
    hats = [fft(grid, c.values) for c in u.components]
    peak = max(np.abs(h).max() for h in hats)
    if peak > 0:
        outer = ~grid.dealias_mask
        tail = max(np.abs(h[outer]).max() if outer.any() else 0.0 for h in hats)
        if tail > warn_tol * peak:
            warnings.warn(f"velocity spectrum not resolved: tail/peak = {tail / peak:.2e}",
                          RuntimeWarning, stacklevel=2)
    sq0 = sum(c.values**2 for c in u.components)
    sq1 = np.zeros(grid.shape)
    sq2 = np.zeros(grid.shape)
    for h in hats:
        for a in syms:
            sq1 += ifft(grid, a * h) ** 2
            for b in syms:
                sq2 += ifft(grid, a * b * h) ** 2
    return float(np.sqrt(sq0).max() + np.sqrt(sq1).max() + np.sqrt(sq2).max())


_MAGIC = b"DLABFLD1"


def save_field(path, f: ScalarField, convention=NormConvention.PHYSICAL) -> None:
    """Write a field as magic, uint32 header length, JSON header, float64 row-major data."""
    header = json.dumps({"n": f.grid.n, "dim": f.grid.dim,
                         "convention": NormConvention(convention).value,
                         "dtype": "<f8", "order": "C"}, sort_keys=True).encode()
    data = np.ascontiguousarray(f.values, dtype="<f8").tobytes()
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(header)) + header + data)


def load_field(path) -> tuple[ScalarField, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ConfigurationError(f"{path}: not a field file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    grid = Grid(header["n"], header["dim"])
    values = np.frombuffer(raw[12 + hlen:], dtype="<f8").reshape(grid.shape)
    return ScalarField(grid, values.copy()), header


def sparse_modes(f, rel_tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Lattice indices and coefficients of the non-negligible modes of ``f``.

    Returns ``(K, c)`` with ``K`` of shape (M, dim) and ``c`` of shape (M,).
    """
    F = _as_spectrum(f)
    mag = np.abs(F.coeffs)
    peak = mag.max()
    if peak == 0:
        return np.zeros((0, F.grid.dim), dtype=np.int64), np.zeros(0, dtype=complex)
    sel = np.nonzero(mag > rel_tol * peak)
    K = np.stack([np.broadcast_to(k, F.grid.shape)[sel] for k in F.grid.wavenumbers], axis=1)
    return K, F.coeffs[sel]
