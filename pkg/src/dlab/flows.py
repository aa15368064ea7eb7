"""Velocity fields: cellular flows, shears, rescalings and the rotation-number field."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .spectral import (TWO_PI, ConfigurationError, Grid, NormConvention, ScalarField,
                       VelocityField, divergence, fft, hs_norm, ifft, l2_norm)

__all__ = ["FlowSpec", "VelocityField", "cellular", "shear", "from_stream", "rescale",
           "check_symmetry", "first_integral_probe", "liouvillean_field", "build_flow",
           "validate_incompressible"]

FLOW_KINDS = ("none", "cellular", "shear", "from-stream", "liouvillean")


@dataclass
class FlowSpec:
    """Recipe for a velocity field.

    ``kind="none"`` is the zero field.  ``rescale`` applies ``v(x) = -l u(l x)``
    after construction (skipped when ``rescale == 1``).
    """

    kind: str = "cellular"
    cells: int = 1
    amplitude: float = 1.0
    rescale: int = 1
    stream: Optional[ScalarField] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in FLOW_KINDS:
            raise ConfigurationError(f"unknown flow kind {self.kind!r}")
        if self.cells < 1 or self.rescale < 1:
            raise ConfigurationError("cells and rescale must be >= 1")
        if self.kind == "from-stream" and self.stream is None:
            raise ConfigurationError("from-stream flow needs a stream function")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("stream")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FlowSpec":
        return cls(**{k: v for k, v in d.items() if k in ("kind", "cells", "amplitude", "rescale")})


def _require_resolved(grid: Grid, m: int):
    if grid.n < 8 * m:
        raise ConfigurationError(f"grid n={grid.n} does not resolve {m} cells (need n >= {8 * m})")


def cellular(m: int, A: float, grid: Grid) -> VelocityField:
    """A * grad^perp [sin(2 pi m x1) sin(2 pi m x2)]."""
    if grid.dim != 2:
        raise ConfigurationError("cellular flows are two-dimensional")
    _require_resolved(grid, m)
    x, y = grid.coords
    k = TWO_PI * m
    u1 = -A * k * np.sin(k * x) * np.cos(k * y)
    u2 = A * k * np.cos(k * x) * np.sin(k * y)
    return VelocityField(grid, (u1, u2))


def shear(A: float, grid: Grid) -> VelocityField:
    """(A sin(2 pi x2), 0)."""
    if grid.dim != 2:
        raise ConfigurationError("shear flows are two-dimensional")
    _, y = grid.coords
    return VelocityField(grid, (A * np.sin(TWO_PI * y), np.zeros(grid.shape)))


def from_stream(psi: ScalarField, A: float = 1.0) -> VelocityField:
    from .spectral import perp_gradient
    return perp_gradient(psi).scaled(A)


def rescale(u: VelocityField, l: int) -> VelocityField:
    """v(x) = -l u(l x), computed by dilating the Fourier lattice index."""
    if l < 1:
        raise ConfigurationError("rescale factor must be >= 1")
    grid = u.grid
    comps = []
    for c in u.components:
        hat = fft(grid, c.values)
        nz = np.abs(hat) > 1e-14 * max(np.abs(hat).max(), 1e-300)
        ks = [np.broadcast_to(k, grid.shape)[nz] for k in grid.wavenumbers]
        if any(np.any(np.abs(l * k) >= grid.n // 2) for k in ks):
            raise ConfigurationError(f"rescale by {l} aliases on an n={grid.n} grid")
        out = np.zeros(grid.shape, dtype=complex)
        out[tuple((l * k) % grid.n for k in ks)] = -l * hat[nz]
        comps.append(ifft(grid, out))
    return VelocityField(grid, tuple(comps), u.incompressible)


def check_symmetry(u: VelocityField, coord: int) -> float:
    """Max over the grid of |u(R x) - R u(x)| for the reflection x_coord -> 1 - x_coord."""
    if not 0 <= coord < u.grid.dim:
        raise ConfigurationError(f"coordinate {coord} invalid for dim {u.grid.dim}")
    idx = (-np.arange(u.grid.n)) % u.grid.n
    arr = u.array()
    reflected = np.take(arr, idx, axis=coord + 1)
    image = arr.copy()
    image[coord] *= -1
    return float(np.sqrt(((reflected - image) ** 2).sum(axis=0)).max())


def first_integral_probe(m: int, s: float, grid: Grid | None = None,
                         convention=NormConvention.PHYSICAL) -> float:
    """Sobolev norm of the normalized stream function of the m-cell flow.

    The stream function is a first integral, so this probes how large the
    homogeneous norm of a zero-eigenvalue eigenfunction of u.grad can be.
    """
    grid = grid or Grid(max(16, 8 * m))
    _require_resolved(grid, m)
    x, y = grid.coords
    psi = ScalarField(grid, np.sin(TWO_PI * m * x) * np.sin(TWO_PI * m * y))
    phi = ScalarField(grid, psi.values / l2_norm(psi))
    return hs_norm(phi, s, convention)


def liouvillean_field(F: ScalarField, rotation: float) -> VelocityField:
    """(rotation / F, 1 / F); not incompressible in general and flagged as such."""
    if F.grid.dim != 2:
        raise ConfigurationError("liouvillean field is two-dimensional")
    if F.values.min() <= 0:
        raise ValueError(f"F must be strictly positive, min F = {F.values.min():.3e}")
    return VelocityField(F.grid, (rotation / F.values, 1.0 / F.values), incompressible=False)


def validate_incompressible(u: VelocityField, rtol: float = 1e-10) -> None:
    """Raise if ``u`` is not mean-zero and divergence-free to ``rtol`` (relative to its size)."""
    if not u.incompressible:
        return
    scale = max(u.sup_norm(), 1e-300)
    grid = u.grid
    div = np.abs(divergence(u).coeffs).max()
    means = [abs(c.mean()) for c in u.components]
    if max(means) > rtol * scale:
        raise ConfigurationError(f"velocity not mean-zero (max |mean| = {max(means):.2e})")
    if div > rtol * scale * TWO_PI * grid.n:
        raise ConfigurationError(f"velocity not divergence-free (max |div_hat| = {div:.2e})")


def build_flow(spec: FlowSpec, grid: Grid) -> VelocityField:
    if spec.kind == "none":
        u = VelocityField.zero(grid)
    elif spec.kind == "cellular":
        u = cellular(spec.cells, spec.amplitude, grid)
    elif spec.kind == "shear":
        u = shear(spec.amplitude, grid)
    elif spec.kind == "from-stream":
        u = from_stream(spec.stream, spec.amplitude)
    else:
        raise ConfigurationError("liouvillean flows are built from an F field; "
                                 "use liouvillean_field")
    if spec.rescale > 1:
        u = rescale(u, spec.rescale)
    validate_incompressible(u)
    return u
