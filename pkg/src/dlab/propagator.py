"""Exact semigroups for autonomous linear transport-dissipation operators.

For a velocity with few Fourier modes (cellular flows, shears, their rescalings)
the operator ``-u.grad + diag(symbol)`` restricted to the dealiased modes couples
each wavenumber only to a sparse set of neighbours.  Its graph splits into
connected components (cosets of the lattice generated by the velocity modes),
so the matrix exponential is a batch of small dense exponentials.  Each block is
diagonalized once; ``exp(t L)`` for any ``t`` then costs two batched matmuls.
"""
from __future__ import annotations

import logging
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .spectral import TWO_PI, Grid, VelocityField, sparse_modes

logger = logging.getLogger(__name__)

# eigenvector condition number above which a block falls back to expm
_COND_LIMIT = 1e8


class BlockTooLarge(RuntimeError):
    """The velocity couples too many modes for dense block exponentials."""


def dissipation_symbol(grid: Grid, gamma: float, order: float) -> np.ndarray:
    """-gamma (2 pi |n|)^(2 order) over the spectral array (0 at the mean)."""
    sym = -gamma * (TWO_PI**2 * grid.k2) ** order
    sym[grid.k2 == 0] = 0.0
    return sym


def velocity_modes(u: VelocityField, rel_tol: float = 1e-12):
    """Union of the sparse Fourier supports of the components.

    Returns ``(Q, C)``: lattice indices (M, dim) and coefficients (M, dim).
    """
    grid = u.grid
    table = {}
    for j, comp in enumerate(u.components):
        K, c = sparse_modes(comp, rel_tol)
        for k, v in zip(map(tuple, K), c):
            table.setdefault(k, np.zeros(grid.dim, dtype=complex))[j] = v
    if not table:
        return np.zeros((0, grid.dim), dtype=np.int64), np.zeros((0, grid.dim), dtype=complex)
    keys = sorted(table)
    return np.array(keys, dtype=np.int64), np.array([table[k] for k in keys])


def advection_matrix(grid: Grid, u: VelocityField | None):
    """Sparse matrix of ``-u.grad`` on the dealiased nonzero modes.

    Returns ``(flat, A, Q)``: flat indices of the modes into the spectral array,
    the CSR matrix acting on coefficient vectors ordered like ``flat``, and the
    velocity's Fourier support.
    """
    mask = grid.dealias_mask & (grid.k2 > 0)
    flat = np.flatnonzero(mask.ravel())
    ks = np.stack([np.broadcast_to(k, grid.shape).ravel()[flat] for k in grid.wavenumbers], 1)
    if u is not None:
        Q, C = velocity_modes(u)
    else:
        Q, C = np.zeros((0, grid.dim), dtype=np.int64), np.zeros((0, grid.dim), dtype=complex)
    lookup = -np.ones(grid.n**grid.dim, dtype=np.int64)
    lookup[flat] = np.arange(flat.size)
    rows, cols, vals = [], [], []
    kmax = grid.n // 3
    for q, c in zip(Q, C):
        tgt = ks + q
        ok = np.all(np.abs(tgt) <= kmax, axis=1)
        tgt_flat = np.ravel_multi_index(tuple((tgt[ok] % grid.n).T), grid.shape)
        r = lookup[tgt_flat]
        keep = r >= 0
        src = np.flatnonzero(ok)[keep]
        rows.append(r[keep])
        cols.append(src)
        vals.append(-(TWO_PI * 1j) * (ks[src] @ c))
    nmodes = flat.size
    if rows:
        A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nmodes, nmodes)).tocsr()
        A.sum_duplicates()
    else:
        A = sp.csr_matrix((nmodes, nmodes), dtype=complex)
    return flat, A, Q


class LinearPropagator:
    """``exp(t L)`` for ``L = -u.grad + diag(symbol)`` on the dealiased modes.

    Modes outside the 2/3 band, the mean, and modes the velocity leaves uncoupled
    evolve by ``exp(t symbol)`` alone.  This matches a pseudo-spectral scheme whose
    advection products are dealiased.

    Parameters
    ----------
    u : VelocityField or None
        Divergence-free velocity; ``None`` means no advection.
    symbol : ndarray
        Diagonal generator over the full spectral array, e.g.
        :func:`dissipation_symbol`.
    max_block : int
        Largest coupled block accepted; bigger ones raise :class:`BlockTooLarge`.
    """

    def __init__(self, grid: Grid, u: VelocityField | None, symbol: np.ndarray,
                 max_block: int = 2500):
        self.grid = grid
        self.symbol = np.asarray(symbol)
        flat, A, Q = advection_matrix(grid, u)
        self.velocity_support = Q
        nmodes = flat.size
        lookup = -np.ones(grid.n**grid.dim, dtype=np.int64)
        lookup[flat] = np.arange(nmodes)
        pattern = (abs(A) + abs(A.T)) > 0
        ncomp, labels = connected_components(pattern, directed=False)
        sizes = np.bincount(labels, minlength=ncomp)
        big = np.flatnonzero(sizes > 1)
        if big.size and sizes[big].max() > max_block:
            raise BlockTooLarge(f"coupled block of {sizes[big].max()} modes exceeds {max_block}")

        self.block_modes = [flat[labels == b] for b in big]
        bs = max((len(m) for m in self.block_modes), default=0)
        nb = len(self.block_modes)
        self.block_size = bs
        self.index = np.zeros((nb, bs), dtype=np.int64)
        self.valid = np.zeros((nb, bs), dtype=bool)
        self.w = np.full((nb, bs), -np.inf, dtype=complex)
        self.V = np.zeros((nb, bs, bs), dtype=complex)
        self.Vinv = np.zeros((nb, bs, bs), dtype=complex)
        self._dense = {}
        sym_flat = self.symbol.ravel()
        in_block = np.zeros(grid.n**grid.dim, dtype=bool)
        for b, modes in enumerate(self.block_modes):
            loc = lookup[modes]
            L = A[loc][:, loc].toarray() + np.diag(sym_flat[modes])
            s = len(modes)
            self.index[b, :s] = modes
            self.valid[b, :s] = True
            in_block[modes] = True
            w, V = np.linalg.eig(L)
            cond = np.linalg.cond(V)
            if not np.isfinite(cond) or cond > _COND_LIMIT:
                logger.info("block %d (size %d) ill-conditioned (cond %.1e); using expm", b, s, cond)
                self._dense[b] = L
                continue
            self.w[b, :s] = w
            self.V[b, :s, :s] = V
            self.Vinv[b, :s, :s] = np.linalg.inv(V)
            if s < bs:
                idx = np.arange(s, bs)
                self.V[b, idx, idx] = 1.0
                self.Vinv[b, idx, idx] = 1.0
        self.diag_modes = ~in_block.reshape(grid.shape)
        self.nblocks = nb

    @property
    def coupled(self) -> bool:
        return self.nblocks > 0

    @lru_cache(maxsize=16)
    def semigroup(self, t: float) -> "Semigroup":
        return Semigroup(self, float(t))


class Semigroup:
    """``exp(t L)`` at a fixed ``t``; apply with :meth:`apply`."""

    def __init__(self, prop: LinearPropagator, t: float):
        self.prop = prop
        self.t = t
        with np.errstate(over="ignore", invalid="ignore"):
            et = np.where(np.isfinite(prop.w), np.exp(t * prop.w), 0.0)
        E = np.matmul(prop.V * et[:, None, :], prop.Vinv) if prop.nblocks else prop.V
        for b, L in prop._dense.items():
            s = prop.valid[b].sum()
            E[b] = 0.0
            E[b, :s, :s] = scipy.linalg.expm(t * L)
        E[~prop.valid] = 0.0
        self.E = E
        self.diag = np.exp(t * prop.symbol)

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        prop = self.prop
        out = self.diag * coeffs
        if prop.nblocks:
            flat_in = coeffs.ravel()
            x = np.where(prop.valid, flat_in[prop.index], 0.0)
            y = np.matmul(self.E, x[..., None])[..., 0]
            out = out.ravel()
            out[prop.index[prop.valid]] = y[prop.valid]
            out = out.reshape(coeffs.shape)
        return out

    def apply_adjoint(self, coeffs: np.ndarray) -> np.ndarray:
        """Hilbert adjoint on coefficient arrays (L^2 inner product)."""
        prop = self.prop
        out = np.conj(self.diag) * coeffs
        if prop.nblocks:
            x = np.where(prop.valid, coeffs.ravel()[prop.index], 0.0)
            y = np.matmul(np.conj(np.swapaxes(self.E, 1, 2)), x[..., None])[..., 0]
            out = out.ravel()
            out[prop.index[prop.valid]] = y[prop.valid]
            out = out.reshape(coeffs.shape)
        return out

    def norm(self, exclude_mean: bool = True) -> float:
        """Operator 2-norm of the semigroup on (mean-free) L^2."""
        prop = self.prop
        sel = prop.diag_modes.copy()
        if exclude_mean:
            sel &= prop.grid.k2 > 0
        best = float(np.abs(self.diag[sel]).max()) if sel.any() else 0.0
        if prop.nblocks:
            # largest singular value per block from the Hermitian Gram matrix
            gram = np.matmul(np.conj(np.swapaxes(self.E, 1, 2)), self.E)
            top = np.linalg.eigvalsh(gram)[:, -1]
            best = max(best, float(np.sqrt(max(top.max(), 0.0))))
        return best
