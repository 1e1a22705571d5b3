"""Truncated Fock-space operators on ``(l2)^{(x)N} (x) C^M``.

Basis ordering is row-major over ``(n_1, ..., n_N, s)``: the spin index is the
fastest-moving factor, mode ``N`` the next, mode ``1`` the slowest.  Ladder
operators use a hard cutoff, so ``a^dagger |d-1> = 0`` and the commutator
``[a, a^dagger]`` is wrong in the last row of every mode.  Anything that has to
hold on the infinite space is therefore checked on an interior block (see
:func:`interior_mask`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DENSE_THRESHOLD = 4096


@dataclass(frozen=True)
class SpaceSpec:
    mode_dims: tuple[int, ...]
    spin_dim: int = 1

    def __post_init__(self):
        dims = tuple(int(d) for d in self.mode_dims)
        object.__setattr__(self, "mode_dims", dims)
        if any(d < 2 for d in dims):
            raise ValueError(f"every mode needs dimension >= 2, got {dims}")
        if int(self.spin_dim) < 1:
            raise ValueError("spin_dim must be >= 1")
        object.__setattr__(self, "spin_dim", int(self.spin_dim))

    @property
    def n_modes(self) -> int:
        return len(self.mode_dims)

    @property
    def mode_space_dim(self) -> int:
        return int(np.prod(self.mode_dims, dtype=np.int64)) if self.mode_dims else 1

    @property
    def total_dim(self) -> int:
        return self.mode_space_dim * self.spin_dim

    def occupations(self) -> np.ndarray:
        """Array of shape ``(total_dim, n_modes)`` with the occupation of each basis state."""
        grids = np.indices(self.mode_dims + (self.spin_dim,)).reshape(self.n_modes + 1, -1)
        return grids[:-1].T

    def spin_index(self) -> np.ndarray:
        return np.tile(np.arange(self.spin_dim), self.mode_space_dim)

    def with_modes(self, mode_dims: Sequence[int]) -> "SpaceSpec":
        return SpaceSpec(tuple(mode_dims), self.spin_dim)


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """A matrix on a truncated space.  ``entries`` is dense or scipy-sparse."""

    space: SpaceSpec
    entries: object
    hermitian_hint: bool = False

    def __post_init__(self):
        n = self.space.total_dim
        if self.entries.shape != (n, n):
            raise ValueError(f"matrix shape {self.entries.shape} does not match total_dim {n}")
        if self.hermitian_hint and not is_hermitian(self.entries):
            raise ValueError("hermitian_hint set on a non-Hermitian matrix")

    @property
    def shape(self):
        return self.entries.shape

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.entries)

    def dense(self) -> np.ndarray:
        if self.is_sparse:
            return self.entries.toarray()
        return np.asarray(self.entries)

    def __array__(self, dtype=None, copy=None):
        arr = self.dense()
        return arr.astype(dtype) if dtype is not None else arr

    def dag(self) -> "OperatorMatrix":
        return OperatorMatrix(self.space, self.entries.conj().T, self.hermitian_hint)

    def _wrap(self, entries) -> "OperatorMatrix":
        return OperatorMatrix(self.space, entries)

    def _other(self, other):
        if isinstance(other, OperatorMatrix):
            if other.space != self.space:
                raise ValueError("operators live on different spaces")
            return other.entries
        return other

    def __add__(self, other):
        return self._wrap(self.entries + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self._wrap(self.entries - self._other(other))

    def __neg__(self):
        return self._wrap(-self.entries)

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            raise TypeError("use @ for operator products")
        return self._wrap(self.entries * scalar)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self._wrap(self.entries @ self._other(other))


@dataclass(frozen=True)
class PolyTerm:
    """``coeff (x) prod (a_k^dagger)^n (a_k)^m`` with factors applied left to right.

    ``factors`` holds ``(mode, dagger_power, plain_power)`` triples; ``coeff`` is a
    scalar or an ``M x M`` block acting on the spin factor.
    """

    coeff: object = 1.0
    factors: tuple[tuple[int, int, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        facs = tuple((int(k), int(n), int(m)) for k, n, m in self.factors)
        if any(n < 0 or m < 0 or k < 0 for k, n, m in facs):
            raise ValueError(f"negative mode index or power in {facs}")
        object.__setattr__(self, "factors", facs)

    @property
    def order(self) -> int:
        return sum(n + m for _, n, m in self.factors)


def _spin_block(coeff, spin_dim: int) -> np.ndarray:
    c = np.asarray(coeff, dtype=complex)
    if c.ndim == 0:
        return c * np.eye(spin_dim)
    if c.shape != (spin_dim, spin_dim):
        raise ValueError(f"coefficient block shape {c.shape} does not match spin dimension {spin_dim}")
    return c


def _embed(space: SpaceSpec, mode: int, local) -> sp.csr_matrix:
    """Kronecker-embed a single-mode matrix at ``mode``; identity elsewhere."""
    mats = [sp.identity(d, dtype=complex, format="csr") for d in space.mode_dims]
    mats[mode] = sp.csr_matrix(local, dtype=complex)
    mats.append(sp.identity(space.spin_dim, dtype=complex, format="csr"))
    return reduce(lambda x, y: sp.kron(x, y, format="csr"), mats)


def _check_mode(space: SpaceSpec, mode: int):
    if not 0 <= mode < space.n_modes:
        raise IndexError(f"mode {mode} out of range for {space.n_modes} mode(s)")


def local_annihilation(d: int) -> sp.csr_matrix:
    return sp.diags(np.sqrt(np.arange(1, d, dtype=float)), 1, shape=(d, d), format="csr", dtype=complex)


def build_ladder(space: SpaceSpec, mode: int) -> tuple[OperatorMatrix, OperatorMatrix]:
    """Annihilation and creation operators of ``mode`` as sparse matrices."""
    _check_mode(space, mode)
    a = _embed(space, mode, local_annihilation(space.mode_dims[mode]))
    return OperatorMatrix(space, a), OperatorMatrix(space, a.conj().T.tocsr())


def number_operator(space: SpaceSpec, mode: int) -> OperatorMatrix:
    _check_mode(space, mode)
    n = space.occupations()[:, mode].astype(complex)
    return OperatorMatrix(space, sp.diags(n, format="csr"), hermitian_hint=True)


def spin_operator(space: SpaceSpec, block) -> OperatorMatrix:
    """``I_modes (x) block``."""
    b = _spin_block(block, space.spin_dim)
    return OperatorMatrix(space, sp.kron(sp.identity(space.mode_space_dim, format="csr"), b, format="csr"))


def identity(space: SpaceSpec) -> OperatorMatrix:
    return OperatorMatrix(space, sp.identity(space.total_dim, dtype=complex, format="csr"), hermitian_hint=True)


def _term_matrix(space: SpaceSpec, term: PolyTerm, ladders) -> sp.csr_matrix:
    out = sp.kron(sp.identity(space.mode_space_dim, format="csr"),
                  _spin_block(term.coeff, space.spin_dim), format="csr")
    for mode, n_dag, n_plain in term.factors:
        _check_mode(space, mode)
        a, ad = ladders[mode]
        for _ in range(n_dag):
            out = out @ ad
        for _ in range(n_plain):
            out = out @ a
    return out


def eval_polynomial(space: SpaceSpec, terms: Iterable[PolyTerm], hermitize: bool = False,
                    dense_threshold: int = DENSE_THRESHOLD) -> OperatorMatrix:
    """Sum of the terms, plus the Hermitian adjoint of that sum when ``hermitize`` is set."""
    ladders = {}
    for k in range(space.n_modes):
        a, ad = build_ladder(space, k)
        ladders[k] = (a.entries, ad.entries)
    total = sp.csr_matrix((space.total_dim, space.total_dim), dtype=complex)
    for term in terms:
        total = total + _term_matrix(space, term, ladders)
    if hermitize:
        total = total + total.conj().T
    entries = total.toarray() if space.total_dim <= dense_threshold else total.tocsr()
    return OperatorMatrix(space, entries, hermitian_hint=hermitize)


def diagonal_lambda(space: SpaceSpec, c_lambda: float, exponents: Sequence[int]) -> OperatorMatrix:
    """``c (I + sum_k (a_k^dagger a_k)^{m_k})`` as a sparse diagonal matrix."""
    if c_lambda <= 0:
        raise ValueError("c_lambda must be positive")
    exps = np.broadcast_to(np.asarray(exponents, dtype=int), (space.n_modes,))
    if np.any(exps < 1):
        raise ValueError("exponents must be >= 1")
    occ = space.occupations().astype(float)
    diag = c_lambda * (1.0 + (occ ** exps).sum(axis=1))
    return OperatorMatrix(space, sp.diags(diag.astype(complex), format="csr"), hermitian_hint=True)


def is_hermitian(A, rtol: float = 1e-12) -> bool:
    if sp.issparse(A):
        diff = abs(A - A.conj().T).max() if A.nnz else 0.0
        scale = abs(A).max() if A.nnz else 0.0
    else:
        A = np.asarray(A)
        diff = np.abs(A - A.conj().T).max(initial=0.0)
        scale = np.abs(A).max(initial=0.0)
    return diff <= rtol * (1.0 + scale)


def as_dense(A) -> np.ndarray:
    if isinstance(A, OperatorMatrix):
        return A.dense()
    if sp.issparse(A):
        return A.toarray()
    return np.asarray(A)


def fractional_power(A, eps: float, tol: float = 1e-10):
    """Spectral power ``A^eps`` of a positive semidefinite Hermitian matrix."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    M = as_dense(A).astype(complex)
    if not is_hermitian(M):
        raise ValueError("fractional_power needs a Hermitian matrix")
    M = 0.5 * (M + M.conj().T)
    w, V = np.linalg.eigh(M)
    if w.size and w.min() < -tol:
        raise ValueError(f"matrix has eigenvalue {w.min():.3e} below -{tol:g}")
    R = (V * np.clip(w, 0.0, None) ** eps) @ V.conj().T
    R = 0.5 * (R + R.conj().T)
    if isinstance(A, OperatorMatrix):
        return OperatorMatrix(A.space, R, hermitian_hint=True)
    return R


def interior_mask(space: SpaceSpec, buffer: int) -> np.ndarray:
    """Boolean mask of basis states whose every occupation is below ``d_k - buffer``."""
    if buffer < 0:
        raise ValueError("buffer must be nonnegative")
    if any(buffer >= d for d in space.mode_dims):
        raise ValueError(f"buffer {buffer} leaves no interior in {space.mode_dims}")
    occ = space.occupations()
    limits = np.asarray(space.mode_dims) - buffer
    return np.all(occ < limits, axis=1)


def boundary_mask(space: SpaceSpec, buffer: int) -> np.ndarray:
    return ~interior_mask(space, buffer)


def basis_index(space: SpaceSpec, occupation: Sequence[int], spin: int = 0) -> int:
    idx = np.ravel_multi_index(tuple(occupation) + (spin,), space.mode_dims + (space.spin_dim,))
    return int(idx)


def basis_vector(space: SpaceSpec, occupation: Sequence[int], spin: int = 0) -> np.ndarray:
    v = np.zeros(space.total_dim, dtype=complex)
    v[basis_index(space, occupation, spin)] = 1.0
    return v
