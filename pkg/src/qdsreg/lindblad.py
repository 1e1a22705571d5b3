"""Lindblad-type generators ``L(B) = Phi(B) - G^dagger B - B G`` on a truncation.

The completely positive part is written in Kraus form ``Phi(B) = sum_k L_k^dagger B L_k``
and ``G = Phi(I)/2 + iH``.  The same ``L_k`` are the jump operators of the
Schroedinger-picture action ``L_*(rho) = sum_k L_k rho L_k^dagger - G rho - rho G^dagger``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .fock_ops import (OperatorMatrix, PolyTerm, SpaceSpec, as_dense, eval_polynomial,
                       is_hermitian)

ORACLE_CAP = 64


@dataclass(frozen=True)
class KrausSpec:
    """One Kraus operator ``sqrt(coeff) * sum(words)``.

    ``coeff`` is a nonnegative scalar or a PSD ``M x M`` block acting on the spin
    factor; it is materialized through its PSD square root.
    """

    words: tuple[PolyTerm, ...]
    coeff: object = 1.0
    label: str = ""

    def __post_init__(self):
        words = (self.words,) if isinstance(self.words, PolyTerm) else tuple(self.words)
        object.__setattr__(self, "words", words)


@dataclass(frozen=True)
class CPMapSpec:
    kraus_terms: tuple[KrausSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kraus_terms", tuple(self.kraus_terms))


def psd_sqrt(coeff, spin_dim: int, tol: float = 1e-12) -> np.ndarray:
    c = np.asarray(coeff, dtype=complex)
    if c.ndim == 0:
        if abs(c.imag) > tol or c.real < -tol:
            raise ValueError(f"Kraus coefficient {coeff!r} is not a nonnegative scalar")
        return np.sqrt(max(c.real, 0.0)) * np.eye(spin_dim)
    if c.shape != (spin_dim, spin_dim):
        raise ValueError(f"Kraus coefficient block has shape {c.shape}, spin dimension is {spin_dim}")
    if not is_hermitian(c):
        raise ValueError("Kraus coefficient block is not Hermitian")
    w, V = np.linalg.eigh(0.5 * (c + c.conj().T))
    if w.min() < -tol * (1 + abs(w).max()):
        raise ValueError(f"Kraus coefficient block is not PSD (min eigenvalue {w.min():.3e})")
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.conj().T


def _mul(A, B):
    """Product that returns a dense ndarray whenever either factor is dense."""
    out = A @ B
    if sp.issparse(out) and not (sp.issparse(A) and sp.issparse(B)):
        out = out.toarray()
    return out


@dataclass(frozen=True, eq=False)
class LindbladGenerator:
    space: SpaceSpec
    kraus: tuple
    H: OperatorMatrix
    G: object
    phi_of_identity: np.ndarray
    labels: tuple[str, ...] = field(default_factory=tuple)

    @property
    def dim(self) -> int:
        return self.space.total_dim

    @property
    def G_dense(self) -> np.ndarray:
        return as_dense(self.G)

    def phi(self, X) -> np.ndarray:
        X = as_dense(X)
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for L in self.kraus:
            out += _mul(L.conj().T, _mul(X, L))
        return out

    def phi_dual(self, rho) -> np.ndarray:
        rho = as_dense(rho)
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for L in self.kraus:
            out += _mul(L, _mul(rho, L.conj().T))
        return out

    def with_parts(self, kraus=None, G=None) -> "LindbladGenerator":
        """Generator with replaced Kraus list and/or drift; ``H`` is recomputed from ``G``."""
        kraus = self.kraus if kraus is None else tuple(kraus)
        phi_I = _phi_identity(kraus, self.dim)
        if G is None:
            G = self.G
        Gd = as_dense(G)
        H = (Gd - Gd.conj().T) / 2j
        H = 0.5 * (H + H.conj().T)
        return LindbladGenerator(self.space, kraus, OperatorMatrix(self.space, H, hermitian_hint=True),
                                 G, phi_I, self.labels)


def _phi_identity(kraus, n):
    out = sp.csr_matrix((n, n), dtype=complex)
    for L in kraus:
        out = out + sp.csr_matrix(L).conj().T @ sp.csr_matrix(L)
    out = 0.5 * (out + out.conj().T)
    return out.toarray() if n <= 4096 else out.tocsr()


def materialize_kraus(space: SpaceSpec, cp: CPMapSpec) -> list:
    mats = []
    for term in cp.kraus_terms:
        root = psd_sqrt(term.coeff, space.spin_dim)
        word = eval_polynomial(space, term.words, dense_threshold=0).entries
        spin = sp.kron(sp.identity(space.mode_space_dim, format="csr"), sp.csr_matrix(root), format="csr")
        mats.append((spin @ word).tocsr())
    return mats


def from_matrices(space: SpaceSpec, kraus: Sequence, H, labels: Sequence[str] = ()) -> LindbladGenerator:
    """Assemble from already materialized Kraus matrices and Hamiltonian."""
    n = space.total_dim
    kraus = tuple(sp.csr_matrix(L, dtype=complex) for L in kraus)
    for L in kraus:
        if L.shape != (n, n):
            raise ValueError(f"Kraus matrix shape {L.shape} does not match total_dim {n}")
    if H is None:
        H = np.zeros((n, n), dtype=complex)
    if not isinstance(H, OperatorMatrix):
        H = OperatorMatrix(space, sp.csr_matrix(H, dtype=complex) if sp.issparse(H) else np.asarray(H, dtype=complex))
    H = OperatorMatrix(space, H.entries, hermitian_hint=True)
    phi_I = _phi_identity(kraus, n)
    # dense drift at desk scale, sparse above the polynomial threshold
    if sp.issparse(H.entries) and n > 4096:
        G = (0.5 * sp.csr_matrix(phi_I) + 1j * H.entries).tocsr()
    else:
        G = 0.5 * phi_I + 1j * as_dense(H.entries)
    diff = G + G.conj().T - phi_I
    dev = abs(diff).max() if sp.issparse(diff) else np.abs(diff).max(initial=0.0)
    scale = abs(phi_I).max() if sp.issparse(phi_I) else np.abs(phi_I).max(initial=0.0)
    if dev > 1e-12 * (1 + scale):
        raise ValueError(f"compatibility identity violated: max |G + G^dagger - Phi(I)| = {dev:.3e}")
    return LindbladGenerator(space, kraus, H, G, phi_I, tuple(labels))


def assemble(space: SpaceSpec, cp: CPMapSpec, h_terms: Sequence[PolyTerm], hermitize: bool = True) -> LindbladGenerator:
    kraus = materialize_kraus(space, cp)
    H = eval_polynomial(space, h_terms, hermitize=hermitize)
    if not hermitize and not is_hermitian(H.entries):
        raise ValueError("Hamiltonian terms do not form a Hermitian matrix; set hermitize")
    return from_matrices(space, kraus, H, [k.label for k in cp.kraus_terms])


def zero_generator(space: SpaceSpec) -> LindbladGenerator:
    return from_matrices(space, [], None)


def _check_shape(L: LindbladGenerator, X):
    if X.shape != (L.dim, L.dim):
        raise ValueError(f"operand shape {X.shape} does not match generator dimension {L.dim}")


def heisenberg_apply(L: LindbladGenerator, X) -> np.ndarray:
    X = as_dense(X)
    _check_shape(L, X)
    G = L.G
    return L.phi(X) - _mul(G.conj().T, X) - _mul(X, G)


def predual_apply(L: LindbladGenerator, rho) -> np.ndarray:
    rho = as_dense(rho)
    _check_shape(L, rho)
    G = L.G
    return L.phi_dual(rho) - _mul(G, rho) - _mul(rho, G.conj().T)


def superoperator_matrix(L: LindbladGenerator, picture: str = "heisenberg", cap: int = ORACLE_CAP) -> np.ndarray:
    """Column-stacking matrix ``S`` with ``vec(L(X)) = S vec(X)``."""
    n = L.dim
    if n > cap:
        raise ValueError(f"total_dim {n} exceeds the oracle cap {cap}")
    G = L.G_dense
    Id = np.eye(n)
    S = np.zeros((n * n, n * n), dtype=complex)
    if picture == "heisenberg":
        for K in L.kraus:
            K = as_dense(K)
            S += np.kron(K.T, K.conj().T)
        S -= np.kron(Id, G.conj().T) + np.kron(G.T, Id)
    elif picture == "predual":
        for K in L.kraus:
            K = as_dense(K)
            S += np.kron(K.conj(), K)
        S -= np.kron(Id, G) + np.kron(G.conj(), Id)
    else:
        raise ValueError(f"unknown picture {picture!r}")
    return S


def vec(X) -> np.ndarray:
    return np.asarray(X).reshape(-1, order="F")


def unvec(v, n: int) -> np.ndarray:
    return np.asarray(v).reshape(n, n, order="F")


class InteractionFrame:
    """Eigenbasis of a Hermitian ``H_int`` reused for ``U_t = exp(i t H_int)`` at any t."""

    def __init__(self, H_int):
        Hm = as_dense(H_int).astype(complex)
        if not is_hermitian(Hm, rtol=1e-10):
            raise ValueError("H_int must be Hermitian")
        self.w, self.V = np.linalg.eigh(0.5 * (Hm + Hm.conj().T))

    def unitary(self, t: float) -> np.ndarray:
        return (self.V * np.exp(1j * t * self.w)) @ self.V.conj().T


def interaction_picture(L: LindbladGenerator, H_int, t: float, G0=None, frame: InteractionFrame | None = None
                        ) -> LindbladGenerator:
    """Time-t generator with Kraus ``U^dagger L_k U`` and drift ``U^dagger G0 U``, ``U = exp(i t H_int)``.

    ``G0`` defaults to the generator's own drift.  The returned generator satisfies
    ``L_t(X) = U^dagger L0(U X U^dagger) U`` where ``L0`` uses ``G0``.
    """
    frame = frame or InteractionFrame(H_int)
    G0 = L.G_dense if G0 is None else as_dense(G0)
    if t == 0:
        return L if G0 is None or np.array_equal(G0, L.G_dense) else L.with_parts(G=G0)
    U = frame.unitary(t)
    Ud = U.conj().T
    kraus = [sp.csr_matrix(Ud @ as_dense(K) @ U) for K in L.kraus]
    return L.with_parts(kraus=kraus, G=Ud @ G0 @ U)


def diagonal_block(L: LindbladGenerator, spin_index: int) -> LindbladGenerator:
    """Compression to the ``spin_index`` block of the spin factor.

    Kraus operators are compressed by ``P L P`` with ``P`` the block projection;
    this is the reduced generator acting on block-diagonal observables whenever
    each Kraus operator maps every spin block into a single block.
    """
    space = L.space
    sel = np.flatnonzero(space.spin_index() == spin_index)
    sub = SpaceSpec(space.mode_dims, 1)
    kraus = []
    for K in L.kraus:
        Kc = sp.csr_matrix(K)[sel][:, sel]
        if Kc.nnz:
            kraus.append(Kc)
    Hd = as_dense(L.H)[np.ix_(sel, sel)] if not L.H.is_sparse else L.H.entries[sel][:, sel]
    return from_matrices(sub, kraus, Hd)
