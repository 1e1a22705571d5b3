"""Finite-truncation certificates for regularity and witnesses of non-unitality.

Every ``X <= Y`` test is evaluated on the interior block of the truncation, the
basis states whose occupations stay at least ``K`` below every cutoff.  A pass is
a necessary-condition check at that truncation and is never a proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .fock_ops import (OperatorMatrix, PolyTerm, SpaceSpec, as_dense, eval_polynomial,
                       fractional_power, interior_mask, is_hermitian)
from .lindblad import InteractionFrame, LindbladGenerator, heisenberg_apply, interaction_picture
from .minimal_semigroup import q_epsilon

TOL = 1e-9
HEADROOM = 1e-6
EPS_SCAN = (0.25, 0.5, 0.75)
RESIDUAL_THRESHOLD = 1e-3
BOUNDARY_THRESHOLD = 1e-3
MIN_OVERLAP = 0.9


@dataclass
class CertificateReport:
    kind: str
    passed: bool
    margin: float
    constants: dict = field(default_factory=dict)
    interior_buffer: int = 0
    truncation: SpaceSpec | None = None
    details: str = ""
    checks: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"kind: {self.kind}", f"passed: {str(self.passed).lower()}", f"margin: {self.margin:.17g}",
                 f"interior_buffer: {self.interior_buffer}"]
        if self.truncation is not None:
            dims = "x".join(str(d) for d in self.truncation.mode_dims)
            lines.append(f"truncation: {dims} spin={self.truncation.spin_dim}")
        for k in sorted(self.constants):
            lines.append(f"constant.{k}: {self.constants[k]:.17g}")
        for k in sorted(self.checks):
            lines.append(f"check.{k}: {self.checks[k]:.17g}")
        if self.details:
            lines.append(f"details: {self.details}")
        return "\n".join(lines)

    CSV_FIELDS = ("kind", "passed", "margin", "interior_buffer", "mode_dims", "spin_dim",
                  "c", "mu", "nu", "eps", "c1", "c2", "c0", "lambda", "details")

    def csv_row(self) -> dict:
        row = {"kind": self.kind, "passed": int(bool(self.passed)), "margin": f"{self.margin:.17g}",
               "interior_buffer": self.interior_buffer,
               "mode_dims": " ".join(map(str, self.truncation.mode_dims)) if self.truncation else "",
               "spin_dim": self.truncation.spin_dim if self.truncation else "",
               "details": self.details}
        for k in ("c", "mu", "nu", "eps", "c1", "c2", "c0", "lambda"):
            v = self.constants.get(k)
            row[k] = "" if v is None else f"{v:.17g}"
        return row


def _space_of(*ops, space=None) -> SpaceSpec:
    if space is not None:
        return space
    for op in ops:
        if isinstance(op, OperatorMatrix):
            return op.space
        if isinstance(op, LindbladGenerator):
            return op.space
    raise ValueError("a SpaceSpec is needed when plain arrays are passed")


def _herm(X):
    return 0.5 * (X + X.conj().T)


def interior_compress(X, mask) -> np.ndarray:
    X = as_dense(X)
    return X[np.ix_(mask, mask)]


def min_eig(X) -> float:
    X = _herm(as_dense(X))
    if X.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(X)[0])


def check_operator_inequality(A, B, buffer: int, space: SpaceSpec | None = None, tol: float = TOL,
                              kind: str = "inequality") -> CertificateReport:
    """``A <= B`` on the interior block; margin is the smallest eigenvalue of ``B - A`` there."""
    space = _space_of(A, B, space=space)
    mask = interior_mask(space, buffer)
    A, B = as_dense(A), as_dense(B)
    if A.shape != B.shape or A.shape[0] != space.total_dim:
        raise ValueError("operand shapes do not match the space")
    margin = min_eig(interior_compress(B - A, mask))
    return CertificateReport(kind, margin >= -tol, margin, interior_buffer=buffer, truncation=space)


def generalized_max_ratio(A, Lam, mask=None) -> float:
    """Smallest ``c`` with ``A <= c Lam`` on the masked block (``Lam`` positive definite there)."""
    A, Lam = _herm(as_dense(A)), _herm(as_dense(Lam))
    if mask is not None:
        A, Lam = A[np.ix_(mask, mask)], Lam[np.ix_(mask, mask)]
    if A.size == 0:
        return 0.0
    d = np.diag(Lam).real
    if np.count_nonzero(Lam - np.diag(np.diag(Lam))) == 0:
        if d.min() <= 0:
            raise ValueError("reference operator is not positive definite on the block")
        s = 1.0 / np.sqrt(d)
        M = s[:, None] * A * s[None, :]
    else:
        C = np.linalg.cholesky(Lam)
        Ci = sla.solve_triangular(C, np.eye(len(C)), lower=True)
        M = Ci @ A @ Ci.conj().T
    return float(np.linalg.eigvalsh(_herm(M))[-1])


def _with_headroom(c: float) -> float:
    return c + HEADROOM * (1.0 + abs(c))


def reference_precondition(L: LindbladGenerator, Lam, buffer: int):
    """Check ``Phi(I) <= Lam``; where ``I <= Phi(I)`` fails, check ``Phi(I) + I <= Lam`` instead."""
    mask = interior_mask(L.space, buffer)
    phi_I = as_dense(L.phi_of_identity)
    Lam = as_dense(Lam)
    strict = min_eig(interior_compress(phi_I - np.eye(L.dim), mask)) >= -TOL
    target = phi_I if strict else phi_I + np.eye(L.dim)
    margin = min_eig(interior_compress(Lam - target, mask))
    form = "Phi(I) <= Lambda" if strict else "Phi(I) + I <= Lambda"
    return margin, form


def check_reference(L: LindbladGenerator, Lam, c: float | None = None, buffer: int = 0,
                    tol: float = TOL) -> CertificateReport:
    """``L(Lam) <= c Lam`` on the interior block; smallest feasible ``c`` when ``c`` is None."""
    Lam_d = as_dense(Lam)
    if not is_hermitian(Lam_d):
        raise ValueError("reference operator must be Hermitian")
    mask = interior_mask(L.space, buffer)
    if min_eig(interior_compress(Lam_d, mask)) < 1 - tol:
        raise ValueError("reference operator must satisfy Lambda >= I on the interior block")
    pre_margin, form = reference_precondition(L, Lam_d, buffer)
    LL = heisenberg_apply(L, Lam_d)
    c_min = generalized_max_ratio(LL, Lam_d, mask)
    c_used = _with_headroom(c_min) if c is None else float(c)
    margin = min_eig(interior_compress(c_used * Lam_d - LL, mask))
    passed = margin >= -tol and pre_margin >= -tol
    details = f"precondition {form} margin {pre_margin:.6g}"
    if pre_margin < -tol:
        details += " (failed)"
    return CertificateReport("reference", passed, margin, {"c": c_used, "c_min": c_min}, buffer, L.space,
                             details, {"precondition": pre_margin})


def strip_hamiltonian(L: LindbladGenerator, H_keep) -> LindbladGenerator:
    """Same Kraus part, drift ``Phi(I)/2 + i H_keep``."""
    G = 0.5 * as_dense(L.phi_of_identity) + 1j * as_dense(H_keep)
    return L.with_parts(G=G)


@dataclass
class LambdaPairConstants:
    c: float
    mu: float
    nu: float
    eps: float
    c1: float
    c2: float

    @property
    def c0(self) -> float:
        return self.mu + (1 + self.mu) * self.nu

    @property
    def lam(self) -> float:
        return self.c0 * (self.c + self.c1 + self.mu * self.c2)

    def as_dict(self) -> dict:
        return {"c": self.c, "mu": self.mu, "nu": self.nu, "eps": self.eps, "c1": self.c1, "c2": self.c2,
                "c0": self.c0, "lambda": self.lam}


def _lambda_pair_once(L, Lam, H_sa, eps, given: dict, buffer: int, tol: float):
    space = L.space
    mask = interior_mask(space, buffer)
    full = np.ones(space.total_dim, dtype=bool)
    Lam = _herm(as_dense(Lam))
    H_sa = _herm(as_dense(H_sa))
    H_int = H_sa + Lam
    checks = {}
    checks["H_int_psd"] = min_eig(H_int)
    if checks["H_int_psd"] < -1e-10:
        return None, checks, f"H_int = H_sa + Lambda has eigenvalue {checks['H_int_psd']:.6g} < 0"
    H_eps = as_dense(fractional_power(H_int, eps))
    H_s = as_dense(L.H) - H_sa
    L0 = strip_hamiltonian(L, H_s)
    LL = heisenberg_apply(L0, Lam)
    # minimal feasible constants, then fixed values where the caller supplied them
    base = {
        "c": max(generalized_max_ratio(LL, Lam, mask), 0.0),
        "mu": max(abs(_gen_extreme(H_sa, H_eps, full, "max")), abs(_gen_extreme(H_sa, H_eps, full, "min")), 0.0),
        "nu": max(generalized_max_ratio(H_int, Lam, full), 0.0),
        "c1": max(generalized_max_ratio(L.phi(H_sa), Lam, mask), 0.0),
        "c2": max(generalized_max_ratio(L.phi(H_eps), Lam, mask), 0.0),
    }
    vals = {k: (float(given[k]) if given.get(k) is not None else _with_headroom(v)) for k, v in base.items()}
    consts = LambdaPairConstants(vals["c"], vals["mu"], vals["nu"], eps, vals["c1"], vals["c2"])
    checks["reference"] = min_eig(interior_compress(consts.c * Lam - LL, mask))
    checks["H_sa_upper"] = min_eig(consts.mu * H_eps - H_sa)
    checks["H_sa_lower"] = min_eig(H_sa + consts.mu * H_eps)
    checks["H_int_upper"] = min_eig(consts.nu * Lam - H_int)
    checks["phi_H_sa"] = min_eig(interior_compress(consts.c1 * Lam - L.phi(H_sa), mask))
    checks["phi_H_eps"] = min_eig(interior_compress(consts.c2 * Lam - L.phi(H_eps), mask))
    return consts, checks, ""


def _gen_extreme(A, B, mask, which):
    """Largest or smallest generalized eigenvalue of ``(A, B)`` with ``B`` positive definite."""
    if which == "max":
        return generalized_max_ratio(A, B, mask)
    return -generalized_max_ratio(-_herm(as_dense(A)), B, mask)


def check_lambda_pair(L: LindbladGenerator, Lam, H_sa, eps: float | None = None, mu=None, nu=None, c1=None,
                      c2=None, buffer: int = 0, c=None, tol: float = TOL) -> CertificateReport:
    """Both operator bounds on ``H_sa`` against ``H_int^eps``, ``0 <= H_int <= nu Lam`` and both bounds on ``Phi``.

    ``H_int = H_sa + Lam``.  The reference constant ``c`` is taken from the
    generator with Hamiltonian ``H - H_sa``.  Constants left as None are set to
    their smallest feasible values (plus a relative headroom of 1e-6).  With
    ``eps`` None the scan over ``(0.25, 0.5, 0.75)`` keeps the passing value with
    the smallest ``lambda``.  Inequalities involving the nonlocal ``H_int^eps`` or
    ``H_int`` itself are tested on the whole truncation, the rest on the interior.
    """
    given = {"c": c, "mu": mu, "nu": nu, "c1": c1, "c2": c2}
    eps_list = EPS_SCAN if eps is None else (float(eps),)
    best = None
    for e in eps_list:
        if not 0 < e < 1:
            raise ValueError("eps must lie in (0, 1)")
        consts, checks, why = _lambda_pair_once(L, Lam, H_sa, e, given, buffer, tol)
        if consts is None:
            rep = CertificateReport("lambda_pair", False, checks["H_int_psd"], {"eps": e}, buffer, L.space, why,
                                    checks)
        else:
            margin = min(checks.values())
            passed = margin >= -tol
            rep = CertificateReport("lambda_pair", passed, margin, consts.as_dict(), buffer, L.space,
                                    "all Lambda-pair inequalities hold" if passed else
                                    "failed: " + ", ".join(k for k, v in checks.items() if v < -tol), checks)
        if best is None or _better(rep, best):
            best = rep
    return best


def _better(rep, best) -> bool:
    if rep.passed != best.passed:
        return rep.passed
    if rep.passed:
        return rep.constants["lambda"] < best.constants["lambda"]
    return rep.margin > best.margin


def lambda_chain(L: LindbladGenerator, Lam, H_sa, lam: float, times=(0.0, 0.25, 0.5, 0.75, 1.0),
                 buffer: int = 0, tol: float = TOL) -> CertificateReport:
    """Check ``L_t(Lam) <= lam Lam`` in the interaction picture generated by ``H_int = H_sa + Lam``.

    ``L_t`` is the time-t generator with Kraus operators ``U^dagger L_k U`` and drift
    ``U^dagger G0 U``, ``G0 = Phi(I)/2 + i(H_s - Lam)``, ``U = exp(i t H_int)``.  The
    report also carries the bound on the shorter expression
    ``U^dagger (Phi(U Lam U^dagger) - G0^dagger Lam - Lam G0) U``, i.e. the same drift
    terms evaluated on ``Lam`` rather than on ``U Lam U^dagger``; the two differ by
    ``U^dagger i[U Lam U^dagger - Lam, Lam] U``.
    """
    Lam = _herm(as_dense(Lam))
    H_sa = _herm(as_dense(H_sa))
    H_s = as_dense(L.H) - H_sa
    mask = interior_mask(L.space, buffer)
    G0 = 0.5 * as_dense(L.phi_of_identity) + 1j * (H_s - Lam)
    frame = InteractionFrame(H_sa + Lam)
    margins, short = {}, {}
    for t in times:
        Lt = interaction_picture(L, None, t, G0=G0, frame=frame)
        margins[t] = min_eig(interior_compress(lam * Lam - heisenberg_apply(Lt, Lam), mask))
        U = frame.unitary(t)
        X = U @ Lam @ U.conj().T
        Q = U.conj().T @ (L.phi(X) - G0.conj().T @ Lam - Lam @ G0) @ U
        short[t] = min_eig(interior_compress(lam * Lam - Q, mask))
    margin = min(margins.values())
    checks = {f"t={t:g}": m for t, m in margins.items()}
    checks.update({f"short_form_t={t:g}": m for t, m in short.items()})
    details = ("interaction-picture bound holds at all sampled times" if margin >= -tol else
               "interaction-picture bound fails at t in {" +
               ", ".join(f"{t:g}" for t, m in margins.items() if m < -tol) + "}")
    details += f"; short-form margin min {min(short.values()):.6g}"
    return CertificateReport("lambda_chain", margin >= -tol, margin, {"lambda": lam}, buffer, L.space, details,
                             checks)


# ---------------------------------------------------------------------------
# deficiency search


@dataclass
class DeficiencyResult:
    residual: float
    vector: np.ndarray
    boundary_mass: float
    truncation_trend: list
    declared: bool = False
    buffer: int = 0
    overlaps: list = field(default_factory=list)

    def report(self) -> CertificateReport:
        dims, _ = self.truncation_trend[-1]
        return CertificateReport(
            "deficiency", bool(self.declared), self.residual,
            {"boundary_mass": self.boundary_mass}, self.buffer, None,
            ("deficiency direction found" if self.declared else "no deficiency direction") +
            "; trend " + ", ".join(f"{d}:{r:.3e}" for d, r in self.truncation_trend) +
            "; successive overlaps " + ", ".join(f"{o:.4f}" for o in self.overlaps),
            {f"overlap_{i}": o for i, o in enumerate(self.overlaps)})


def _deficiency_at(H, space: SpaceSpec, buffer: int):
    """Smallest eigenvalue of ``A^dagger A + P^dagger P`` over conserved sectors.

    ``A`` holds the interior rows of ``H + iI`` and ``P`` selects the boundary
    coordinates.  A unit vector in the deficiency subspace, restricted to the
    truncation, makes both terms small at once: it satisfies the interior rows and
    carries only its tail on the boundary.
    """
    Hs = sp.csr_matrix(as_dense(H) if not sp.issparse(H) else H)
    n = space.total_dim
    interior = interior_mask(space, buffer)
    pattern = (abs(Hs) + sp.identity(n, format="csr")).tocsr()
    ncomp, labels = connected_components(pattern, directed=False)
    best = (np.inf, None, None)
    for comp in range(ncomp):
        idx = np.flatnonzero(labels == comp)
        Hc = Hs[idx][:, idx].toarray()
        A = (Hc + 1j * np.eye(len(idx)))[interior[idx]]
        bdy = ~interior[idx]
        M = A.conj().T @ A + np.diag(bdy.astype(float))
        w, V = np.linalg.eigh(_herm(M))
        if w[0] < best[0]:
            v = np.zeros(n, dtype=complex)
            v[idx] = V[:, 0]
            best = (max(float(w[0]), 0.0), v, float(np.sum(np.abs(v[~interior]) ** 2)))
    return best


def _embed_vector(v, small: SpaceSpec, large: SpaceSpec) -> np.ndarray:
    occ = small.occupations()
    idx = np.ravel_multi_index(tuple(occ.T) + (small.spin_index(),), large.mode_dims + (large.spin_dim,))
    out = np.zeros(large.total_dim, dtype=complex)
    out[idx] = v
    return out


def deficiency_search(h_terms: Sequence[PolyTerm], dims: Sequence, buffer: int, n_modes: int = 1,
                      spin_dim: int = 1, hermitize: bool = True, residual_threshold: float = RESIDUAL_THRESHOLD,
                      boundary_threshold: float = BOUNDARY_THRESHOLD,
                      min_overlap: float = MIN_OVERLAP) -> DeficiencyResult:
    """Look for a unit ``psi`` with ``(H + i) psi = 0`` that stays away from the truncation edge.

    ``dims`` is an increasing sequence; an integer entry means that cutoff in every
    mode.  Deficiency is declared when the residual at the largest truncation is
    below ``residual_threshold``, the residuals decrease along ``dims``, the
    minimizer's boundary mass is below ``boundary_threshold``, and minimizers at
    successive truncations overlap by at least ``min_overlap``.  The last test
    rejects edge-localized near-solutions, which appear whenever the truncation
    cuts a conserved chain of an essentially self-adjoint operator and move
    outwards with the cutoff.
    """
    order = max((t.order for t in h_terms), default=0)
    if buffer < order:
        raise ValueError(f"buffer {buffer} is below the polynomial order {order}")
    trend, overlaps = [], []
    vec = None
    prev = None
    bmass = 1.0
    for d in dims:
        mode_dims = tuple(d) if np.ndim(d) else (int(d),) * n_modes
        space = SpaceSpec(mode_dims, spin_dim)
        H = eval_polynomial(space, h_terms, hermitize=hermitize, dense_threshold=0).entries
        res, vec, bmass = _deficiency_at(H, space, buffer)
        if prev is not None:
            overlaps.append(float(abs(np.vdot(_embed_vector(prev[1], prev[0], space), vec))))
        prev = (space, vec)
        trend.append((mode_dims if len(mode_dims) > 1 else mode_dims[0], res))
    residuals = [r for _, r in trend]
    decreasing = all(b < a for a, b in zip(residuals, residuals[1:]))
    stable = all(o >= min_overlap for o in overlaps)
    declared = residuals[-1] < residual_threshold and decreasing and bmass < boundary_threshold and stable
    return DeficiencyResult(residuals[-1], vec, bmass, trend, declared, buffer, overlaps)


# ---------------------------------------------------------------------------
# witnesses


def is_projection(P, tol: float = 1e-8) -> bool:
    P = as_dense(P)
    return is_hermitian(P, rtol=tol) and np.abs(P @ P - P).max(initial=0.0) <= tol


def classical_generator(L: LindbladGenerator) -> np.ndarray:
    """Matrix ``Omega`` with ``diag(L(diag f)) = Omega f`` (exact when L preserves diagonals)."""
    n = L.dim
    Om = np.zeros((n, n))
    for K in L.kraus:
        K2 = abs(sp.csr_matrix(K)).power(2).toarray()
        Om += K2.T
    Om -= np.diag(np.diag(as_dense(L.phi_of_identity)).real)
    return Om


def escape_witness(L: LindbladGenerator, lam: float, buffer: int) -> np.ndarray:
    """Bounded solution of the interior rows of ``(Omega - lam) f = 0``, returned as ``diag(f)/max f``.

    The free entries (one per undetermined direction of the interior system) are
    fixed to 1.  A bounded positive ``f`` exists exactly when the embedded jump
    chain escapes to infinity in finite time, in which case ``X = diag(f)/max f``
    satisfies ``L(X) = lam X`` on the interior block.
    """
    Om = classical_generator(L)
    n = L.dim
    mask = interior_mask(L.space, buffer)
    A = (Om - lam * np.eye(n))[mask]
    ns = sla.null_space(A)
    k = ns.shape[1]
    if k == 0:
        raise ValueError("interior system has no nontrivial solution")
    # pin the first k coordinates that the null space actually controls
    piv = sla.qr(ns.T, pivoting=True)[2][:k]
    coeff = np.linalg.solve(ns[piv], np.ones(k))
    f = (ns @ coeff).real
    if f.min() <= 0:
        raise ValueError("escape function is not positive; no witness of this form")
    return np.diag(f / f.max()).astype(complex)


def check_witness(L: LindbladGenerator, X, eps: float, buffer: int, t_cap: float | None = None,
                  q_steps: int = 128, tol: float = TOL) -> CertificateReport:
    """Non-unitality witness chain for a PSD contraction ``X``.

    For a projection the first link is the PSD condition
    ``Phi(X) - (Phi(I) X + X Phi(I))/2 + (2 - eps) X >= 0``.  For every input the
    chain continues with ``L(X) - eps X >= 0`` and the quadrature check
    ``Q_eps(X) - X >= -1e-6``, all on the interior block.  ``passed`` means the
    witness fired.
    """
    Xd = _herm(as_dense(X))
    if min_eig(Xd) < -1e-8 or np.linalg.norm(Xd, 2) > 1 + 1e-8:
        raise ValueError("witness must be a PSD contraction")
    mask = interior_mask(L.space, buffer)
    checks = {}
    if np.abs(Xd).max(initial=0.0) == 0:
        return CertificateReport("witness", True, 0.0, {"eps": eps}, buffer, L.space,
                                 "degenerate zero witness, vacuously passed", checks)
    proj = is_projection(Xd)
    phi_I = as_dense(L.phi_of_identity)
    if proj:
        E38 = L.phi(Xd) - 0.5 * (phi_I @ Xd + Xd @ phi_I) + (2 - eps) * Xd
        checks["projection_test"] = min_eig(interior_compress(E38, mask))
        if checks["projection_test"] < -tol:
            return CertificateReport("witness", False, checks["projection_test"], {"eps": eps}, buffer, L.space,
                                     "projection test failed", checks)
    checks["generator_test"] = min_eig(interior_compress(heisenberg_apply(L, Xd) - eps * Xd, mask))
    if checks["generator_test"] < -tol:
        return CertificateReport("witness", False, checks["generator_test"], {"eps": eps}, buffer, L.space,
                                 "L(X) - eps X is not PSD on the interior", checks)
    q = q_epsilon(L, Xd, eps, t_cap=t_cap, steps=q_steps)
    checks["q_epsilon_test"] = min_eig(interior_compress(q.value - Xd, mask))
    checks["q_epsilon_tail"] = q.tail_bound
    passed = checks["q_epsilon_test"] >= -1e-6
    margin = min(checks["generator_test"], checks["q_epsilon_test"])
    return CertificateReport("witness", passed, margin, {"eps": eps}, buffer, L.space,
                             ("witness chain passes: minimal solution is not unital" if passed
                              else "Q_eps(X) >= X fails on the interior"), checks)


# ---------------------------------------------------------------------------
# balance condition


def _falling(N: int, m: int) -> int:
    return math.perm(N, m) if N >= m else 0


def _rising(N: int, m: int) -> int:
    return math.perm(N + m, m)


def _balance_scalars(N: int, sign: str, order: int, n: int) -> Fraction:
    if sign == "+":
        return _falling(N, order) * (Fraction(N - order, N) ** n - 1)
    return _rising(N, order) * (Fraction(N + order, N) ** n - 1)


def balance_expression(cp_terms, n: int, N: int) -> np.ndarray:
    total = None
    for sign, coeff, order in cp_terms:
        c = np.atleast_2d(np.asarray(coeff, dtype=complex))
        val = c * float(_balance_scalars(N, sign, int(order), n))
        total = val if total is None else total + val
    return _herm(total)


def balance_condition(cp_terms, n: int, N_max: int, N_far: Sequence[int] = (10 ** 6, 10 ** 9, 10 ** 12)
                      ) -> CertificateReport:
    """Balance test for a CP part ``sum c+ (a^dagger)^m B a^m + c- a^m B (a^dagger)^m``.

    ``cp_terms`` holds ``(sign, coeff, order)`` with sign ``"+"`` or ``"-"``.  The
    N-indexed expression is evaluated exactly (rational arithmetic) for
    ``N = 1..N_max`` and at a few far points; it is reported bounded when its top
    eigenvalue does not grow between the two farthest points.
    """
    if N_max < 1:
        raise ValueError("N_max must be >= 1")
    orders = [int(o) for _, _, o in cp_terms]
    if orders and n < max(orders):
        raise ValueError("n must be at least the largest order")
    top = [float(np.linalg.eigvalsh(balance_expression(cp_terms, n, N))[-1]) for N in range(1, N_max + 1)]
    far = [float(np.linalg.eigvalsh(balance_expression(cp_terms, n, N))[-1]) for N in N_far]
    scale = 1.0 + max(abs(far[-2]), 1.0)
    bounded = far[-1] <= far[-2] + 1e-6 * scale
    sup = max(top + far)
    N_star = int(np.argmax(top)) + 1
    c_bal = _with_headroom(max(sup, 0.0))
    E_star = balance_expression(cp_terms, n, N_star)
    margin = min_eig(c_bal * np.eye(len(E_star)) - E_star) if bounded else -far[-1]
    S = None
    for sign, coeff, order in cp_terms:
        c = np.atleast_2d(np.asarray(coeff, dtype=complex)) * (order if sign == "+" else -order)
        S = c if S is None else S + c
    s_min = min_eig(S)
    details = (f"sup over N<={N_max} at N={N_star}: {max(top):.6g}; far values " +
               ", ".join(f"{v:.6g}" for v in far) +
               f"; sufficient test S>0 {'holds' if s_min > 0 else 'fails'}")
    return CertificateReport("balance", bool(bounded), margin, {"c": c_bal, "S_min": s_min}, 0, None, details,
                             {"sup_finite": max(top), "N_star": N_star})


# ---------------------------------------------------------------------------
# reference operators built from falling factorials


def lambda_N_coefficients(L_order: int, M_order: int, N: int, lambda0: float, slack: float) -> list:
    """``lambda_k`` with ``lambda_{k+1} = max(slack * lambda_k (N-k) L / ((k+1) M), 1)``."""
    if L_order < 1 or M_order < 1:
        raise ValueError("orders must be >= 1")
    if N < 1 or lambda0 < 1 or slack <= 1:
        raise ValueError("need N >= 1, lambda0 >= 1 and slack > 1")
    coeffs = [float(lambda0)]
    for k in range(N):
        bound = coeffs[-1] * (N - k) * L_order / ((k + 1) * M_order)
        coeffs.append(max(slack * bound, 1.0))
    return coeffs


def build_lambda_N(L_order: int, M_order: int, N: int, lambda0: float = 1.0, slack: float = 1.5,
                   space: SpaceSpec | None = None, lambda_identity: float | None = None):
    """Coefficient list and, given a two-mode space, the diagonal operator

    ``lambda_id I + sum_k lambda_k (a1^dagger)^{N-k} a1^{N-k} (a2^dagger)^k a2^k``.

    ``lambda_identity`` defaults to ``10 * max(lambda_k)``.
    """
    coeffs = lambda_N_coefficients(L_order, M_order, N, lambda0, slack)
    lam_id = 10.0 * max(coeffs) if lambda_identity is None else float(lambda_identity)
    if lam_id < 1:
        raise ValueError("lambda_identity must be >= 1")
    if space is None:
        return None, coeffs, lam_id
    if space.n_modes != 2:
        raise ValueError("the falling-factorial reference operator lives on two modes")
    occ = space.occupations()
    diag = np.full(space.total_dim, lam_id)
    for k, lk in enumerate(coeffs):
        f1 = np.array([_falling(int(x), N - k) for x in occ[:, 0]], dtype=float)
        f2 = np.array([_falling(int(x), k) for x in occ[:, 1]], dtype=float)
        diag += lk * f1 * f2
    Lam = OperatorMatrix(space, sp.diags(diag.astype(complex), format="csr"), hermitian_hint=True)
    return Lam, coeffs, lam_id
