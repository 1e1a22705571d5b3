"""Minimal solution of a constant-coefficient master equation by monotone iteration.

Notation: ``W_s = exp(-sG)``, ``V_s(X) = W_s^dagger X W_s`` and

    P^(0)_s(B)   = V_s(B)
    P^(n+1)_s(B) = V_s(B) + int_0^s V_{s-u}( Phi(P^(n)_u(B)) ) du .

The inner integral is evaluated on a uniform grid by a recurrence over nodes, so a
whole level costs O(steps) matrix products instead of O(steps^2).  Every quadrature
weight is positive and every map involved is completely positive, which is what keeps
the discrete iterates monotone in ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .fock_ops import as_dense, boundary_mask, is_hermitian
from .lindblad import LindbladGenerator, predual_apply

STOP_TOL = 1e-10


class TruncationInadequate(RuntimeError):
    """Raised when probability leaks into the truncation boundary beyond the threshold."""


@dataclass
class IterationResult:
    iterates: list
    defects: list
    quadrature: dict
    t: float
    converged_at: int | None = None
    grid_last: list = field(default_factory=list, repr=False)

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]


def _herm(X):
    return 0.5 * (X + X.conj().T)


def contraction_propagator(L: LindbladGenerator, t: float) -> np.ndarray:
    """``W_t = exp(-tG)``; dense scaling-and-squaring Pade exponential."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return np.eye(L.dim, dtype=complex)
    return sla.expm(-t * L.G_dense)


class _Propagators:
    """Cache of ``W_{kh}`` for small integer ``k``."""

    def __init__(self, L: LindbladGenerator, h: float):
        self.Wh = contraction_propagator(L, h)
        self._cache = {0: np.eye(L.dim, dtype=complex), 1: self.Wh}

    def W(self, k: int) -> np.ndarray:
        if k not in self._cache:
            self._cache[k] = self.W(k - 1) @ self.Wh
        return self._cache[k]

    def V(self, k: int, X):
        if k == 0:
            return X
        W = self.W(k)
        return W.conj().T @ X @ W


def _check_hermitian_operand(B):
    if not is_hermitian(B, rtol=1e-10):
        raise ValueError("B must be Hermitian")


def _level(props: _Propagators, free: list, f: list, h: float) -> list:
    """``free[j] + int_0^{s_j} V_{s_j-u} f(u) du`` at every grid node."""
    n = len(f)
    F = [None] * n
    F[0] = np.zeros_like(f[0])
    if n > 1:
        F[1] = 0.5 * h * (props.V(1, f[0]) + f[1])
    for j in range(2, n):
        if j % 2 == 0:
            F[j] = props.V(2, F[j - 2]) + h / 3.0 * (props.V(2, f[j - 2]) + 4.0 * props.V(1, f[j - 1]) + f[j])
        elif j == 3:
            F[j] = 3.0 * h / 8.0 * (props.V(3, f[0]) + 3.0 * props.V(2, f[1]) + 3.0 * props.V(1, f[2]) + f[3])
        else:
            F[j] = props.V(3, F[j - 3]) + 3.0 * h / 8.0 * (
                props.V(3, f[j - 3]) + 3.0 * props.V(2, f[j - 2]) + 3.0 * props.V(1, f[j - 1]) + f[j])
    return [_herm(free[j] + F[j]) for j in range(n)]


def _iterate_grid(L: LindbladGenerator, B, t: float, n_max: int, steps: int, phi_scale: float = 1.0,
                  stop_tol: float | None = STOP_TOL, keep_grids: bool = False):
    if t <= 0:
        raise ValueError("t must be positive")
    if n_max < 0 or steps <= 0:
        raise ValueError("n_max must be >= 0 and steps positive")
    B = as_dense(B).astype(complex)
    _check_hermitian_operand(B)
    h = t / steps
    props = _Propagators(L, h)
    free = [B]
    for j in range(1, steps + 1):
        free.append(_herm(props.V(1, free[-1])))
    grid = free
    iterates = [grid[-1]]
    grids = [grid] if keep_grids else []
    converged = None
    for n in range(n_max):
        if phi_scale == 0:
            new = grid
        else:
            f = [phi_scale * L.phi(P) for P in grid]
            new = _level(props, free, f, h)
        change = max(np.abs(a - b).max() for a, b in zip(new, grid))
        grid = new
        iterates.append(grid[-1])
        if keep_grids:
            grids.append(grid)
        if stop_tol is not None and change < stop_tol:
            converged = n + 1
            break
    quad = {"rule": "composite-simpson", "steps": steps, "h": h}
    return iterates, grid, grids, quad, converged


def iterate_minimal(L: LindbladGenerator, B, t: float, n_max: int, steps: int = 200,
                    stop_tol: float | None = STOP_TOL) -> IterationResult:
    """Iterates ``P^(0..n)_t(B)``; defects ``I - P^(n)_t(I)`` are filled when ``B = I``."""
    iterates, grid, _, quad, conv = _iterate_grid(L, B, t, n_max, steps, stop_tol=stop_tol)
    Bd = as_dense(B)
    defects = []
    if np.allclose(Bd, np.eye(L.dim), atol=0, rtol=0):
        Id = np.eye(L.dim)
        defects = [_herm(Id - P) for P in iterates]
    return IterationResult(iterates, defects, quad, t, conv, grid)


def regularized_propagator(L: LindbladGenerator, lam: float, B, t: float, n_max: int, steps: int = 200,
                           stop_tol: float | None = STOP_TOL) -> np.ndarray:
    """Series ``V_t(B) + sum_n lam^n (n-jump term)`` truncated at ``n_max``.

    ``lam = 1`` takes the exact code path of :func:`iterate_minimal`; ``lam = 0``
    returns ``V_t(B)``.
    """
    if not 0 <= lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    iterates, *_ = _iterate_grid(L, B, t, n_max, steps, phi_scale=lam, stop_tol=stop_tol)
    return iterates[-1]


def _simpson_weights(steps: int, h: float) -> np.ndarray:
    """Composite Simpson weights, with a 3/8 panel at the end when ``steps`` is odd."""
    w = np.zeros(steps + 1)
    if steps == 1:
        w[:] = h / 2
        return w
    m = steps if steps % 2 == 0 else steps - 3
    if m > 0:
        w[0:m + 1:2] += 2 * h / 3
        w[1:m:2] += 4 * h / 3
        w[0] -= h / 3
        w[m] -= h / 3
    if m < steps:
        w[m:m + 4] += 3 * h / 8 * np.array([1, 3, 3, 1])
    return w


@dataclass
class DefectSeries:
    defect_sum: np.ndarray
    integral: np.ndarray
    defects: list
    quadrature: dict


def defect_series_sum(L: LindbladGenerator, t: float, n_max: int, steps: int = 200) -> DefectSeries:
    """``sum_{n=1..n_max} Delta^(n)`` and an independent quadrature of ``int_0^t P^(n_max)_s(Phi(I)) ds``.

    ``Delta^(n) = I - P^(n-1)_t(I)``.  At finite ``n_max`` the exact discrete
    identity has ``n_max + 1`` defects on the left-hand side; the two sides differ
    by ``Delta^(n_max+1)``, which vanishes in the limit whenever the semigroup is
    unital.
    """
    res = iterate_minimal(L, np.eye(L.dim), t, n_max - 1 if n_max > 0 else 0, steps, stop_tol=None)
    defects = res.defects[:n_max]
    dsum = sum(defects) if defects else np.zeros((L.dim, L.dim), dtype=complex)
    phi_I = as_dense(L.phi_of_identity)
    _, grid, _, quad, _ = _iterate_grid(L, phi_I, t, n_max, steps, stop_tol=None)
    w = _simpson_weights(steps, t / steps)
    integral = _herm(sum(wj * P for wj, P in zip(w, grid)))
    return DefectSeries(_herm(dsum), integral, defects, quad)


def lambda_averaged_defects(L: LindbladGenerator, t: float, n_max: int, steps: int = 200):
    """``int_0^1 dlam int_0^t P^(lam)_s(Phi(I)) ds`` by Gauss-Legendre in ``lam``, next to ``sum Delta^(m)/m``.

    With the series truncated at ``n_max`` the integrand is a polynomial of degree
    ``n_max`` in ``lam``, so enough nodes make the lam-integral exact and the two
    returned matrices agree up to time quadrature.
    """
    nodes, weights = np.polynomial.legendre.leggauss(n_max // 2 + 2)
    lams = 0.5 * (nodes + 1.0)
    weights = 0.5 * weights
    phi_I = as_dense(L.phi_of_identity)
    w = _simpson_weights(steps, t / steps)
    C = np.zeros((L.dim, L.dim), dtype=complex)
    for lam, wl in zip(lams, weights):
        _, grid, _, _, _ = _iterate_grid(L, phi_I, t, n_max, steps, phi_scale=lam, stop_tol=None)
        C += wl * sum(wj * P for wj, P in zip(w, grid))
    res = iterate_minimal(L, np.eye(L.dim), t, n_max, steps, stop_tol=None)
    harmonic = sum(D / (m + 1) for m, D in enumerate(res.defects))
    return _herm(C), _herm(harmonic)


@dataclass
class QEpsilonResult:
    value: np.ndarray
    tail_bound: float
    t_cap: float
    nodes: int


def _graded_nodes(t_cap: float, rate: float, per_panel: int):
    """Panel edges: a fine first panel of width ~1/rate, then doubling up to ``t_cap``."""
    first = min(t_cap, 1.0 / max(rate, 1e-300))
    edges = [0.0, first]
    while edges[-1] < t_cap:
        edges.append(min(t_cap, 2 * edges[-1]))
    return edges, per_panel


def q_epsilon(L: LindbladGenerator, X, eps: float, t_cap: float | None = None,
              steps: int = 128) -> QEpsilonResult:
    """Quadrature of ``int_0^t_cap exp(-eps t) V_t(Phi(X)) dt``.

    The time axis is split into geometrically growing panels so stiff drifts are
    resolved near ``t = 0``; each panel uses composite Simpson with ``steps``
    (even) subintervals.  ``tail_bound`` bounds the neglected part in norm.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    t_cap = 20.0 / eps if t_cap is None else float(t_cap)
    steps += steps % 2
    Y = L.phi(as_dense(X))
    Gd = L.G_dense
    rate = max(np.abs(Gd).sum(axis=1).max(initial=0.0), eps)
    edges, m = _graded_nodes(t_cap, rate, steps)
    diag = np.count_nonzero(Gd - np.diag(np.diag(Gd))) == 0
    total = np.zeros_like(Y)
    Wt = np.eye(L.dim, dtype=complex)  # W at the left edge of the current panel
    g = np.diag(Gd)
    nodes = 0
    for a, b in zip(edges[:-1], edges[1:]):
        h = (b - a) / m
        wts = _simpson_weights(m, h)
        if diag:
            for j in range(m + 1):
                tj = a + j * h
                e = np.exp(-tj * g)
                total += wts[j] * np.exp(-eps * tj) * (e.conj()[:, None] * Y * e[None, :])
        else:
            Wh = sla.expm(-h * Gd)
            W = Wt
            for j in range(m + 1):
                tj = a + j * h
                total += wts[j] * np.exp(-eps * tj) * (W.conj().T @ Y @ W)
                if j < m:
                    W = W @ Wh
            Wt = W
        nodes += m + 1
    tail = float(np.exp(-eps * t_cap) * np.linalg.norm(Y, 2) / eps) if Y.size else 0.0
    return QEpsilonResult(_herm(total), tail, t_cap, nodes)


def q_epsilon_exact(L: LindbladGenerator, X, eps: float) -> np.ndarray:
    """Infinite-horizon value from ``(G^dagger + eps/2) Q + Q (G + eps/2) = Phi(X)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    Gd = L.G_dense
    A = Gd.conj().T + 0.5 * eps * np.eye(L.dim)
    Bm = Gd + 0.5 * eps * np.eye(L.dim)
    Q = sla.solve_sylvester(A, Bm, L.phi(as_dense(X)))
    return _herm(Q)


@dataclass
class EvolutionRecord:
    times: np.ndarray
    traces: np.ndarray
    boundary_population: np.ndarray
    snapshots: list
    final: np.ndarray


def evolve_density(L: LindbladGenerator, rho0, t: float, dt: float, buffer: int | None = None,
                   boundary_threshold: float | None = None, snapshot_every: int | None = None
                   ) -> EvolutionRecord:
    """Classic fixed-step RK4 for ``d rho/dt = L_*(rho)``.

    Boundary population is the total weight on basis states with any occupation in
    the last ``buffer`` levels of its mode.  The run aborts with
    :class:`TruncationInadequate` when that weight exceeds ``boundary_threshold``
    or the trace drifts from 1 by more than 0.5.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rho = as_dense(rho0).astype(complex)
    if not is_hermitian(rho, rtol=1e-10):
        raise ValueError("rho0 must be Hermitian")
    w = np.linalg.eigvalsh(_herm(rho))
    if w.min() < -1e-10 or abs(w.sum() - 1) > 1e-10:
        raise ValueError("rho0 must be PSD with unit trace")
    buffer = 1 if buffer is None else buffer
    bmask = boundary_mask(L.space, buffer)
    n_steps = int(round(t / dt))
    if n_steps < 0 or abs(n_steps * dt - t) > 1e-9 * max(1.0, t):
        raise ValueError("t must be a nonnegative multiple of dt")
    times = [0.0]
    traces = [np.trace(rho).real]
    bpop = [np.diag(rho).real[bmask].sum()]
    snaps = [rho.copy()] if snapshot_every else []
    f = lambda r: predual_apply(L, r)
    for k in range(1, n_steps + 1):
        k1 = f(rho)
        k2 = f(rho + 0.5 * dt * k1)
        k3 = f(rho + 0.5 * dt * k2)
        k4 = f(rho + dt * k3)
        rho = _herm(rho + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        times.append(k * dt)
        traces.append(np.trace(rho).real)
        bpop.append(np.diag(rho).real[bmask].sum())
        if snapshot_every and k % snapshot_every == 0:
            snaps.append(rho.copy())
        if abs(traces[-1] - 1) > 0.5 or (boundary_threshold is not None and bpop[-1] > boundary_threshold):
            raise TruncationInadequate(
                f"at t={k*dt:.6g}: trace={traces[-1]:.6g}, boundary population={bpop[-1]:.3e}")
    return EvolutionRecord(np.array(times), np.array(traces), np.array(bpop), snaps, rho)
