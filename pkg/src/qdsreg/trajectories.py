"""Monte-Carlo jump unraveling of the Schroedinger-picture dynamics.

Between jumps the unnormalized state follows ``psi_t = exp(-tG) psi``; its squared
norm is the no-jump survival probability.  A jump time is found by solving
``||psi_t||^2 = u`` for a uniform ``u``, a channel is picked with probability
proportional to ``||L_k psi||^2``, and the state is renormalized.  A run that hits
``jump_cap`` before ``t_max`` is flagged as exploded.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .fock_ops import as_dense
from .lindblad import LindbladGenerator

SURVIVAL_TOL = 1e-10


@dataclass
class TrajectoryRecord:
    seed: int
    jump_times: list
    jump_channels: list
    final_time: float
    exploded: bool
    final_state_norm: float
    final_state: np.ndarray | None = field(default=None, repr=False)
    index: int = 0

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    @property
    def last_jump_time(self) -> float:
        return self.jump_times[-1] if self.jump_times else float("nan")


def trajectory_rng(base_seed: int, index: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(base_seed, index)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(base_seed), int(index)])))


class NoJumpPropagator:
    """``tau -> exp(-tau G) psi`` for the drift of a generator.

    Diagonal drifts are exponentiated entrywise.  Otherwise an eigendecomposition
    is used when its basis is well conditioned, and ``expm_multiply`` when not.
    """

    def __init__(self, L: LindbladGenerator, cond_max: float = 1e8):
        G = L.G
        if sp.issparse(G):
            offdiag = (G - sp.diags(G.diagonal())).count_nonzero()
        else:
            offdiag = np.count_nonzero(G - np.diag(np.diag(G)))
        self.G = G
        self.mode = "diagonal" if offdiag == 0 else None
        if self.mode == "diagonal":
            self.g = np.asarray(G.diagonal() if sp.issparse(G) else np.diag(G))
            return
        Gd = as_dense(G)
        w, V = np.linalg.eig(Gd)
        if np.linalg.cond(V) < cond_max:
            self.mode = "eigen"
            self.w, self.V = w, V
            self.Vinv = np.linalg.inv(V)
        else:
            self.mode = "krylov"

    def monomial_kraus(self, kraus):
        """Per-column (target, |entry|^2) tables when every Kraus column has at most one nonzero."""
        if self.mode != "diagonal":
            return None
        tables = []
        n = len(self.g)
        for K in kraus:
            Kc = sp.csc_matrix(K)
            if np.any(np.diff(Kc.indptr) > 1):
                return None
            target = np.full(n, -1)
            weight = np.zeros(n)
            cols = np.flatnonzero(np.diff(Kc.indptr))
            target[cols] = Kc.indices[Kc.indptr[cols]]
            entry = np.zeros(n, dtype=complex)
            entry[cols] = Kc.data[Kc.indptr[cols]]
            weight[cols] = np.abs(entry[cols]) ** 2
            tables.append((target, weight, entry))
        return tables

    def coefficients(self, psi):
        if self.mode == "diagonal":
            return psi
        if self.mode == "eigen":
            return self.Vinv @ psi
        return psi

    def apply(self, coeffs, psi, tau: float) -> np.ndarray:
        if self.mode == "diagonal":
            return np.exp(-tau * self.g) * psi
        if self.mode == "eigen":
            return self.V @ (np.exp(-tau * self.w) * coeffs)
        return expm_multiply(-tau * self.G, psi)

    def survival(self, coeffs, psi, tau: float) -> float:
        v = self.apply(coeffs, psi, tau)
        return float(np.vdot(v, v).real)


def _jump_time(prop: NoJumpPropagator, psi, u: float, t_left: float, dt: float):
    """First ``tau <= t_left`` with survival ``<= u``, or None if the drift outlasts ``t_left``."""
    coeffs = prop.coefficients(psi)
    if prop.mode == "diagonal":
        w = np.abs(psi) ** 2
        nz = np.flatnonzero(w)
        w, k = w[nz], 2 * prop.g.real[nz]
        if len(nz) == 1:
            if k[0] <= 0:
                return None
            tau = -np.log(u / w[0]) / k[0]
            return tau if tau <= t_left else None
        S = lambda s: float(np.sum(w * np.exp(-s * k)))
    else:
        S = lambda s: prop.survival(coeffs, psi, s)
    if S(t_left) > u:
        return None
    # bracket on the dt grid, then bisect to the survival tolerance
    lo = 0.0
    hi = min(dt, t_left)
    while S(hi) > u:
        lo, hi = hi, min(hi + dt, t_left)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        s_mid = S(mid)
        if abs(s_mid - u) <= SURVIVAL_TOL or hi - lo <= 1e-15 * max(1.0, hi):
            return mid
        if s_mid > u:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def run_trajectory(L: LindbladGenerator, psi0, t_max: float, seed: int, jump_cap: int, dt: float = 0.01,
                   index: int = 0, keep_state: bool = False, _prop: NoJumpPropagator | None = None
                   ) -> TrajectoryRecord:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if jump_cap < 1:
        raise ValueError("jump_cap must be >= 1")
    psi = np.asarray(psi0, dtype=complex).ravel()
    if abs(np.linalg.norm(psi) - 1) > 1e-10:
        raise ValueError("psi0 must be a unit vector")
    prop = _prop or NoJumpPropagator(L)
    rng = trajectory_rng(seed, index)
    kraus = [sp.csr_matrix(K) for K in L.kraus]
    support = np.flatnonzero(psi)
    if len(support) == 1 and kraus:
        tables = prop.monomial_kraus(kraus)
        if tables is not None:
            return _basis_chain(prop, tables, int(support[0]), psi[support[0]], t_max, seed, index, jump_cap,
                                rng, keep_state)
    t = 0.0
    times, channels = [], []
    exploded = False
    while True:
        u = rng.random()
        v = rng.random()  # channel variate is always drawn so streams keep their prefix
        tau = _jump_time(prop, psi, u, t_max - t, dt) if kraus else None
        if tau is None:
            psi = prop.apply(prop.coefficients(psi), psi, t_max - t)
            t = t_max
            break
        psi = prop.apply(prop.coefficients(psi), psi, tau)
        t += tau
        weights = np.array([np.vdot(K @ psi, K @ psi).real for K in kraus])
        total = weights.sum()
        if total <= 0:
            t = t_max
            break
        k = int(np.searchsorted(np.cumsum(weights) / total, v, side="right"))
        k = min(k, len(kraus) - 1)
        psi = kraus[k] @ psi
        psi = psi / np.linalg.norm(psi)
        if times and t <= times[-1]:
            t = np.nextafter(times[-1], np.inf)
        times.append(t)
        channels.append(k)
        if len(times) >= jump_cap:
            exploded = t <= t_max
            break
    norm = float(np.linalg.norm(psi))
    return TrajectoryRecord(int(seed), times, channels, float(t), exploded, norm,
                            psi if keep_state else None, int(index))


def _basis_chain(prop, tables, state: int, phase, t_max, seed, index, jump_cap, rng, keep_state):
    """Exact jump chain on basis states: diagonal drift, one target per Kraus column.

    Same variate schedule as the general path: per jump one uniform for the time,
    one for the channel.
    """
    decay = 2 * prop.g.real
    amp = complex(phase)
    t = 0.0
    times, channels = [], []
    exploded = False
    while True:
        u = rng.random()
        v = rng.random()
        k_n = decay[state]
        tau = -np.log(u) / k_n if k_n > 0 else np.inf
        if tau > t_max - t:
            t = t_max
            break
        t += tau
        weights = np.array([tab[1][state] for tab in tables])
        total = weights.sum()
        if total <= 0:
            t = t_max
            break
        k = min(int(np.searchsorted(np.cumsum(weights) / total, v, side="right")), len(tables) - 1)
        # amplitude after drift, jump and renormalization keeps only a phase
        amp = amp * np.exp(-tau * prop.g[state]) * tables[k][2][state]
        amp = amp / abs(amp)
        state = int(tables[k][0][state])
        if times and t <= times[-1]:
            t = np.nextafter(times[-1], np.inf)
        times.append(t)
        channels.append(k)
        if len(times) >= jump_cap:
            exploded = True
            break
    if not exploded:
        amp = amp * np.exp(-(t - (times[-1] if times else 0.0)) * prop.g[state])
    psi = None
    if keep_state:
        psi = np.zeros(len(decay), dtype=complex)
        psi[state] = amp
    norm = float(abs(amp))
    return TrajectoryRecord(int(seed), times, channels, float(t), exploded, norm, psi, int(index))


@dataclass
class EnsembleSummary:
    records: list
    explosion_fraction: float
    survival_estimate: float
    no_jump_fraction: float
    jump_histogram: dict
    t_max: float
    jump_cap: int

    def mean_time_to_cap(self) -> float:
        ts = [r.jump_times[-1] for r in self.records if r.exploded]
        return float(np.mean(ts)) if ts else float("nan")

    def average_state(self) -> np.ndarray:
        """``E |psi_t><psi_t|`` over the non-exploded, renormalized final states."""
        rows = [r.final_state / np.linalg.norm(r.final_state) for r in self.records
                if not r.exploded and r.final_state is not None]
        if not rows:
            raise ValueError("no final states recorded")
        M = np.array(rows)
        return M.T @ M.conj() / len(rows)


def ensemble(L: LindbladGenerator, psi0, t_max: float, n_traj: int, base_seed: int, jump_cap: int,
             dt: float = 0.01, threads: int = 1, keep_states: bool = False) -> EnsembleSummary:
    """Independent trajectories with per-index streams; result order is the index order."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    prop = NoJumpPropagator(L)
    run = lambda i: run_trajectory(L, psi0, t_max, base_seed, jump_cap, dt, index=i, keep_state=keep_states,
                                   _prop=prop)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run, range(n_traj)))
    else:
        records = [run(i) for i in range(n_traj)]
    exploded = sum(r.exploded for r in records)
    hist: dict = {}
    for r in records:
        hist[r.n_jumps] = hist.get(r.n_jumps, 0) + 1
    return EnsembleSummary(records, exploded / n_traj, 1 - exploded / n_traj,
                           hist.get(0, 0) / n_traj, dict(sorted(hist.items())), t_max, jump_cap)
