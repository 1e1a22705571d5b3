import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import damped_oscillator
from oracles import pure_birth_mean_time, pure_birth_survival
from qdsreg.fock_ops import PolyTerm, SpaceSpec
from qdsreg.lindblad import CPMapSpec, KrausSpec, assemble, diagonal_block
from qdsreg.minimal_semigroup import evolve_density
from qdsreg.trajectories import NoJumpPropagator, ensemble, run_trajectory, trajectory_rng


def _fock(d, n):
    v = np.zeros(d, dtype=complex)
    v[n] = 1
    return v


def _birth_block(d):
    s = SpaceSpec((d,), 2)
    P0, P1 = np.diag([1.0, 0]), np.diag([0, 1.0])
    cp = CPMapSpec([KrausSpec((PolyTerm(P0, ((0, 2, 0),)), PolyTerm(P1, ((0, 0, 2),))))])
    return diagonal_block(assemble(s, cp, []), 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 64 - 1), st.integers(0, 10 ** 6))
def test_streams_are_reproducible_and_distinct(seed, index):
    a = trajectory_rng(seed, index).random(4)
    b = trajectory_rng(seed, index).random(4)
    c = trajectory_rng(seed, index + 1).random(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_same_seed_same_record():
    L = damped_oscillator(8, omega=0.3)
    psi = np.ones(8, dtype=complex) / np.sqrt(8)
    r1 = run_trajectory(L, psi, 2.0, 7, 100, index=3)
    r2 = run_trajectory(L, psi, 2.0, 7, 100, index=3)
    assert r1.jump_times == r2.jump_times and r1.jump_channels == r2.jump_channels


def test_damped_oscillator_never_explodes():
    L = damped_oscillator(10)
    summ = ensemble(L, _fock(10, 5), 3.0, 200, 11, 50)
    assert summ.explosion_fraction == 0
    assert all(r.n_jumps <= 5 for r in summ.records)
    jt = [r.jump_times for r in summ.records]
    assert all(np.all(np.diff(t) > 0) for t in jt)


def test_zero_jump_probability_on_fock_state():
    # from |n>, no jump by t has probability exp(-n gamma t)
    L = damped_oscillator(6)
    summ = ensemble(L, _fock(6, 1), 1.0, 2000, 5, 10)
    assert abs(summ.no_jump_fraction - np.exp(-1.0)) < 4 * np.sqrt(np.exp(-1) * (1 - np.exp(-1)) / 2000)


def test_general_path_average_matches_density_evolution():
    L = damped_oscillator(8, omega=0.7)
    psi = np.zeros(8, dtype=complex)
    psi[[0, 2, 3]] = [0.5, 0.5j, np.sqrt(0.5)]
    assert NoJumpPropagator(L).mode == "diagonal"
    summ = ensemble(L, psi, 0.8, 1500, 2024, 50, keep_states=True)
    rho_mc = summ.average_state()
    rho = evolve_density(L, np.outer(psi, psi.conj()), 0.8, 0.001).final
    assert np.max(np.abs(rho_mc - rho)) < 0.05


def test_non_diagonal_drift_path():
    # a Hamiltonian coupling two modes forces the eigen or Krylov drift path
    s = SpaceSpec((4, 4))
    cp = CPMapSpec([KrausSpec(PolyTerm(1.0, ((0, 0, 1),)), 0.5)])
    L = assemble(s, cp, [PolyTerm(1.0, ((0, 1, 0), (1, 0, 1)))])
    assert NoJumpPropagator(L).mode in ("eigen", "krylov")
    psi = np.zeros(16, dtype=complex)
    psi[4] = 1  # one photon in the first mode
    summ = ensemble(L, psi, 2.0, 400, 9, 20, keep_states=True)
    rho = evolve_density(L, np.outer(psi, psi.conj()), 2.0, 0.002).final
    assert np.max(np.abs(summ.average_state() - rho)) < 0.08


def test_exploded_flag_and_mean_time_on_birth_chain():
    L = _birth_block(1010)
    summ = ensemble(L, _fock(1010, 0), 2.0, 400, 12345, 500)
    rates = [(2 * k + 1) * (2 * k + 2) for k in range(500)]
    exploded = [r for r in summ.records if r.exploded]
    assert all(r.n_jumps == 500 and r.jump_times[-1] <= 2.0 for r in exploded)
    p_surv = pure_birth_survival(rates, 2.0)
    assert abs(summ.survival_estimate - p_surv) < 4 * np.sqrt(p_surv * (1 - p_surv) / 400) + 1e-3
    assert abs(summ.mean_time_to_cap() - pure_birth_mean_time(rates)) < 0.15 * pure_birth_mean_time(rates)


def test_thread_count_does_not_change_results():
    L = damped_oscillator(8, omega=0.2)
    psi = np.ones(8, dtype=complex) / np.sqrt(8)
    a = ensemble(L, psi, 1.5, 64, 3, 30, threads=1)
    b = ensemble(L, psi, 1.5, 64, 3, 30, threads=8)
    assert [r.jump_times for r in a.records] == [r.jump_times for r in b.records]


@pytest.mark.parametrize("kw", [dict(dt=0), dict(jump_cap=0)])
def test_argument_validation(kw):
    L = damped_oscillator(4)
    args = dict(dt=0.01, jump_cap=5)
    args.update(kw)
    with pytest.raises(ValueError):
        run_trajectory(L, _fock(4, 1), 1.0, 0, args["jump_cap"], args["dt"])
    with pytest.raises(ValueError):
        run_trajectory(L, 2 * _fock(4, 1), 1.0, 0, 5)
