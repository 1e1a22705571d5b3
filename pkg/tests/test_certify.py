import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import damped_oscillator
from qdsreg.certify import (balance_condition, build_lambda_N, check_lambda_pair, check_operator_inequality,
                            check_reference, check_witness, deficiency_search, escape_witness,
                            generalized_max_ratio, lambda_N_coefficients)
from qdsreg.config import gallery
from qdsreg.fock_ops import PolyTerm, SpaceSpec, diagonal_lambda, eval_polynomial
from qdsreg.lindblad import CPMapSpec, KrausSpec, assemble, diagonal_block, heisenberg_apply, zero_generator
from qdsreg.minimal_semigroup import evolve_density


def test_inequality_trivial_cases():
    s = SpaceSpec((3,))
    r = check_operator_inequality(np.zeros((3, 3)), np.eye(3), 0, s)
    assert r.passed and np.isclose(r.margin, 1)
    D = np.diag([0.0, 1, 2])
    r = check_operator_inequality(D, D, 0, s)
    assert r.passed and abs(r.margin) < 1e-15


def test_inequality_damped_oscillator_on_reference():
    L = damped_oscillator(10)
    Lam = np.eye(10) + np.diag(np.arange(10.0))
    r = check_operator_inequality(heisenberg_apply(L, Lam), 0 * Lam, 2, L.space)
    assert r.passed


def test_inequality_rejects_large_buffer():
    with pytest.raises(ValueError):
        check_operator_inequality(np.eye(3), np.eye(3), 3, SpaceSpec((3,)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 6))
def test_inequality_antisymmetry(seed, d):
    rng = np.random.default_rng(seed)
    s = SpaceSpec((d,))
    A, B = rng.normal(size=(2, d, d))
    A, B = A + A.T, B + B.T
    r1 = check_operator_inequality(A, B, 0, s)
    r2 = check_operator_inequality(B, A, 0, s)
    if r1.passed and abs(r1.margin) > 1e-9:
        assert r2.margin <= -r1.margin + 2e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_generalized_ratio_is_tight(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    A = A + A.T
    M = rng.normal(size=(4, 4))
    Lam = M @ M.T + np.eye(4)
    for diag in (True, False):
        Lm = np.diag(np.diag(Lam)) if diag else Lam
        c = generalized_max_ratio(A, Lm)
        assert np.linalg.eigvalsh(c * Lm - A)[0] > -1e-9
        assert np.linalg.eigvalsh((c - 1e-6) * Lm - A)[0] < 0


def test_reference_zero_generator():
    s = SpaceSpec((4,))
    r = check_reference(zero_generator(s), diagonal_lambda(s, 1.0, 1), c=0.0)
    assert r.passed and abs(r.margin) < 1e-15


def test_reference_damped_oscillator_minimal_constant():
    L = damped_oscillator(10)
    r = check_reference(L, diagonal_lambda(L.space, 1.0, 1), buffer=2)
    assert r.passed and r.constants["c_min"] <= 1e-9
    assert "Phi(I) + I" in r.details


def test_reference_rejects_small_lambda():
    L = damped_oscillator(5)
    with pytest.raises(ValueError):
        check_reference(L, 0.5 * np.eye(5))


def test_reference_two_quantum_thermal_model():
    cfg = gallery("ex4_kilin")
    from qdsreg.config import reference_operator
    L = cfg.generator((30,))
    Lam = reference_operator({"kind": "falling", "c": 8, "order": 2}, L.space, {})
    r = check_reference(L, Lam, buffer=4)
    assert r.passed and np.isfinite(r.constants["c"])
    assert r.checks["precondition"] >= 0


def test_lambda_pair_without_hamiltonian_matches_reference():
    L = damped_oscillator(8)
    Lam = diagonal_lambda(L.space, 2.0, 2)
    r = check_lambda_pair(L, Lam, np.zeros((8, 8)), eps=0.5, buffer=2)
    ref = check_reference(L, Lam, buffer=2)
    assert r.passed and r.constants["mu"] <= 1e-5
    assert np.isclose(r.constants["c"], ref.constants["c"], rtol=1e-6, atol=1e-6)


def _ex1(d=12):
    cfg = gallery("ex1")
    L = cfg.generator((d, d))
    return L, cfg.hamiltonian_part(L.space, "sa")


def test_lambda_pair_exchange_model_passes():
    L, H_sa = _ex1()
    r = check_lambda_pair(L, diagonal_lambda(L.space, 20.0, (2, 2)), H_sa, eps=0.5, buffer=2)
    assert r.passed
    c = r.constants
    assert np.isclose(c["c0"], c["mu"] + (1 + c["mu"]) * c["nu"])
    assert np.isclose(c["lambda"], c["c0"] * (c["c"] + c["c1"] + c["mu"] * c["c2"]))


def test_lambda_pair_undersized_reference_fails():
    L, H_sa = _ex1()
    r = check_lambda_pair(L, diagonal_lambda(L.space, 0.01, (2, 2)), H_sa, eps=0.5, buffer=2, nu=2.0)
    assert not r.passed and r.margin < 0


def test_lambda_pair_scans_eps():
    L, H_sa = _ex1(8)
    r = check_lambda_pair(L, diagonal_lambda(L.space, 20.0, (2, 2)), H_sa, buffer=2)
    assert r.passed and r.constants["eps"] in (0.25, 0.5, 0.75)


def test_deficiency_hermitian_diagonal_control():
    r = deficiency_search([PolyTerm(1.0, ((0, 1, 1),))], [20, 40, 80], 2, hermitize=False)
    assert not r.declared
    assert all(res >= 1 - 1e-9 for _, res in r.truncation_trend)


def test_deficiency_rejects_small_buffer():
    with pytest.raises(ValueError):
        deficiency_search([PolyTerm(1.0, ((0, 3, 0),))], [10], 2)


def test_deficiency_cubic_model_is_declared():
    cfg = gallery("eq33_deficiency")
    r = deficiency_search(cfg.hamiltonian_terms(), [50, 100, 200], 3)
    res = [x for _, x in r.truncation_trend]
    assert r.declared and res[0] > res[1] > res[2]
    assert abs(np.linalg.norm(r.vector) - 1) < 1e-12 and 0 <= r.boundary_mass <= 1
    assert min(r.overlaps) > 0.95


@pytest.mark.parametrize("name,terms,dims,spin", [
    ("exchange m=2 n=1", [PolyTerm(1.0, ((0, 2, 0), (1, 0, 1)))], [30, 60, 120], 1),
    ("matrix coupling", gallery("ex2").hamiltonian_terms(), [8, 12, 16], 2),
    ("pumped two-mode spin model", gallery("ex3_sbp").hamiltonian_terms(), [8, 12, 16], 2),
])
def test_essentially_self_adjoint_models_are_not_declared(name, terms, dims, spin):
    r = deficiency_search(terms, dims, 3, n_modes=2, spin_dim=spin)
    assert not r.declared, name


@pytest.mark.parametrize("name,terms,dims,spin", [
    ("exchange m=2 n=1", [PolyTerm(1.0, ((0, 2, 0), (1, 0, 1)))], [30, 60, 120], 1),
    ("matrix coupling", gallery("ex2").hamiltonian_terms(), [8, 12, 16], 2),
    ("pumped two-mode spin model", gallery("ex3_sbp").hamiltonian_terms(), [8, 12, 16], 2),
])
def test_essentially_self_adjoint_residual_floor(name, terms, dims, spin):
    """Interior residual of essentially self-adjoint models stays >= 0.1 at all dims."""
    r = deficiency_search(terms, dims, 3, n_modes=2, spin_dim=spin)
    assert min(x for _, x in r.truncation_trend) >= 0.1, r.truncation_trend


def test_witness_zero_is_degenerate_pass():
    L = damped_oscillator(6)
    r = check_witness(L, np.zeros((6, 6)), 0.5, 1)
    assert r.passed and r.margin == 0 and "degenerate" in r.details


def test_witness_fails_on_unital_oscillator():
    L = damped_oscillator(6)
    P = np.zeros((6, 6))
    P[0, 0] = 1
    r = check_witness(L, P, 0.5, 1)
    assert not r.passed and r.margin < 0


def test_witness_rejects_non_contraction():
    L = damped_oscillator(4)
    with pytest.raises(ValueError):
        check_witness(L, 2 * np.eye(4), 0.5, 1)


def _birth_block(d):
    s = SpaceSpec((d,), 2)
    P0, P1 = np.diag([1.0, 0]), np.diag([0, 1.0])
    cp = CPMapSpec([KrausSpec((PolyTerm(P0, ((0, 2, 0),)), PolyTerm(P1, ((0, 0, 2),))))])
    return diagonal_block(assemble(s, cp, []), 0)


@pytest.mark.parametrize("d", [40, 80])
def test_witness_chain_on_two_quantum_birth_block(d):
    L = _birth_block(d)
    X = escape_witness(L, 1.0, 2)
    r = check_witness(L, X, 0.5, 2)
    assert r.passed
    assert r.checks["generator_test"] > 0 and r.checks["q_epsilon_test"] >= -1e-6


def test_no_projection_passes_the_generator_link_on_the_birth_block():
    """For a projection, <psi, L(P) psi> <= 0 on its range, so the eps-link must fail."""
    L = _birth_block(40)
    for n0 in (2, 10, 20):
        P = np.diag((np.arange(40) >= n0).astype(float))
        r = check_witness(L, P, 0.5, 2)
        assert r.checks["projection_test"] >= -1e-9
        assert not r.passed


def test_witness_soundness_trace_decay():
    L = _birth_block(60)
    X = escape_witness(L, 1.0, 2)
    r = check_witness(L, X, 0.5, 2)
    assert r.passed
    psi = np.zeros(60)
    psi[np.argmax(np.diag(X).real)] = 1
    rho0 = np.outer(psi, psi)
    # trace of the part that stays inside the truncation interior drops at least at rate eps <X>
    rec = evolve_density(L, rho0, 0.01, 0.0005, buffer=2)
    mask = np.arange(60) < 58
    inside = np.diag(rec.final).real[mask].sum()
    x_psi = psi @ np.diag(X).real
    assert 1 - inside >= 0.5 * x_psi * 0.01 * 0.9


def test_balance_examples():
    r = balance_condition([("+", 1.0, 1)], 1, 50)
    assert r.passed and r.constants["S_min"] == 1
    r = balance_condition([("+", 1.0, 2), ("-", 5.0, 1)], 2, 200)
    assert r.constants["S_min"] == -3 and "fails" in r.details
    r = balance_condition([("+", 3.0, 2), ("-", 1.0, 2)], 2, 200)
    assert r.passed and r.constants["S_min"] == 4


def test_balance_matrix_coefficients():
    r = balance_condition([("+", np.diag([1.0, 2.0]), 2), ("-", np.diag([0.5, 0.1]), 1)], 2, 100)
    assert r.passed and np.isclose(r.constants["S_min"], 1.5)


def test_balance_unbounded_gain():
    r = balance_condition([("-", 1.0, 2)], 2, 100)
    assert not r.passed


def test_lambda_N_recurrence_examples():
    assert lambda_N_coefficients(1, 1, 2, 1.0, 1.5) == [1.0, 3.0, 2.25]
    Lam, coeffs, lam_id = build_lambda_N(1, 1, 1, space=SpaceSpec((4, 4)))
    assert len(coeffs) == 2 and Lam is not None
    with pytest.raises(ValueError):
        lambda_N_coefficients(0, 1, 2, 1.0, 1.5)
    with pytest.raises(ValueError):
        lambda_N_coefficients(1, 1, 2, 1.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 8), st.floats(1.0, 5.0), st.floats(1.01, 3.0))
def test_lambda_N_strict_recurrence(Lo, Mo, N, lam0, slack):
    c = lambda_N_coefficients(Lo, Mo, N, lam0, slack)
    assert all(x >= 1 for x in c)
    for k in range(N):
        assert c[k + 1] > c[k] * (N - k) * Lo / ((k + 1) * Mo)


def test_lambda_N_reference_on_transfer_model():
    cfg = gallery("ex6_lmv")
    L = cfg.generator((10, 10))
    Lam, coeffs, lam_id = build_lambda_N(1, 1, 4, space=L.space)
    r = check_reference(L, Lam, buffer=1)
    assert r.passed and np.isfinite(r.constants["c"])
