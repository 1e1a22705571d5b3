import numpy as np
import pytest

from qdsreg.fock_ops import PolyTerm, SpaceSpec
from qdsreg.lindblad import CPMapSpec, KrausSpec, assemble

ACCEPTANCE_LINES: dict = {}


def damped_oscillator(d: int, gamma: float = 1.0, omega: float = 0.0):
    space = SpaceSpec((d,))
    cp = CPMapSpec([KrausSpec(PolyTerm(1.0, ((0, 0, 1),)), gamma, "loss")])
    h = [PolyTerm(omega, ((0, 1, 1),))] if omega else []
    return assemble(space, cp, h, hermitize=False)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def emit(number: int, passed: bool, detail: str):
        line = f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


def random_dense_generator(rng: np.random.Generator, space: SpaceSpec, n_kraus: int = 2, scale: float = 0.7):
    from qdsreg.lindblad import from_matrices
    n = space.total_dim
    kraus = [scale * (rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))) / np.sqrt(n) for _ in range(n_kraus)]
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    H = 0.5 * (A + A.conj().T) / np.sqrt(n)
    return from_matrices(space, kraus, H), kraus, H
