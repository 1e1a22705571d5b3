import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import damped_oscillator
from qdsreg.config import (GALLERY_DIR, GALLERY_NAMES, ConfigError, ConfigParseError, DimensionError, SchemaError,
                           UnboundParameterError, evaluate, gallery, load_config, loads, serialize)
from qdsreg.fock_ops import as_dense
from qdsreg.lindblad import superoperator_matrix

MINIMAL = {
    "name": "damped",
    "space": {"mode_dims": [6]},
    "parameters": {"gamma": 1.0},
    "cp_map": [{"coeff": "gamma", "words": [{"factors": [[0, 0, 1]]}]}],
}


def _text(obj):
    return json.dumps(obj, indent=2)


def test_minimal_config_builds_damped_oscillator():
    cfg = loads(_text(MINIMAL))
    L = cfg.generator()
    ref = damped_oscillator(6)
    assert np.allclose(superoperator_matrix(L), superoperator_matrix(ref))


def test_unbound_parameter_names_symbol_and_location():
    raw = json.loads(json.dumps(MINIMAL))
    raw["cp_map"][0]["coeff"] = "sqrt(chi)"
    with pytest.raises(UnboundParameterError) as exc:
        loads(_text(raw))
    assert exc.value.exit_code == 4 and "'chi'" in str(exc.value) and "cp_map[0].coeff" in str(exc.value)


def test_parse_error_reports_line_and_column():
    with pytest.raises(ConfigParseError) as exc:
        loads('{\n  "name": "x",\n  "space": {mode_dims: [3]}\n}', "bad.json")
    assert exc.value.exit_code == 3 and str(exc.value).startswith("bad.json:3:")


@pytest.mark.parametrize("mutate", [
    lambda r: r.update(colour="blue"),
    lambda r: r["cp_map"][0].update(rate=2),
    lambda r: r["space"].update(modes=1),
    lambda r: r.update(cp_map=[{"coeff": 1}]),
    lambda r: r["cp_map"][0]["words"][0].update(factors=[[0, -1, 1]]),
])
def test_schema_errors(mutate):
    raw = json.loads(json.dumps(MINIMAL))
    mutate(raw)
    with pytest.raises(SchemaError) as exc:
        loads(_text(raw))
    assert exc.value.exit_code == 6


@pytest.mark.parametrize("mutate", [
    lambda r: r["cp_map"][0]["words"][0].update(factors=[[1, 0, 1]]),
    lambda r: r["cp_map"][0]["words"][0].update(spin=[[1, 0], [0, 1]]),
    lambda r: r.update(certificates={"truncations": [[4, 4]]}),
])
def test_dimension_errors(mutate):
    raw = json.loads(json.dumps(MINIMAL))
    mutate(raw)
    with pytest.raises(DimensionError) as exc:
        loads(_text(raw))
    assert exc.value.exit_code == 5


def test_unknown_gallery_name_lists_entries():
    with pytest.raises(ConfigError) as exc:
        gallery("nope")
    assert all(n in str(exc.value) for n in GALLERY_NAMES)


def test_gallery_is_complete_and_round_trips():
    shipped = sorted(p.stem for p in GALLERY_DIR.glob("*.json"))
    assert shipped == sorted(GALLERY_NAMES)
    for name in GALLERY_NAMES:
        cfg = gallery(name)
        assert loads(serialize(cfg)) == cfg
        assert cfg.provenance


def test_round_trip_through_file(tmp_path):
    cfg = gallery("ex3_sbp")
    p = tmp_path / "m.json"
    p.write_text(serialize(cfg))
    assert load_config(p) == cfg


def test_pumped_model_parameters_enter_generator():
    cfg = gallery("ex3_sbp")
    assert cfg.space.n_modes == 2 and cfg.space.spin_dim == 2
    assert {"E", "chi", "omega", "eta", "gamma1", "gamma2", "kappa"} <= set(cfg.parameters)
    p = cfg.parameters
    L = cfg.generator((4, 4))
    assert np.allclose(as_dense(L.H), as_dense(L.H).conj().T)
    # Phi(I) = 2 gamma1 n1 + 2 gamma2 n2 + 2 kappa sigma_+ sigma_-; basis is (n1, n2, spin) with spin fastest
    phi = np.diag(as_dense(L.phi_of_identity)).real
    idx = lambda n1, n2, s: (n1 * 4 + n2) * 2 + s
    assert np.isclose(phi[idx(0, 0, 0)], 2 * p["kappa"])
    assert np.isclose(phi[idx(0, 0, 1)], 0)
    assert np.isclose(phi[idx(2, 1, 1)], 2 * p["gamma1"] * 2 + 2 * p["gamma2"])


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


@settings(max_examples=60, deadline=None)
@given(st.floats(-10, 10), st.floats(0.01, 10))
def test_expression_arithmetic(a, b):
    p = {"a": a, "b": b}
    assert np.isclose(evaluate("a*b + a/b - b**2", p), a * b + a / b - b ** 2)
    assert np.isclose(evaluate("sqrt(b)", p), np.sqrt(b))
    assert np.isclose(evaluate("1j*a", p), 1j * a)
    assert evaluate([a, b], p) == complex(a, b)


@pytest.mark.parametrize("expr", ["__import__('os')", "a.b", "[1][0]", "lambda: 1", "open('x')"])
def test_expression_rejects_non_arithmetic(expr):
    with pytest.raises(ConfigError):
        evaluate(expr, {"a": 1})
