"""Model configuration: JSON loading, validation, and generator construction.

Coefficients may be numbers, ``[re, im]`` pairs, or expression strings over the
named parameters (``"sqrt(2*g1)"``, ``"0.5j*chi"``).  Spin blocks are ``M x M``
nested lists or one of the names in :data:`SPIN_NAMES`.
"""

from __future__ import annotations

import ast
import copy
import json
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fock_ops import OperatorMatrix, PolyTerm, SpaceSpec, diagonal_lambda, eval_polynomial
from .lindblad import CPMapSpec, KrausSpec, LindbladGenerator, assemble

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CERTIFICATE = 2
EXIT_PARSE = 3
EXIT_UNBOUND = 4
EXIT_DIMENSION = 5
EXIT_SCHEMA = 6

SPIN_NAMES = {
    "id": [[1, 0], [0, 1]],
    "sp": [[0, 1], [0, 0]],
    "sm": [[0, 0], [1, 0]],
    "sz": [[1, 0], [0, -1]],
    "sx": [[0, 1], [1, 0]],
    "sy": [[0, -1j], [1j, 0]],
    "p0": [[1, 0], [0, 0]],
    "p1": [[0, 0], [0, 1]],
}


class ConfigError(Exception):
    exit_code = EXIT_SCHEMA


class ConfigParseError(ConfigError):
    exit_code = EXIT_PARSE


class UnboundParameterError(ConfigError):
    exit_code = EXIT_UNBOUND

    def __init__(self, name: str, where: str = ""):
        super().__init__(f"unbound parameter {name!r}" + (f" in {where}" if where else ""))
        self.name = name


class DimensionError(ConfigError):
    exit_code = EXIT_DIMENSION


class SchemaError(ConfigError):
    exit_code = EXIT_SCHEMA


# ---------------------------------------------------------------------------
# expressions

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
           ast.Pow: operator.pow}
_UNARY = {ast.UAdd: operator.pos, ast.USub: operator.neg}
_FUNCS = {"sqrt": lambda x: np.sqrt(complex(x)) if np.iscomplexobj(x) or x < 0 else math.sqrt(x),
          "exp": np.exp, "conj": np.conj, "abs": abs, "cos": np.cos, "sin": np.sin}
_CONSTS = {"pi": math.pi}


def expression_names(expr: str) -> set:
    tree = _parse_expr(expr)
    return {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)} - set(_FUNCS) - set(_CONSTS)


def _parse_expr(expr: str):
    try:
        return ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise SchemaError(f"cannot parse expression {expr!r}: {exc.msg}") from None


def evaluate(expr, params: dict, where: str = ""):
    """Numeric value of a coefficient: number, ``[re, im]`` pair, or expression string."""
    if isinstance(expr, bool):
        raise SchemaError(f"boolean is not a coefficient in {where}")
    if isinstance(expr, (int, float)):
        return expr
    if isinstance(expr, list) and len(expr) == 2 and all(isinstance(x, (int, float)) for x in expr):
        return complex(expr[0], expr[1])
    if not isinstance(expr, str):
        raise SchemaError(f"unsupported coefficient {expr!r} in {where}")

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float, complex)):
            return node.value
        if isinstance(node, ast.Name):
            if node.id in _CONSTS:
                return _CONSTS[node.id]
            if node.id not in params:
                raise UnboundParameterError(node.id, where)
            return evaluate(params[node.id], {}, where)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            return _UNARY[type(node.op)](ev(node.operand))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS \
                and len(node.args) == 1 and not node.keywords:
            return _FUNCS[node.func.id](ev(node.args[0]))
        raise SchemaError(f"unsupported syntax in expression {expr!r} ({where})")

    value = ev(_parse_expr(expr))
    if isinstance(value, complex) and value.imag == 0:
        value = value.real
    return value


def _spin_matrix(spec, spin_dim: int, params: dict, where: str):
    if spec is None:
        return None
    if isinstance(spec, str):
        if spec not in SPIN_NAMES:
            raise SchemaError(f"unknown spin matrix name {spec!r} in {where}")
        mat = np.array(SPIN_NAMES[spec], dtype=complex)
    else:
        if not isinstance(spec, list) or not all(isinstance(r, list) for r in spec):
            raise SchemaError(f"spin block must be a name or a nested list in {where}")
        mat = np.array([[evaluate(x, params, where) for x in row] for row in spec], dtype=complex)
    if mat.shape != (spin_dim, spin_dim):
        raise DimensionError(f"spin block of shape {mat.shape} in {where}, spin dimension is {spin_dim}")
    return mat


# ---------------------------------------------------------------------------
# schema

_TERM_KEYS = {"coeff", "spin", "factors", "part"}
_SECTIONS = {
    "name": str, "description": str, "provenance": str, "space": dict, "parameters": dict,
    "hamiltonian": dict, "cp_map": list, "certificates": dict, "evolution": dict, "iteration": dict,
    "trajectories": dict, "output": dict,
}
_SUBKEYS = {
    "space": {"mode_dims", "spin_dim"},
    "hamiltonian": {"hermitize", "terms"},
    "certificates": {"truncations", "buffer", "expect", "calibration_slack", "reference", "lambda_pair",
                     "lambda_N", "balance", "deficiency", "witness", "diagonal_block"},
    "evolution": {"t_max", "dt", "mode_dims", "initial", "boundary_threshold", "buffer", "snapshot_every"},
    "iteration": {"t", "n_max", "steps", "mode_dims"},
    "trajectories": {"n_traj", "seed", "jump_cap", "t_max", "dt", "mode_dims", "initial", "spin_block",
                     "threads"},
    "output": {"directory", "formats"},
}
_CERT_KEYS = {
    "reference": {"lambda", "c", "hamiltonian_part"},
    "lambda_pair": {"lambda", "eps", "constants"},
    "lambda_N": {"L", "M", "N", "lambda0", "slack", "lambda_identity", "c"},
    "balance": {"terms", "n", "N_max"},
    "deficiency": {"dims", "buffer", "residual_threshold", "boundary_threshold", "min_overlap"},
    "witness": {"spin_block", "rate", "eps", "mode_dims", "buffer", "projection"},
    "diagonal_block": None,
}
_LAMBDA_KEYS = {"kind", "c", "exponents", "order"}
_KRAUS_KEYS = {"coeff", "label", "words"}
_INITIAL_KEYS = {"occupation", "spin"}


def _reject_unknown(obj: dict, allowed: set, where: str):
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise SchemaError(f"unknown key(s) {extra} in {where}")


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaError(f"missing required key {key!r} in {where}")
    return obj[key]


@dataclass
class ModelConfig:
    name: str
    space: SpaceSpec
    parameters: dict
    hamiltonian: dict
    cp_map: list
    certificates: dict = field(default_factory=dict)
    evolution: dict = field(default_factory=dict)
    iteration: dict = field(default_factory=dict)
    trajectories: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    description: str = ""
    provenance: str = ""

    def to_dict(self) -> dict:
        out = {"name": self.name, "description": self.description, "provenance": self.provenance,
               "space": {"mode_dims": list(self.space.mode_dims), "spin_dim": self.space.spin_dim},
               "parameters": copy.deepcopy(self.parameters), "hamiltonian": copy.deepcopy(self.hamiltonian),
               "cp_map": copy.deepcopy(self.cp_map)}
        for key in ("certificates", "evolution", "iteration", "trajectories", "output"):
            val = getattr(self, key)
            if val:
                out[key] = copy.deepcopy(val)
        return out

    # -- construction helpers

    def with_dims(self, mode_dims) -> SpaceSpec:
        mode_dims = tuple(int(d) for d in mode_dims)
        if len(mode_dims) != self.space.n_modes:
            raise DimensionError(f"truncation {mode_dims} does not match {self.space.n_modes} mode(s)")
        return SpaceSpec(mode_dims, self.space.spin_dim)

    def hamiltonian_terms(self, part: str | None = None) -> list:
        terms = []
        for i, t in enumerate(self.hamiltonian.get("terms", [])):
            if part is not None and t.get("part", "s") != part:
                continue
            terms.append(self._poly_term(t, f"hamiltonian.terms[{i}]"))
        return terms

    def _poly_term(self, t: dict, where: str) -> PolyTerm:
        coeff = evaluate(t.get("coeff", 1), self.parameters, where)
        spin = _spin_matrix(t.get("spin"), self.space.spin_dim, self.parameters, where)
        block = coeff if spin is None else coeff * spin
        return PolyTerm(block, tuple(tuple(f) for f in t.get("factors", [])))

    def cp_spec(self) -> CPMapSpec:
        terms = []
        for i, k in enumerate(self.cp_map):
            where = f"cp_map[{i}]"
            c = k.get("coeff", 1)
            if isinstance(c, list) and c and isinstance(c[0], list) or isinstance(c, str) and c in SPIN_NAMES:
                coeff = _spin_matrix(c, self.space.spin_dim, self.parameters, where)
            else:
                coeff = evaluate(c, self.parameters, where)
            words = tuple(self._poly_term(w, f"{where}.words[{j}]") for j, w in enumerate(k["words"]))
            terms.append(KrausSpec(words, coeff, k.get("label", f"L{i}")))
        return CPMapSpec(terms)

    def generator(self, mode_dims=None) -> LindbladGenerator:
        space = self.space if mode_dims is None else self.with_dims(mode_dims)
        return assemble(space, self.cp_spec(), self.hamiltonian_terms(),
                        hermitize=self.hamiltonian.get("hermitize", True))

    def hamiltonian_part(self, space: SpaceSpec, part: str) -> np.ndarray:
        terms = self.hamiltonian_terms(part)
        return eval_polynomial(space, terms, hermitize=self.hamiltonian.get("hermitize", True)).dense()

    def max_order(self) -> int:
        orders = [t.order for t in self.hamiltonian_terms()]
        for k in self.cp_spec().kraus_terms:
            orders += [w.order for w in k.words]
        return max(orders, default=0)

    def initial_vector(self, section: str = "evolution", space: SpaceSpec | None = None) -> np.ndarray:
        space = space or self.space
        init = getattr(self, section).get("initial", {"occupation": [0] * space.n_modes, "spin": 0})
        occ = init.get("occupation", [0] * space.n_modes)
        spin = init.get("spin", 0)
        if len(occ) != space.n_modes or any(not 0 <= o < d for o, d in zip(occ, space.mode_dims)) \
                or not 0 <= spin < space.spin_dim:
            raise DimensionError(f"initial state {init} does not fit {space}")
        v = np.zeros(space.total_dim, dtype=complex)
        v[np.ravel_multi_index(tuple(occ) + (spin,), space.mode_dims + (space.spin_dim,))] = 1
        return v


def reference_operator(spec: dict, space: SpaceSpec, params: dict) -> OperatorMatrix:
    """Diagonal reference operator from a config block."""
    kind = spec.get("kind", "diagonal")
    c = float(evaluate(spec.get("c", 1), params, "lambda.c"))
    if kind == "diagonal":
        return diagonal_lambda(space, c, spec.get("exponents", [1] * space.n_modes))
    if kind == "falling":
        # c ((a^dagger)^k a^k + I) summed over modes
        k = int(spec.get("order", 2))
        occ = space.occupations()
        diag = np.ones(space.total_dim)
        for m in range(space.n_modes):
            diag += np.array([math.perm(int(x), k) if x >= k else 0 for x in occ[:, m]], dtype=float)
        import scipy.sparse as sp
        return OperatorMatrix(space, sp.diags((c * diag).astype(complex), format="csr"), hermitian_hint=True)
    raise SchemaError(f"unknown reference operator kind {kind!r}")


# ---------------------------------------------------------------------------
# loading


def _validate(raw: dict) -> ModelConfig:
    if not isinstance(raw, dict):
        raise SchemaError("top level must be an object")
    _reject_unknown(raw, set(_SECTIONS), "config")
    for key, typ in _SECTIONS.items():
        if key in raw and not isinstance(raw[key], typ):
            raise SchemaError(f"{key!r} must be of type {typ.__name__}")
    for key, allowed in _SUBKEYS.items():
        if key in raw:
            _reject_unknown(raw[key], allowed, key)
    space_raw = _require(raw, "space", "config")
    mode_dims = _require(space_raw, "mode_dims", "space")
    if not isinstance(mode_dims, list) or not mode_dims or not all(isinstance(d, int) for d in mode_dims):
        raise SchemaError("space.mode_dims must be a nonempty list of integers")
    try:
        space = SpaceSpec(tuple(mode_dims), space_raw.get("spin_dim", 1))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    params = raw.get("parameters", {})
    for k, v in params.items():
        if not isinstance(v, (int, float)) and not (isinstance(v, list) and len(v) == 2):
            raise SchemaError(f"parameter {k!r} must be a number or [re, im] pair")
    ham = raw.get("hamiltonian", {"hermitize": True, "terms": []})
    ham = {"hermitize": ham.get("hermitize", True), "terms": ham.get("terms", [])}
    for i, t in enumerate(ham["terms"]):
        _check_term(t, space, f"hamiltonian.terms[{i}]", allow_part=True)
    cp = raw.get("cp_map", [])
    for i, k in enumerate(cp):
        if not isinstance(k, dict):
            raise SchemaError(f"cp_map[{i}] must be an object")
        _reject_unknown(k, _KRAUS_KEYS, f"cp_map[{i}]")
        words = _require(k, "words", f"cp_map[{i}]")
        if not isinstance(words, list) or not words:
            raise SchemaError(f"cp_map[{i}].words must be a nonempty list")
        for j, w in enumerate(words):
            _check_term(w, space, f"cp_map[{i}].words[{j}]", allow_part=False)
    certs = raw.get("certificates", {})
    for key, allowed in _CERT_KEYS.items():
        if key in certs and allowed is not None:
            if not isinstance(certs[key], dict):
                raise SchemaError(f"certificates.{key} must be an object")
            _reject_unknown(certs[key], allowed, f"certificates.{key}")
            if "lambda" in certs[key]:
                _reject_unknown(certs[key]["lambda"], _LAMBDA_KEYS, f"certificates.{key}.lambda")
    for tr in certs.get("truncations", []):
        if len(tr) != space.n_modes:
            raise DimensionError(f"truncation {tr} does not match {space.n_modes} mode(s)")
    for sec in ("evolution", "trajectories"):
        if sec in raw and "initial" in raw[sec]:
            _reject_unknown(raw[sec]["initial"], _INITIAL_KEYS, f"{sec}.initial")
    for sec in ("evolution", "iteration"):
        md = raw.get(sec, {}).get("mode_dims")
        if md is not None and len(md) != space.n_modes:
            raise DimensionError(f"{sec}.mode_dims {md} does not match {space.n_modes} mode(s)")
    cfg = ModelConfig(
        name=raw.get("name", ""), space=space, parameters=dict(params), hamiltonian=ham, cp_map=list(cp),
        certificates=dict(certs), evolution=dict(raw.get("evolution", {})),
        iteration=dict(raw.get("iteration", {})), trajectories=dict(raw.get("trajectories", {})),
        output=dict(raw.get("output", {})), description=raw.get("description", ""),
        provenance=raw.get("provenance", ""))
    _check_bindings(cfg)
    if "evolution" in raw:
        cfg.initial_vector("evolution", cfg.with_dims(cfg.evolution.get("mode_dims", space.mode_dims)))
    return cfg


def _check_term(t, space: SpaceSpec, where: str, allow_part: bool):
    if not isinstance(t, dict):
        raise SchemaError(f"{where} must be an object")
    _reject_unknown(t, _TERM_KEYS if allow_part else _TERM_KEYS - {"part"}, where)
    if allow_part and t.get("part", "s") not in ("s", "sa"):
        raise SchemaError(f"{where}.part must be 's' or 'sa'")
    for f in t.get("factors", []):
        if not (isinstance(f, list) and len(f) == 3 and all(isinstance(x, int) and x >= 0 for x in f)):
            raise SchemaError(f"{where}: factors are [mode, dagger_power, plain_power] triples of integers >= 0")
        if f[0] >= space.n_modes:
            raise DimensionError(f"{where}: mode {f[0]} out of range for {space.n_modes} mode(s)")
    spin = t.get("spin")
    if isinstance(spin, list) and (len(spin) != space.spin_dim or any(len(r) != space.spin_dim for r in spin)):
        raise DimensionError(f"{where}: spin block does not match spin dimension {space.spin_dim}")
    if isinstance(spin, str) and spin in SPIN_NAMES and space.spin_dim != 2:
        raise DimensionError(f"{where}: named spin matrix {spin!r} needs spin dimension 2")


def _collect_exprs(obj, out: list, where: str):
    if isinstance(obj, str):
        out.append((obj, where))
    elif isinstance(obj, list):
        for i, x in enumerate(obj):
            _collect_exprs(x, out, f"{where}[{i}]")


def _check_bindings(cfg: ModelConfig):
    exprs = []
    for i, t in enumerate(cfg.hamiltonian["terms"]):
        _collect_exprs(t.get("coeff", 1), exprs, f"hamiltonian.terms[{i}].coeff")
        if isinstance(t.get("spin"), list):
            _collect_exprs(t["spin"], exprs, f"hamiltonian.terms[{i}].spin")
    for i, k in enumerate(cfg.cp_map):
        c = k.get("coeff", 1)
        if not (isinstance(c, str) and c in SPIN_NAMES):
            _collect_exprs(c, exprs, f"cp_map[{i}].coeff")
        for j, w in enumerate(k["words"]):
            _collect_exprs(w.get("coeff", 1), exprs, f"cp_map[{i}].words[{j}].coeff")
    for i, term in enumerate(cfg.certificates.get("balance", {}).get("terms", [])):
        _collect_exprs(term[1], exprs, f"certificates.balance.terms[{i}]")
    for expr, where in exprs:
        for name in expression_names(expr):
            if name not in cfg.parameters:
                raise UnboundParameterError(name, where)
    # evaluate everything once so bad values surface at load time
    cfg.cp_spec()
    cfg.hamiltonian_terms()


def loads(text: str, source: str = "<string>") -> ModelConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return _validate(raw)


def load_config(path) -> ModelConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except UnicodeDecodeError as exc:
        raise ConfigParseError(f"{path}: not valid UTF-8 ({exc.reason})") from None
    return loads(text, str(path))


def serialize(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=False) + "\n"


GALLERY_DIR = Path(__file__).with_name("gallery")
GALLERY_NAMES = ("ex1", "ex2", "ex3_sbp", "ex4_kilin", "ex5_balance", "ex5_sm_unregular", "ex6_lmv",
                 "eq33_deficiency")


def gallery(name: str) -> ModelConfig:
    if name not in GALLERY_NAMES:
        raise ConfigError(f"unknown gallery entry {name!r}; available: {', '.join(GALLERY_NAMES)}")
    return load_config(GALLERY_DIR / f"{name}.json")
