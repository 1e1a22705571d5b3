"""Batch analyses driven by a :class:`ModelConfig`: certify, evolve, iterate, trajectories, deficiency.

Each runner returns an :class:`Outcome` holding the exit code, a stable-ordered
text report and CSV tables; :func:`write_outcome` puts them on disk.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .certify import (CertificateReport, balance_condition, build_lambda_N, check_lambda_pair, check_reference,
                      check_witness, deficiency_search, escape_witness)
from .config import EXIT_CERTIFICATE, EXIT_OK, ModelConfig, evaluate, reference_operator
from .fock_ops import SpaceSpec
from .lindblad import diagonal_block
from .minimal_semigroup import TruncationInadequate, evolve_density, iterate_minimal
from .trajectories import ensemble

CSV_SCHEMA = 1
TRACE_TOL = 1e-6
MONOTONE_TOL = 1e-8
BOUND_TOL = 1e-6
CALIBRATION_SLACK = 0.25


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


@dataclass
class Outcome:
    command: str
    exit_code: int
    lines: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)  # file stem -> (header, rows)
    reports: list = field(default_factory=list)  # (label, CertificateReport)

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"

    def csv_text(self, stem: str) -> str:
        header, rows = self.tables[stem]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["schema_version"] + list(header))
        for r in rows:
            w.writerow([CSV_SCHEMA] + [fmt(v) for v in r])
        return buf.getvalue()


def write_outcome(out: Outcome, directory, formats=("text", "csv")) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    if "text" in formats:
        p = directory / f"{out.command}_report.txt"
        p.write_text(out.text(), encoding="utf-8")
        written.append(p)
    if "csv" in formats:
        for stem in out.tables:
            p = directory / f"{stem}.csv"
            p.write_text(out.csv_text(stem), encoding="utf-8", newline="")
            written.append(p)
    return written


# ---------------------------------------------------------------------------
# certify


def default_truncations(space: SpaceSpec) -> list:
    """Three geometrically spaced truncations ending at the configured one."""
    return [tuple(max(2, int(round(d * r))) for d in space.mode_dims) for r in (0.5, 2 ** -0.5, 1.0)]


def _buffer(cfg: ModelConfig, section: dict | None = None) -> int:
    if section and section.get("buffer") is not None:
        return int(section["buffer"])
    if cfg.certificates.get("buffer") is not None:
        return int(cfg.certificates["buffer"])
    return max(cfg.max_order(), 1)


def _calibrated(value: float, slack: float) -> float:
    return value + slack * (abs(value) + 1.0)


def _generator_for(cfg: ModelConfig, dims):
    L = cfg.generator(dims)
    block = cfg.certificates.get("diagonal_block")
    if block is not None:
        L = diagonal_block(L, int(block))
    return L


def _report_row(label: str, stage: str, rep: CertificateReport):
    row = rep.csv_row()
    return [label, stage] + [row[k] for k in CertificateReport.CSV_FIELDS]


def certify(cfg: ModelConfig, truncations=None) -> Outcome:
    """Run every configured certificate.

    Inequality certificates with free constants are calibrated at the smallest
    truncation (smallest feasible values widened by the calibration slack) and
    then verified with those constants fixed at every truncation.  A model is
    certified when every regularity certificate passes at every truncation and no
    witness or deficiency direction fires.
    """
    certs = cfg.certificates
    truncs = [tuple(t) for t in (truncations or certs.get("truncations") or default_truncations(cfg.space))]
    truncs = sorted(truncs, key=lambda t: math.prod(t))
    slack = float(certs.get("calibration_slack", CALIBRATION_SLACK))
    K = _buffer(cfg)
    out = Outcome("certify", EXIT_OK)
    regular_ok, regular_any, fired = True, False, []

    def record(label, stage, rep, regularity=True):
        nonlocal regular_ok, regular_any
        out.reports.append((f"{label}/{stage}", rep))
        if regularity and stage != "calibrate":
            regular_any = True
            regular_ok &= rep.passed

    if "reference" in certs:
        sec = certs["reference"]
        c = sec.get("c")
        for i, dims in enumerate(truncs):
            L = _generator_for(cfg, dims)
            Lam = reference_operator(sec.get("lambda", {}), L.space, cfg.parameters)
            if i == 0 and c is None:
                cal = check_reference(L, Lam, buffer=K)
                record("reference", "calibrate", cal)
                c = _calibrated(cal.constants["c_min"], slack)
            record("reference", "verify", check_reference(L, Lam, c=c, buffer=K))

    if "lambda_pair" in certs:
        sec = certs["lambda_pair"]
        given = dict(sec.get("constants", {}))
        eps = sec.get("eps")
        for i, dims in enumerate(truncs):
            L = cfg.generator(dims)
            Lam = reference_operator(sec.get("lambda", {}), L.space, cfg.parameters)
            H_sa = cfg.hamiltonian_part(L.space, "sa")
            if i == 0 and any(given.get(k) is None for k in ("c", "mu", "nu", "c1", "c2")):
                cal = check_lambda_pair(L, Lam, H_sa, eps=eps, buffer=K, **given)
                record("lambda_pair", "calibrate", cal)
                if not cal.passed:
                    record("lambda_pair", "verify", cal)
                    break
                eps = cal.constants["eps"]
                for k in ("c", "mu", "nu", "c1", "c2"):
                    if given.get(k) is None:
                        given[k] = _calibrated(cal.constants[k], slack)
            record("lambda_pair", "verify", check_lambda_pair(L, Lam, H_sa, eps=eps, buffer=K, **given))

    if "lambda_N" in certs:
        sec = certs["lambda_N"]
        c = sec.get("c")
        for i, dims in enumerate(truncs):
            L = _generator_for(cfg, dims)
            Lam, coeffs, lam_id = build_lambda_N(int(sec["L"]), int(sec["M"]), int(sec["N"]),
                                                 float(sec.get("lambda0", 1.0)), float(sec.get("slack", 1.5)),
                                                 space=L.space, lambda_identity=sec.get("lambda_identity"))
            if i == 0:
                N, Lo, Mo = int(sec["N"]), int(sec["L"]), int(sec["M"])
                strict = all(coeffs[k + 1] > coeffs[k] * (N - k) * Lo / ((k + 1) * Mo) for k in range(N))
                out.lines.append("lambda_N coefficients: " + ", ".join(f"{x:.17g}" for x in coeffs) +
                                 f"; identity coefficient {lam_id:.17g}; strict recurrence "
                                 f"{'holds' if strict else 'fails'}")
                regular_ok &= strict
                if c is None:
                    cal = check_reference(L, Lam, buffer=K)
                    record("lambda_N", "calibrate", cal)
                    c = _calibrated(cal.constants["c_min"], slack)
            record("lambda_N", "verify", check_reference(L, Lam, c=c, buffer=K))

    if "balance" in certs:
        sec = certs["balance"]
        terms = [(s, evaluate(cf, cfg.parameters, "balance"), int(o)) for s, cf, o in sec["terms"]]
        record("balance", "verify", balance_condition(terms, int(sec["n"]), int(sec.get("N_max", 200))))

    if "witness" in certs:
        sec = certs["witness"]
        dims = tuple(sec.get("mode_dims", cfg.space.mode_dims))
        L = diagonal_block(cfg.generator(dims), int(sec.get("spin_block", 0)))
        Kw = int(sec.get("buffer", K))
        eps = float(sec.get("eps", 0.5))
        X = escape_witness(L, float(sec.get("rate", 1.0)), Kw)
        rep = check_witness(L, X, eps, Kw)
        record("witness", "verify", rep, regularity=False)
        if rep.passed:
            fired.append("witness")

    if "deficiency" in certs:
        sec = certs["deficiency"]
        res = run_deficiency_search(cfg, sec.get("dims"), sec)
        rep = res.report()
        record("deficiency", "verify", rep, regularity=False)
        if res.declared:
            fired.append("deficiency")

    certified = regular_any and regular_ok and not fired
    out.exit_code = EXIT_OK if certified else EXIT_CERTIFICATE
    head = [f"model: {cfg.name}", f"truncations: " + "; ".join("x".join(map(str, t)) for t in truncs),
            f"interior_buffer: {K}"]
    if certified:
        verdict = "certified at desk scale (finite-truncation necessary conditions, not a proof)"
    elif fired:
        verdict = "not certified: " + " and ".join(f"{f} fired" for f in fired) + " (evidence of non-unitality)"
    elif not regular_any:
        verdict = "not certified: no regularity certificate configured"
    else:
        failed = sorted({lbl.split("/")[0] for lbl, r in out.reports if not r.passed and not lbl.endswith("calibrate")
                         and lbl.split("/")[0] not in ("witness", "deficiency")})
        verdict = "not certified: failed " + ", ".join(failed or ["lambda_N recurrence"])
    out.lines = head + out.lines + [f"verdict: {verdict}", ""]
    for label, rep in out.reports:
        out.lines.append(f"[{label}]")
        out.lines.append(rep.to_text())
        out.lines.append("")
    header = ["certificate", "stage"] + list(CertificateReport.CSV_FIELDS)
    rows = [_report_row(*lbl.split("/"), rep) for lbl, rep in out.reports]
    out.tables["certify"] = (header, rows)
    return out


# ---------------------------------------------------------------------------
# deficiency


def run_deficiency_search(cfg: ModelConfig, dims=None, sec: dict | None = None):
    sec = sec if sec is not None else cfg.certificates.get("deficiency", {})
    dims = dims or sec.get("dims") or [cfg.space.mode_dims[0]]
    order = max((t.order for t in cfg.hamiltonian_terms()), default=0)
    K = int(sec.get("buffer", max(order, 1)))
    kw = {}
    if "residual_threshold" in sec:
        kw["residual_threshold"] = float(sec["residual_threshold"])
    if "boundary_threshold" in sec:
        kw["boundary_threshold"] = float(sec["boundary_threshold"])
    if "min_overlap" in sec:
        kw["min_overlap"] = float(sec["min_overlap"])
    return deficiency_search(cfg.hamiltonian_terms(), dims, K, n_modes=cfg.space.n_modes,
                             spin_dim=cfg.space.spin_dim, hermitize=cfg.hamiltonian.get("hermitize", True), **kw)


def deficiency(cfg: ModelConfig, dims=None) -> Outcome:
    res = run_deficiency_search(cfg, dims)
    out = Outcome("deficiency", EXIT_CERTIFICATE if res.declared else EXIT_OK)
    rep = res.report()
    out.reports.append(("deficiency", rep))
    out.lines = [f"model: {cfg.name}", rep.to_text()]
    trend = [[" ".join(map(str, np.atleast_1d(d))), r] for d, r in res.truncation_trend]
    out.tables["deficiency_trend"] = (["mode_dims", "residual"], trend)
    v = res.vector
    out.tables["deficiency_vector"] = (["index", "re", "im"], [[i, x.real, x.imag] for i, x in enumerate(v)])
    return out


# ---------------------------------------------------------------------------
# evolve, iterate, trajectories


def evolve(cfg: ModelConfig, dims=None) -> Outcome:
    ev = cfg.evolution
    if not ev:
        raise ValueError("config has no evolution block")
    dims = dims or ev.get("mode_dims") or cfg.space.mode_dims
    L = cfg.generator(dims)
    psi = cfg.initial_vector("evolution", L.space)
    rho0 = np.outer(psi, psi.conj())
    K = _buffer(cfg, ev)
    thr = ev.get("boundary_threshold")
    try:
        rec = evolve_density(L, rho0, float(ev.get("t_max", 1.0)), float(ev.get("dt", 0.01)), buffer=K)
    except TruncationInadequate as exc:
        out = Outcome("evolve", EXIT_CERTIFICATE)
        out.lines = [f"model: {cfg.name}", f"truncation inadequate: {exc}"]
        return out
    dev = np.abs(rec.traces - 1)
    inside = rec.boundary_population < thr if thr is not None else np.ones_like(dev, dtype=bool)
    trace_ok = bool(np.all(dev[inside] < TRACE_TOL))
    bdy_ok = bool(np.all(inside))
    out = Outcome("evolve", EXIT_OK if trace_ok and bdy_ok else EXIT_CERTIFICATE)
    out.lines = [f"model: {cfg.name}", "truncation: " + "x".join(map(str, L.space.mode_dims)) +
                 f" spin={L.space.spin_dim}", f"interior_buffer: {K}",
                 f"t_max: {rec.times[-1]:.17g}", f"steps: {len(rec.times) - 1}",
                 f"max_trace_deviation: {dev.max():.17g}",
                 f"max_boundary_population: {rec.boundary_population.max():.17g}",
                 f"boundary_threshold: {'none' if thr is None else f'{thr:.17g}'}",
                 f"trace_preserved: {str(trace_ok).lower()}", f"boundary_within_threshold: {str(bdy_ok).lower()}"]
    out.tables["evolve"] = (["time", "trace", "trace_deviation", "boundary_population"],
                            [[t, tr, d, b] for t, tr, d, b in zip(rec.times, rec.traces, dev, rec.boundary_population)])
    return out


def iterate(cfg: ModelConfig, dims=None) -> Outcome:
    it = cfg.iteration
    dims = dims or it.get("mode_dims") or cfg.space.mode_dims
    L = cfg.generator(dims)
    n_max = int(it.get("n_max", 12))
    res = iterate_minimal(L, np.eye(L.dim), float(it.get("t", 1.0)), n_max, steps=int(it.get("steps", 200)),
                          stop_tol=None)
    rows, worst_inc, worst_norm = [], np.inf, 0.0
    for n, P in enumerate(res.iterates):
        norm = float(np.linalg.norm(P, 2))
        inc = float(np.linalg.eigvalsh(res.iterates[n + 1] - P)[0]) if n + 1 < len(res.iterates) else float("nan")
        defect = float(np.linalg.norm(res.defects[n], 2))
        rows.append([n, norm, inc, defect])
        worst_norm = max(worst_norm, norm)
        if not math.isnan(inc):
            worst_inc = min(worst_inc, inc)
    ok = worst_inc >= -MONOTONE_TOL and worst_norm <= 1 + BOUND_TOL
    out = Outcome("iterate", EXIT_OK if ok else EXIT_CERTIFICATE)
    out.lines = [f"model: {cfg.name}", "truncation: " + "x".join(map(str, L.space.mode_dims)) +
                 f" spin={L.space.spin_dim}", f"t: {res.t:.17g}", f"n_max: {n_max}",
                 f"quadrature: {res.quadrature['rule']} steps={res.quadrature['steps']}",
                 f"min_increment_eigenvalue: {worst_inc:.17g}", f"max_norm: {worst_norm:.17g}",
                 f"monotone_and_bounded: {str(ok).lower()}"]
    out.tables["iterate"] = (["n", "norm", "min_eig_next_increment", "defect_norm"], rows)
    return out


def trajectories(cfg: ModelConfig, seed=None, dims=None) -> Outcome:
    tr = cfg.trajectories
    if not tr:
        raise ValueError("config has no trajectories block")
    dims = dims or tr.get("mode_dims") or cfg.space.mode_dims
    L = cfg.generator(dims)
    psi = cfg.initial_vector("trajectories", L.space)
    block = tr.get("spin_block")
    if block is not None:
        sel = np.flatnonzero(L.space.spin_index() == int(block))
        L = diagonal_block(L, int(block))
        psi = psi[sel]
        if abs(np.linalg.norm(psi) - 1) > 1e-12:
            raise ValueError("initial state is not supported in the selected spin block")
    seed = int(tr.get("seed", 0) if seed is None else seed)
    summ = ensemble(L, psi, float(tr.get("t_max", 1.0)), int(tr.get("n_traj", 100)), seed,
                    int(tr.get("jump_cap", 500)), dt=float(tr.get("dt", 0.01)), threads=int(tr.get("threads", 1)))
    out = Outcome("trajectories", EXIT_CERTIFICATE if summ.explosion_fraction > 0 else EXIT_OK)
    out.lines = [f"model: {cfg.name}", "truncation: " + "x".join(map(str, L.space.mode_dims)) +
                 f" spin={L.space.spin_dim}", f"seed: {seed}", f"n_traj: {len(summ.records)}",
                 f"jump_cap: {summ.jump_cap}", f"t_max: {summ.t_max:.17g}",
                 f"explosion_fraction: {summ.explosion_fraction:.17g}",
                 f"non_exploded_fraction: {1 - summ.explosion_fraction:.17g}",
                 f"no_jump_fraction: {summ.no_jump_fraction:.17g}",
                 f"mean_time_to_cap: {summ.mean_time_to_cap():.17g}"]
    out.tables["trajectories"] = (["index", "seed", "n_jumps", "final_time", "exploded", "last_jump_time",
                                   "final_state_norm"],
                                  [[r.index, r.seed, r.n_jumps, r.final_time, r.exploded, r.last_jump_time,
                                    r.final_state_norm] for r in summ.records])
    out.tables["trajectories_summary"] = (
        ["n_traj", "explosion_fraction", "survival_estimate", "no_jump_fraction", "mean_time_to_cap"],
        [[len(summ.records), summ.explosion_fraction, summ.survival_estimate, summ.no_jump_fraction,
          summ.mean_time_to_cap()]])
    return out


def report(cfg: ModelConfig, seed=None, truncations=None) -> Outcome:
    """Every analysis the config describes, merged into one report."""
    parts = []
    if cfg.certificates:
        parts.append(certify(cfg, truncations))
    if cfg.evolution:
        parts.append(evolve(cfg))
    if cfg.iteration:
        parts.append(iterate(cfg))
    if cfg.trajectories:
        parts.append(trajectories(cfg, seed))
    out = Outcome("report", max((p.exit_code for p in parts), default=EXIT_OK))
    for p in parts:
        out.lines += [f"== {p.command} (exit {p.exit_code}) ==", *p.lines, ""]
        out.tables.update(p.tables)
        out.reports += p.reports
    return out
