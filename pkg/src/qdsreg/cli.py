"""Command-line entry point ``qdsreg``.

Exit codes: 0 success, 1 runtime error, 2 certificate failure (or a fired
witness), 3 config parse error, 4 unbound parameter, 5 dimension mismatch,
6 schema error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import (EXIT_DIMENSION, EXIT_RUNTIME, GALLERY_NAMES, ConfigError, DimensionError, gallery,
                     load_config)

COMMANDS = ("certify", "evolve", "iterate", "trajectories", "deficiency", "gallery-list", "report")
log = logging.getLogger("qdsreg")


def parse_dims(text: str, n_modes: int) -> list:
    """Truncation list: ``;`` separates truncations, ``,`` separates modes.

    For a single-mode model commas also separate truncations, so ``50,100,200``
    means three truncations.
    """
    try:
        if n_modes == 1:
            parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
            return [(int(p),) for p in parts]
        out = []
        for chunk in text.split(";"):
            if chunk.strip():
                dims = tuple(int(x) for x in chunk.split(",") if x.strip())
                if len(dims) != n_modes:
                    raise DimensionError(f"truncation {chunk!r} does not list {n_modes} mode dimensions")
                out.append(dims)
        return out
    except ValueError:
        raise DimensionError(f"cannot parse --dims {text!r}") from None


def resolve_config(spec: str):
    """A file path, or ``gallery:NAME`` for a shipped model."""
    if spec.startswith("gallery:"):
        return gallery(spec.split(":", 1)[1])
    return load_config(spec)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdsreg", description="Finite-truncation regularity certificates and "
                                "diagnostics for Lindblad-type generators on bosonic modes.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="config file, or gallery:NAME")
    p.add_argument("--out", help="output directory (default: the config's output.directory or ./out)")
    p.add_argument("--seed", type=int, help="base seed for trajectories (unsigned 64-bit)")
    p.add_argument("--dims", help="truncations, e.g. '8,8;10,10;12,12' or '50,100,200'")
    p.add_argument("--report", choices=("text", "csv"), default="text", help="format printed to stdout")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, cfg, out_dir=None, seed=None, dims=None, report_format="text", stream=None):
    """Dispatch one command; returns ``(exit_code, outcome)``."""
    stream = stream or sys.stdout
    if command == "gallery-list":
        for name in GALLERY_NAMES:
            g = gallery(name)
            stream.write(f"{name}\t{g.description}\n")
        return 0, None
    if cfg is None:
        raise ConfigError(f"--config is required for {command}")
    if command == "certify":
        out = pipeline.certify(cfg, dims)
    elif command == "deficiency":
        out = pipeline.deficiency(cfg, dims)
    elif command in ("evolve", "iterate", "trajectories"):
        if dims is not None and len(dims) != 1:
            raise DimensionError(f"{command} takes a single truncation in --dims")
        one = dims[0] if dims else None
        if command == "trajectories":
            out = pipeline.trajectories(cfg, seed, one)
        else:
            out = getattr(pipeline, command)(cfg, one)
    elif command == "report":
        out = pipeline.report(cfg, seed, dims)
    else:
        raise ValueError(f"unknown command {command!r}")
    directory = Path(out_dir or cfg.output.get("directory") or "out")
    formats = cfg.output.get("formats", ["text", "csv"])
    for path in pipeline.write_outcome(out, directory, formats):
        log.info("wrote %s", path)
    if report_format == "text":
        stream.write(out.text())
    else:
        for stem in out.tables:
            stream.write(out.csv_text(stem))
    return out.exit_code, out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = resolve_config(args.config) if args.config else None
        dims = parse_dims(args.dims, cfg.space.n_modes) if (args.dims and cfg is not None) else None
        code, _ = run(args.command, cfg, args.out, args.seed, dims, args.report)
        return code
    except ConfigError as exc:
        print(f"qdsreg: config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # runtime failures are exit 1, never confused with a verdict
        print(f"qdsreg: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
