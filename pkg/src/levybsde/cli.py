"""Command-line runner: ``run``, ``validate`` and ``list-scenarios``.

Exit codes: 0 success, 1 a run check failed, 2 invalid or malformed
config, 3 numerical failure inside a module.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bsde import StepTooLargeError
from .chaos import NonCanonicalError, NotInD12Error
from .config import ConfigError, ConfigParseError, ExperimentConfig, load_config
from .experiments import RunResult, run_experiment
from .regression import RankDeficientError
from .rng import SCHEME
from .scenarios import get as get_scenario
from .scenarios import list_scenarios

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
NUMERICAL_ERRORS = (RankDeficientError, StepTooLargeError, NotInD12Error, NonCanonicalError, np.linalg.LinAlgError, FloatingPointError)
BUILTIN = "builtin:"

log = logging.getLogger("levybsde")


def _load(source: str) -> ExperimentConfig:
    if source.startswith(BUILTIN):
        return get_scenario(source[len(BUILTIN):]).build()
    return load_config(source)


def _report_config_error(exc: Exception, source: str) -> int:
    if isinstance(exc, ConfigParseError):
        print(f"{source}: malformed JSON: {exc}", file=sys.stderr)
    elif isinstance(exc, ConfigError):
        print(f"{source}: invalid config", file=sys.stderr)
        for fld, msg in exc.errors:
            print(f"  {fld}: {msg}", file=sys.stderr)
    else:
        print(f"{source}: {exc}", file=sys.stderr)
    return EXIT_CONFIG


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_outputs(cfg: ExperimentConfig, result: RunResult, out: Path) -> dict:
    """Write ``results/*.csv``, ``summary.txt`` and ``manifest.json``; return the manifest."""
    (out / "results").mkdir(parents=True, exist_ok=True)
    files = {}
    for name, text in sorted(result.tables.items()):
        data = text.encode("utf-8")
        (out / "results" / name).write_bytes(data)
        files[f"results/{name}"] = _sha256(data)
    lines = [f"scenario: {cfg.name or '<unnamed>'}", f"kind: {cfg.kind}", f"seed: {cfg.seed}", ""]
    for c in result.checks:
        lines.append(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    if result.metrics:
        lines += ["", "metrics:", json.dumps(result.metrics, indent=2, sort_keys=True, default=_json_default)]
    lines += ["", f"status: {'ok' if result.passed else 'check failed'}"]
    summary = ("\n".join(lines) + "\n").encode("utf-8")
    (out / "summary.txt").write_bytes(summary)
    files["summary.txt"] = _sha256(summary)
    manifest = {
        "name": cfg.name,
        "kind": cfg.kind,
        "seed": cfg.seed,
        "config_sha256": cfg.sha256(),
        "config": cfg.to_dict(),
        "versions": {"levybsde": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version(), "rng_scheme": SCHEME},
        "files": files,
        "passed": result.passed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def cmd_run(args) -> int:
    try:
        cfg = _load(args.config)
    except (ConfigError, ConfigParseError, KeyError, OSError) as exc:
        return _report_config_error(exc, args.config)
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output.get("dir") or f"runs/{cfg.name or cfg.kind}")
    try:
        result = run_experiment(cfg, args.threads)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_outputs(cfg, result, out)
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    print(f"outputs written to {out}")
    return EXIT_OK if result.passed else EXIT_CHECK


def cmd_validate(args) -> int:
    try:
        cfg = _load(args.config)
    except (ConfigError, ConfigParseError, KeyError, OSError) as exc:
        return _report_config_error(exc, args.config)
    print(f"{args.config}: valid {cfg.kind} config (sha256 {cfg.sha256()[:12]})")
    return EXIT_OK


def cmd_list(args) -> int:
    for s in list_scenarios(args.kind):
        crit = f"criterion {s.criterion}" if s.criterion else "extra"
        print(f"{s.name:26s} {s.kind:16s} {crit:12s} {s.description}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="levybsde", description="BSDE experiments driven by finite-activity Levy processes")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config (or builtin:NAME)")
    r.add_argument("config")
    r.add_argument("--out", help="output directory")
    r.add_argument("--threads", type=int, default=1, help="simulation worker threads")
    r.add_argument("--verbose", action="store_true")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="validate a config without running it")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    ls = sub.add_parser("list-scenarios", help="list built-in scenarios")
    ls.add_argument("--kind", help="only scenarios of this kind")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
