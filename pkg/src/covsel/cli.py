"""Command line: ``covsel gen``, ``covsel run``, ``covsel compare``.

Logs go to stderr (level from ``COVSEL_LOG``: error, warn, info, debug);
data only ever goes to files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import multiprocessing
import os
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from ._backend import BACKEND
from .config import ConfigError, RunConfig, load_run_config, parse_synthetic, read_ini
from .harness import (
    MissingBaselineError,
    ReportError,
    compare,
    emit_report,
    load_results,
    run_experiment,
    write_result,
)
from .model import TestDatabase
from .oracle import DatabaseFiles, DatabaseFormatError, gen_synthetic, load_database

log = logging.getLogger("covsel")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _setup_logging() -> None:
    name = os.environ.get("COVSEL_LOG", "warn").strip().lower()
    level = LOG_LEVELS.get(name, logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("covsel")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False
    if name not in LOG_LEVELS:
        root.warning("COVSEL_LOG=%r not recognised; using warn", name)


def _overrides(extra: Sequence[str]) -> dict[str, str]:
    """Turn trailing ``--key value`` / ``--key=value`` pairs into a dict."""
    out: dict[str, str] = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"--{key} needs a value") from None
        out[key.replace("-", "_")] = value
    return out


def versions() -> dict[str, str]:
    return {
        "covsel": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "kernels": BACKEND,
    }


# ---------------------------------------------------------------- gen


def cmd_gen(spec_path: Path, out_dir: Path, seed: int | None = None, overrides: dict | None = None) -> DatabaseFiles:
    cp = read_ini(spec_path)
    if not cp.has_section("synthetic"):
        raise ConfigError(f"{spec_path}: expected a [synthetic] section")
    section = dict(cp["synthetic"])
    section.update(overrides or {})
    if seed is not None:
        section["seed"] = str(seed)
    spec = parse_synthetic(section)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = DatabaseFiles.in_dir(out_dir)
    sdb = gen_synthetic(spec, files)
    (out_dir / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    log.info("wrote %d tests, %d/%d reachable points to %s", spec.n_tests, sdb.n_reachable, spec.n_points, out_dir)
    return files


# ---------------------------------------------------------------- run

_WORKER_DB: TestDatabase | None = None
_WORKER_CFG: RunConfig | None = None


def _run_one(job: tuple[str, int]):
    label, seed = job
    assert _WORKER_DB is not None and _WORKER_CFG is not None
    cfg = _WORKER_CFG.with_seed(label, seed)
    return run_experiment(_WORKER_DB, cfg, _WORKER_CFG.levels, label, _WORKER_CFG.max_tests)


def _load_db(cfg: RunConfig) -> TestDatabase:
    if cfg.synthetic is not None:
        return gen_synthetic(cfg.synthetic).db
    assert cfg.database is not None
    return load_database(cfg.database)


def cmd_run(cfg: RunConfig, jobs: int = 1) -> list:
    global _WORKER_DB, _WORKER_CFG
    db = _load_db(cfg)
    _WORKER_DB, _WORKER_CFG = db, cfg
    _ = db.test_group, db.feature_order  # build caches once, before forking
    work = [(label, seed) for label in cfg.strategies for seed in cfg.seeds]
    if jobs > 1 and len(work) > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(jobs, len(work))) as pool:
            results = pool.map(_run_one, work, chunksize=1)
    else:
        results = [_run_one(w) for w in work]

    out = cfg.out
    for r in results:
        write_result(r, out)
    meta = {
        "config": cfg.source,
        "levels": list(cfg.levels),
        "seeds": list(cfg.seeds),
        "strategies": list(cfg.strategies),
        "database": (
            {"synthetic": cfg.synthetic.to_dict()}
            if cfg.synthetic is not None
            else {k: str(v) for k, v in vars(cfg.database).items()}
        ),
        "versions": versions(),
    }
    (out / "run_metadata.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if cfg.baseline is not None:
        emit_report(compare(results, cfg.baseline, cfg.levels), results, out, {"versions": versions()})
    return results


# ---------------------------------------------------------------- compare


def _read_counts(path: Path) -> dict:
    """Counts table with header ``strategy,level,tests`` (one row per seed)."""
    rows = list(csv.DictReader(io.StringIO(path.read_text(encoding="utf-8"))))
    if not rows or set(rows[0]) != {"strategy", "level", "tests"}:
        raise ConfigError(f"{path}: expected header strategy,level,tests")
    counts: dict = {}
    for k, row in enumerate(rows, start=2):
        try:
            level = float(row["level"])
            tests = int(row["tests"]) if row["tests"].strip() not in ("", "-") else None
        except ValueError:
            raise ConfigError(f"{path}:{k}: bad number in {row}") from None
        counts.setdefault(row["strategy"], {}).setdefault(level, []).append(tests)
    return counts


def cmd_compare(source: Path, baseline: str, out: Path, levels: Sequence[float] | None = None):
    if source.is_file():
        counts = _read_counts(source)
        lv = levels or sorted({lv for per in counts.values() for lv in per})
        comp = compare(counts, baseline, lv)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(comp.to_csv(), encoding="utf-8")
        (out / "comparison.txt").write_text(comp.to_text(), encoding="utf-8")
        return comp
    results = load_results(source)
    if len(results) < 2:
        raise ConfigError(f"{source}: need at least two results to compare, found {len(results)}")
    lv = levels or sorted({lv for r in results for lv in r.tests_to_level})
    comp = compare(results, baseline, lv)
    emit_report(comp, results, out, {"versions": versions()})
    return comp


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covsel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"covsel {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic test/coverage database")
    g.add_argument("--config", required=True, type=Path, help="INI file with a [synthetic] section")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", type=int)

    r = sub.add_parser("run", help="run strategies over seeds and write result files")
    r.add_argument("--config", type=Path)
    r.add_argument("--seed", type=int, help="run this single seed instead of [run] seeds")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--out", type=Path)
    r.add_argument("--baseline")
    r.add_argument("--levels")

    c = sub.add_parser("compare", help="tabulate results against a baseline")
    c.add_argument("results", type=Path, help="results directory or a strategy,level,tests CSV")
    c.add_argument("--baseline", default="random")
    c.add_argument("--out", type=Path)
    c.add_argument("--levels")
    return p


def _levels(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--levels: not a comma-separated list of numbers: {text!r}") from None
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise ConfigError("--levels must be non-empty and inside (0, 1]")
    return vals


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _overrides(extra)
        if args.command == "gen":
            cmd_gen(args.config, args.out, args.seed, overrides)
        elif args.command == "run":
            if args.seed is not None:
                overrides["seeds"] = str(args.seed)
            if args.baseline is not None:
                overrides["baseline"] = args.baseline
            if args.levels is not None:
                overrides["levels"] = ",".join(map(repr, _levels(args.levels)))
            cfg = load_run_config(args.config, overrides)
            if args.out is not None:
                cfg = dataclasses.replace(cfg, out=args.out)
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            cmd_run(cfg, args.jobs)
        else:
            if overrides:
                raise ConfigError(f"compare takes no overrides: {sorted(overrides)}")
            cmd_compare(args.results, args.baseline, args.out or args.results, _levels(args.levels))
    except (ConfigError, MissingBaselineError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DatabaseFormatError, ReportError, OSError, ValueError, KeyError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
