"""INI experiment configuration.

Grammar (``key = value`` lines, ``#`` or ``;`` comments)::

    [synthetic]            # or [database], exactly one of the two
    n_tests = 20000        # any SyntheticSpec field
    ...

    [database]
    dir = path/to/db       # or tests = ..., coverage = ..., model = ...

    [run]
    strategies = random, ndv, uha, iha
    seeds = 1, 2, 3
    levels = 0.95, 0.98, 0.99
    baseline = random
    out = results
    max_tests =            # empty means unlimited

    [strategy]             # defaults for every strategy (StrategyConfig fields)
    batch_size = 100

    [strategy:uha_cds]     # per-label overrides; kind defaults to the label
    kind = uha
    order = cds_first

Relative paths resolve against the config file's directory. Lists are
comma separated; an empty value means "unset".
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .harness import DEFAULT_LEVELS
from .oracle import DatabaseFiles, SyntheticSpec
from .strategy import KINDS, StrategyConfig


class ConfigError(ValueError):
    pass


RUN_KEYS = ("strategies", "seeds", "levels", "baseline", "out", "max_tests")
DB_KEYS = ("dir", "tests", "coverage", "model")
REQUIRED_SPEC_KEYS = ("n_tests", "n_numeric_fields", "n_points", "n_groups")


@dataclass(frozen=True)
class RunConfig:
    strategies: dict[str, StrategyConfig]
    seeds: tuple[int, ...]
    levels: tuple[float, ...] = DEFAULT_LEVELS
    database: DatabaseFiles | None = None
    synthetic: SyntheticSpec | None = None
    baseline: str | None = None
    out: Path = Path("results")
    max_tests: int | None = None
    source: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if (self.database is None) == (self.synthetic is None):
            raise ConfigError("give exactly one of [database] or [synthetic]")
        if not self.seeds:
            raise ConfigError("[run] seeds must not be empty")
        if not self.strategies:
            raise ConfigError("[run] strategies must not be empty")
        if self.baseline is not None and self.baseline not in self.strategies:
            raise ConfigError(f"baseline {self.baseline!r} is not one of the strategies {sorted(self.strategies)}")

    def with_seed(self, label: str, seed: int) -> StrategyConfig:
        return dataclasses.replace(self.strategies[label], seed=seed)


# ---------------------------------------------------------------- values


def _parse_scalar(text: str, typ: Any, where: str) -> Any:
    text = text.strip()
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text == "" or text.lower() == "none":
            if type(None) in typing.get_args(typ):
                return None
        for a in args:
            try:
                return _parse_scalar(text, a, where)
            except ConfigError:
                continue
        raise ConfigError(f"{where}: cannot parse {text!r}")
    if origin is tuple:
        inner = typing.get_args(typ)[0]
        return tuple(_parse_scalar(p, inner, where) for p in text.split(",") if p.strip())
    try:
        if typ is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            if not text:
                raise ValueError("empty")
            return text
    except ValueError:
        raise ConfigError(f"{where}: expected {typ.__name__}, got {text!r}") from None
    raise ConfigError(f"{where}: unsupported type {typ}")


def _build(cls: type, values: Mapping[str, str], section: str) -> dict:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    out = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}; known keys: {', '.join(sorted(names))}")
        out[key] = _parse_scalar(raw, hints[key], f"[{section}] {key}")
    return out


def _split(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


# ---------------------------------------------------------------- files


def read_ini(path: Path | str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep keys case-sensitive
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from exc
    try:
        cp.read_string(text, source=str(p))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return cp


def apply_overrides(cp: configparser.ConfigParser, overrides: Mapping[str, str]) -> None:
    """Apply ``key`` or ``section.key`` overrides.

    A bare key goes to the section that owns it: [run], [strategy],
    [database] or [synthetic].
    """
    spec_keys = {f.name for f in dataclasses.fields(SyntheticSpec)}
    strat_keys = {f.name for f in dataclasses.fields(StrategyConfig)}
    for key, value in overrides.items():
        if "." in key:
            section, name = key.split(".", 1)
        elif key in RUN_KEYS:
            section, name = "run", key
        elif key in strat_keys:
            section, name = "strategy", key
        elif key in DB_KEYS:
            section, name = "database", key
        elif key in spec_keys:
            section, name = "synthetic", key
        else:
            raise ConfigError(f"unknown override --{key}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value)


def parse_synthetic(section: Mapping[str, str]) -> SyntheticSpec:
    missing = [k for k in REQUIRED_SPEC_KEYS if k not in section]
    if missing:
        raise ConfigError(f"[synthetic] missing required key(s): {', '.join(missing)}")
    kw = _build(SyntheticSpec, section, "synthetic")
    try:
        return SyntheticSpec(**kw)
    except ValueError as exc:
        raise ConfigError(f"[synthetic] {exc}") from exc


def _database(section: Mapping[str, str], base: Path) -> DatabaseFiles:
    unknown = set(section) - set(DB_KEYS)
    if unknown:
        raise ConfigError(f"[database] unknown key(s): {', '.join(sorted(unknown))}")
    if "dir" in section:
        files = DatabaseFiles.in_dir(base / section["dir"])
    else:
        files = DatabaseFiles.in_dir(base)
    parts = {k: base / section[k] for k in ("tests", "coverage", "model") if k in section}
    return dataclasses.replace(files, **parts)


def load_run_config(path: Path | str | None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    cp = read_ini(path) if path is not None else configparser.ConfigParser(interpolation=None)
    if path is None:
        cp.optionxform = str
    apply_overrides(cp, overrides or {})
    base = Path(path).parent if path is not None else Path(".")

    known = {"run", "strategy", "database", "synthetic"}
    for s in cp.sections():
        if s not in known and not s.startswith("strategy:"):
            raise ConfigError(f"unknown section [{s}]")

    run = dict(cp["run"]) if cp.has_section("run") else {}
    unknown = set(run) - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"[run] unknown key(s): {', '.join(sorted(unknown))}")
    labels = _split(run.get("strategies", "random"))
    seeds = tuple(_parse_scalar(run.get("seeds", "0"), tuple[int, ...], "[run] seeds"))
    levels = tuple(_parse_scalar(run.get("levels", ",".join(map(str, DEFAULT_LEVELS))), tuple[float, ...], "[run] levels"))
    if any(not 0.0 < lv <= 1.0 for lv in levels) or not levels:
        raise ConfigError("[run] levels must be non-empty and inside (0, 1]")
    max_tests = _parse_scalar(run.get("max_tests", ""), int | None, "[run] max_tests")

    defaults = dict(cp["strategy"]) if cp.has_section("strategy") else {}
    strategies: dict[str, StrategyConfig] = {}
    for label in labels:
        values = dict(defaults)
        sect = f"strategy:{label}"
        if cp.has_section(sect):
            values.update(cp[sect])
        # kind: own section, else the label itself, else [strategy]
        if not (cp.has_section(sect) and "kind" in cp[sect]):
            if label in KINDS:
                values["kind"] = label
            elif "kind" not in values:
                raise ConfigError(f"strategy {label!r}: set kind in [{sect}] (one of {', '.join(KINDS)})")
        try:
            strategies[label] = StrategyConfig(**_build(StrategyConfig, values, sect))
        except ValueError as exc:
            raise ConfigError(f"[{sect}] {exc}") from exc

    database = _database(cp["database"], base) if cp.has_section("database") else None
    synthetic = parse_synthetic(cp["synthetic"]) if cp.has_section("synthetic") else None
    source = {s: dict(cp[s]) for s in cp.sections()}
    return RunConfig(
        strategies=strategies,
        seeds=seeds,
        levels=levels,
        database=database,
        synthetic=synthetic,
        baseline=run.get("baseline") or None,
        out=base / run.get("out", "results"),
        max_tests=max_tests,
        source=source,
    )
