"""Test/coverage databases: CSV I/O, lookup simulation and synthetic generation.

Random streams
--------------
Every random draw in the synthetic generator comes from numpy's Philox-4x64
counter-based generator.  Each construction stage gets its own stream keyed by
``SeedSequence(seed, spawn_key=(stage,))``:

====== =====================================================
stage  draws
====== =====================================================
0      cluster centres, cluster widths, categorical preferences
1      per-test cluster assignment, numeric noise, categories
2      group field subsets, predicate widths/offsets/values
====== =====================================================

so changing, say, the number of points never perturbs the test features.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import CoverageModel, CoveragePartition, CoverageSignature, TestDatabase

log = logging.getLogger(__name__)

STAGE_CLUSTERS = 0
STAGE_TESTS = 1
STAGE_PREDICATES = 2


class DatabaseFormatError(ValueError):
    """A database file does not follow its CSV contract."""

    def __init__(self, path: Path | str, line: int | None, message: str) -> None:
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {message}")


class MissingFileError(DatabaseFormatError):
    pass


class RaggedRowError(DatabaseFormatError):
    pass


class UnknownIdError(DatabaseFormatError):
    pass


class MissingGroupError(DatabaseFormatError):
    pass


class UnknownTestError(KeyError):
    pass


class UnreachableCoverageError(ValueError):
    pass


@dataclass(frozen=True)
class DatabaseFiles:
    tests: Path
    coverage: Path
    model: Path

    @classmethod
    def in_dir(cls, directory: Path | str) -> "DatabaseFiles":
        d = Path(directory)
        return cls(d / "tests.csv", d / "coverage.csv", d / "model.csv")


# --------------------------------------------------------------------------
# parsing


def _read_lines(path: Path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path, None, "file not found")
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw[: exc.start].count(b"\n") + 1
        raise DatabaseFormatError(path, line, "not valid UTF-8") from None
    if "\r" in text:
        line = text[: text.index("\r")].count("\n") + 1
        raise DatabaseFormatError(path, line, "CR characters found; files must use LF line endings")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatabaseFormatError(path, 1, "missing header")
    return lines


def _int_field(path: Path, lineno: int, text: str, what: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise DatabaseFormatError(path, lineno, f"{what} {text!r} is not an integer") from None
    if value < 0:
        raise DatabaseFormatError(path, lineno, f"{what} must be non-negative, got {value}")
    return value


def _parse_tests(path: Path) -> tuple[np.ndarray, np.ndarray]:
    lines = _read_lines(path)
    header = lines[0].split(",")
    if header[0] != "id" or len(header) < 2:
        raise DatabaseFormatError(path, 1, "header must be 'id,f0,...,f{D-1}'")
    dim = len(header) - 1
    if header[1:] != [f"f{i}" for i in range(dim)]:
        raise DatabaseFormatError(path, 1, "feature columns must be named f0..f{D-1} in order")
    ids = np.empty(len(lines) - 1, dtype=np.int64)
    feats = np.empty((len(lines) - 1, dim), dtype=np.float64)
    seen: dict[int, int] = {}
    for k, line in enumerate(lines[1:]):
        lineno = k + 2
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise RaggedRowError(path, lineno, f"expected {dim + 1} columns, found {len(parts)}")
        tid = _int_field(path, lineno, parts[0], "test id")
        if tid in seen:
            raise DatabaseFormatError(path, lineno, f"test id {tid} repeats line {seen[tid]}")
        seen[tid] = lineno
        try:
            row = [float(p) for p in parts[1:]]
        except ValueError:
            raise DatabaseFormatError(path, lineno, "feature value is not a decimal number") from None
        if not all(np.isfinite(row)):
            raise DatabaseFormatError(path, lineno, "feature values must be finite")
        ids[k] = tid
        feats[k] = row
    if ids.size == 0:
        raise DatabaseFormatError(path, 2, "no tests")
    return ids, feats


def _parse_model(path: Path) -> tuple[np.ndarray, tuple[str, ...] | None]:
    lines = _read_lines(path)
    header = lines[0].split(",")
    if header not in (["point_id", "group_id"], ["point_id", "group_id", "name"]):
        raise DatabaseFormatError(path, 1, "header must be 'point_id,group_id[,name]'")
    with_names = len(header) == 3
    group_of: dict[int, int] = {}
    names: dict[int, str] = {}
    for k, line in enumerate(lines[1:]):
        lineno = k + 2
        parts = line.split(",", 2) if with_names else line.split(",")
        if len(parts) != len(header):
            raise RaggedRowError(path, lineno, f"expected {len(header)} columns, found {len(parts)}")
        pid = _int_field(path, lineno, parts[0], "point id")
        if parts[1] == "":
            raise MissingGroupError(path, lineno, f"point {pid} has no group assignment")
        gid = _int_field(path, lineno, parts[1], "group id")
        if pid in group_of:
            raise DatabaseFormatError(path, lineno, f"point {pid} listed twice")
        group_of[pid] = gid
        if with_names:
            names[pid] = parts[2]
    n_points = len(group_of)
    if n_points == 0:
        raise DatabaseFormatError(path, 2, "no coverage points")
    missing = sorted(set(range(n_points)) - set(group_of))
    if missing:
        raise MissingGroupError(path, None, f"point {missing[0]} has no group assignment (ids must be dense 0..P-1)")
    arr = np.array([group_of[p] for p in range(n_points)], dtype=np.int64)
    used = np.unique(arr)
    if not np.array_equal(used, np.arange(used.size)):
        raise DatabaseFormatError(path, None, "group ids must be dense 0..m-1 with no empty group")
    return arr, (tuple(names[p] for p in range(n_points)) if with_names else None)


def _parse_coverage(path: Path, known_tests: set[int], n_points: int) -> dict[int, list[int]]:
    lines = _read_lines(path)
    if lines[0] != "test_id,point_id":
        raise DatabaseFormatError(path, 1, "header must be 'test_id,point_id'")
    sigs: dict[int, list[int]] = {}
    prev: tuple[int, int] | None = None
    for k, line in enumerate(lines[1:]):
        lineno = k + 2
        parts = line.split(",")
        if len(parts) != 2:
            raise RaggedRowError(path, lineno, f"expected 2 columns, found {len(parts)}")
        tid = _int_field(path, lineno, parts[0], "test id")
        pid = _int_field(path, lineno, parts[1], "point id")
        if tid not in known_tests:
            raise UnknownIdError(path, lineno, f"unknown test id {tid}")
        if pid >= n_points:
            raise UnknownIdError(path, lineno, f"unknown point id {pid}")
        key = (tid, pid)
        if prev is not None and key <= prev:
            raise DatabaseFormatError(path, lineno, "rows must be strictly sorted by (test_id, point_id)")
        prev = key
        sigs.setdefault(tid, []).append(pid)
    return sigs


def load_database(files: DatabaseFiles) -> TestDatabase:
    ids, feats = _parse_tests(Path(files.tests))
    group_of, names = _parse_model(Path(files.model))
    sigs = _parse_coverage(Path(files.coverage), set(int(i) for i in ids), group_of.size)
    model = CoverageModel(group_of.size, names)
    return TestDatabase(ids, feats, sigs, model, CoveragePartition(group_of))


def save_database(db: TestDatabase, files: DatabaseFiles) -> DatabaseFiles:
    for p in (files.tests, files.coverage, files.model):
        Path(p).parent.mkdir(parents=True, exist_ok=True)
    header = "id," + ",".join(f"f{i}" for i in range(db.dimension))
    out = [header]
    for tid, row in zip(db.ids.tolist(), db.features.tolist()):
        out.append(f"{tid}," + ",".join(map(repr, row)))
    _write_text(files.tests, out)

    out = ["test_id,point_id"]
    for r, tid in enumerate(db.ids.tolist()):
        for p in db.points_of_row(r).tolist():
            out.append(f"{tid},{p}")
    _write_text(files.coverage, out)

    names = db.model.point_names
    out = ["point_id,group_id,name" if names else "point_id,group_id"]
    for p, g in enumerate(db.partition.group_of.tolist()):
        out.append(f"{p},{g},{names[p]}" if names else f"{p},{g}")
    _write_text(files.model, out)
    return files


def _write_text(path: Path | str, lines: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def simulate(db: TestDatabase, test_id: int) -> CoverageSignature:
    """Return the coverage a test exercises, by database lookup."""
    if test_id not in db:
        raise UnknownTestError(f"unknown test id {test_id}")
    return db.signature(int(test_id))


# --------------------------------------------------------------------------
# synthetic databases


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic test/coverage database.

    Numeric fields live in (0, 1) and are quantised to ``decimals`` places.
    A numeric predicate is the half-open interval ``[lo, lo + w)`` with
    ``w = L ** rarity_exponent`` and ``L`` log-uniform on
    ``[min_width, max_width]``; ``lo`` is uniform on ``[0, 1 - w]``.
    """

    n_tests: int
    n_numeric_fields: int
    n_points: int
    n_groups: int
    predicates_per_point: int = 3
    n_categorical_fields: int = 0
    cardinality: int | tuple[int, ...] = 4
    rarity_exponent: float = 1.0
    mixture_components: int = 8
    seed: int = 0
    min_width: float = 0.05
    max_width: float = 1.0
    cluster_spread: float = 1.0
    cluster_scale: float = 0.6
    category_concentration: float = 0.5
    decimals: int = 3

    def __post_init__(self) -> None:
        for name in ("n_tests", "n_numeric_fields", "n_points", "n_groups",
                     "predicates_per_point", "mixture_components"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_categorical_fields < 0:
            raise ValueError("n_categorical_fields must be >= 0")
        if self.n_groups > self.n_points:
            raise ValueError("n_groups must not exceed n_points")
        if self.predicates_per_point > self.n_fields:
            raise ValueError("predicates_per_point exceeds the number of fields")
        if not self.rarity_exponent > 0:
            raise ValueError("rarity_exponent must be > 0")
        if not 0.0 <= self.min_width <= self.max_width <= 1.0:
            raise ValueError("need 0 <= min_width <= max_width <= 1")
        if self.min_width == 0.0 and self.max_width > 0.0:
            raise ValueError("min_width must be > 0 unless every width is 0")
        if min(self.cardinalities, default=2) < 1:
            raise ValueError("categorical cardinality must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not 1 <= self.decimals <= 15:
            raise ValueError("decimals must be in 1..15")

    @property
    def n_fields(self) -> int:
        return self.n_numeric_fields + self.n_categorical_fields

    @property
    def cardinalities(self) -> tuple[int, ...]:
        if isinstance(self.cardinality, int):
            return (self.cardinality,) * self.n_categorical_fields
        if len(self.cardinality) != self.n_categorical_fields:
            raise ValueError("cardinality list must have one entry per categorical field")
        return tuple(int(c) for c in self.cardinality)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.cardinality, tuple):
            d["cardinality"] = list(self.cardinality)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# Reference desk-scale database used by the benchmark and regression fixtures.
REFERENCE_SPEC = SyntheticSpec(
    n_tests=20_000,
    n_numeric_fields=240,
    n_categorical_fields=60,
    cardinality=4,
    n_points=2_000,
    n_groups=100,
    predicates_per_point=3,
    min_width=0.1,
    max_width=0.5,
    seed=1,
)


@dataclass
class Predicate:
    field: int
    lo: float  # numeric: interval start; categorical: the required code
    hi: float  # numeric: interval end (exclusive); categorical: equal to lo
    categorical: bool

    def holds(self, column: np.ndarray) -> np.ndarray:
        if self.categorical:
            return column == self.lo
        return (column >= self.lo) & (column < self.hi)


@dataclass
class SyntheticDatabase:
    db: TestDatabase
    predicates: list[list[Predicate]]
    group_fields: list[tuple[int, ...]]
    spec: SyntheticSpec
    reachability: np.ndarray = field(repr=False)  # hits per point

    @property
    def n_reachable(self) -> int:
        return int(np.count_nonzero(self.reachability))


def stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stage,))))


def _sample_tests(spec: SyntheticSpec) -> np.ndarray:
    rng_c = stage_rng(spec.seed, STAGE_CLUSTERS)
    k, n_num = spec.mixture_components, spec.n_numeric_fields
    centres = rng_c.normal(0.0, spec.cluster_spread, size=(k, n_num))
    scales = spec.cluster_scale * rng_c.uniform(0.5, 1.5, size=k)
    prefs = [
        rng_c.dirichlet(np.full(card, spec.category_concentration), size=k)
        for card in spec.cardinalities
    ]

    rng_t = stage_rng(spec.seed, STAGE_TESTS)
    comp = rng_t.integers(0, k, size=spec.n_tests)
    noise = rng_t.standard_normal(size=(spec.n_tests, n_num))
    latent = centres[comp] + scales[comp, None] * noise
    numeric = 1.0 / (1.0 + np.exp(-latent))
    step = 10.0 ** -spec.decimals
    numeric = np.clip(np.round(numeric, spec.decimals), step, 1.0 - step)

    cats = np.empty((spec.n_tests, spec.n_categorical_fields), dtype=np.float64)
    u = rng_t.random(size=(spec.n_tests, spec.n_categorical_fields))
    for j, p in enumerate(prefs):
        cum = np.cumsum(p[comp], axis=1)
        cum[:, -1] = 1.0
        cats[:, j] = np.minimum((u[:, j, None] >= cum).sum(axis=1), p.shape[1] - 1)
    return np.hstack([numeric, cats])


def _draw_predicates(spec: SyntheticSpec) -> tuple[list[tuple[int, ...]], list[list[Predicate]]]:
    rng = stage_rng(spec.seed, STAGE_PREDICATES)
    n_num = spec.n_numeric_fields
    cards = spec.cardinalities
    group_fields = [
        tuple(sorted(int(f) for f in rng.choice(spec.n_fields, size=spec.predicates_per_point, replace=False)))
        for _ in range(spec.n_groups)
    ]
    log_lo = np.log(spec.min_width) if spec.min_width > 0 else 0.0
    log_hi = np.log(spec.max_width) if spec.max_width > 0 else 0.0
    predicates: list[list[Predicate]] = []
    for p in range(spec.n_points):
        conj = []
        for f in group_fields[p % spec.n_groups]:
            if f < n_num:
                if spec.max_width == 0.0:
                    width = 0.0
                else:
                    width = min(float(np.exp(rng.uniform(log_lo, log_hi)) ** spec.rarity_exponent), 1.0)
                lo = float(rng.uniform(0.0, 1.0 - width))
                conj.append(Predicate(f, lo, lo + width, False))
            else:
                code = float(rng.integers(0, cards[f - n_num]))
                conj.append(Predicate(f, code, code, True))
        predicates.append(conj)
    return group_fields, predicates


def evaluate_predicates(features: np.ndarray, predicates: Sequence[Sequence[Predicate]]) -> np.ndarray:
    """Boolean ``(n_tests, n_points)`` matrix of conjunction satisfaction."""
    hits = np.ones((features.shape[0], len(predicates)), dtype=bool)
    for p, conj in enumerate(predicates):
        col = hits[:, p]
        for pred in conj:
            col &= pred.holds(features[:, pred.field])
    return hits


def gen_synthetic(spec: SyntheticSpec, files: DatabaseFiles | None = None) -> SyntheticDatabase:
    """Build a deterministic synthetic database (and optionally write it)."""
    features = _sample_tests(spec)
    group_fields, predicates = _draw_predicates(spec)
    hits = evaluate_predicates(features, predicates)
    per_point = hits.sum(axis=0).astype(np.int64)
    n_reach = int(np.count_nonzero(per_point))
    if n_reach == 0:
        raise UnreachableCoverageError(
            "no coverage point is satisfied by any test; widen the predicates "
            "(raise min_width/max_width or lower rarity_exponent)"
        )
    log.info("synthetic database: %d/%d points reachable", n_reach, spec.n_points)

    rows, cols = np.nonzero(hits)
    indptr = np.zeros(spec.n_tests + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=spec.n_tests), out=indptr[1:])
    group_of = np.arange(spec.n_points, dtype=np.int64) % spec.n_groups
    db = TestDatabase(
        np.arange(spec.n_tests, dtype=np.int64),
        features,
        (indptr, cols.astype(np.int64)),
        CoverageModel(spec.n_points),
        CoveragePartition(group_of),
    )
    out = SyntheticDatabase(db, predicates, group_fields, spec, per_point)
    if files is not None:
        save_database(db, files)
        write_reachability(out, Path(files.tests).parent / "reachability.csv")
    return out


def write_reachability(sdb: SyntheticDatabase, path: Path) -> None:
    lines = [
        f"# reachable_points={sdb.n_reachable} total_points={sdb.spec.n_points}",
        "point_id,group_id,hits",
    ]
    group_of = sdb.db.partition.group_of
    lines += [f"{p},{group_of[p]},{h}" for p, h in enumerate(sdb.reachability.tolist())]
    _write_text(path, lines)
