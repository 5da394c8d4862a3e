"""Experiment loop, tests-to-level metrics, savings tables and report files."""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from threadpoolctl import threadpool_limits

from .model import CoverageState, TestDatabase
from .oracle import UnreachableCoverageError, simulate
from .strategy import Batch, StrategyConfig, StrategyState, coverage_fraction, next_batch
from .svg import line_chart

log = logging.getLogger(__name__)

DEFAULT_LEVELS = (0.95, 0.98, 0.99)
DASH = "-"


class ReportError(OSError):
    pass


class MissingBaselineError(KeyError):
    def __init__(self, label: str, available: Iterable[str]):
        self.label = label
        self.available = sorted(set(available))
        super().__init__(f"baseline {label!r} not among results; available: {', '.join(self.available) or 'none'}")

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class CoverageCurve:
    points: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        pts = tuple((int(n), float(f)) for n, f in self.points)
        for (n0, f0), (n1, f1) in zip(pts, pts[1:]):
            if n1 <= n0:
                raise ValueError("curve test counts must be strictly increasing")
            if f1 < f0:
                raise ValueError("curve coverage must be non-decreasing")
        if pts and not 0.0 <= pts[-1][1] <= 1.0:
            raise ValueError("coverage fractions must lie in [0, 1]")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def to_csv(self) -> str:
        lines = ["tests,coverage"] + [f"{n},{f!r}" for n, f in self.points]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "CoverageCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["tests", "coverage"]:
            raise ValueError("curve CSV must start with the header 'tests,coverage'")
        return cls(tuple((int(n), float(f)) for n, f in rows[1:]))


def tests_to_level(curve: CoverageCurve, level: float) -> int | None:
    """Smallest simulated-test count whose coverage reaches ``level``; None if never."""
    if not 0.0 < level <= 1.0:
        raise ValueError("level must lie in (0, 1]")
    for n, f in curve.points:
        if f >= level:
            return n
    return None


def savings(method_count: float, baseline_count: float) -> float:
    """Signed percentage change of ``method_count`` relative to the baseline."""
    if baseline_count <= 0:
        raise ValueError("baseline count must be positive")
    return (method_count - baseline_count) / baseline_count * 100.0


def format_savings(value: float | None) -> str:
    if value is None:
        return DASH
    return f"{value:.2f}%"


def _fmt_count(value: float | None) -> str:
    if value is None:
        return DASH
    return str(int(value)) if float(value).is_integer() else f"{value:.1f}"


@dataclass
class ExperimentResult:
    label: str
    seed: int
    curve: CoverageCurve
    tests_to_level: dict[float, int | None]
    config: StrategyConfig
    diagnostics: dict = field(default_factory=dict)
    trace: list[Batch] = field(default_factory=list, repr=False)
    runtime: float = 0.0

    def to_json(self) -> str:
        """Stable JSON; wall-clock runtime is left out so reruns are byte-identical."""
        doc = {
            "label": self.label,
            "seed": self.seed,
            "config": asdict(self.config),
            "tests_to_level": {repr(k): v for k, v in sorted(self.tests_to_level.items())},
            "curve": [list(p) for p in self.curve.points],
            "diagnostics": self.diagnostics,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentResult":
        doc = json.loads(text)
        cfg = dict(doc["config"])
        cfg["switch_levels"] = tuple(cfg["switch_levels"])
        return cls(
            label=doc["label"],
            seed=int(doc["seed"]),
            curve=CoverageCurve(tuple(tuple(p) for p in doc["curve"])),
            tests_to_level={float(k): v for k, v in doc["tests_to_level"].items()},
            config=StrategyConfig(**cfg),
            diagnostics=doc.get("diagnostics", {}),
        )

    def trace_csv(self) -> str:
        lines = ["iteration,phase,test_id,topup"]
        for b in self.trace:
            lines.extend(f"{b.iteration},{b.phase},{tid},{int(t)}" for tid, t in zip(b.ids, b.topup))
        return "\n".join(lines) + "\n"

    @property
    def stem(self) -> str:
        return f"{self.label}_s{self.seed}"


def run_experiment(
    db: TestDatabase,
    cfg: StrategyConfig,
    levels: Sequence[float] = DEFAULT_LEVELS,
    label: str | None = None,
    max_tests: int | None = None,
) -> ExperimentResult:
    """Select, simulate and record until the highest level is met or the pool runs out.

    The curve starts at (0, 0.0) and gains one point per batch, so
    tests-to-level is resolved to batch granularity.
    """
    levels = tuple(sorted(float(v) for v in levels))
    if not levels:
        raise ValueError("at least one coverage level is required")
    if cfg.coverage_basis == "reachable" and db.n_reachable == 0:
        raise UnreachableCoverageError("no coverage point is hit by any test")
    label = label or cfg.kind
    start = time.perf_counter()
    coverage = CoverageState(db.n_points)
    state = StrategyState.initial(cfg)
    points = [(0, 0.0)]
    trace: list[Batch] = []
    n_sv: list[int] = []
    depth = 0
    limit = db.n_tests if max_tests is None else min(max_tests, db.n_tests)

    with threadpool_limits(limits=1):
        while len(coverage.simulated) < limit:
            frac = coverage_fraction(coverage, db, cfg.coverage_basis)
            if frac >= levels[-1]:
                break
            batch = next_batch(cfg, state, db, coverage)
            for tid in batch.ids:
                coverage.apply(simulate(db, tid))
            trace.append(batch)
            points.append((len(coverage.simulated), coverage_fraction(coverage, db, cfg.coverage_basis)))
            if "n_sv" in batch.diagnostics:
                n_sv.append(int(batch.diagnostics["n_sv"]))
            depth = max(depth, int(batch.diagnostics.get("max_tree_depth", 0)))
            log.debug("%s seed %d: %d tests, coverage %.4f (%s)", label, cfg.seed, points[-1][0], points[-1][1], batch.phase)

    curve = CoverageCurve(tuple(points))
    ttl = {lv: tests_to_level(curve, lv) for lv in levels}
    diagnostics = {
        "coverage_basis": cfg.coverage_basis,
        "n_reachable": db.n_reachable,
        "n_points": db.n_points,
        "n_simulated": len(coverage.simulated),
        "final_coverage": points[-1][1],
        "phase_switches": [[p, it] for p, it in state.switches],
        "sv_count_last": n_sv[-1] if n_sv else None,
        "sv_count_max": max(n_sv) if n_sv else None,
        "max_tree_depth": depth,
        "topups": sum(sum(b.topup) for b in trace),
    }
    runtime = time.perf_counter() - start
    log.info("%s seed %d finished: %s in %.1fs", label, cfg.seed, ttl, runtime)
    return ExperimentResult(label, cfg.seed, curve, ttl, cfg, diagnostics, trace, runtime)


# -------------------------------------------------------------- comparison


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    level: float
    counts: tuple[int | None, ...]
    median: float | None
    savings: float | None


@dataclass(frozen=True)
class Comparison:
    baseline: str
    levels: tuple[float, ...]
    labels: tuple[str, ...]
    seeds: tuple[int, ...]
    rows: tuple[ComparisonRow, ...]

    def row(self, label: str, level: float) -> ComparisonRow:
        for r in self.rows:
            if r.label == label and r.level == level:
                return r
        raise KeyError((label, level))

    def to_csv(self) -> str:
        head = ["strategy", "level", "median_tests", "savings_pct"] + [f"seed_{s}" for s in self.seeds]
        lines = [",".join(head)]
        for r in self.rows:
            cells = [
                r.label,
                repr(r.level),
                "" if r.median is None else repr(r.median),
                "" if r.savings is None else repr(r.savings),
            ] + ["" if c is None else str(c) for c in r.counts]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_text(self, note: str = "") -> str:
        header = ["strategy"]
        for lv in self.levels:
            header += [f"tests@{lv * 100:g}%", f"vs {self.baseline}"]
        body = []
        for lab in self.labels:
            cells = [lab]
            for lv in self.levels:
                r = self.row(lab, lv)
                cells += [_fmt_count(r.median), format_savings(r.savings)]
            body.append(cells)
        widths = [max(len(row[k]) for row in [header] + body) for k in range(len(header))]

        def line(cells: list[str]) -> str:
            return "  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(cells, widths))).rstrip()

        out = [f"# levels: {', '.join(repr(v) for v in self.levels)}"]
        out.append(f"# baseline: {self.baseline}; seeds: {', '.join(map(str, self.seeds))} (medians across seeds)")
        if note:
            out.append(f"# {note}")
        out += [line(header), line(["-" * w for w in widths])] + [line(b) for b in body]
        return "\n".join(out) + "\n"


def _median(values: Sequence[int | None]) -> float | None:
    got = [v for v in values if v is not None]
    return float(statistics.median(got)) if got else None


def compare(
    results: Sequence[ExperimentResult] | Mapping[str, Mapping[float, Sequence[int | None]]],
    baseline: str,
    levels: Sequence[float] = DEFAULT_LEVELS,
) -> Comparison:
    """Median tests-to-level per (strategy, level) with savings against ``baseline``.

    ``results`` is a list of experiment results, or raw counts as
    ``{label: {level: [count per seed, ...]}}``. Runs that never reached a
    level are left out of that level's median.
    """
    levels = tuple(float(v) for v in levels)
    if isinstance(results, Mapping):
        counts = {lab: {float(k): list(v) for k, v in per.items()} for lab, per in results.items()}
        seeds: tuple[int, ...] = tuple(range(max((len(v) for per in counts.values() for v in per.values()), default=0)))
    else:
        seeds = tuple(sorted({r.seed for r in results}))
        counts = {}
        for r in sorted(results, key=lambda r: (r.label, r.seed)):
            per = counts.setdefault(r.label, {lv: [None] * len(seeds) for lv in levels})
            for lv in levels:
                per[lv][seeds.index(r.seed)] = r.tests_to_level.get(lv)
    if baseline not in counts:
        raise MissingBaselineError(baseline, counts)
    labels = (baseline,) + tuple(sorted(lab for lab in counts if lab != baseline))
    rows = []
    for lab in labels:
        for lv in levels:
            vals = tuple(counts[lab].get(lv, [None]))
            med = _median(vals)
            base = _median(counts[baseline].get(lv, [None]))
            sav = savings(med, base) if med is not None and base else None
            rows.append(ComparisonRow(lab, lv, vals, med, sav))
    return Comparison(baseline, levels, labels, seeds, tuple(rows))


# -------------------------------------------------------------- reports


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_result(result: ExperimentResult, out_dir: Path | str) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {out}: {exc.strerror or exc}") from exc
    files = {
        out / f"{result.stem}.curve.csv": result.curve.to_csv(),
        out / f"{result.stem}.trace.csv": result.trace_csv(),
        out / f"{result.stem}.result.json": result.to_json(),
    }
    for path, text in files.items():
        _write(path, text)
    return list(files)


def load_results(results_dir: Path | str) -> list[ExperimentResult]:
    paths = sorted(Path(results_dir).glob("*.result.json"))
    return [ExperimentResult.from_json(p.read_text(encoding="utf-8")) for p in paths]


def curves_svg(results: Sequence[ExperimentResult]) -> str:
    series = [
        (f"{r.label} s{r.seed}", [(n, f * 100.0) for n, f in r.curve.points])
        for r in sorted(results, key=lambda r: (r.label, r.seed))
    ]
    return line_chart(series, "tests simulated", "coverage %", "Coverage vs. tests simulated", y_range=(0.0, 100.0))


def emit_report(
    comparison: Comparison,
    results: Sequence[ExperimentResult],
    out_dir: Path | str,
    metadata: Mapping | None = None,
) -> list[Path]:
    """Write comparison CSV/text, one CSV per curve, an overlay SVG and metadata."""
    out = Path(out_dir)
    try:
        (out / "curves").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {out}: {exc.strerror or exc}") from exc
    batch_sizes = sorted({r.config.batch_size for r in results})
    note = f"curves sampled once per batch (batch size {', '.join(map(str, batch_sizes))})" if batch_sizes else ""
    files = {
        out / "comparison.csv": comparison.to_csv(),
        out / "comparison.txt": comparison.to_text(note),
        out / "curves.svg": curves_svg(results),
    }
    for r in results:
        files[out / "curves" / f"{r.stem}.csv"] = r.curve.to_csv()
    meta = {
        "baseline": comparison.baseline,
        "levels": list(comparison.levels),
        "seeds": list(comparison.seeds),
        "strategies": list(comparison.labels),
        **(metadata or {}),
    }
    files[out / "report_metadata.json"] = json.dumps(meta, sort_keys=True, indent=1) + "\n"
    for path, text in files.items():
        _write(path, text)
    return list(files)
