"""Batch selection policies and the hybrid phase machine.

Every policy is a pure function of (config, database, coverage state,
iteration): randomness comes from Philox streams keyed on the run seed, a
purpose tag and the iteration, never from shared generator state. That is
what lets a hybrid run be replayed phase by phase against the standalone
policies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import cds
from .model import CoverageState, TestDatabase
from .novelty import DEFAULT_NU, DEFAULT_TOL, NoveltyDetector, fit_detector, rank_scores

log = logging.getLogger(__name__)

KINDS = ("random", "cds", "ndv", "uha", "iha")
ORDERS = ("cds_first", "ndv_first")
BASES = ("reachable", "total")

# stream tags; disjoint from the generator's stage keys
TAG_WARMUP, TAG_RANDOM, TAG_NOVELTY, TAG_CDS, TAG_TOPUP = range(10, 15)


class EmptyPoolError(RuntimeError):
    pass


def stream(seed: int, tag: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(tag, *keys))))


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "random"
    order: str | None = None
    batch_size: int = 100
    switch_levels: tuple[float, ...] = (0.90, 0.98)
    dynamic_stagnation: int | None = None
    min_hits: int = cds.DEFAULT_MIN_HITS
    epsilon: float = cds.DEFAULT_EPSILON
    max_depth: int = cds.DEFAULT_MAX_DEPTH
    min_leaf: int = cds.DEFAULT_MIN_LEAF
    nu: float = DEFAULT_NU
    gamma: float | None = None
    svm_tol: float = DEFAULT_TOL
    max_train: int | None = 500
    max_positives: int | None = 300
    retrain: str = "every"
    warmup: int | None = None
    overprovision: int = 10
    coverage_basis: str = "reachable"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "switch_levels", tuple(float(v) for v in self.switch_levels))
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.order is not None and self.order not in ORDERS:
            raise ValueError(f"unknown order {self.order!r}; expected one of {', '.join(ORDERS)}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        lv = self.switch_levels
        if not lv or any(not 0.0 < v < 1.0 for v in lv) or any(a >= b for a, b in zip(lv, lv[1:])):
            raise ValueError("switch_levels must be non-empty, strictly increasing and inside (0, 1)")
        if self.dynamic_stagnation is not None and self.dynamic_stagnation < 1:
            raise ValueError("dynamic_stagnation must be >= 1")
        if self.retrain not in ("every", "once"):
            raise ValueError("retrain must be 'every' or 'once'")
        if self.max_train is not None and self.max_train < 2:
            raise ValueError("max_train must be >= 2")
        if self.max_positives is not None and self.max_positives < 1:
            raise ValueError("max_positives must be >= 1")
        if self.warmup is not None and self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.overprovision < 1:
            raise ValueError("overprovision must be >= 1")
        if self.coverage_basis not in BASES:
            raise ValueError(f"coverage_basis must be one of {', '.join(BASES)}")
        cds.TreeParams(self.max_depth, self.min_leaf)
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")

    @property
    def resolved_order(self) -> str:
        if self.order is not None:
            return self.order
        return "cds_first" if self.kind == "iha" else "ndv_first"

    @property
    def warmup_size(self) -> int:
        return self.batch_size if self.warmup is None else self.warmup

    @property
    def tree_params(self) -> cds.TreeParams:
        return cds.TreeParams(self.max_depth, self.min_leaf)

    def phases(self) -> tuple[str, ...]:
        """Phase sequence the run may walk through, in order."""
        if self.kind == "uha":
            first = "ndv" if self.resolved_order == "ndv_first" else "cds"
            return ("random", first, "cds" if first == "ndv" else "ndv")
        if self.kind == "iha":
            return ("random", "iha")
        return (self.kind,)


@dataclass
class StrategyState:
    phase: str = "random"
    iteration: int = 0
    coverage_at_entry: float = 0.0
    last_coverage: float = 0.0
    stagnation: int = 0
    switches: list[tuple[str, int]] = field(default_factory=list)
    cached_detector: NoveltyDetector | None = field(default=None, repr=False)

    @classmethod
    def initial(cls, cfg: StrategyConfig) -> "StrategyState":
        return cls(phase=cfg.phases()[0])


@dataclass(frozen=True)
class Batch:
    iteration: int
    phase: str
    ids: tuple[int, ...]
    topup: tuple[bool, ...]
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.topup):
            raise ValueError("one top-up flag per id")


@dataclass(frozen=True)
class Models:
    detector: NoveltyDetector | None = None
    targets: tuple[cds.TargetGroup, ...] = ()
    classifiers: tuple[cds.GroupClassifier, ...] = ()


# -------------------------------------------------------------- helpers


def coverage_fraction(coverage: CoverageState, db: TestDatabase, basis: str = "reachable") -> float:
    if basis == "total":
        return coverage.coverage_fraction
    reach = db.n_reachable
    return coverage.n_hit / reach if reach else 0.0


def _rows(db: TestDatabase, coverage: CoverageState) -> tuple[np.ndarray, np.ndarray]:
    """(simulated rows, unsimulated rows), both ascending."""
    mask = np.zeros(db.n_tests, dtype=bool)
    if coverage.simulated:
        mask[db.rows(coverage.simulated)] = True
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def _batch(iteration: int, phase: str, ids, topup=None, **diag) -> Batch:
    ids = tuple(int(i) for i in ids)
    flags = tuple(bool(t) for t in topup) if topup is not None else (False,) * len(ids)
    return Batch(iteration, phase, ids, flags, diag)


# -------------------------------------------------------------- policies


def warmup_sample(cfg: StrategyConfig, db: TestDatabase) -> list[int]:
    """Seeded uniform sample of the pool used before any model can be trained."""
    k = min(cfg.warmup_size, db.n_tests)
    return [int(i) for i in stream(cfg.seed, TAG_WARMUP).choice(db.ids, size=k, replace=False)]


def random_batch(cfg: StrategyConfig, db: TestDatabase, pool: np.ndarray, iteration: int) -> list[int]:
    k = min(cfg.batch_size, pool.size)
    rows = stream(cfg.seed, TAG_RANDOM, iteration).choice(pool, size=k, replace=False)
    return [int(i) for i in db.ids[rows]]


def fit_novelty(cfg: StrategyConfig, db: TestDatabase, sim_rows: np.ndarray, iteration: int) -> NoveltyDetector:
    """One-class SVM on the simulated tests, subsampled to ``max_train`` if set."""
    rows = sim_rows
    if cfg.max_train is not None and rows.size > cfg.max_train:
        rows = np.sort(stream(cfg.seed, TAG_NOVELTY, iteration).choice(rows, size=cfg.max_train, replace=False))
    nu = max(cfg.nu, 1.0 / rows.size)
    return fit_detector(db.features[rows], db.ids[rows], nu=nu, gamma=cfg.gamma, tol=cfg.svm_tol)


def novelty_order(detector: NoveltyDetector, db: TestDatabase, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows sorted most novel first, with their scores (aligned with ``rows``)."""
    phi = detector.scores(db.features[rows])
    return rows[rank_scores(db.ids[rows], phi)], phi


def train_group_models(
    cfg: StrategyConfig, db: TestDatabase, coverage: CoverageState, sim_rows: np.ndarray, iteration: int
) -> tuple[list[cds.TargetGroup], list[cds.GroupClassifier]]:
    targets = cds.find_target_groups(coverage, db.partition, db, cfg.min_hits, sim_rows)
    presorted = cds.Presorted.of(db, sim_rows) if targets else None
    classifiers = []
    for t in targets:
        seed = np.random.SeedSequence(cfg.seed, spawn_key=(TAG_CDS, iteration, t.group_id))
        try:
            classifiers.append(
                cds.train_classifier(
                    t, db, coverage, seed, cfg.tree_params, cfg.epsilon, sim_rows, presorted, cfg.max_positives
                )
            )
        except cds.TrainingSetError as exc:
            log.debug("skipping group %d: %s", t.group_id, exc)
    return targets, classifiers


def _tree_diag(classifiers: Sequence[cds.GroupClassifier]) -> dict[str, float]:
    return {
        "n_targets": len(classifiers),
        "max_tree_depth": max((c.tree.depth for c in classifiers), default=0),
    }


def ndv_batch(
    cfg: StrategyConfig,
    db: TestDatabase,
    coverage: CoverageState,
    iteration: int,
    state: StrategyState | None = None,
    phase: str = "ndv",
) -> Batch:
    sim, pool = _rows(db, coverage)
    detector = _detector(cfg, db, sim, iteration, state)
    ranked, _ = novelty_order(detector, db, pool)
    return _batch(iteration, phase, db.ids[ranked[: cfg.batch_size]], n_sv=detector.model.alphas.size)


def _detector(cfg, db, sim, iteration, state) -> NoveltyDetector:
    if cfg.retrain == "once" and state is not None:
        if state.cached_detector is None:
            state.cached_detector = fit_novelty(cfg, db, sim, iteration)
        return state.cached_detector
    return fit_novelty(cfg, db, sim, iteration)


def cds_batch(cfg: StrategyConfig, db: TestDatabase, coverage: CoverageState, iteration: int, phase: str = "cds") -> Batch:
    """Round-robin over per-group ranked lists; random top-up when they run dry."""
    sim, pool = _rows(db, coverage)
    _, classifiers = train_group_models(cfg, db, coverage, sim, iteration)
    if not classifiers:
        log.info("iteration %d: no target groups, falling back to random selection", iteration)
        return _batch(iteration, phase, random_batch(cfg, db, pool, iteration), fallback=1)
    sel = cds.select_arrays(db.ids[pool], db.features[pool], classifiers)
    chosen: list[int] = []
    seen: set[int] = set()
    lists = [sel.per_group[c.group_id] for c in classifiers]
    for rank in range(max(len(x) for x in lists)):
        if len(chosen) >= cfg.batch_size:
            break
        for lst in lists:
            if rank < len(lst) and lst[rank][0] not in seen and len(chosen) < cfg.batch_size:
                seen.add(lst[rank][0])
                chosen.append(lst[rank][0])
    n_sel = len(chosen)
    if n_sel < cfg.batch_size:
        rest = pool[~np.isin(db.ids[pool], chosen)]
        k = min(cfg.batch_size - n_sel, rest.size)
        fill = stream(cfg.seed, TAG_TOPUP, iteration).choice(rest, size=k, replace=False)
        chosen.extend(int(i) for i in db.ids[fill])
    return _batch(iteration, phase, chosen, [k >= n_sel for k in range(len(chosen))], **_tree_diag(classifiers))


def iha_batch(
    cfg: StrategyConfig,
    db: TestDatabase,
    coverage: CoverageState,
    models: Models | None = None,
    iteration: int = 0,
    phase: str = "iha",
) -> Batch:
    """Intersect the CDS and novelty engines for one batch.

    ``cds_first``: each target group's selections are ranked by novelty and
    the most novel one is kept; results are deduplicated and cut to the batch
    size in group-id order. ``ndv_first``: the ``batch_size * overprovision``
    most novel candidates are filtered to those some classifier selects, then
    ordered by (max probability desc, score asc, id asc). Either way an
    underfilled batch is topped up from the global novelty ranking and those
    ids are flagged.
    """
    sim, pool = _rows(db, coverage)
    if models is None:
        _, classifiers = train_group_models(cfg, db, coverage, sim, iteration)
        models = Models(fit_novelty(cfg, db, sim, iteration), classifiers=tuple(classifiers))
    detector, classifiers = models.detector, list(models.classifiers)
    if detector is None:
        raise ValueError("iha_batch needs a novelty detector")
    ranked, phi_pool = novelty_order(detector, db, pool)
    diag = dict(_tree_diag(classifiers), n_sv=detector.model.alphas.size)
    if not classifiers:
        log.info("iteration %d: no target groups, using the novelty ranking alone", iteration)
        return _batch(iteration, phase, db.ids[ranked[: cfg.batch_size]], fallback=1, **diag)

    pool_ids = db.ids[pool]
    if cfg.resolved_order == "cds_first":
        # rank every group's selections by novelty and keep the head
        sel = cds.select_arrays(pool_ids, db.features[pool], classifiers)
        novelty_rank = np.empty(pool.size, dtype=np.int64)
        novelty_rank[np.searchsorted(pool, ranked)] = np.arange(pool.size)
        chosen: list[int] = []
        for g in sorted(sel.per_group):
            cands = np.array([c[0] for c in sel.per_group[g]], dtype=np.int64)
            if cands.size:
                best = int(cands[np.argmin(novelty_rank[np.searchsorted(pool_ids, cands)])])
                if best not in chosen:
                    chosen.append(best)
        chosen = chosen[: cfg.batch_size]
    else:
        head = ranked[: cfg.batch_size * cfg.overprovision]
        probs = np.stack([c.predict_proba(db.features[head]) for c in classifiers])
        hit = (probs > np.array([c.epsilon for c in classifiers])[:, None]).any(axis=0)
        best_p = probs.max(axis=0)
        phi_head = detector.scores(db.features[head])
        keep = np.flatnonzero(hit)
        keep = keep[np.lexsort((db.ids[head][keep], phi_head[keep], -best_p[keep]))]
        chosen = [int(i) for i in db.ids[head][keep][: cfg.batch_size]]

    n_sel = len(chosen)
    if n_sel < cfg.batch_size:
        taken = set(chosen)
        for r in ranked:
            if len(chosen) >= cfg.batch_size:
                break
            tid = int(db.ids[r])
            if tid not in taken:
                chosen.append(tid)
    return _batch(iteration, phase, chosen, [k >= n_sel for k in range(len(chosen))], **diag)


# -------------------------------------------------------------- phases


def uha_phase(cfg: StrategyConfig, coverage_fraction: float, state: StrategyState) -> str:
    """Phase for the next hybrid batch.

    Coverage thresholds move the run forward through ``cfg.phases()``; with
    ``dynamic_stagnation`` set, that many batches without coverage gain also
    advance it one step. The phase never moves backward.
    """
    seq = cfg.phases()
    current = seq.index(state.phase) if state.phase in seq else 0
    by_level = sum(1 for lv in cfg.switch_levels[: len(seq) - 1] if coverage_fraction >= lv)
    target = max(current, by_level)
    if (
        target == current
        and cfg.dynamic_stagnation is not None
        and state.stagnation >= cfg.dynamic_stagnation
    ):
        target = current + 1
    return seq[min(target, len(seq) - 1)]


def next_batch(cfg: StrategyConfig, state: StrategyState, db: TestDatabase, coverage: CoverageState) -> Batch:
    """Choose the next batch and advance ``state``.

    Iteration 0 is always the warm-up sample. Afterwards the active phase
    picks the policy: random, ndv, cds, or iha.
    """
    n_pool = db.n_tests - len(coverage.simulated)
    if n_pool <= 0:
        raise EmptyPoolError("every test in the database has been simulated")
    it = state.iteration
    frac = coverage_fraction(coverage, db, cfg.coverage_basis)

    if it == 0:
        ids = [i for i in warmup_sample(cfg, db) if not coverage.is_simulated(i)]
        batch = _batch(0, "warmup", ids)
    else:
        if frac > state.last_coverage:
            state.stagnation = 0
        else:
            state.stagnation += 1
        phase = uha_phase(cfg, frac, state) if cfg.kind in ("uha", "iha") else state.phase
        if phase != state.phase:
            log.info("iteration %d: switching %s -> %s at coverage %.4f", it, state.phase, phase, frac)
            state.phase = phase
            state.coverage_at_entry = frac
            state.stagnation = 0
            state.switches.append((phase, it))
        batch = run_policy(cfg, db, coverage, it, phase, state)

    if not batch.ids:
        raise EmptyPoolError("policy returned an empty batch")
    state.last_coverage = frac
    state.iteration += 1
    return batch


def run_policy(
    cfg: StrategyConfig,
    db: TestDatabase,
    coverage: CoverageState,
    iteration: int,
    phase: str,
    state: StrategyState | None = None,
) -> Batch:
    """Dispatch one phase's policy; used by :func:`next_batch` and by replay."""
    if phase == "random":
        _, pool = _rows(db, coverage)
        return _batch(iteration, phase, random_batch(cfg, db, pool, iteration))
    if phase == "ndv":
        return ndv_batch(cfg, db, coverage, iteration, state, phase)
    if phase == "cds":
        return cds_batch(cfg, db, coverage, iteration, phase)
    if phase == "iha":
        return iha_batch(cfg, db, coverage, None, iteration, phase)
    raise ValueError(f"unknown phase {phase!r}")


def replay(cfg: StrategyConfig, db: TestDatabase, batches: Sequence[Batch], policy: str | None = None) -> list[bool]:
    """Re-derive each recorded batch from the coverage state it was chosen in.

    For every batch after the warm-up, the state is rebuilt from the ids
    before it and ``policy`` (default: the recorded phase) is asked for a
    batch. Returns, per batch, whether the re-derived ids match.
    """
    state = CoverageState(db.n_points)
    out = []
    for b in batches:
        if b.iteration == 0:
            out.append(list(b.ids) == [i for i in warmup_sample(cfg, db)])
        else:
            again = run_policy(cfg, db, state, b.iteration, policy or b.phase)
            out.append(again.ids == b.ids)
        for tid in b.ids:
            state.apply(db.signature(tid))
    return out
