"""Coverage-directed selection: per-group decision trees over test features.

For each coverage group that has been exercised often enough but still has
holes, the tests that touched the group become positives and an equal number
of non-touching simulated tests become negatives. A shallow Gini tree learns
the split between them; its leaf class fraction is the probability that a
candidate exercises the group.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels_py
from ._backend import kernels
from .model import CoveragePartition, CoverageState, TestDatabase

log = logging.getLogger(__name__)

DEFAULT_MAX_DEPTH = 4
DEFAULT_MIN_LEAF = 2
DEFAULT_EPSILON = 0.5
DEFAULT_MIN_HITS = 10


class TrainingSetError(ValueError):
    pass


@dataclass(frozen=True)
class TargetGroup:
    group_id: int
    positive_ids: tuple[int, ...]
    hole_ids: tuple[int, ...]


@dataclass(frozen=True)
class TrainingSet:
    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    n_pos: int
    n_neg: int
    imbalanced: bool = False
    rows: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_arrays(cls, X, y, ids=None) -> "TrainingSet":
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        y = np.asarray(y, dtype=np.int8)
        ids = np.arange(len(y), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        n_pos = int(y.sum())
        return cls(X, y, ids, n_pos, int(y.size - n_pos), n_pos != y.size - n_pos)

    @property
    def examples(self) -> list[tuple[np.ndarray, int]]:
        return [(self.X[i], int(self.y[i])) for i in range(self.y.size)]


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = DEFAULT_MAX_DEPTH
    min_leaf: int = DEFAULT_MIN_LEAF

    def __post_init__(self) -> None:
        if self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("max_depth and min_leaf must be >= 1")


@dataclass(frozen=True)
class Tree:
    """Binary tree in flat arrays, nodes in preorder; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_samples: np.ndarray
    n_positive: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def positive_fraction(self) -> np.ndarray:
        return self.n_positive / self.n_samples

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):  # preorder: parents precede children
            if not self.is_leaf(node):
                depth[self.left[node]] = depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row (left iff value <= threshold)."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        i64 = lambda a: np.ascontiguousarray(a, dtype=np.int64)
        return kernels.apply_tree(
            X, i64(self.feature), np.ascontiguousarray(self.threshold, dtype=np.float64), i64(self.left), i64(self.right)
        )

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.positive_fraction[self.apply(X)]

    def weighted_impurity(self) -> float:
        leaves = self.feature < 0
        n, p = self.n_samples[leaves].astype(float), self.n_positive[leaves].astype(float)
        gini_mass = n - (p * p + (n - p) * (n - p)) / n
        return float(gini_mass.sum() / self.n_samples[0])


@dataclass(frozen=True)
class GroupClassifier:
    group_id: int
    tree: Tree
    epsilon: float = DEFAULT_EPSILON
    params: TreeParams = TreeParams()

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.tree.predict_proba(X)


@dataclass(frozen=True)
class Rule:
    literals: tuple[tuple[int, str, float], ...]
    predicted: int
    positive_fraction: float
    n_samples: int

    def holds(self, x: Sequence[float]) -> bool:
        return all((x[f] <= t) if op == "<=" else (x[f] > t) for f, op, t in self.literals)

    def render(self) -> str:
        cond = " AND ".join(f"f{f} {op} {t!r}" for f, op, t in self.literals) or "TRUE"
        return f"{cond} -> class {self.predicted} (p={self.positive_fraction:.2f}, n={self.n_samples})"

    __str__ = render


@dataclass(frozen=True)
class CdsSelection:
    per_group: dict[int, list[tuple[int, float]]]
    flat: list[int]


# --------------------------------------------------------------------------


def _simulated_rows(state: CoverageState, db: TestDatabase) -> np.ndarray:
    return np.sort(db.rows(state.simulated)) if state.simulated else np.zeros(0, dtype=np.int64)


def find_target_groups(
    state: CoverageState,
    partition: CoveragePartition,
    db: TestDatabase,
    min_hits: int = DEFAULT_MIN_HITS,
    sim_rows: np.ndarray | None = None,
) -> list[TargetGroup]:
    """Groups touched by at least ``min_hits`` simulated tests that still have holes."""
    if min_hits < 1:
        raise ValueError("min_hits must be >= 1")
    rows = _simulated_rows(state, db) if sim_rows is None else sim_rows
    if rows.size == 0:
        return []
    tg = db.test_group[rows]
    counts = tg.sum(axis=0)
    unhit = state.hit_count == 0
    targets = []
    for g in np.flatnonzero(counts >= min_hits):
        holes = partition.members[g][unhit[partition.members[g]]]
        if holes.size:
            pos = db.ids[rows[tg[:, g]]]
            targets.append(TargetGroup(int(g), tuple(int(i) for i in pos), tuple(int(p) for p in holes)))
    return targets


def _rng(seed) -> np.random.Generator:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def build_training_set(
    target: TargetGroup,
    db: TestDatabase,
    state: CoverageState,
    seed: int | np.random.SeedSequence,
    sim_rows: np.ndarray | None = None,
    max_positives: int | None = None,
) -> TrainingSet:
    """All exercisers as positives plus as many sampled non-exercisers as negatives.

    With ``max_positives`` set, a larger positive set is first subsampled to
    that size (same random stream, drawn before the negatives).
    """
    rows = _simulated_rows(state, db) if sim_rows is None else sim_rows
    touches = db.test_group[rows, target.group_id]
    pos_rows = rows[touches]
    eligible = rows[~touches]
    if eligible.size == 0:
        raise TrainingSetError(f"group {target.group_id}: no simulated test avoids the group")
    rng = _rng(seed)
    if max_positives is not None and pos_rows.size > max_positives:
        pos_rows = np.sort(rng.choice(pos_rows, size=max_positives, replace=False))
    n = pos_rows.size
    k = min(n, eligible.size)
    neg_rows = np.sort(rng.choice(eligible, size=k, replace=False))
    if k < n:
        log.debug("group %d: only %d negatives for %d positives", target.group_id, k, n)
    all_rows = np.concatenate([pos_rows, neg_rows])
    y = np.concatenate([np.ones(n, dtype=np.int8), np.zeros(k, dtype=np.int8)])
    return TrainingSet(
        X=np.ascontiguousarray(db.features[all_rows]),
        y=y,
        ids=db.ids[all_rows],
        n_pos=int(n),
        n_neg=int(k),
        imbalanced=k < n,
        rows=all_rows,
    )


def train_tree(ts: TrainingSet, params: TreeParams = TreeParams(), order: np.ndarray | None = None) -> Tree:
    """Greedy binary Gini tree.

    Candidate thresholds are midpoints between consecutive distinct values.
    Split scores are computed exactly enough that equal impurities compare
    equal; the first best split in (feature, threshold) order wins. Splitting stops at
    pure nodes, at ``max_depth``, or when no split leaves ``min_leaf``
    samples on both sides.
    """
    if ts.y.size == 0:
        raise TrainingSetError("training set is empty")
    Xt = np.ascontiguousarray(ts.X.T, dtype=np.float64)
    if order is None:
        order = np.argsort(Xt, axis=1, kind="stable")
    order = np.ascontiguousarray(order, dtype=np.int32)
    # the compiled kernel compares scores in int64; the fallback has no size limit
    grow = kernels.grow_tree if ts.y.size <= getattr(kernels, "MAX_EXACT_N", ts.y.size) else _kernels_py.grow_tree
    arrays = grow(
        Xt, np.ascontiguousarray(ts.y, dtype=np.int8), order,
        int(params.max_depth), int(params.min_leaf),
    )
    return Tree(*arrays)


@dataclass(frozen=True)
class Presorted:
    """Per-feature sort order of an ascending set of database rows.

    Restricting it to a subset is linear in its size, which is cheaper than
    sorting every training set from scratch.
    """

    rows: np.ndarray
    order: np.ndarray = field(repr=False)

    @classmethod
    def of(cls, db: TestDatabase, rows: np.ndarray) -> "Presorted":
        pos = np.full(db.n_tests, -1, dtype=np.int64)
        pos[rows] = np.arange(rows.size)
        return cls(rows, kernels.filter_order(db.feature_order, pos, rows.size))

    def restrict(self, rows: np.ndarray) -> np.ndarray:
        """Sort order of ``rows`` (a subset, any order), as positions into ``rows``."""
        pos = np.full(self.rows.size, -1, dtype=np.int64)
        pos[np.searchsorted(self.rows, rows)] = np.arange(rows.size)
        return kernels.filter_order(self.order, pos, rows.size)


def train_classifier(
    target: TargetGroup,
    db: TestDatabase,
    state: CoverageState,
    seed,
    params: TreeParams = TreeParams(),
    epsilon: float = DEFAULT_EPSILON,
    sim_rows: np.ndarray | None = None,
    presorted: Presorted | None = None,
    max_positives: int | None = None,
) -> GroupClassifier:
    ts = build_training_set(target, db, state, seed, sim_rows, max_positives)
    if presorted is None:
        presorted = Presorted.of(db, np.sort(ts.rows))
    tree = train_tree(ts, params, presorted.restrict(ts.rows))
    return GroupClassifier(target.group_id, tree, epsilon, params)


def predict_prob(clf: GroupClassifier, features: Sequence[float]) -> float:
    return float(clf.tree.predict_proba(np.asarray(features, dtype=np.float64)[None, :])[0])


def classify(clf: GroupClassifier, features: Sequence[float]) -> int:
    return int(predict_prob(clf, features) > clf.epsilon)


def select_arrays(
    ids: np.ndarray, X: np.ndarray, classifiers: Sequence[GroupClassifier], epsilon: float | None = None
) -> CdsSelection:
    """Array form of :func:`cds_select`."""
    ids = np.asarray(ids, dtype=np.int64)
    per_group: dict[int, list[tuple[int, float]]] = {}
    flat: list[int] = []
    seen: set[int] = set()
    for clf in sorted(classifiers, key=lambda c: c.group_id):
        eps = clf.epsilon if epsilon is None else epsilon
        prob = clf.predict_proba(X) if ids.size else np.zeros(0)
        hit = np.flatnonzero(prob > eps)
        order = hit[np.lexsort((ids[hit], -prob[hit]))]
        chosen = list(zip(ids[order].tolist(), prob[order].tolist()))
        per_group[clf.group_id] = chosen
        for tid, _ in chosen:
            if tid not in seen:
                seen.add(tid)
                flat.append(tid)
    return CdsSelection(per_group, flat)


def cds_select(
    candidates: Iterable[tuple[int, Sequence[float]]],
    classifiers: Sequence[GroupClassifier],
    epsilon: float | None = None,
) -> CdsSelection:
    """Per-group candidates with probability above epsilon, best first.

    Ties in probability go to the lower id. ``flat`` is the deduplicated
    union in (group id, rank) order.
    """
    cands = list(candidates)
    ids = np.array([c[0] for c in cands], dtype=np.int64)
    X = np.array([c[1] for c in cands], dtype=np.float64) if cands else np.zeros((0, 0))
    return select_arrays(ids, X, classifiers, epsilon)


def extract_rules(clf: GroupClassifier) -> list[Rule]:
    tree = clf.tree
    rules: list[Rule] = []

    def walk(node: int, path: tuple) -> None:
        if tree.is_leaf(node):
            p = float(tree.positive_fraction[node])
            rules.append(Rule(path, int(p > clf.epsilon), p, int(tree.n_samples[node])))
            return
        f, t = int(tree.feature[node]), float(tree.threshold[node])
        walk(int(tree.left[node]), path + ((f, "<=", t),))
        walk(int(tree.right[node]), path + ((f, ">", t),))

    walk(0, ())
    return rules


def dump_rules(classifiers: Iterable[GroupClassifier], path: Path | str) -> None:
    lines = []
    for clf in classifiers:
        lines.extend(r.render() for r in extract_rules(clf))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
