"""Shared domain types: stimuli, coverage points, partitions and coverage accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class CoverageError(ValueError):
    """Raised when coverage bookkeeping would become inconsistent."""


class DuplicateTestError(CoverageError):
    pass


@dataclass(frozen=True)
class TestStimulus:
    """One constrained-random test: an id plus its encoded generation fields."""

    __test__ = False  # keep pytest from collecting this class

    id: int
    features: tuple[float, ...]

    def __post_init__(self) -> None:
        if not all(np.isfinite(self.features)):
            raise ValueError(f"test {self.id}: features must be finite")


@dataclass(frozen=True)
class CoverageModel:
    n_points: int
    point_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.n_points < 1:
            raise ValueError("coverage model needs at least one point")
        if self.point_names is not None and len(self.point_names) != self.n_points:
            raise ValueError("point_names must name every point")

    @property
    def points(self) -> range:
        return range(self.n_points)


@dataclass(frozen=True)
class CoveragePartition:
    """Disjoint, covering grouping of coverage points.

    ``group_of[p]`` is the group index of point ``p``; group indices are dense
    ``0..m-1`` and every group has at least one member.
    """

    group_of: np.ndarray
    members: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        group_of = np.asarray(self.group_of, dtype=np.int64)
        if group_of.ndim != 1 or group_of.size == 0:
            raise ValueError("group_of must be a non-empty 1-D map")
        if group_of.min() < 0:
            raise ValueError("group ids must be non-negative")
        m = int(group_of.max()) + 1
        members = tuple(np.flatnonzero(group_of == g) for g in range(m))
        empty = [g for g, mem in enumerate(members) if mem.size == 0]
        if empty:
            raise ValueError(f"empty coverage groups: {empty}")
        group_of.setflags(write=False)
        object.__setattr__(self, "group_of", group_of)
        object.__setattr__(self, "members", members)

    @classmethod
    def from_groups(cls, groups: Sequence[Iterable[int]], n_points: int) -> "CoveragePartition":
        group_of = np.full(n_points, -1, dtype=np.int64)
        for g, pts in enumerate(groups):
            for p in pts:
                if group_of[p] != -1:
                    raise ValueError(f"point {p} is in groups {group_of[p]} and {g}")
                group_of[p] = g
        missing = np.flatnonzero(group_of < 0)
        if missing.size:
            raise ValueError(f"points without a group: {missing.tolist()}")
        return cls(group_of)

    @property
    def n_groups(self) -> int:
        return len(self.members)

    @property
    def n_points(self) -> int:
        return int(self.group_of.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CoveragePartition):
            return NotImplemented
        return np.array_equal(self.group_of, other.group_of)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class CoverageSignature:
    test_id: int
    exercised: frozenset[int]


class TestDatabase:
    """Immutable store of tests, their coverage signatures and the coverage model.

    Features are held as one ``(n_tests, D)`` float64 matrix and signatures in
    CSR form (``sig_indptr``/``sig_indices``); rows follow ascending test id.
    """

    __test__ = False

    def __init__(
        self,
        ids: Sequence[int] | np.ndarray,
        features: np.ndarray,
        signatures: Mapping[int, Iterable[int]] | tuple[np.ndarray, np.ndarray],
        model: CoverageModel,
        partition: CoveragePartition,
    ) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != ids.size:
            raise ValueError("features must be an (n_tests, D) matrix aligned with ids")
        if ids.size == 0:
            raise ValueError("database has no tests")
        if np.unique(ids).size != ids.size:
            raise ValueError("test ids must be unique")
        if ids.min() < 0:
            raise ValueError("test ids must be non-negative")
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        if partition.n_points != model.n_points:
            raise ValueError("partition and coverage model disagree on the point count")

        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        features = np.ascontiguousarray(features[order])

        if isinstance(signatures, tuple):
            indptr, indices = (np.asarray(a, dtype=np.int64) for a in signatures)
            if indptr.size != ids.size + 1:
                raise ValueError("signature indptr must have n_tests + 1 entries")
            # CSR rows given in caller's row order; reorder to ascending ids
            rows = [indices[indptr[r]:indptr[r + 1]] for r in order]
        else:
            known = set(int(i) for i in ids)
            extra = set(signatures) - known
            if extra:
                raise ValueError(f"signatures for unknown tests: {sorted(extra)[:5]}")
            rows = [np.asarray(sorted(set(signatures.get(int(i), ()))), dtype=np.int64) for i in ids]

        lengths = np.fromiter((r.size for r in rows), dtype=np.int64, count=len(rows))
        indptr = np.zeros(ids.size + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        rows = [np.sort(r) for r in rows]
        if any(r.size > 1 and np.any(np.diff(r) == 0) for r in rows):
            raise ValueError("signature lists a point twice")
        indices = np.concatenate(rows).astype(np.int64, copy=False)
        if indices.size and (indices.min() < 0 or indices.max() >= model.n_points):
            raise ValueError("signature references an unknown coverage point")

        for arr in (ids, features, indptr, indices):
            arr.setflags(write=False)
        self.ids = ids
        self.features = features
        self.sig_indptr = indptr
        self.sig_indices = indices
        self.model = model
        self.partition = partition
        self._row_of = {int(i): r for r, i in enumerate(ids)}
        self._test_group: np.ndarray | None = None
        self._hits_per_point: np.ndarray | None = None
        self._feature_order: np.ndarray | None = None

    # -- basic shape ---------------------------------------------------------
    @property
    def n_tests(self) -> int:
        return int(self.ids.size)

    @property
    def dimension(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_points(self) -> int:
        return self.model.n_points

    def row(self, test_id: int) -> int:
        try:
            return self._row_of[int(test_id)]
        except KeyError:
            raise KeyError(f"unknown test id {test_id}") from None

    def rows(self, test_ids: Iterable[int]) -> np.ndarray:
        return np.fromiter((self.row(t) for t in test_ids), dtype=np.int64)

    def __contains__(self, test_id: object) -> bool:
        return isinstance(test_id, (int, np.integer)) and int(test_id) in self._row_of

    def stimulus(self, test_id: int) -> TestStimulus:
        return TestStimulus(int(test_id), tuple(float(v) for v in self.features[self.row(test_id)]))

    @property
    def tests(self) -> list[TestStimulus]:
        return [self.stimulus(int(i)) for i in self.ids]

    def points_of_row(self, r: int) -> np.ndarray:
        return self.sig_indices[self.sig_indptr[r]:self.sig_indptr[r + 1]]

    def signature(self, test_id: int) -> CoverageSignature:
        return CoverageSignature(int(test_id), frozenset(int(p) for p in self.points_of_row(self.row(test_id))))

    # -- derived, cached -----------------------------------------------------
    @property
    def test_group(self) -> np.ndarray:
        """Boolean ``(n_tests, m)`` matrix: does row r hit any point of group g."""
        if self._test_group is None:
            m = self.partition.n_groups
            tg = np.zeros((self.n_tests, m), dtype=bool)
            row_idx = np.repeat(np.arange(self.n_tests), np.diff(self.sig_indptr))
            tg[row_idx, self.partition.group_of[self.sig_indices]] = True
            tg.setflags(write=False)
            self._test_group = tg
        return self._test_group

    @property
    def hits_per_point(self) -> np.ndarray:
        """Number of tests in the whole database that exercise each point."""
        if self._hits_per_point is None:
            h = np.bincount(self.sig_indices, minlength=self.n_points).astype(np.int64)
            h.setflags(write=False)
            self._hits_per_point = h
        return self._hits_per_point

    @property
    def n_reachable(self) -> int:
        return int(np.count_nonzero(self.hits_per_point))

    @property
    def feature_order(self) -> np.ndarray:
        """Per-feature stable sort order of all rows, shape ``(D, n_tests)``."""
        if self._feature_order is None:
            fo = np.ascontiguousarray(np.argsort(self.features, axis=0, kind="stable").T.astype(np.int32))
            fo.setflags(write=False)
            self._feature_order = fo
        return self._feature_order

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TestDatabase):
            return NotImplemented
        return (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.sig_indptr, other.sig_indptr)
            and np.array_equal(self.sig_indices, other.sig_indices)
            and self.model == other.model
            and self.partition == other.partition
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return (
            f"TestDatabase(n_tests={self.n_tests}, D={self.dimension}, "
            f"P={self.n_points}, m={self.partition.n_groups})"
        )


class CoverageState:
    """Cumulative hit counts for one run. Single writer; appending only."""

    def __init__(self, n_points: int) -> None:
        self.hit_count = np.zeros(n_points, dtype=np.int64)
        self.simulated: list[int] = []
        self._seen: set[int] = set()
        self._n_hit = 0

    @property
    def n_points(self) -> int:
        return int(self.hit_count.size)

    @property
    def n_hit(self) -> int:
        return self._n_hit

    @property
    def coverage_fraction(self) -> float:
        return self._n_hit / self.n_points

    def is_simulated(self, test_id: int) -> bool:
        return int(test_id) in self._seen

    def apply(self, sig: CoverageSignature) -> "CoverageState":
        tid = int(sig.test_id)
        if tid in self._seen:
            raise DuplicateTestError(f"test {tid} was already simulated")
        pts = np.fromiter(sig.exercised, dtype=np.int64, count=len(sig.exercised))
        if pts.size and (pts.min() < 0 or pts.max() >= self.n_points):
            raise CoverageError(f"test {tid}: signature references an unknown point")
        if pts.size:
            self._n_hit += int(np.count_nonzero(self.hit_count[pts] == 0))
            self.hit_count[pts] += 1
        self.simulated.append(tid)
        self._seen.add(tid)
        return self


def apply_test(state: CoverageState, sig: CoverageSignature) -> CoverageState:
    return state.apply(sig)


@dataclass(frozen=True)
class GroupStatus:
    exercising_test_count: int
    hole_count: int


def group_status(state: CoverageState, partition: CoveragePartition, db: TestDatabase) -> list[GroupStatus]:
    """Per-group count of simulated tests touching the group, and of its unhit points."""
    if state.simulated:
        exercising = db.test_group[db.rows(state.simulated)].sum(axis=0)
    else:
        exercising = np.zeros(partition.n_groups, dtype=np.int64)
    holes = np.bincount(partition.group_of[state.hit_count == 0], minlength=partition.n_groups)
    return [GroupStatus(int(e), int(h)) for e, h in zip(exercising, holes)]
