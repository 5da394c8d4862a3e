import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_db
from covsel.model import (
    CoverageModel,
    CoveragePartition,
    CoverageSignature,
    CoverageState,
    DuplicateTestError,
    GroupStatus,
    TestStimulus,
    apply_test,
    group_status,
)


def sig(tid, pts):
    return CoverageSignature(tid, frozenset(pts))


class TestApplyTest:
    def test_empty_signature(self):
        s = apply_test(CoverageState(4), sig(0, []))
        assert s.coverage_fraction == 0.0
        assert s.simulated == [0]

    def test_half_covered(self):
        assert apply_test(CoverageState(4), sig(0, {0, 2})).coverage_fraction == 0.5

    def test_union_semantics(self):
        s = apply_test(CoverageState(4), sig(0, {0, 2}))
        s = apply_test(s, sig(1, {2, 3}))
        assert s.coverage_fraction == 0.75
        assert s.hit_count[2] == 2

    def test_duplicate_rejected(self):
        s = apply_test(CoverageState(4), sig(5, {1}))
        with pytest.raises(DuplicateTestError, match="5"):
            apply_test(s, sig(5, {1}))
        assert s.simulated == [5]

    def test_unknown_point_rejected(self):
        with pytest.raises(ValueError):
            apply_test(CoverageState(3), sig(0, {3}))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.frozensets(st.integers(0, 9), max_size=6), min_size=1, max_size=12), st.randoms())
def test_coverage_monotone_and_order_insensitive(sigs, rnd):
    s = CoverageState(10)
    prev = 0.0
    for k, pts in enumerate(sigs):
        apply_test(s, sig(k, pts))
        assert s.coverage_fraction >= prev
        assert np.all(s.hit_count <= len(s.simulated))
        prev = s.coverage_fraction
    order = list(range(len(sigs)))
    rnd.shuffle(order)
    t = CoverageState(10)
    for k in order:
        apply_test(t, sig(k, sigs[k]))
    assert np.array_equal(s.hit_count, t.hit_count)


class TestPartition:
    def test_laws(self):
        p = CoveragePartition.from_groups([[0, 3], [1], [2, 4]], 5)
        assert p.n_groups == 3
        members = np.concatenate(p.members)
        assert sorted(members.tolist()) == list(range(5))
        assert all(m.size for m in p.members)

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="groups"):
            CoveragePartition.from_groups([[0, 1], [1, 2]], 3)

    def test_uncovered_rejected(self):
        with pytest.raises(ValueError, match="without a group"):
            CoveragePartition.from_groups([[0]], 2)

    def test_empty_group_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            CoveragePartition(np.array([0, 2, 2]))


class TestDatabaseInvariants:
    def test_basic(self, tiny_db):
        assert tiny_db.n_tests == 4 and tiny_db.dimension == 2 and tiny_db.n_points == 5
        assert tiny_db.signature(1).exercised == frozenset({2, 3})
        assert tiny_db.signature(2).exercised == frozenset()
        assert tiny_db.stimulus(3) == TestStimulus(3, (3.0, 1.0))
        assert tiny_db.n_reachable == 4

    def test_rows_sorted_by_id(self):
        db = make_db([[1.0], [0.0]], {9: {0}, 4: {1}}, [0, 0], ids=[9, 4])
        assert db.ids.tolist() == [4, 9]
        assert db.features[:, 0].tolist() == [0.0, 1.0]
        assert db.signature(9).exercised == {0}

    def test_signature_unknown_point(self):
        with pytest.raises(ValueError, match="unknown coverage point"):
            make_db([[0.0]], {0: {3}}, [0, 0])

    def test_signature_unknown_test(self):
        with pytest.raises(ValueError, match="unknown tests"):
            make_db([[0.0]], {1: {0}}, [0])

    def test_non_finite_features(self):
        with pytest.raises(ValueError, match="finite"):
            make_db([[np.nan]], {}, [0])

    def test_test_group_matrix(self, tiny_db):
        assert tiny_db.test_group.tolist() == [[True, False], [True, True], [False, False], [False, True]]

    def test_model_validation(self):
        with pytest.raises(ValueError):
            CoverageModel(0)
        with pytest.raises(ValueError):
            CoverageModel(2, ("a",))


class TestGroupStatus:
    def test_nothing_simulated(self, tiny_db):
        st_ = group_status(CoverageState(5), tiny_db.partition, tiny_db)
        assert st_ == [GroupStatus(0, 3), GroupStatus(0, 2)]

    def test_full_group(self, tiny_db):
        s = CoverageState(5)
        for tid in (1, 3):
            s.apply(tiny_db.signature(tid))
        assert group_status(s, tiny_db.partition, tiny_db)[1] == GroupStatus(2, 0)

    def test_hand_fixture(self):
        # group 0 = points 0..4; tests 0 and 1 touch it, test 2 does not
        sigs = {0: {0, 1, 2}, 1: {2, 3, 5}, 2: {6}}
        db = make_db(np.zeros((3, 1)), sigs, [0, 0, 0, 0, 0, 1, 1])
        s = CoverageState(7)
        for tid in range(3):
            s.apply(db.signature(tid))
        assert group_status(s, db.partition, db)[0] == GroupStatus(2, 1)

    def test_holes_sum_to_global(self, small_db):
        s = CoverageState(small_db.n_points)
        for tid in small_db.ids[:40]:
            s.apply(small_db.signature(int(tid)))
        total = sum(g.hole_count for g in group_status(s, small_db.partition, small_db))
        assert total == int((s.hit_count == 0).sum())


def test_stimulus_rejects_nan():
    with pytest.raises(ValueError):
        TestStimulus(0, (float("inf"),))


def test_every_permutation_gives_same_hits(tiny_db):
    finals = set()
    for perm in itertools.permutations(range(4)):
        s = CoverageState(5)
        for t in perm:
            s.apply(tiny_db.signature(t))
        finals.add(tuple(s.hit_count))
    assert len(finals) == 1
