import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from covsel.model import CoverageModel, CoveragePartition, TestDatabase  # noqa: E402
from covsel.oracle import SyntheticSpec, gen_synthetic  # noqa: E402

SMALL_SPEC = SyntheticSpec(
    n_tests=600,
    n_numeric_fields=6,
    n_categorical_fields=2,
    cardinality=3,
    n_points=60,
    n_groups=6,
    predicates_per_point=2,
    mixture_components=4,
    min_width=0.2,
    max_width=0.6,
    seed=7,
)

# harder: random needs ~275 tests for 90%, so hybrids pass through every phase
STRATEGY_SPEC = SyntheticSpec(
    n_tests=1200,
    n_numeric_fields=10,
    n_categorical_fields=2,
    cardinality=3,
    n_points=150,
    n_groups=10,
    predicates_per_point=3,
    mixture_components=4,
    min_width=0.1,
    max_width=0.5,
    seed=5,
)


@pytest.fixture(scope="session")
def strategy_db():
    return gen_synthetic(STRATEGY_SPEC).db


@pytest.fixture(scope="session")
def small_sdb():
    return gen_synthetic(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_db(small_sdb):
    return small_sdb.db


def make_db(features, signatures, group_of, ids=None):
    features = np.asarray(features, dtype=float)
    ids = list(range(len(features))) if ids is None else ids
    group_of = np.asarray(group_of)
    return TestDatabase(ids, features, signatures, CoverageModel(group_of.size), CoveragePartition(group_of))


@pytest.fixture
def tiny_db():
    # 5 points in 2 groups: g0 = {0,1,2}, g1 = {3,4}
    sigs = {0: {0, 2}, 1: {2, 3}, 2: set(), 3: {4}}
    return make_db([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [3.0, 1.0]], sigs, [0, 0, 0, 1, 1])
