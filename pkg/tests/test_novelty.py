import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from covsel import _kernels_py
from covsel._backend import BACKEND, kernels
from covsel.novelty import (
    SV_TOL,
    KernelSpec,
    Novelty,
    NoveltyError,
    ScoredCandidate,
    classify_novel,
    default_kernel,
    dissimilarity_score,
    dump_model,
    fit_detector,
    rank_by_novelty,
    train_ocsvm,
)

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


def full_alpha(model, n):
    a = np.zeros(n)
    a[model.support_ids] = model.alphas
    return a


class TestTrainExamples:
    def test_single_point(self):
        m = train_ocsvm([[0.3, -2.0]], nu=1.0, kernel=KernelSpec(1.0))
        assert m.alphas.tolist() == [1.0]
        assert m.theta == 1.0
        assert dissimilarity_score(m, [0.3, -2.0]) == 0.0
        assert classify_novel(m, [0.3, -2.0]) is Novelty.NORMAL

    @pytest.mark.parametrize("nu", [0.25, 0.5, 1.0])
    def test_identical_points(self, nu):
        m = train_ocsvm(np.ones((4, 3)), nu=nu, kernel=KernelSpec(0.7))
        assert m.theta == pytest.approx(1.0, abs=1e-12)
        assert dissimilarity_score(m, [1.0, 1.0, 1.0]) == pytest.approx(0.0, abs=1e-12)

    def test_square_matches_active_set_oracle(self):
        # alpha itself is only pinned to ~tol; the objective is quadratic in that error
        loose = train_ocsvm(SQUARE, nu=0.5, kernel=KernelSpec(1.0))
        m = train_ocsvm(SQUARE, nu=0.5, kernel=KernelSpec(1.0), tol=1e-9)
        alpha, rho, obj = oracles.ocsvm_active_set(SQUARE, 0.5, 1.0)
        assert np.allclose(full_alpha(m, 4), alpha, atol=1e-6)
        assert m.theta == pytest.approx(rho, abs=1e-6)
        assert m.objective == pytest.approx(obj, abs=1e-6)
        assert loose.objective == pytest.approx(obj, abs=1e-6)
        probe = np.array([[0.5, 0.5], [2.0, -1.0], [0.0, 0.0], [0.9, 0.2]])
        want = oracles.ocsvm_scores(SQUARE, alpha, rho, 1.0, probe)
        assert np.allclose(m.decision(probe), want, atol=1e-4)
        assert np.allclose(loose.decision(probe), want, atol=1e-4)
        centre = classify_novel(m, [0.5, 0.5])
        assert centre is (Novelty.NOVEL if want[0] < 0 else Novelty.NORMAL)

    def test_far_point_scores_minus_theta(self):
        m = train_ocsvm(SQUARE, nu=0.5, kernel=KernelSpec(1.0))
        s = dissimilarity_score(m, [100.0, 0.0])
        assert -m.theta - 1e-6 <= s <= -m.theta + 1e-3
        assert classify_novel(m, [100.0, 0.0]) is Novelty.NOVEL

    def test_margin_svs_on_boundary(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(8, 2))
        m = train_ocsvm(X, nu=0.5, kernel=KernelSpec(0.5))
        margin = (m.alphas > SV_TOL) & (m.alphas < m.upper_bound - SV_TOL)
        assert margin.any()
        for sv in m.support_vectors[margin]:
            assert abs(dissimilarity_score(m, sv)) <= 1e-4


class TestTrainErrors:
    def test_infeasible_box(self):
        with pytest.raises(NoveltyError, match="larger training set or a larger nu"):
            train_ocsvm(np.zeros((3, 1)), nu=0.3)

    def test_non_finite(self):
        with pytest.raises(NoveltyError, match="finite"):
            train_ocsvm([[0.0], [np.inf]], nu=1.0)

    def test_bad_nu(self):
        with pytest.raises(NoveltyError):
            train_ocsvm([[0.0]], nu=0.0)

    def test_empty(self):
        with pytest.raises(NoveltyError, match="empty"):
            train_ocsvm(np.zeros((0, 2)))

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            KernelSpec(0.0)

    def test_iteration_cap_warns(self, caplog):
        rng = np.random.default_rng(0)
        with caplog.at_level(logging.WARNING, logger="covsel.novelty"):
            m = train_ocsvm(rng.normal(size=(30, 3)), nu=0.2, kernel=KernelSpec(1.0), max_iter=1)
        assert not m.converged
        assert "iteration cap" in m.warning
        assert "iteration cap" in caplog.text


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(2, 8),
    d=st.integers(1, 4),
    nu=st.sampled_from([0.3, 0.5, 1.0]),
    seed=st.integers(0, 2**32 - 1),
)
def test_dual_feasibility_and_nu_property(n, d, nu, seed):
    X = np.random.default_rng(seed).normal(size=(n, d))
    nu = max(nu, 1.0 / n)
    m = train_ocsvm(X, nu=nu, kernel=KernelSpec(1.0 / d))
    a = full_alpha(m, n)
    assert abs(a.sum() - 1.0) <= 1e-8
    assert a.min() >= -1e-8 and a.max() <= m.upper_bound + 1e-8
    scores = m.decision(X)
    # outliers are at the upper bound, so at most nu n of them
    assert np.mean(scores < -1e-4) <= nu + 1.0 / n
    assert m.alphas.size / n >= nu - 1.0 / n


def test_permutation_invariance():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(40, 3))
    probe = rng.normal(size=(20, 3))
    base = train_ocsvm(X, nu=0.3, kernel=KernelSpec(0.4)).decision(probe)
    for _ in range(3):
        perm = rng.permutation(40)
        s = train_ocsvm(X[perm], nu=0.3, kernel=KernelSpec(0.4), ids=perm).decision(probe)
        assert np.max(np.abs(s - base)) <= 1e-10


class TestRanking:
    def model(self):
        return train_ocsvm(SQUARE, nu=0.5, kernel=KernelSpec(1.0))

    def test_sorted_by_score(self, monkeypatch):
        m = self.model()
        scores = {10: -0.5, 11: 0.1, 12: -0.2}
        monkeypatch.setattr(type(m), "decision", lambda self, X: np.array([scores[int(x[0])] for x in X]))
        out = rank_by_novelty(m, [(i, [i, 0.0]) for i in (10, 11, 12)])
        assert [c.id for c in out] == [10, 12, 11]
        assert out[0] == ScoredCandidate(10, -0.5)

    def test_ties_by_id(self):
        out = rank_by_novelty(self.model(), [(7, [0.2, 0.2]), (3, [0.2, 0.2]), (5, [0.2, 0.2])])
        assert [c.id for c in out] == [3, 5, 7]

    def test_empty(self):
        assert rank_by_novelty(self.model(), []) == []

    def test_duplicate_ids(self):
        with pytest.raises(NoveltyError, match="unique"):
            rank_by_novelty(self.model(), [(1, [0, 0]), (1, [1, 1])])

    def test_permutation_of_input(self):
        rng = np.random.default_rng(2)
        cands = [(int(i), rng.normal(size=2)) for i in rng.permutation(30)]
        out = rank_by_novelty(self.model(), cands)
        assert sorted(c.id for c in out) == sorted(c[0] for c in cands)
        keys = [(c.phi, c.id) for c in out]
        assert keys == sorted(keys)


def test_default_kernel_gamma():
    X = np.array([[0.0, 0.0], [2.0, 4.0]])
    # variances 1 and 4, mean 2.5, D = 2
    assert default_kernel(X).gamma == pytest.approx(1.0 / 5.0)


def test_detector_drops_constant_feature(caplog):
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.normal(size=20), np.full(20, 3.0), rng.normal(size=20)])
    with caplog.at_level(logging.WARNING, logger="covsel.novelty"):
        det = fit_detector(X, np.arange(20))
    assert det.scaler.keep.tolist() == [0, 2]
    assert "constant" in caplog.text
    assert det.scores(X).shape == (20,)


def test_dump_model(tmp_path):
    m = train_ocsvm(SQUARE, nu=0.5, kernel=KernelSpec(1.0), ids=[4, 5, 6, 7])
    path = tmp_path / "model.txt"
    dump_model(m, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "nu 0.5" and lines[1] == "gamma 1.0"
    assert float(lines[2].split()[1]) == m.theta
    pairs = [ln.split() for ln in lines[5:]]
    assert [int(p[0]) for p in pairs] == m.support_ids.tolist()
    assert [float(p[1]) for p in pairs] == m.alphas.tolist()


@pytest.mark.skipif(BACKEND != "cython", reason="compiled kernels not built")
def test_smo_backends_agree():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(120, 4))
    from covsel.novelty import _initial_alpha, rbf_kernel

    Q = rbf_kernel(X, X, 0.25)
    out = []
    for mod in (kernels, _kernels_py):
        alpha = _initial_alpha(120, 1 / (0.2 * 120))
        G = Q @ alpha
        it, conv = mod.smo_loop(Q, alpha, G, 1 / (0.2 * 120), 1e-5, 10**6)
        out.append((it, conv, alpha, G))
    assert out[0][:2] == out[1][:2]
    assert np.array_equal(out[0][2], out[1][2])
    assert np.allclose(out[0][3], out[1][3], rtol=0, atol=1e-12)
