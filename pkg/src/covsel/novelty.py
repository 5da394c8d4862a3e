"""Novelty scoring with a one-class SVM trained by SMO.

The dual solved here is::

    minimise   1/2 a^T Q a
    subject to 0 <= a_i <= 1/(nu n),  sum(a) = 1,   Q_ij = k(x_i, x_j)

and the dissimilarity of a candidate ``x`` is ``sum_i a_i k(x, x_i) - theta``.
Negative values lie outside the learned support; the more negative, the more
novel.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._backend import kernels

log = logging.getLogger(__name__)

DEFAULT_NU = 0.5
DEFAULT_TOL = 1e-5
DEFAULT_MAX_ITER = 1_000_000
SV_TOL = 1e-10


class NoveltyError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    gamma: float
    kind: str = "rbf"

    def __post_init__(self) -> None:
        if self.kind != "rbf":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ValueError("gamma must be a positive finite number")

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return rbf_kernel(A, B, self.gamma)


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    sq *= -gamma
    return np.exp(sq, out=sq)


@dataclass(frozen=True)
class NoveltyModel:
    support_ids: np.ndarray
    alphas: np.ndarray
    theta: float
    kernel: KernelSpec
    nu: float
    support_vectors: np.ndarray = field(repr=False)
    n_train: int = 0
    n_iter: int = 0
    converged: bool = True
    objective: float = float("nan")

    @property
    def upper_bound(self) -> float:
        return 1.0 / (self.nu * self.n_train)

    @property
    def warning(self) -> str | None:
        if self.converged:
            return None
        return f"SMO stopped at the iteration cap ({self.n_iter}) before reaching tolerance"

    def decision(self, X: np.ndarray) -> np.ndarray:
        """Vectorised dissimilarity scores for the rows of ``X``."""
        K = self.kernel(X, self.support_vectors)
        return K @ self.alphas - self.theta


@dataclass(frozen=True)
class ScoredCandidate:
    id: int
    phi: float


class Novelty(enum.Enum):
    NOVEL = "novel"
    NORMAL = "normal"


def _canonical_order(X: np.ndarray, ids: np.ndarray) -> np.ndarray:
    # lexsort keys: last is primary -> sort by column 0, then 1, ..., then id
    keys = (ids,) + tuple(X[:, d] for d in range(X.shape[1] - 1, -1, -1))
    return np.lexsort(keys)


def _initial_alpha(n: int, upper: float) -> np.ndarray:
    alpha = np.zeros(n)
    remaining = 1.0
    for i in range(n):
        if remaining <= 1e-15:
            break
        a = min(upper, remaining)
        alpha[i] = a
        remaining -= a
    return alpha


def _offset(alpha: np.ndarray, G: np.ndarray, upper: float) -> float:
    margin = (alpha > SV_TOL) & (alpha < upper - SV_TOL)
    if margin.any():
        return float(G[margin].mean())
    at_upper = alpha >= upper - SV_TOL
    at_zero = alpha <= SV_TOL
    lb = float(G[at_upper].max()) if at_upper.any() else None
    ub = float(G[at_zero].min()) if at_zero.any() else None
    if lb is not None and ub is not None:
        return 0.5 * (lb + ub)
    return lb if lb is not None else float(ub)


def train_ocsvm(
    training: Sequence[Sequence[float]] | np.ndarray,
    nu: float = DEFAULT_NU,
    kernel: KernelSpec | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    ids: Sequence[int] | np.ndarray | None = None,
) -> NoveltyModel:
    """Solve the one-class SVM dual on raw feature vectors.

    Rows are put in a canonical (lexicographic) order before solving, so the
    result does not depend on how the training set is permuted. When no
    support vector lies strictly inside the box, ``theta`` is the midpoint of
    the feasible interval, or its finite end when one side is unbounded.
    """
    X = np.atleast_2d(np.asarray(training, dtype=np.float64))
    n = X.shape[0]
    if n == 0 or X.size == 0:
        raise NoveltyError("training set is empty")
    if not np.all(np.isfinite(X)):
        raise NoveltyError("training features must be finite")
    if not 0.0 < nu <= 1.0:
        raise NoveltyError(f"nu must lie in (0, 1], got {nu}")
    if nu * n < 1.0 - 1e-12:
        raise NoveltyError(
            f"nu * n = {nu * n:g} < 1: the box 0 <= a_i <= 1/(nu n) cannot hold sum(a) = 1; "
            "use a larger training set or a larger nu"
        )
    if tol <= 0:
        raise NoveltyError("tol must be positive")
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if ids.shape != (n,):
        raise NoveltyError("ids must align with training rows")
    if kernel is None:
        kernel = default_kernel(X)

    order = _canonical_order(X, ids)
    X = np.ascontiguousarray(X[order])
    ids = ids[order]

    upper = 1.0 / (nu * n)
    Q = np.ascontiguousarray(kernel(X, X))
    alpha = _initial_alpha(n, upper)
    G = Q @ alpha
    n_iter, converged = kernels.smo_loop(Q, alpha, G, upper, tol, max_iter)
    if not converged:
        log.warning("SMO hit the iteration cap (%d) on %d points", max_iter, n)
    theta = _offset(alpha, G, upper)
    sv = alpha > SV_TOL
    return NoveltyModel(
        support_ids=ids[sv],
        alphas=alpha[sv].copy(),
        theta=theta,
        kernel=kernel,
        nu=nu,
        support_vectors=X[sv].copy(),
        n_train=n,
        n_iter=int(n_iter),
        converged=bool(converged),
        objective=float(0.5 * alpha @ (Q @ alpha)),
    )


def default_kernel(X: np.ndarray) -> KernelSpec:
    """RBF with gamma = 1 / (D * mean per-feature variance)."""
    var = float(np.var(X, axis=0).mean())
    if not var > 0:
        var = 1.0
    return KernelSpec(gamma=1.0 / (X.shape[1] * var))


def dissimilarity_score(model: NoveltyModel, candidate: Sequence[float]) -> float:
    x = np.asarray(candidate, dtype=np.float64)
    if x.ndim != 1 or x.size != model.support_vectors.shape[1]:
        raise NoveltyError("candidate width does not match the model")
    return float(model.decision(x[None, :])[0])


def rank_scores(ids: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Indices that order candidates by ascending score, then ascending id."""
    return np.lexsort((ids, phi))


def rank_by_novelty(
    model: NoveltyModel, candidates: Iterable[tuple[int, Sequence[float]]]
) -> list[ScoredCandidate]:
    cands = list(candidates)
    if not cands:
        return []
    ids = np.array([c[0] for c in cands], dtype=np.int64)
    if np.unique(ids).size != ids.size:
        raise NoveltyError("candidate ids must be unique")
    phi = model.decision(np.array([c[1] for c in cands], dtype=np.float64))
    return [ScoredCandidate(int(ids[k]), float(phi[k])) for k in rank_scores(ids, phi)]


def classify_novel(model: NoveltyModel, candidate: Sequence[float]) -> Novelty:
    return Novelty.NOVEL if dissimilarity_score(model, candidate) < 0.0 else Novelty.NORMAL


def dump_model(model: NoveltyModel, path: Path | str) -> None:
    lines = [
        f"nu {model.nu!r}",
        f"gamma {model.kernel.gamma!r}",
        f"theta {model.theta!r}",
        f"n_train {model.n_train}",
        "id alpha",
    ]
    lines += [f"{int(i)} {float(a)!r}" for i, a in zip(model.support_ids, model.alphas)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# standardised detector used by the selection strategies


@dataclass(frozen=True)
class Standardizer:
    keep: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        keep = std > 0
        dropped = int((~keep).sum())
        if dropped:
            log.warning("dropping %d constant feature(s) before novelty training", dropped)
        if not keep.any():
            raise NoveltyError("every feature is constant on the training set")
        return cls(np.flatnonzero(keep), mean[keep], std[keep])

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X[:, self.keep] - self.mean) / self.scale


@dataclass(frozen=True)
class NoveltyDetector:
    scaler: Standardizer
    model: NoveltyModel

    def scores(self, X: np.ndarray) -> np.ndarray:
        return self.model.decision(self.scaler.transform(X))


def fit_detector(
    X: np.ndarray,
    ids: np.ndarray,
    nu: float = DEFAULT_NU,
    gamma: float | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> NoveltyDetector:
    """Standardise (training-set statistics) then train the one-class SVM."""
    X = np.asarray(X, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    order = _canonical_order(X, ids)
    X, ids = X[order], ids[order]
    scaler = Standardizer.fit(X)
    Z = scaler.transform(X)
    kernel = KernelSpec(gamma) if gamma is not None else default_kernel(Z)
    return NoveltyDetector(scaler, train_ocsvm(Z, nu, kernel, tol, max_iter, ids))
