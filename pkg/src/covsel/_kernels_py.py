"""Pure numpy twins of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import numpy as np

TAU = 1e-12


def smo_loop(Q, alpha, G, upper, tol, max_iter):
    n_iter = 0
    for _ in range(max_iter):
        mG = -G
        up = np.where(alpha < upper, mG, -np.inf)
        down = np.where(alpha > 0.0, mG, np.inf)
        i = int(np.argmax(up))
        j = int(np.argmin(down))
        gmax, gmin = up[i], down[j]
        if not alpha[i] < upper or not alpha[j] > 0.0 or gmax - gmin < tol:
            return n_iter, True
        eta = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
        if eta <= 0.0:
            eta = TAU
        delta = (G[j] - G[i]) / eta
        cap_i = upper - alpha[i]
        cap_j = alpha[j]
        if delta >= cap_i and cap_i <= cap_j:
            delta = cap_i
            alpha[i] = upper
            alpha[j] = 0.0 if cap_i == cap_j else alpha[j] - delta
        elif delta >= cap_j:
            delta = cap_j
            alpha[j] = 0.0
            alpha[i] = alpha[i] + delta
        else:
            alpha[i] = alpha[i] + delta
            alpha[j] = alpha[j] - delta
        G += delta * (Q[i] - Q[j])
        n_iter += 1
    return n_iter, False


def filter_order(full_order, pos, n_rows):
    mapped = pos[full_order]
    return mapped[mapped >= 0].reshape(full_order.shape[0], n_rows).astype(np.int32)


def apply_tree(X, feature, threshold, left, right):
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    active = feature[node] >= 0
    while active.any():
        r, nd = rows[active], node[active]
        go_left = X[r, feature[nd]] <= threshold[nd]
        node[r] = np.where(go_left, left[nd], right[nd])
        active = feature[node] >= 0
    return node


def _best_split(Xt, y, order, min_leaf):
    D, n = order.shape
    xs = np.take_along_axis(Xt, order, axis=1)
    ys = y[order].astype(np.float64)
    P = ys[0].sum()
    pL = np.cumsum(ys, axis=1)[:, :-1]
    nL = np.arange(1, n, dtype=np.float64)
    nR = n - nL
    qL = nL - pL
    pR = P - pL
    qR = nR - pR
    S = ((pL * pL + qL * qL) * nR + (pR * pR + qR * qR) * nL) / (nL * nR)
    valid = (xs[:, :-1] < xs[:, 1:]) & (nL >= min_leaf) & (nR >= min_leaf)
    S = np.where(valid, S, -np.inf)
    smax = S.max()
    if smax == -np.inf:
        return None
    # the rounded scores can tie where the exact ones do not; settle the
    # near-maximal cuts with integers, first maximum in scan order
    flat = -1
    bn, bd = -1, 1
    for f in np.flatnonzero(S.ravel() >= smax * (1.0 - 1e-9)):
        d, k = divmod(int(f), n - 1)
        nl, p = k + 1, int(pL[d, k])
        nr, q = n - nl, nl - p
        num = (p * p + q * q) * nr + ((int(P) - p) ** 2 + (nr - int(P) + p) ** 2) * nl
        den = nl * nr
        if num * bd > bn * den:
            flat, bn, bd = int(f), num, den
    d, k = divmod(flat, n - 1)
    va, vb = xs[d, k], xs[d, k + 1]
    thr = 0.5 * (va + vb)
    if not (va <= thr < vb):
        thr = va
    return d, float(thr)


def grow_tree(Xt, y, order, max_depth, min_leaf):
    y = np.asarray(y, dtype=np.int8)
    feature, threshold, left, right, n_samples, n_positive = [], [], [], [], [], []
    stack = [(np.asarray(order, dtype=np.int32), 0, -1, 1)]
    while stack:
        node_order, depth, parent, is_left = stack.pop()
        node = len(feature)
        if parent >= 0:
            (left if is_left else right)[parent] = node
        n = node_order.shape[1]
        P = int(y[node_order[0]].sum())
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        n_samples.append(n)
        n_positive.append(P)
        if depth >= max_depth or n < 2 * min_leaf or P == 0 or P == n:
            continue
        split = _best_split(Xt, y, node_order, min_leaf)
        if split is None:
            continue
        d, thr = split
        goes = Xt[d] <= thr
        mask = goes[node_order]
        nl = int(mask[0].sum())
        D = node_order.shape[0]
        lo = node_order[mask].reshape(D, nl)
        hi = node_order[~mask].reshape(D, n - nl)
        feature[node] = d
        threshold[node] = thr
        stack.append((hi, depth + 1, node, 0))
        stack.append((lo, depth + 1, node, 1))
    return (
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(n_samples, dtype=np.int64),
        np.asarray(n_positive, dtype=np.int64),
    )
