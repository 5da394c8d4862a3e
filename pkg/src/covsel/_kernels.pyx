# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: SMO for the one-class SVM dual, presorted CART growth.

Arithmetic order matches ``_kernels_py`` so both backends agree bit for bit
when built with ``-ffp-contract=off``.
"""

import numpy as np

from libc.math cimport INFINITY, fabs
from libc.stdint cimport int64_t


cdef double TAU = 1e-12

# largest tree training set whose split scores compare exactly in int64:
# num <= n^3 / 4 and den <= n^2 / 4, so each product is at most n^5 / 16 < 2^63
MAX_EXACT_N = 10_000


def smo_loop(const double[:, ::1] Q, double[::1] alpha, double[::1] G,
             double upper, double tol, long max_iter):
    """Run maximal-violating-pair SMO in place; return (iterations, converged)."""
    cdef Py_ssize_t n = Q.shape[0]
    cdef Py_ssize_t t, i, j
    cdef long it, n_iter = 0
    cdef double gmax, gmin, v, eta, delta, cap_i, cap_j
    cdef bint converged = False

    with nogil:
        for it in range(max_iter):
            i = -1
            j = -1
            gmax = -INFINITY
            gmin = INFINITY
            for t in range(n):
                v = -G[t]
                if alpha[t] < upper and v > gmax:
                    gmax = v
                    i = t
                if alpha[t] > 0.0 and v < gmin:
                    gmin = v
                    j = t
            if i < 0 or j < 0 or gmax - gmin < tol:
                converged = True
                break
            eta = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
            if eta <= 0.0:
                eta = TAU
            delta = (G[j] - G[i]) / eta
            cap_i = upper - alpha[i]
            cap_j = alpha[j]
            if delta >= cap_i and cap_i <= cap_j:
                delta = cap_i
                alpha[i] = upper
                if cap_i == cap_j:
                    alpha[j] = 0.0
                else:
                    alpha[j] = alpha[j] - delta
            elif delta >= cap_j:
                delta = cap_j
                alpha[j] = 0.0
                alpha[i] = alpha[i] + delta
            else:
                alpha[i] = alpha[i] + delta
                alpha[j] = alpha[j] - delta
            for t in range(n):
                G[t] = G[t] + delta * (Q[i, t] - Q[j, t])
            n_iter += 1
    return int(n_iter), bool(converged)


def filter_order(const int[:, ::1] full_order, const int64_t[::1] pos, Py_ssize_t n_rows):
    """Restrict a per-feature global sort order to a subset of rows.

    ``pos[r]`` is the subset position of database row ``r`` or -1.
    """
    cdef Py_ssize_t D = full_order.shape[0]
    cdef Py_ssize_t N = full_order.shape[1]
    out_arr = np.empty((D, n_rows), dtype=np.int32)
    cdef int[:, ::1] out = out_arr
    # one spare slot: the branch-free loop writes before it knows whether to keep
    row_arr = np.empty(n_rows + 1, dtype=np.int32)
    cdef int[::1] row = row_arr
    cdef Py_ssize_t d, k, m
    cdef int64_t p
    with nogil:
        for d in range(D):
            m = 0
            for k in range(N):
                p = pos[full_order[d, k]]
                row[m] = <int>p
                m += p >= 0
            for k in range(n_rows):
                out[d, k] = row[k]
    return out_arr


def apply_tree(const double[:, ::1] X, const int64_t[::1] feature, const double[::1] threshold,
               const int64_t[::1] left, const int64_t[::1] right):
    """Leaf reached by each row of ``X`` (left iff value <= threshold)."""
    cdef Py_ssize_t n = X.shape[0], i, node
    out_arr = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    with nogil:
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                node = left[node] if X[i, feature[node]] <= threshold[node] else right[node]
            out[i] = node
    return out_arr


cdef inline double _segment_best(const double* v, const int* code, Py_ssize_t n, double P,
                                int min_leaf, const double* inv, double* cum) noexcept nogil:
    """Approximate best score over the valid cuts of one sorted segment.

    ``v`` holds the segment's values in ascending order and ``code`` the
    matching ``2 * sample + label``. Cut k puts positions 0..k on the left;
    its score is the sum over both children of (pos^2 + neg^2) / size,
    computed as num * inv[k] with inv[k] = 1 / (nL * nR). The relative error
    is a few ulps, far inside the candidate window used for exact resolution.
    Leaves the left positive counts in ``cum``.
    """
    cdef Py_ssize_t k, lo = min_leaf - 1, hi = n - min_leaf
    cdef double dn = <double>n, pL = 0.0, nL, nR, qL, pR, qR, sc, best0 = -INFINITY, best1 = -INFINITY
    for k in range(n - 1):
        pL += code[k] & 1
        cum[k] = pL
    k = lo
    # two accumulators break the dependency chain of the running maximum
    while k < hi:
        nL = <double>(k + 1)
        pL = cum[k]
        nR = dn - nL
        qL = nL - pL
        pR = P - pL
        qR = nR - pR
        sc = ((pL * pL + qL * qL) * nR + (pR * pR + qR * qR) * nL) * inv[k]
        sc = sc if v[k] < v[k + 1] else -INFINITY
        if k & 1:
            best1 = sc if sc > best1 else best1
        else:
            best0 = sc if sc > best0 else best0
        k += 1
    return best0 if best0 > best1 else best1


cdef inline bint _exact_gt(long long pl, long long nl, long long n, long long P,
                           long long* best_num, long long* best_den) noexcept nogil:
    """Whether the cut (pl, nl) scores strictly above the best so far; updates it if so.

    Cross-multiplied int64 products stay below 2^63 for n <= MAX_EXACT_N.
    """
    cdef long long nr = n - nl, ql = nl - pl, pr = P - pl, qr = nr - pr
    cdef long long num = (pl * pl + ql * ql) * nr + (pr * pr + qr * qr) * nl, den = nl * nr
    if num * best_den[0] > best_num[0] * den:
        best_num[0] = num
        best_den[0] = den
        return True
    return False


def grow_tree(const double[:, ::1] Xt, const signed char[::1] y, const int[:, ::1] order_in,
              int max_depth, int min_leaf):
    """Greedy Gini tree on presorted columns; nodes numbered in preorder.

    ``Xt`` is the transposed feature matrix, shape (D, N), and ``order_in``
    its per-feature ascending sort order.

    Returns (feature, threshold, left, right, n_samples, n_positive) arrays;
    ``feature`` is -1 at leaves.
    """
    cdef Py_ssize_t N = Xt.shape[1]
    cdef Py_ssize_t D = Xt.shape[0]
    # each row keeps a node's samples contiguous and sorted: values and codes move together
    vals_arr = np.empty((D, N), dtype=np.float64)
    code_arr = np.empty((D, N), dtype=np.int32)
    cdef double[:, ::1] vals = vals_arr
    cdef int[:, ::1] code = code_arr
    bufv_arr = np.empty(max(N, 1), dtype=np.float64)
    bufc_arr = np.empty(max(N, 1), dtype=np.int32)
    cdef double[::1] bufv = bufv_arr
    cdef int[::1] bufc = bufc_arr
    goes_left_arr = np.zeros(max(N, 1), dtype=np.int8)
    cdef signed char[::1] goes_left = goes_left_arr
    fmax_arr = np.empty(max(D, 1), dtype=np.float64)
    cdef double[::1] fmax = fmax_arr
    cum_arr = np.empty(max(N, 1), dtype=np.float64)
    inv_arr = np.empty(max(N, 1), dtype=np.float64)
    cdef double[::1] cum = cum_arr
    cdef double[::1] inv = inv_arr

    if N > MAX_EXACT_N:
        raise ValueError(f"grow_tree: at most {MAX_EXACT_N} samples, got {N}")
    cdef Py_ssize_t start, end, depth, parent, node, n, k, d, s, a, b, best_f, best_k, nl, n_rows
    cdef int is_left, g, c
    cdef long long P, bn, bd
    cdef double thr, va, vb, x, smax, best, cand

    with nogil:
        for d in range(D):
            for k in range(N):
                s = order_in[d, k]
                vals[d, k] = Xt[d, s]
                code[d, k] = <int>(2 * s + (y[s] != 0))

    feature = []
    threshold = []
    left = []
    right = []
    n_samples = []
    n_positive = []

    stack = [(0, N, 0, -1, 0)]
    while stack:
        start, end, depth, parent, is_left = stack.pop()
        node = len(feature)
        if parent >= 0:
            if is_left:
                left[parent] = node
            else:
                right[parent] = node
        n = end - start
        P = 0
        for k in range(start, end):
            P += code[0, k] & 1
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        n_samples.append(int(n))
        n_positive.append(int(P))

        if depth >= max_depth or n < 2 * min_leaf or P == 0 or P == n:
            continue

        smax = -INFINITY
        with nogil:
            for k in range(n - 1):
                inv[k] = 1.0 / (<double>(k + 1) * <double>(n - k - 1))
            for d in range(D):
                best = _segment_best(&vals[d, start], &code[d, start], n, <double>P, min_leaf,
                                     &inv[0], &cum[0])
                fmax[d] = best
                smax = best if best > smax else smax
        if smax == -INFINITY:
            continue

        # settle the near-maximal cuts exactly, keeping the first maximum in
        # (feature, threshold) order
        with nogil:
            cand = smax - fabs(smax) * 1e-9
            best_f = -1
            best_k = -1
            bn = -1
            bd = 1
            for d in range(D):
                if fmax[d] < cand:
                    continue
                _segment_best(&vals[d, start], &code[d, start], n, <double>P, min_leaf, &inv[0], &cum[0])
                for k in range(min_leaf - 1, n - min_leaf):
                    if vals[d, start + k] < vals[d, start + k + 1] and _exact_gt(
                        <long long>cum[k], k + 1, n, P, &bn, &bd
                    ):
                        best_f = d
                        best_k = start + k
            d = best_f
            va = vals[d, best_k]
            vb = vals[d, best_k + 1]
            thr = 0.5 * (va + vb)
            if not (va <= thr and thr < vb):
                thr = va

            for k in range(start, end):
                goes_left[code[d, k] >> 1] = 1 if k <= best_k else 0
            nl = best_k + 1 - start
            # children at the depth cap are leaves: only row 0 (used for counts) matters
            n_rows = 1 if depth + 1 >= max_depth else D
            for d in range(n_rows):
                a = start
                b = 0
                for k in range(start, end):
                    # branch-free stable partition; the side is data dependent
                    c = code[d, k]
                    x = vals[d, k]
                    g = goes_left[c >> 1]
                    code[d, a] = c
                    vals[d, a] = x
                    bufc[b] = c
                    bufv[b] = x
                    a += g
                    b += 1 - g
                for k in range(b):
                    code[d, a + k] = bufc[k]
                    vals[d, a + k] = bufv[k]

        feature[node] = int(best_f)
        threshold[node] = float(thr)
        stack.append((start + nl, end, depth + 1, node, 0))
        stack.append((start, start + nl, depth + 1, node, 1))

    return (
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(n_samples, dtype=np.int64),
        np.asarray(n_positive, dtype=np.int64),
    )
