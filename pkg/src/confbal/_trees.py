"""Compiled inner loops for tree growing and routing.

Node arrays use one layout throughout: ``feature[k] == -1`` marks a leaf, whose
id is ``leaf[k]``; internal nodes send ``x[feature] < threshold`` to ``left``
and everything else to ``right``.
"""

import numpy as np
from numba import njit

# Candidates whose scores agree to this relative tolerance count as tied, so
# ties resolve by scan order (lowest feature, then lowest threshold) rather
# than by rounding noise from different summation orders.
TIE_RTOL = 1e-9


@njit(cache=True, nogil=True)
def build_tree(X, R, rows, mtry, min_node, max_depth, U, min_gain):
    """Grow one CART-style tree on the rows ``rows`` of ``(X, R)``.

    ``R`` holds one column per response; the split score of a candidate is the
    drop in summed squared error over all response columns. ``U[k, :mtry]``
    supplies the uniforms used to sample features at the k-th created node.
    ``max_depth < 0`` means unbounded.
    """
    n_sub = rows.shape[0]
    p = X.shape[1]
    q = R.shape[1]
    cap = 2 * n_sub + 1

    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)

    idx = rows.copy()
    buf = np.empty(n_sub, dtype=np.int64)
    vals = np.empty(n_sub)
    csum = np.empty(q)
    total = np.empty(q)
    perm = np.empty(p, dtype=np.int64)

    # explicit stack of (node, start, end, depth)
    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n_sub
    st_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        size = end - start
        if size < 2 * min_node or (max_depth >= 0 and depth >= max_depth):
            continue

        for j in range(p):
            perm[j] = j
        for k in range(mtry):
            r = k + int(U[node, k] * (p - k))
            if r > p - 1:
                r = p - 1
            tmp = perm[k]
            perm[k] = perm[r]
            perm[r] = tmp
        feats = np.sort(perm[:mtry])

        for c in range(q):
            s = 0.0
            for t in range(start, end):
                s += R[idx[t], c]
            total[c] = s

        best_gain = min_gain * size
        best_f = -1
        best_thr = 0.0
        for fi in range(mtry):
            f = feats[fi]
            for t in range(size):
                vals[t] = X[idx[start + t], f]
            order = np.argsort(vals[:size], kind="mergesort")
            for c in range(q):
                csum[c] = 0.0
            for t in range(size - 1):
                i_row = idx[start + order[t]]
                for c in range(q):
                    csum[c] += R[i_row, c]
                nl = t + 1
                nr = size - nl
                v_lo = vals[order[t]]
                v_hi = vals[order[t + 1]]
                if v_lo == v_hi:
                    continue
                if nl < min_node or nr < min_node:
                    continue
                d2 = 0.0
                for c in range(q):
                    diff = csum[c] / nl - (total[c] - csum[c]) / nr
                    d2 += diff * diff
                gain = nl * nr / size * d2
                if best_f < 0:
                    better = gain > best_gain
                else:
                    better = gain > best_gain * (1.0 + TIE_RTOL)
                if better:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (v_lo + v_hi)
                    if thr <= v_lo:
                        thr = v_hi
                    best_thr = thr

        if best_f < 0:
            continue

        # stable partition of idx[start:end]
        nl = 0
        for t in range(start, end):
            if X[idx[t], best_f] < best_thr:
                buf[nl] = idx[t]
                nl += 1
        m = nl
        for t in range(start, end):
            if not X[idx[t], best_f] < best_thr:
                buf[m] = idx[t]
                m += 1
        for t in range(size):
            idx[start + t] = buf[t]

        feature[node] = best_f
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        # push right first so the left subtree is expanded first
        st_node[top] = rc
        st_start[top] = start + nl
        st_end[top] = end
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_start[top] = start
        st_end[top] = start + nl
        st_depth[top] = depth + 1
        top += 1

    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes]


@njit(cache=True, nogil=True)
def number_leaves(feature, left, right):
    """Leaf ids 0..L-1 in depth-first, left-first order; -1 on internal nodes."""
    n_nodes = feature.shape[0]
    leaf = np.full(n_nodes, -1, dtype=np.int64)
    stack = np.empty(n_nodes + 1, dtype=np.int64)
    stack[0] = 0
    top = 1
    count = 0
    while top > 0:
        top -= 1
        k = stack[top]
        if feature[k] < 0:
            leaf[k] = count
            count += 1
        else:
            stack[top] = right[k]
            top += 1
            stack[top] = left[k]
            top += 1
    return leaf


@njit(cache=True, nogil=True)
def route(X, feature, threshold, left, right, leaf, offsets, out):
    """Leaf id of every row of ``X`` in every tree of a packed forest.

    Tree ``t`` occupies node slots ``offsets[t]:offsets[t + 1]`` with child
    pointers local to the tree. Results go to ``out[i, t]``.
    """
    n = X.shape[0]
    m = offsets.shape[0] - 1
    for t in range(m):
        base = offsets[t]
        for i in range(n):
            k = 0
            while feature[base + k] >= 0:
                if X[i, feature[base + k]] < threshold[base + k]:
                    k = left[base + k]
                else:
                    k = right[base + k]
            out[i, t] = leaf[base + k]
    return out
