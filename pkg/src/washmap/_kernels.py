"""Compiled inner loops: PRNG, CART construction, tree traversal, TreeSHAP.

Everything here works on flat numpy arrays so it can run under numba with the
GIL released. Tree nodes use parallel arrays; a leaf has ``feature == -1``.
"""
import numpy as np
from numba import njit

_U = np.uint64
_SM_GAMMA = _U(0x9E3779B97F4A7C15)
_SM_M1 = _U(0xBF58476D1CE4E5B9)
_SM_M2 = _U(0x94D049BB133111EB)


# --- xoshiro256** ---------------------------------------------------------


@njit(cache=True)
def _rotl(x, k):
    return (x << _U(k)) | (x >> _U(64 - k))


@njit(cache=True)
def seed_state(seed):
    """Expand a 64-bit seed into xoshiro256** state with splitmix64."""
    state = np.empty(4, dtype=np.uint64)
    z = _U(seed)
    for i in range(4):
        z = z + _SM_GAMMA
        t = z
        t = (t ^ (t >> _U(30))) * _SM_M1
        t = (t ^ (t >> _U(27))) * _SM_M2
        state[i] = t ^ (t >> _U(31))
    return state


@njit(cache=True)
def next_u64(s):
    result = _rotl(s[1] * _U(5), 7) * _U(9)
    t = s[1] << _U(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@njit(cache=True)
def next_double(s):
    return np.float64(next_u64(s) >> _U(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def next_below(s, n):
    """Uniform integer in [0, n) by rejection on the top bits."""
    bound = _U(n)
    limit = _U(0xFFFFFFFFFFFFFFFF) - (_U(0xFFFFFFFFFFFFFFFF) % bound)
    while True:
        r = next_u64(s)
        if r < limit:
            return np.int64(r % bound)


@njit(cache=True)
def permutation(s, n):
    out = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = next_below(s, i + 1)
        tmp = out[i]
        out[i] = out[j]
        out[j] = tmp
    return out


@njit(cache=True)
def bootstrap_indices(s, n, size):
    out = np.empty(size, dtype=np.int64)
    for i in range(size):
        out[i] = next_below(s, n)
    return out


# --- CART -----------------------------------------------------------------


@njit(cache=True, nogil=True)
def _sample_features(s, p, m, scratch):
    for i in range(p):
        scratch[i] = i
    # partial Fisher-Yates: first m slots become the sample
    for i in range(m):
        j = i + next_below(s, p - i)
        tmp = scratch[i]
        scratch[i] = scratch[j]
        scratch[j] = tmp
    return np.sort(scratch[:m])


@njit(cache=True, nogil=True)
def build_tree(X, y, idx, max_features, min_samples_leaf, max_depth, state):
    """Greedy SSE-minimizing tree over the rows listed in ``idx``.

    ``idx`` may repeat rows (bootstrap) and is reordered in place.
    ``max_depth < 0`` means unlimited. Ties go to the lowest feature index,
    then the lowest threshold.
    """
    n = idx.shape[0]
    p = X.shape[1]
    cap = 2 * n - 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap, dtype=np.float64)
    count = np.zeros(cap, dtype=np.int64)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_lo = np.empty(cap, dtype=np.int64)
    stack_hi = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    buf = np.empty(n, dtype=np.int64)
    scratch = np.empty(p, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    stack_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        depth = stack_depth[top]
        m = hi - lo

        total = 0.0
        ymin = np.inf
        ymax = -np.inf
        for i in range(lo, hi):
            v = y[idx[i]]
            total += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        mean = total / m
        value[node] = mean
        count[node] = m

        if ymin == ymax or m < 2 * min_samples_leaf or (max_depth >= 0 and depth >= max_depth):
            continue

        parent_sse = 0.0
        for i in range(lo, hi):
            d = y[idx[i]] - mean
            parent_sse += d * d

        # improvements smaller than this are ties, so rounding noise cannot
        # override the lowest-feature, lowest-threshold preference
        tie_eps = parent_sse * 1e-12
        best_sse = np.inf
        best_feat = -1
        best_thr = 0.0
        feats = _sample_features(state, p, max_features, scratch)
        rows = idx[lo:hi]
        yc = np.empty(m, dtype=np.float64)
        for f in feats:
            xs = X[rows, f]
            order = np.argsort(xs, kind="mergesort")
            xs_sorted = xs[order]
            if xs_sorted[0] == xs_sorted[m - 1]:
                continue
            tot = 0.0
            totsq = 0.0
            for i in range(m):
                yc[i] = y[rows[order[i]]] - mean
                tot += yc[i]
                totsq += yc[i] * yc[i]
            ls = 0.0
            lsq = 0.0
            for i in range(m - 1):
                ls += yc[i]
                lsq += yc[i] * yc[i]
                nl = i + 1
                nr = m - nl
                if nl < min_samples_leaf:
                    continue
                if nr < min_samples_leaf:
                    break
                if xs_sorted[i] == xs_sorted[i + 1]:
                    continue
                rs = tot - ls
                sse = (lsq - ls * ls / nl) + ((totsq - lsq) - rs * rs / nr)
                if sse < best_sse - tie_eps:
                    best_sse = sse
                    best_feat = f
                    a = xs_sorted[i]
                    b = xs_sorted[i + 1]
                    thr = a + (b - a) * 0.5
                    if thr >= b:
                        thr = a
                    best_thr = thr

        if best_feat < 0 or not (best_sse < parent_sse * (1.0 - 1e-12)):
            continue

        # stable partition of idx[lo:hi] on x <= thr
        nl = 0
        k = 0
        for i in range(lo, hi):
            if X[idx[i], best_feat] <= best_thr:
                idx[lo + nl] = idx[i]
                nl += 1
            else:
                buf[k] = idx[i]
                k += 1
        for i in range(k):
            idx[lo + nl + i] = buf[i]

        feature[node] = best_feat
        threshold[node] = best_thr
        li = n_nodes
        ri = n_nodes + 1
        n_nodes += 2
        left[node] = li
        right[node] = ri
        # right pushed first so the left subtree is built first
        stack_node[top] = ri
        stack_lo[top] = lo + nl
        stack_hi[top] = hi
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = li
        stack_lo[top] = lo
        stack_hi[top] = lo + nl
        stack_depth[top] = depth + 1
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        count[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def fit_tree_kernel(X, y, seed, bootstrap, bootstrap_size, max_features, min_samples_leaf, max_depth):
    state = seed_state(seed)
    n = X.shape[0]
    if bootstrap:
        idx = bootstrap_indices(state, n, bootstrap_size)
    else:
        idx = np.arange(n)
    return build_tree(X, y, idx, max_features, min_samples_leaf, max_depth, state)


# --- prediction -------------------------------------------------------------


@njit(cache=True, nogil=True)
def predict_packed(X, offsets, feature, threshold, left, right, value):
    """Mean over trees. Trees are concatenated; child indices are tree-local."""
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n)
    for r in range(n):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            j = 0
            while feature[base + j] >= 0:
                if X[r, feature[base + j]] <= threshold[base + j]:
                    j = left[base + j]
                else:
                    j = right[base + j]
            acc += value[base + j]
        out[r] = acc / n_trees
    return out


@njit(cache=True, nogil=True)
def predict_tree(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for r in range(n):
        j = 0
        while feature[j] >= 0:
            if X[r, feature[j]] <= threshold[j]:
                j = left[j]
            else:
                j = right[j]
        out[r] = value[j]
    return out


@njit(cache=True, nogil=True)
def expected_value(feature, left, right, value, count):
    """Cover-weighted mean of leaf values."""
    total = 0.0
    for j in range(feature.shape[0]):
        if feature[j] < 0:
            total += value[j] * count[j]
    return total / count[0]


@njit(cache=True, nogil=True)
def tree_depth(feature, left, right):
    n = feature.shape[0]
    depth = np.zeros(n, dtype=np.int64)
    best = 0
    for j in range(n):
        if feature[j] >= 0:
            depth[left[j]] = depth[j] + 1
            depth[right[j]] = depth[j] + 1
            if depth[j] + 1 > best:
                best = depth[j] + 1
    return best


# --- path-dependent TreeSHAP --------------------------------------------------
# Path element arrays (feature, zero fraction, one fraction, weight) live in one
# buffer; recursion level ``u`` copies its parent's path to a fresh segment.


@njit(cache=True, nogil=True)
def _extend(pd, pz, po, pw, start, depth, zero, one, feat):
    pd[start + depth] = feat
    pz[start + depth] = zero
    po[start + depth] = one
    pw[start + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[start + i + 1] += one * pw[start + i] * (i + 1) / (depth + 1)
        pw[start + i] = zero * pw[start + i] * (depth - i) / (depth + 1)


@njit(cache=True, nogil=True)
def _unwind(pd, pz, po, pw, start, depth, k):
    one = po[start + k]
    zero = pz[start + k]
    nxt = pw[start + depth]
    for j in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = pw[start + j]
            pw[start + j] = nxt * (depth + 1) / ((j + 1) * one)
            nxt = tmp - pw[start + j] * zero * (depth - j) / (depth + 1)
        else:
            pw[start + j] = pw[start + j] * (depth + 1) / (zero * (depth - j))
    for j in range(k, depth):
        pd[start + j] = pd[start + j + 1]
        pz[start + j] = pz[start + j + 1]
        po[start + j] = po[start + j + 1]


@njit(cache=True, nogil=True)
def _unwound_sum(pz, po, pw, start, depth, k, up, down):
    # up[d, j] = (d+1)/(j+1), down[d, j] = (d+1)/(d-j)
    one = po[start + k]
    zero = pz[start + k]
    nxt = pw[start + depth]
    total = 0.0
    if one != 0.0:
        inv_one = 1.0 / one
        zd = zero / (depth + 1)
        for j in range(depth - 1, -1, -1):
            tmp = nxt * up[depth, j] * inv_one
            total += tmp
            nxt = pw[start + j] - tmp * zd * (depth - j)
    else:
        inv_zero = 1.0 / zero
        for j in range(depth - 1, -1, -1):
            total += pw[start + j] * inv_zero * down[depth, j]
    return total


@njit(cache=True)
def shap_tables(max_depth):
    size = max_depth + 2
    up = np.zeros((size, size))
    down = np.zeros((size, size))
    for d in range(size):
        for j in range(d):
            up[d, j] = (d + 1) / (j + 1)
            down[d, j] = (d + 1) / (d - j)
    return up, down


@njit(cache=True, nogil=True)
def tree_shap_kernel(X, feature, threshold, left, right, value, count, max_depth, out):
    """Accumulate one tree's SHAP values for every row of X into ``out``.

    Depth-first over an explicit stack. Each frame extends a copy of its
    parent's path; the cold child is pushed first so the hot subtree finishes
    before the shared parent segment is read again.
    """
    size = (max_depth + 2) * (max_depth + 3) // 2 + 1
    pd = np.zeros(size, dtype=np.int64)
    pz = np.zeros(size)
    po = np.zeros(size)
    pw = np.zeros(size)
    up, down = shap_tables(max_depth)
    cap = 2 * (max_depth + 2)
    s_node = np.empty(cap, dtype=np.int64)
    s_parent = np.empty(cap, dtype=np.int64)
    s_depth = np.empty(cap, dtype=np.int64)
    s_zero = np.empty(cap)
    s_one = np.empty(cap)
    s_feat = np.empty(cap, dtype=np.int64)
    for r in range(X.shape[0]):
        x = X[r]
        phi = out[r]
        top = 1
        s_node[0] = 0
        s_parent[0] = 0
        s_depth[0] = 0
        s_zero[0] = 1.0
        s_one[0] = 1.0
        s_feat[0] = -1
        while top > 0:
            top -= 1
            node = s_node[top]
            parent_start = s_parent[top]
            depth = s_depth[top]
            start = parent_start + depth
            for i in range(depth):
                pd[start + i] = pd[parent_start + i]
                pz[start + i] = pz[parent_start + i]
                po[start + i] = po[parent_start + i]
                pw[start + i] = pw[parent_start + i]
            _extend(pd, pz, po, pw, start, depth, s_zero[top], s_one[top], s_feat[top])

            f = feature[node]
            if f < 0:
                v = value[node]
                # for one-fraction 0 the unwound sum is a shared sum over zero
                cold_sum = 0.0
                for j in range(depth):
                    cold_sum += pw[start + j] * down[depth, j]
                for i in range(1, depth + 1):
                    if po[start + i] != 0.0:
                        w = _unwound_sum(pz, po, pw, start, depth, i, up, down)
                    else:
                        w = cold_sum / pz[start + i]
                    phi[pd[start + i]] += w * (po[start + i] - pz[start + i]) * v
                continue

            if x[f] <= threshold[node]:
                hot = left[node]
                cold = right[node]
            else:
                hot = right[node]
                cold = left[node]
            inc_zero = 1.0
            inc_one = 1.0
            d = depth
            for k in range(1, depth + 1):
                if pd[start + k] == f:
                    inc_zero = pz[start + k]
                    inc_one = po[start + k]
                    _unwind(pd, pz, po, pw, start, depth, k)
                    d -= 1
                    break
            cover = np.float64(count[node])
            s_node[top] = cold
            s_parent[top] = start
            s_depth[top] = d + 1
            s_zero[top] = inc_zero * count[cold] / cover
            s_one[top] = 0.0
            s_feat[top] = f
            top += 1
            s_node[top] = hot
            s_parent[top] = start
            s_depth[top] = d + 1
            s_zero[top] = inc_zero * count[hot] / cover
            s_one[top] = inc_one
            s_feat[top] = f
            top += 1
