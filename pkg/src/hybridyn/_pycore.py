"""Pure-NumPy implementations of the compiled kernels.

Same signatures and results as ``_core`` (up to floating-point summation
order). Dynamics routines are vectorised over a batch of states; the
single-state entry points wrap a batch of one.
"""
import numpy as np

NAME = "python"
TIE_RTOL = 1.0 + 1e-12


def _rot(dh, Q):
    """Per-sample DH rotations (N, n, 3, 3) and link offsets (n, 3)."""
    th = Q + dh[:, 3]
    ct, st = np.cos(th), np.sin(th)
    ca, sa = np.cos(dh[:, 1]), np.sin(dh[:, 1])
    R = np.zeros(Q.shape + (3, 3))
    R[..., 0, 0] = ct
    R[..., 0, 1] = -st * ca
    R[..., 0, 2] = st * sa
    R[..., 1, 0] = st
    R[..., 1, 1] = ct * ca
    R[..., 1, 2] = -ct * sa
    R[..., 2, 1] = sa
    R[..., 2, 2] = ca
    r = np.stack([dh[:, 0], dh[:, 2] * sa, dh[:, 2] * ca], axis=1)
    return R, r


def rnea_batch(dh, mass, com, inertia, gravity, Q, QD, QDD):
    Q = np.atleast_2d(Q)
    QD = np.atleast_2d(QD)
    QDD = np.atleast_2d(QDD)
    N, n = Q.shape
    R, r = _rot(dh, Q)
    I = inertia.reshape(n, 3, 3)
    w = np.zeros((N, 3))
    wd = np.zeros((N, 3))
    acc = np.tile(-np.asarray(gravity, dtype=float), (N, 1))
    F = np.empty((N, n, 3))
    Nm = np.empty((N, n, 3))
    for i in range(n):
        Rt = np.swapaxes(R[:, i], 1, 2)
        wp = w.copy()
        wp[:, 2] += QD[:, i]
        wdp = wd.copy()
        wdp[:, 0] += QD[:, i] * w[:, 1]
        wdp[:, 1] -= QD[:, i] * w[:, 0]
        wdp[:, 2] += QDD[:, i]
        w = np.einsum("nij,nj->ni", Rt, wp)
        wd = np.einsum("nij,nj->ni", Rt, wdp)
        ap = np.einsum("nij,nj->ni", Rt, acc)
        acc = ap + np.cross(wd, r[i]) + np.cross(w, np.cross(w, r[i]))
        ac = acc + np.cross(wd, com[i]) + np.cross(w, np.cross(w, com[i]))
        F[:, i] = mass[i] * ac
        Nm[:, i] = wd @ I[i].T + np.cross(w, w @ I[i].T)
    tau = np.empty((N, n))
    f = np.zeros((N, 3))
    nn = np.zeros((N, 3))
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            fp = np.einsum("nij,nj->ni", R[:, i + 1], f)
            npm = np.einsum("nij,nj->ni", R[:, i + 1], nn)
        else:
            fp = np.zeros((N, 3))
            npm = np.zeros((N, 3))
        nn = npm + np.cross(r[i] + com[i], F[:, i]) + np.cross(r[i], fp) + Nm[:, i]
        f = fp + F[:, i]
        tau[:, i] = nn[:, 1] * R[:, i, 2, 1] + nn[:, 2] * R[:, i, 2, 2]
    return tau


def rnea(dh, mass, com, inertia, gravity, q, qd, qdd):
    return rnea_batch(dh, mass, com, inertia, gravity, q[None], qd[None], qdd[None])[0]


def mass_matrix(dh, mass, com, inertia, q):
    n = dh.shape[0]
    Q = np.tile(q, (n, 1))
    cols = rnea_batch(dh, mass, com, inertia, np.zeros(3), Q, np.zeros((n, n)), np.eye(n))
    M = cols.T.copy()
    return 0.5 * (M + M.T)


def _solve_spd(A, b):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("effective mass matrix is not positive definite")
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def forward_dynamics(dh, mass, com, inertia, gravity, q, qd, tau, bm, cm, fc):
    n = dh.shape[0]
    M = mass_matrix(dh, mass, com, inertia, q) + np.diag(bm)
    bias = rnea(dh, mass, com, inertia, gravity, q, qd, np.zeros(n))
    return _solve_spd(M, tau - bias - cm * qd - fc * np.sign(qd))


def residual(res, fc, q, qd, transmitted):
    s = np.sign(qd)
    out = res[:, 3] * np.sin(res[:, 4] * q)
    vs = res[:, 1]
    safe = np.where(vs > 0, vs, 1.0)
    out = out + np.where(vs > 0, res[:, 0] * np.exp(-(qd / safe) ** 2) * s, 0.0)
    out = out + np.where(qd < 0, res[:, 2] * fc, 0.0)
    return out + res[:, 5] * np.abs(transmitted) * s


def plant_accel(dh, mass, com, inertia, gravity, bm, cm, fc, res, q, qd, tau_cmd, tau_ext):
    n = dh.shape[0]
    M = mass_matrix(dh, mass, com, inertia, q) + np.diag(bm)
    bias = rnea(dh, mass, com, inertia, gravity, q, qd, np.zeros(n))
    rhs = (tau_cmd - bias - cm * qd - fc * np.sign(qd)
           - residual(res, fc, q, qd, tau_cmd) + tau_ext)
    return _solve_spd(M, rhs)


def plant_step(dh, mass, com, inertia, gravity, bm, cm, fc, res, q, qd, tau_cmd, tau_ext,
               dt, substeps):
    h = dt / substeps
    x = np.array(q, dtype=float)
    v = np.array(qd, dtype=float)

    def acc(xx, vv):
        return plant_accel(dh, mass, com, inertia, gravity, bm, cm, fc, res, xx, vv,
                           tau_cmd, tau_ext)

    for _ in range(substeps):
        k1v = acc(x, v)
        k2x = v + 0.5 * h * k1v
        k2v = acc(x + 0.5 * h * v, k2x)
        k3x = v + 0.5 * h * k2v
        k3v = acc(x + 0.5 * h * k2x, k3x)
        k4x = v + h * k3v
        k4v = acc(x + h * k3x, k4x)
        x = x + h / 6.0 * (v + 2.0 * k2x + 2.0 * k3x + k4x)
        v = v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return x, v


def _score(g, h, lam, alpha):
    t = np.sign(g) * np.maximum(np.abs(g) - alpha, 0.0)
    denom = h + lam
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, t * t / np.where(denom > 0, denom, 1.0), 0.0)


def best_splits(sorted_vals, sorted_idx, node_of, g, h, G_tot, H_tot, feature_mask,
                lam, alpha, gamma, min_child_weight):
    K = G_tot.shape[0]
    best_gain = np.zeros(K)
    best_feat = np.full(K, -1, dtype=np.int64)
    best_thr = np.zeros(K)
    parent = _score(G_tot, H_tot, lam, alpha)
    for f in np.flatnonzero(feature_mask):
        order = sorted_idx[f]
        nodes = node_of[order]
        keep = nodes >= 0
        order = order[keep]
        nodes = nodes[keep]
        xs = sorted_vals[f][keep]
        # group rows by node, keeping ascending feature order inside a node
        perm = np.argsort(nodes, kind="stable")
        order = order[perm]
        nodes = nodes[perm]
        x = xs[perm]
        gl = np.cumsum(g[order])
        hl = np.cumsum(h[order])
        starts = np.searchsorted(nodes, np.arange(K))
        base_g = np.where(starts > 0, gl[np.maximum(starts - 1, 0)], 0.0)
        base_h = np.where(starts > 0, hl[np.maximum(starts - 1, 0)], 0.0)
        # candidate position j splits between j and j+1 inside one node
        same = nodes[:-1] == nodes[1:]
        cand = np.flatnonzero(same & (x[1:] > x[:-1]))
        if cand.size == 0:
            continue
        k = nodes[cand]
        GL = gl[cand] - base_g[k]
        HL = hl[cand] - base_h[k]
        GR = G_tot[k] - GL
        HR = H_tot[k] - HL
        ok = (HL >= min_child_weight) & (HR >= min_child_weight)
        gain = 0.5 * (_score(GL, HL, lam, alpha) + _score(GR, HR, lam, alpha) - parent[k]) - gamma
        gain = np.where(ok, gain, -np.inf)
        for node in np.unique(k):
            sel = np.flatnonzero(k == node)
            top = gain[sel].max()
            if top > best_gain[node] * TIE_RTOL:
                # first candidate within the tie tolerance of the best, as the compiled scan does
                j = sel[np.flatnonzero(gain[sel] * TIE_RTOL >= top)[0]]
                lo, hi = x[cand[j]], x[cand[j] + 1]
                thr = lo + 0.5 * (hi - lo)
                if thr <= lo:
                    thr = hi
                best_gain[node] = gain[j]
                best_feat[node] = f
                best_thr[node] = thr
    return best_gain, best_feat, best_thr


def predict_forest(X, feature, threshold, left, right, value, roots):
    N = X.shape[0]
    out = np.zeros(N)
    rows = np.arange(N)
    for root in roots:
        node = np.full(N, root, dtype=np.int64)
        active = left[node] >= 0
        while active.any():
            nd = node[active]
            go_left = X[rows[active], feature[nd]] < threshold[nd]
            node[active] = np.where(go_left, left[nd], right[nd])
            active = left[node] >= 0
        out += value[node]
    return out
