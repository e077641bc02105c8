# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: serial-chain dynamics, plant integration, tree boosting.

Every function here has a pure-NumPy twin in ``_pycore`` with the same
signature; ``hybridyn._backend`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, exp, sqrt, fabs

cnp.import_array()

NAME = "cython"
cdef double TIE_RTOL = 1.0 + 1e-12

DEF MAXJ = 16


cdef inline double _sign(double x) noexcept nogil:
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


cdef inline void _cross(const double* a, const double* b, double* out) noexcept nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef void _rnea(int n, const double[:, ::1] dh, const double[::1] mass,
                const double[:, ::1] com, const double[:, ::1] inertia,
                const double* grav, const double* q, const double* qd,
                const double* qdd, double* tau) noexcept nogil:
    # per-link quantities, all expressed in the link's own frame
    cdef double R[MAXJ][9]
    cdef double r[MAXJ][3]
    cdef double F[MAXJ][3]
    cdef double Nm[MAXJ][3]
    cdef double w[3]
    cdef double wd[3]
    cdef double acc[3]
    cdef double wp[3]
    cdef double wdp[3]
    cdef double ap[3]
    cdef double t1[3]
    cdef double t2[3]
    cdef double ac[3]
    cdef double Iw[3]
    cdef double f[3]
    cdef double nn[3]
    cdef double fp[3]
    cdef double np_[3]
    cdef double th, ct, st, ca, sa, a, d
    cdef int i, k
    cdef const double* c
    w[0] = 0.0; w[1] = 0.0; w[2] = 0.0
    wd[0] = 0.0; wd[1] = 0.0; wd[2] = 0.0
    acc[0] = -grav[0]; acc[1] = -grav[1]; acc[2] = -grav[2]
    for i in range(n):
        a = dh[i, 0]
        d = dh[i, 2]
        th = q[i] + dh[i, 3]
        ct = cos(th); st = sin(th)
        ca = cos(dh[i, 1]); sa = sin(dh[i, 1])
        # R = Rz(th) Rx(alpha), row-major
        R[i][0] = ct; R[i][1] = -st * ca; R[i][2] = st * sa
        R[i][3] = st; R[i][4] = ct * ca; R[i][5] = -ct * sa
        R[i][6] = 0.0; R[i][7] = sa; R[i][8] = ca
        r[i][0] = a; r[i][1] = d * sa; r[i][2] = d * ca
        # quantities in the parent frame before rotating
        wp[0] = w[0]; wp[1] = w[1]; wp[2] = w[2] + qd[i]
        wdp[0] = wd[0] + qd[i] * w[1]
        wdp[1] = wd[1] - qd[i] * w[0]
        wdp[2] = wd[2] + qdd[i]
        for k in range(3):
            w[k] = R[i][k] * wp[0] + R[i][3 + k] * wp[1] + R[i][6 + k] * wp[2]
            wd[k] = R[i][k] * wdp[0] + R[i][3 + k] * wdp[1] + R[i][6 + k] * wdp[2]
            ap[k] = R[i][k] * acc[0] + R[i][3 + k] * acc[1] + R[i][6 + k] * acc[2]
        _cross(wd, r[i], t1)
        _cross(w, r[i], t2)
        _cross(w, t2, acc)
        for k in range(3):
            acc[k] += ap[k] + t1[k]
        c = &com[i, 0]
        _cross(wd, c, t1)
        _cross(w, c, t2)
        _cross(w, t2, ac)
        for k in range(3):
            ac[k] += acc[k] + t1[k]
            F[i][k] = mass[i] * ac[k]
        for k in range(3):
            Iw[k] = inertia[i, 3 * k] * w[0] + inertia[i, 3 * k + 1] * w[1] + inertia[i, 3 * k + 2] * w[2]
        _cross(w, Iw, t2)
        for k in range(3):
            Nm[i][k] = (inertia[i, 3 * k] * wd[0] + inertia[i, 3 * k + 1] * wd[1]
                        + inertia[i, 3 * k + 2] * wd[2] + t2[k])
    f[0] = 0.0; f[1] = 0.0; f[2] = 0.0
    nn[0] = 0.0; nn[1] = 0.0; nn[2] = 0.0
    for i in range(n - 1, -1, -1):
        # child force/moment rotated into this frame
        if i < n - 1:
            for k in range(3):
                fp[k] = R[i + 1][3 * k] * f[0] + R[i + 1][3 * k + 1] * f[1] + R[i + 1][3 * k + 2] * f[2]
                np_[k] = R[i + 1][3 * k] * nn[0] + R[i + 1][3 * k + 1] * nn[1] + R[i + 1][3 * k + 2] * nn[2]
        else:
            fp[0] = 0.0; fp[1] = 0.0; fp[2] = 0.0
            np_[0] = 0.0; np_[1] = 0.0; np_[2] = 0.0
        c = &com[i, 0]
        for k in range(3):
            t1[k] = r[i][k] + c[k]
        _cross(t1, F[i], t2)
        _cross(r[i], fp, ac)
        for k in range(3):
            nn[k] = np_[k] + t2[k] + ac[k] + Nm[i][k]
            f[k] = fp[k] + F[i][k]
        tau[i] = nn[1] * R[i][7] + nn[2] * R[i][8]


cdef int _cholesky_solve(int n, double* A, double* b) noexcept nogil:
    """In-place Cholesky of the row-major n x n SPD matrix A, then solve A x = b into b."""
    cdef int i, j, k
    cdef double s
    for j in range(n):
        s = A[j * n + j]
        for k in range(j):
            s -= A[j * n + k] * A[j * n + k]
        if s <= 0.0:
            return -1
        A[j * n + j] = sqrt(s)
        for i in range(j + 1, n):
            s = A[i * n + j]
            for k in range(j):
                s -= A[i * n + k] * A[j * n + k]
            A[i * n + j] = s / A[j * n + j]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= A[i * n + k] * b[k]
        b[i] = s / A[i * n + i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= A[k * n + i] * b[k]
        b[i] = s / A[i * n + i]
    return 0


cdef void _mass(int n, const double[:, ::1] dh, const double[::1] mass,
                const double[:, ::1] com, const double[:, ::1] inertia,
                const double* q, double* M) noexcept nogil:
    cdef double zero3[3]
    cdef double zeros[MAXJ]
    cdef double e[MAXJ]
    cdef double col[MAXJ]
    cdef int i, j
    zero3[0] = 0.0; zero3[1] = 0.0; zero3[2] = 0.0
    for i in range(n):
        zeros[i] = 0.0
        e[i] = 0.0
    for j in range(n):
        e[j] = 1.0
        _rnea(n, dh, mass, com, inertia, zero3, q, zeros, e, col)
        e[j] = 0.0
        for i in range(n):
            M[i * n + j] = col[i]
    # exact symmetry; the two triangles differ only by rounding
    for i in range(n):
        for j in range(i + 1, n):
            M[i * n + j] = 0.5 * (M[i * n + j] + M[j * n + i])
            M[j * n + i] = M[i * n + j]


cdef void _residual(int n, const double[:, ::1] res, const double[::1] fc,
                    const double* q, const double* qd, const double* trans,
                    double* out) noexcept nogil:
    cdef int i
    cdef double v, s, vs
    for i in range(n):
        v = qd[i]
        s = _sign(v)
        out[i] = res[i, 3] * sin(res[i, 4] * q[i])
        vs = res[i, 1]
        if vs > 0.0:
            out[i] += res[i, 0] * exp(-(v / vs) * (v / vs)) * s
        if v < 0.0:
            out[i] += res[i, 2] * fc[i]
        out[i] += res[i, 5] * fabs(trans[i]) * s


cdef int _plant_accel(int n, const double[:, ::1] dh, const double[::1] mass,
                      const double[:, ::1] com, const double[:, ::1] inertia,
                      const double* grav, const double[::1] bm, const double[::1] cm,
                      const double[::1] fc, const double[:, ::1] res,
                      const double* q, const double* qd, const double* tau_cmd,
                      const double* tau_ext, double* qdd) noexcept nogil:
    cdef double M[MAXJ * MAXJ]
    cdef double bias[MAXJ]
    cdef double zeros[MAXJ]
    cdef double rt[MAXJ]
    cdef int i
    for i in range(n):
        zeros[i] = 0.0
    _mass(n, dh, mass, com, inertia, q, M)
    _rnea(n, dh, mass, com, inertia, grav, q, qd, zeros, bias)
    _residual(n, res, fc, q, qd, tau_cmd, rt)
    for i in range(n):
        M[i * n + i] += bm[i]
        qdd[i] = tau_cmd[i] - bias[i] - cm[i] * qd[i] - fc[i] * _sign(qd[i]) - rt[i] + tau_ext[i]
    return _cholesky_solve(n, M, qdd)


def rnea(const double[:, ::1] dh, const double[::1] mass, const double[:, ::1] com,
         const double[:, ::1] inertia, const double[::1] gravity,
         const double[::1] q, const double[::1] qd, const double[::1] qdd):
    cdef int n = dh.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        _rnea(n, dh, mass, com, inertia, &gravity[0], &q[0], &qd[0], &qdd[0], &o[0])
    return out


def rnea_batch(const double[:, ::1] dh, const double[::1] mass, const double[:, ::1] com,
               const double[:, ::1] inertia, const double[::1] gravity,
               const double[:, ::1] Q, const double[:, ::1] QD, const double[:, ::1] QDD):
    cdef int n = dh.shape[0]
    cdef Py_ssize_t N = Q.shape[0], k
    out = np.empty((N, n))
    cdef double[:, ::1] o = out
    with nogil:
        for k in range(N):
            _rnea(n, dh, mass, com, inertia, &gravity[0], &Q[k, 0], &QD[k, 0], &QDD[k, 0], &o[k, 0])
    return out


def mass_matrix(const double[:, ::1] dh, const double[::1] mass, const double[:, ::1] com,
                const double[:, ::1] inertia, const double[::1] q):
    cdef int n = dh.shape[0]
    out = np.empty((n, n))
    cdef double[:, ::1] o = out
    with nogil:
        _mass(n, dh, mass, com, inertia, &q[0], &o[0, 0])
    return out


def forward_dynamics(const double[:, ::1] dh, const double[::1] mass, const double[:, ::1] com,
                     const double[:, ::1] inertia, const double[::1] gravity,
                     const double[::1] q, const double[::1] qd, const double[::1] tau,
                     const double[::1] bm, const double[::1] cm, const double[::1] fc):
    cdef int n = dh.shape[0]
    cdef double M[MAXJ * MAXJ]
    cdef double zeros[MAXJ]
    cdef double bias[MAXJ]
    cdef int i, status
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            zeros[i] = 0.0
        _mass(n, dh, mass, com, inertia, &q[0], M)
        _rnea(n, dh, mass, com, inertia, &gravity[0], &q[0], &qd[0], zeros, bias)
        for i in range(n):
            M[i * n + i] += bm[i]
            o[i] = tau[i] - bias[i] - cm[i] * qd[i] - fc[i] * _sign(qd[i])
        status = _cholesky_solve(n, M, &o[0])
    if status != 0:
        raise np.linalg.LinAlgError("effective mass matrix is not positive definite")
    return out


def residual(const double[:, ::1] res, const double[::1] fc, const double[::1] q,
             const double[::1] qd, const double[::1] transmitted):
    cdef int n = q.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    _residual(n, res, fc, &q[0], &qd[0], &transmitted[0], &o[0])
    return out


def plant_accel(const double[:, ::1] dh, const double[::1] mass, const double[:, ::1] com,
                const double[:, ::1] inertia, const double[::1] gravity,
                const double[::1] bm, const double[::1] cm, const double[::1] fc,
                const double[:, ::1] res, const double[::1] q, const double[::1] qd,
                const double[::1] tau_cmd, const double[::1] tau_ext):
    cdef int n = dh.shape[0]
    cdef int status
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        status = _plant_accel(n, dh, mass, com, inertia, &gravity[0], bm, cm, fc, res,
                              &q[0], &qd[0], &tau_cmd[0], &tau_ext[0], &o[0])
    if status != 0:
        raise np.linalg.LinAlgError("effective mass matrix is not positive definite")
    return out


def plant_step(const double[:, ::1] dh, const double[::1] mass, const double[:, ::1] com,
               const double[:, ::1] inertia, const double[::1] gravity,
               const double[::1] bm, const double[::1] cm, const double[::1] fc,
               const double[:, ::1] res, const double[::1] q, const double[::1] qd,
               const double[::1] tau_cmd, const double[::1] tau_ext,
               double dt, int substeps):
    """Classic RK4 over ``substeps`` equal sub-intervals with torques held."""
    cdef int n = dh.shape[0]
    cdef double h = dt / substeps
    cdef double x[MAXJ]
    cdef double v[MAXJ]
    cdef double xt[MAXJ]
    cdef double vt[MAXJ]
    cdef double k1v[MAXJ]
    cdef double k2v[MAXJ]
    cdef double k3v[MAXJ]
    cdef double k4v[MAXJ]
    cdef double k2x[MAXJ]
    cdef double k3x[MAXJ]
    cdef double k4x[MAXJ]
    cdef int i, s, status = 0
    qn = np.empty(n)
    qdn = np.empty(n)
    cdef double[::1] qo = qn
    cdef double[::1] vo = qdn
    with nogil:
        for i in range(n):
            x[i] = q[i]
            v[i] = qd[i]
        for s in range(substeps):
            status |= _plant_accel(n, dh, mass, com, inertia, &gravity[0], bm, cm, fc, res,
                                   x, v, &tau_cmd[0], &tau_ext[0], k1v)
            for i in range(n):
                xt[i] = x[i] + 0.5 * h * v[i]
                vt[i] = v[i] + 0.5 * h * k1v[i]
                k2x[i] = vt[i]
            status |= _plant_accel(n, dh, mass, com, inertia, &gravity[0], bm, cm, fc, res,
                                   xt, vt, &tau_cmd[0], &tau_ext[0], k2v)
            for i in range(n):
                xt[i] = x[i] + 0.5 * h * k2x[i]
                vt[i] = v[i] + 0.5 * h * k2v[i]
                k3x[i] = vt[i]
            status |= _plant_accel(n, dh, mass, com, inertia, &gravity[0], bm, cm, fc, res,
                                   xt, vt, &tau_cmd[0], &tau_ext[0], k3v)
            for i in range(n):
                xt[i] = x[i] + h * k3x[i]
                vt[i] = v[i] + h * k3v[i]
                k4x[i] = vt[i]
            status |= _plant_accel(n, dh, mass, com, inertia, &gravity[0], bm, cm, fc, res,
                                   xt, vt, &tau_cmd[0], &tau_ext[0], k4v)
            for i in range(n):
                x[i] = x[i] + h / 6.0 * (v[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i])
                v[i] = v[i] + h / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i])
        for i in range(n):
            qo[i] = x[i]
            vo[i] = v[i]
    if status != 0:
        raise np.linalg.LinAlgError("effective mass matrix is not positive definite")
    return qn, qdn


cdef inline double _thresh_l1(double g, double alpha) noexcept nogil:
    if g > alpha:
        return g - alpha
    if g < -alpha:
        return g + alpha
    return 0.0


cdef inline double _score(double g, double h, double lam, double alpha) noexcept nogil:
    cdef double t = _thresh_l1(g, alpha)
    if h + lam <= 0.0:
        return 0.0
    return t * t / (h + lam)


def best_splits(const double[:, ::1] sorted_vals, const int[:, ::1] sorted_idx, const int[::1] node_of,
                const double[::1] g, const double[::1] h, const double[::1] G_tot,
                const double[::1] H_tot, const unsigned char[::1] feature_mask,
                double lam, double alpha, double gamma, double min_child_weight):
    """Exact greedy split search for every open node of one tree level.

    ``sorted_vals[f, j]`` is the value of row ``sorted_idx[f, j]`` in column f.
    Returns ``(gain, feature, threshold)`` arrays indexed by node; ``feature``
    is -1 where no split has positive gain. Features are scanned in index
    order and thresholds ascending; a gain must beat the incumbent by a
    relative 1e-12 to replace it, so exact ties go to the first candidate
    scanned whatever the summation order.
    """
    cdef Py_ssize_t N = sorted_vals.shape[1], d = sorted_vals.shape[0], K = G_tot.shape[0]
    cdef Py_ssize_t f, j, r
    cdef int k
    cdef double x, gl, hl, gain, thr, parent
    best_gain = np.zeros(K)
    best_feat = np.full(K, -1, dtype=np.int64)
    best_thr = np.zeros(K)
    GL_arr = np.zeros(K)
    HL_arr = np.zeros(K)
    last_arr = np.zeros(K)
    seen_arr = np.zeros(K, dtype=np.uint8)
    parent_arr = np.empty(K)
    cdef double[::1] bg = best_gain
    cdef long long[::1] bf = best_feat
    cdef double[::1] bt = best_thr
    cdef double[::1] GL = GL_arr
    cdef double[::1] HL = HL_arr
    cdef double[::1] last = last_arr
    cdef unsigned char[::1] seen = seen_arr
    cdef double[::1] par = parent_arr
    with nogil:
        for k in range(K):
            par[k] = _score(G_tot[k], H_tot[k], lam, alpha)
        for f in range(d):
            if not feature_mask[f]:
                continue
            for k in range(K):
                GL[k] = 0.0
                HL[k] = 0.0
                seen[k] = 0
            for j in range(N):
                r = sorted_idx[f, j]
                k = node_of[r]
                if k < 0:
                    continue
                x = sorted_vals[f, j]
                if seen[k] and x > last[k]:
                    hl = HL[k]
                    if hl >= min_child_weight and H_tot[k] - hl >= min_child_weight:
                        gl = GL[k]
                        gain = 0.5 * (_score(gl, hl, lam, alpha)
                                      + _score(G_tot[k] - gl, H_tot[k] - hl, lam, alpha)
                                      - par[k]) - gamma
                        if gain > bg[k] * TIE_RTOL:
                            thr = last[k] + 0.5 * (x - last[k])
                            if thr <= last[k]:
                                thr = x
                            bg[k] = gain
                            bf[k] = f
                            bt[k] = thr
                GL[k] += g[r]
                HL[k] += h[r]
                last[k] = x
                seen[k] = 1
    return best_gain, best_feat, best_thr


def predict_forest(const double[:, ::1] X, const long long[::1] feature, const double[::1] threshold,
                   const long long[::1] left, const long long[::1] right, const double[::1] value,
                   const long long[::1] roots):
    """Sum of leaf values over all trees; node arrays are concatenated, ``roots`` holds offsets."""
    cdef Py_ssize_t N = X.shape[0], T = roots.shape[0], i, t
    cdef long long node
    out = np.zeros(N)
    cdef double[::1] o = out
    cdef double acc
    with nogil:
        for i in range(N):
            acc = 0.0
            for t in range(T):
                node = roots[t]
                while left[node] >= 0:
                    if X[i, feature[node]] < threshold[node]:
                        node = left[node]
                    else:
                        node = right[node]
                acc += value[node]
            o[i] = acc
    return out
