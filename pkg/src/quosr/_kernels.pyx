# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled expression kernels (see ``_fallback.py`` for the reference)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, exp, log, sqrt, pow, floor, isfinite, NAN, fabs

cnp.import_array()

BACKEND = "cython"

DEF OP_CONST = 0
DEF OP_VAR = 1
DEF OP_NEG = 2
DEF OP_SIN = 3
DEF OP_COS = 4
DEF OP_EXP = 5
DEF OP_LOG = 6
DEF OP_SQRT = 7
DEF OP_ADD = 8
DEF OP_SUB = 9
DEF OP_MUL = 10
DEF OP_DIV = 11
DEF OP_POW = 12


cdef inline double _clean(double v) nogil:
    return v if isfinite(v) else 0.0


cdef bint _run_point(const int[:] ops, const int[:] args, const double[:] consts,
                     const double[:, :] X, Py_ssize_t i,
                     double[:] vs, double[:, :] ds, bint jac, double* out) nogil:
    """Evaluate one point; derivative rows land in ds[0, :] on success."""
    cdef Py_ssize_t L = ops.shape[0], p = consts.shape[0]
    cdef Py_ssize_t top = 0, t, k
    cdef int op
    cdef double a, b, r, pa, pb, ra
    cdef bint ok = True
    for t in range(L):
        op = ops[t]
        if op == OP_CONST:
            vs[top] = consts[args[t]]
            if jac:
                for k in range(p):
                    ds[top, k] = 0.0
                ds[top, args[t]] = 1.0
            top += 1
            continue
        if op == OP_VAR:
            vs[top] = X[i, args[t]]
            if jac:
                for k in range(p):
                    ds[top, k] = 0.0
            top += 1
            continue
        if op <= OP_SQRT:
            a = vs[top - 1]
            if op == OP_NEG:
                r = -a
                pa = -1.0
            elif op == OP_SIN:
                r = sin(a)
                pa = cos(a)
            elif op == OP_COS:
                r = cos(a)
                pa = -sin(a)
            elif op == OP_EXP:
                r = exp(a)
                pa = r
            elif op == OP_LOG:
                if not (a > 0):
                    return False
                r = log(a)
                pa = 1.0 / a
            else:
                if not (a >= 0):
                    return False
                r = sqrt(a)
                pa = 0.5 / r
            if not isfinite(r):
                return False
            vs[top - 1] = r
            if jac:
                for k in range(p):
                    ds[top - 1, k] = _clean(pa * ds[top - 1, k])
            continue
        b = vs[top - 1]
        a = vs[top - 2]
        pb = 0.0
        if op == OP_ADD:
            r = a + b
            pa = 1.0
            pb = 1.0
        elif op == OP_SUB:
            r = a - b
            pa = 1.0
            pb = -1.0
        elif op == OP_MUL:
            r = a * b
            pa = b
            pb = a
        elif op == OP_DIV:
            if b == 0:
                return False
            r = a / b
            pa = 1.0 / b
            pb = -r / b
        else:
            if a < 0 and b != floor(b):
                return False
            if a == 0 and b < 0:
                return False
            r = pow(a, b)
            if jac:
                pa = b * pow(a, b - 1.0)
                pb = r * log(a) if a > 0 else 0.0
        if not isfinite(r):
            return False
        top -= 1
        vs[top - 1] = r
        if jac:
            for k in range(p):
                ds[top - 1, k] = _clean(pa * ds[top - 1, k] + pb * ds[top, k])
    out[0] = vs[0]
    return True


cdef void _run_columns(const int[:] o, const int[:] ar, const double[:] c,
                       const double[:, :] x, double[:, :] st, cnp.npy_bool[:] okv) nogil:
    """Whole-batch evaluation, one op at a time over all points."""
    cdef Py_ssize_t L = o.shape[0], n = x.shape[0]
    cdef Py_ssize_t top = 0, t, i
    cdef int op
    cdef double a, b, r, v
    for i in range(n):
        okv[i] = True
    for t in range(L):
        op = o[t]
        if op == OP_CONST:
            v = c[ar[t]]
            for i in range(n):
                st[top, i] = v
            top += 1
        elif op == OP_VAR:
            for i in range(n):
                st[top, i] = x[i, ar[t]]
            top += 1
        elif op <= OP_SQRT:
            for i in range(n):
                a = st[top - 1, i]
                if op == OP_NEG:
                    r = -a
                elif op == OP_SIN:
                    r = sin(a)
                elif op == OP_COS:
                    r = cos(a)
                elif op == OP_EXP:
                    r = exp(a)
                elif op == OP_LOG:
                    r = log(a) if a > 0 else NAN
                else:
                    r = sqrt(a) if a >= 0 else NAN
                if not isfinite(r):
                    okv[i] = False
                    r = 0.0
                st[top - 1, i] = r
        else:
            for i in range(n):
                a = st[top - 2, i]
                b = st[top - 1, i]
                if op == OP_ADD:
                    r = a + b
                elif op == OP_SUB:
                    r = a - b
                elif op == OP_MUL:
                    r = a * b
                elif op == OP_DIV:
                    r = a / b if b != 0 else NAN
                elif (a < 0 and b != floor(b)) or (a == 0 and b < 0):
                    r = NAN
                else:
                    r = pow(a, b)
                if not isfinite(r):
                    okv[i] = False
                    r = 0.0
                st[top - 2, i] = r
            top -= 1


def run_program(ops, args, consts, X, with_jac=False):
    cdef const int[:] o = np.ascontiguousarray(ops, dtype=np.int32)
    cdef const int[:] ar = np.ascontiguousarray(args, dtype=np.int32)
    cdef const double[:] c = np.ascontiguousarray(consts, dtype=np.float64)
    cdef const double[:, :] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], p = c.shape[0], L = o.shape[0], i, k
    y_arr = np.empty(n)
    ok_arr = np.empty(n, dtype=bool)
    cdef double[:] y = y_arr
    cdef cnp.npy_bool[:] okv = ok_arr
    cdef double[:, :] st
    if not with_jac:
        st_arr = np.empty((L + 1, n))
        st = st_arr
        with nogil:
            _run_columns(o, ar, c, x, st, okv)
            for i in range(n):
                y[i] = st[0, i] if okv[i] else NAN
        return y_arr, ok_arr
    J_arr = np.zeros((n, p))
    cdef double[:, :] J = J_arr
    cdef double[:] vs = np.empty(L + 1)
    cdef double[:, :] ds = np.empty((L + 1, p if p > 0 else 1))
    cdef double out
    with nogil:
        for i in range(n):
            if _run_point(o, ar, c, x, i, vs, ds, True, &out):
                y[i] = out
                okv[i] = True
                for k in range(p):
                    J[i, k] = ds[0, k]
            else:
                y[i] = NAN
                okv[i] = False
    return y_arr, ok_arr, J_arr


cdef double _sse(const int[:] o, const int[:] ar, const double[:] c,
                 const double[:, :] x, const double[:] y,
                 double[:] vs, double[:, :] ds) nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double s = 0.0, out, r
    for i in range(n):
        if not _run_point(o, ar, c, x, i, vs, ds, False, &out):
            return 1e308 * 10.0
        r = y[i] - out
        s += r * r
    return s


cdef bint _solve(double[:, :] A, double[:] b, Py_ssize_t p) nogil:
    """In-place Gaussian elimination with partial pivoting; result in b."""
    cdef Py_ssize_t i, j, k, piv
    cdef double m, t
    for k in range(p):
        piv = k
        for i in range(k + 1, p):
            if fabs(A[i, k]) > fabs(A[piv, k]):
                piv = i
        if A[piv, k] == 0 or not isfinite(A[piv, k]):
            return False
        if piv != k:
            for j in range(p):
                t = A[k, j]
                A[k, j] = A[piv, j]
                A[piv, j] = t
            t = b[k]
            b[k] = b[piv]
            b[piv] = t
        for i in range(k + 1, p):
            m = A[i, k] / A[k, k]
            for j in range(k, p):
                A[i, j] -= m * A[k, j]
            b[i] -= m * b[k]
    for k in range(p - 1, -1, -1):
        t = b[k]
        for j in range(k + 1, p):
            t -= A[k, j] * b[j]
        b[k] = t / A[k, k]
        if not isfinite(b[k]):
            return False
    return True


def fit_lm(ops, args, starts, X, y, int max_iter=50, double tol=1e-12, free=None):
    cdef const int[:] o = np.ascontiguousarray(ops, dtype=np.int32)
    cdef const int[:] ar = np.ascontiguousarray(args, dtype=np.int32)
    cdef const double[:, :] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:] yv = np.ascontiguousarray(y, dtype=np.float64)
    st_arr = np.ascontiguousarray(np.atleast_2d(np.asarray(starts, dtype=np.float64)))
    cdef double[:, :] st = st_arr
    cdef Py_ssize_t S = st.shape[0], p = st.shape[1], n = x.shape[0], L = o.shape[0]
    free_arr = np.ones(p, dtype=np.float64) if free is None else np.asarray(free, dtype=np.float64)
    cdef const double[:] fr = free_arr
    cdef Py_ssize_t s, i, j, k, it
    results_arr = np.full(S, np.inf)
    cdef double[:] results = results_arr
    best_arr = st_arr[0].copy() if S > 0 else np.zeros(p)
    cdef double[:] best = best_arr
    cdef double best_sse = np.inf
    cdef double[:] c = np.empty(p)
    cdef double[:] cn = np.empty(p)
    cdef double[:] g = np.empty(p)
    cdef double[:] rhs = np.empty(p)
    cdef double[:] dg = np.empty(p)
    cdef double[:, :] A = np.empty((p, p))
    cdef double[:, :] M = np.empty((p, p))
    cdef double[:] vs = np.empty(L + 1)
    cdef double[:, :] ds = np.empty((L + 1, p if p > 0 else 1))
    cdef double[:] jrow = np.empty(p if p > 0 else 1)
    cdef double sse, sse_new, lam, gain, out, r
    cdef bint improved, valid
    cdef double INF = np.inf
    with nogil:
        for s in range(S):
            for k in range(p):
                c[k] = st[s, k]
            sse = _sse(o, ar, c, x, yv, vs, ds)
            if sse < INF and p > 0:
                lam = 1e-3
                for it in range(max_iter):
                    if sse <= 1e-30:
                        break
                    for j in range(p):
                        g[j] = 0.0
                        for k in range(p):
                            A[j, k] = 0.0
                    valid = True
                    for i in range(n):
                        if not _run_point(o, ar, c, x, i, vs, ds, True, &out):
                            valid = False
                            break
                        r = yv[i] - out
                        for j in range(p):
                            jrow[j] = ds[0, j] * fr[j]
                        for j in range(p):
                            g[j] += jrow[j] * r
                            for k in range(p):
                                A[j, k] += jrow[j] * jrow[k]
                    if not valid:
                        break
                    for j in range(p):
                        dg[j] = A[j, j] + 1e-12
                    improved = False
                    gain = 0.0
                    while lam <= 1e10:
                        for j in range(p):
                            rhs[j] = g[j]
                            for k in range(p):
                                M[j, k] = A[j, k]
                            M[j, j] += lam * dg[j]
                        if not _solve(M, rhs, p):
                            lam *= 10.0
                            continue
                        for j in range(p):
                            cn[j] = c[j] + rhs[j]
                        sse_new = _sse(o, ar, cn, x, yv, vs, ds)
                        if sse_new < sse:
                            lam = lam * 0.3
                            if lam < 1e-12:
                                lam = 1e-12
                            gain = sse - sse_new
                            for j in range(p):
                                c[j] = cn[j]
                            sse = sse_new
                            improved = True
                            break
                        lam *= 10.0
                    if not improved or gain <= tol * (sse + 1e-300):
                        break
            results[s] = sse
            if sse < best_sse:
                best_sse = sse
                for k in range(p):
                    best[k] = c[k]
    return best_arr, best_sse, results_arr
