"""Pure numpy implementation of the expression kernels.

Mirrors ``_kernels.pyx`` function-for-function. Programs are evaluated one
opcode at a time, vectorized across points.
"""
import numpy as np

BACKEND = "python"

(OP_CONST, OP_VAR, OP_NEG, OP_SIN, OP_COS, OP_EXP, OP_LOG, OP_SQRT,
 OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW) = range(13)


def run_program(ops, args, consts, X, with_jac=False):
    """Evaluate a postfix program on the rows of ``X``.

    Returns ``(y, ok)`` or ``(y, ok, J)`` where ``J[i, k]`` is the derivative
    of the output at point ``i`` with respect to ``consts[k]``.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    p = len(consts)
    ok = np.ones(n, dtype=bool)
    vals = []
    ders = []
    with np.errstate(all="ignore"):
        for op, arg in zip(ops, args):
            if op == OP_CONST:
                vals.append(np.full(n, consts[arg]))
                if with_jac:
                    d = np.zeros((n, p))
                    d[:, arg] = 1.0
                    ders.append(d)
                continue
            if op == OP_VAR:
                vals.append(X[:, arg].copy())
                if with_jac:
                    ders.append(np.zeros((n, p)))
                continue
            if op <= OP_SQRT:
                a = vals.pop()
                da = ders.pop() if with_jac else None
                if op == OP_NEG:
                    r = -a
                    dr = -da if with_jac else None
                elif op == OP_SIN:
                    r = np.sin(a)
                    dr = np.cos(a)[:, None] * da if with_jac else None
                elif op == OP_COS:
                    r = np.cos(a)
                    dr = -np.sin(a)[:, None] * da if with_jac else None
                elif op == OP_EXP:
                    r = np.exp(a)
                    dr = r[:, None] * da if with_jac else None
                elif op == OP_LOG:
                    ok &= a > 0
                    r = np.log(a)
                    dr = da / a[:, None] if with_jac else None
                else:
                    ok &= a >= 0
                    r = np.sqrt(a)
                    dr = da / (2.0 * r)[:, None] if with_jac else None
            else:
                b = vals.pop()
                a = vals.pop()
                if with_jac:
                    db = ders.pop()
                    da = ders.pop()
                if op == OP_ADD:
                    r = a + b
                    dr = da + db if with_jac else None
                elif op == OP_SUB:
                    r = a - b
                    dr = da - db if with_jac else None
                elif op == OP_MUL:
                    r = a * b
                    dr = da * b[:, None] + db * a[:, None] if with_jac else None
                elif op == OP_DIV:
                    ok &= b != 0
                    r = a / b
                    dr = (da - db * r[:, None]) / b[:, None] if with_jac else None
                else:
                    frac = b != np.floor(b)
                    ok &= ~((a < 0) & frac)
                    ok &= ~((a == 0) & (b < 0))
                    r = np.power(a, b)
                    if with_jac:
                        pa = b * np.power(a, b - 1.0)
                        pb = np.where(a > 0, r * np.log(np.where(a > 0, a, 1.0)), 0.0)
                        dr = da * pa[:, None] + db * pb[:, None]
            ok &= np.isfinite(r)
            vals.append(r)
            if with_jac:
                dr = np.where(np.isfinite(dr), dr, 0.0)
                ders.append(dr)
    y = vals.pop()
    y = np.where(ok, y, np.nan)
    if with_jac:
        J = ders.pop()
        J[~ok] = 0.0
        return y, ok, J
    return y, ok


def _sse(ops, args, consts, X, y):
    f, ok = run_program(ops, args, consts, X)
    if not ok.all():
        return np.inf
    r = y - f
    return float(r @ r)


def fit_lm(ops, args, starts, X, y, max_iter=50, tol=1e-12, free=None):
    """Levenberg-Marquardt from each row of ``starts``.

    Returns ``(best_consts, best_sse, sse_per_start)``. A start whose initial
    point is off-domain on any row of ``X`` scores ``inf``. Slots with
    ``free[k] == 0`` keep their starting value.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    S, p = starts.shape
    fr = np.ones(p) if free is None else np.asarray(free, dtype=np.float64)
    results = np.full(S, np.inf)
    best = starts[0].copy() if S else np.zeros(p)
    best_sse = np.inf
    for s in range(S):
        c = starts[s].copy()
        sse = _sse(ops, args, c, X, y)
        if np.isfinite(sse) and p > 0:
            lam = 1e-3
            for _ in range(max_iter):
                if sse <= 1e-30:
                    break
                f, ok, J = run_program(ops, args, c, X, with_jac=True)
                J = J * fr
                r = y - f
                A = J.T @ J
                g = J.T @ r
                diag = np.diag(A).copy() + 1e-12
                improved = False
                while lam <= 1e10:
                    try:
                        delta = np.linalg.solve(A + lam * np.diag(diag), g)
                    except np.linalg.LinAlgError:
                        lam *= 10.0
                        continue
                    c_new = c + delta
                    sse_new = _sse(ops, args, c_new, X, y)
                    if sse_new < sse:
                        lam = max(lam * 0.3, 1e-12)
                        gain = sse - sse_new
                        c, sse = c_new, sse_new
                        improved = True
                        break
                    lam *= 10.0
                if not improved or gain <= tol * (sse + 1e-300):
                    break
        results[s] = sse
        if sse < best_sse:
            best_sse = sse
            best = c.copy()
    return best, best_sse, results
