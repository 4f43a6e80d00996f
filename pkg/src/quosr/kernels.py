"""Backend selection for the expression kernels.

The compiled extension is used when it was built; otherwise (or when
``QUOSR_PURE_PYTHON=1``) the numpy implementation takes over. Both expose
``run_program`` and ``fit_lm`` with identical signatures.
"""
import os

import numpy as np

from . import _fallback

if os.environ.get("QUOSR_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _fallback

BACKEND = _impl.BACKEND


def backends():
    """Map of available backend name -> module."""
    out = {"python": _fallback}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out


def eval_program(prog, X, impl=None):
    """Evaluate a compiled program on the rows of ``X`` -> ``(y, ok)``."""
    impl = impl or _impl
    return impl.run_program(prog.ops, prog.args, prog.consts, X)


def eval_program_jac(prog, X, impl=None):
    impl = impl or _impl
    return impl.run_program(prog.ops, prog.args, prog.consts, X, True)


def fit_lm(prog, starts, X, y, max_iter=50, tol=1e-12, free=None, impl=None):
    """Multi-start Levenberg-Marquardt over the constant slots of ``prog``."""
    impl = impl or _impl
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    if starts.shape[1] != len(prog.consts):
        raise ValueError(f"starts have {starts.shape[1]} columns, program has {len(prog.consts)} constants")
    return impl.fit_lm(prog.ops, prog.args, starts, X, y, max_iter, tol, free)
