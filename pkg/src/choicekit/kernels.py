"""Backend selection for the numeric kernels.

The compiled extension is used when it imports; otherwise the numpy fallback
is loaded.  Set ``CHOICEKIT_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from choicekit import _kernels_py

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("CHOICEKIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from choicekit import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        pass

SENTINEL = _kernels_py.SENTINEL


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def masked_log_softmax(util, avail, session, category, n_categories, impl=None):
    impl = impl or _impl
    return impl.masked_log_softmax(
        _f64(util),
        np.ascontiguousarray(avail, dtype=np.uint8),
        _i64(session),
        _i64(category),
        int(n_categories),
    )


def softmax_residual(util, avail, session, category, n_categories, chosen, impl=None):
    impl = impl or _impl
    return impl.softmax_residual(
        _f64(util),
        np.ascontiguousarray(avail, dtype=np.uint8),
        _i64(session),
        _i64(category),
        int(n_categories),
        _i64(chosen),
    )


def scatter_add_rows(values, index, n_groups, impl=None):
    impl = impl or _impl
    return impl.scatter_add_rows(_f64(values), _i64(index), int(n_groups))


def gather_dot3(tensor, coef, session, user, impl=None):
    impl = impl or _impl
    return impl.gather_dot3(_f64(tensor), _f64(coef), _i64(session), _i64(user))


def gather_dot3_grad(tensor, weights, session, user, n_users, impl=None):
    impl = impl or _impl
    return impl.gather_dot3_grad(_f64(tensor), _f64(weights), _i64(session), _i64(user), int(n_users))


def implementations():
    """All importable backends keyed by name (used by tests and benchmarks)."""
    found = {"python": _kernels_py}
    try:
        from choicekit import _kernels

        found["compiled"] = _kernels
    except ImportError:
        pass
    return found
