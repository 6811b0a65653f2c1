import os
import subprocess
import sys

import numpy as np
import pytest

from choicekit import _kernels_py, kernels

IMPLS = kernels.implementations()


def _case(rng, B=37, I=6, S=5, C=2):
    util = rng.normal(scale=3.0, size=(B, I))
    avail = rng.random((S, I)) < 0.6
    category = np.concatenate([np.arange(C), rng.integers(0, C, I - C)])
    for s in range(S):
        for c in range(C):
            if not avail[s, category == c].any():
                avail[s, rng.choice(np.flatnonzero(category == c))] = True
    session = rng.integers(0, S, B)
    chosen = np.array([rng.choice(np.flatnonzero(avail[s])) for s in session])
    return util, avail, session, category, C, chosen


def test_compiled_backend_is_built():
    assert "compiled" in IMPLS
    assert kernels.BACKEND == ("python" if os.environ.get("CHOICEKIT_PURE_PYTHON") == "1"
                               else "compiled")


@pytest.mark.parametrize("C", [1, 2, 3])
def test_masked_log_softmax_backends_agree(C):
    rng = np.random.default_rng(C)
    util, avail, session, cat, C, _ = _case(rng, C=C)
    ref, ref_empty = kernels.masked_log_softmax(util, avail, session, cat, C, impl=_kernels_py)
    for impl in IMPLS.values():
        out, empty = kernels.masked_log_softmax(util, avail, session, cat, C, impl=impl)
        assert empty == ref_empty == 0
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-13)
        assert np.all(out[~avail[session]] == kernels.SENTINEL)


@pytest.mark.parametrize("C", [1, 3])
def test_softmax_residual_backends_agree(C):
    rng = np.random.default_rng(10 + C)
    args = _case(rng, C=C)
    ref = kernels.softmax_residual(*args, impl=_kernels_py)
    for impl in IMPLS.values():
        resid, lp, empty = kernels.softmax_residual(*args, impl=impl)
        np.testing.assert_allclose(resid, ref[0], atol=1e-14)
        np.testing.assert_allclose(lp, ref[1], atol=1e-13)
        assert empty == ref[2]


def test_residual_is_zero_outside_the_chosen_category():
    rng = np.random.default_rng(3)
    util, avail, session, cat, C, chosen = _case(rng, C=3)
    for impl in IMPLS.values():
        resid, _, _ = kernels.softmax_residual(util, avail, session, cat, C, chosen, impl=impl)
        other = cat[None, :] != cat[chosen][:, None]
        assert np.all(resid[other] == 0.0)
        # residuals within the chosen category sum to zero
        np.testing.assert_allclose(resid.sum(axis=1), 0.0, atol=1e-14)


def test_empty_rows_are_counted():
    util = np.zeros((2, 3))
    avail = np.array([[True, False, False], [False, False, False]])
    session = np.array([0, 1])
    cat = np.zeros(3, dtype=np.int64)
    for impl in IMPLS.values():
        _, empty = kernels.masked_log_softmax(util, avail, session, cat, 1, impl=impl)
        assert empty == 1


def test_scatter_and_gather_backends_agree():
    rng = np.random.default_rng(4)
    values = rng.normal(size=(50, 4))
    index = rng.integers(0, 7, 50)
    tensor = rng.normal(size=(5, 6, 3))
    coef = rng.normal(size=(4, 3))
    weights = rng.normal(size=(50, 6))
    session, user = rng.integers(0, 5, 50), rng.integers(0, 4, 50)
    expected_dot = np.einsum("bik,bk->bi", tensor[session], coef[user])
    expected_grad = np.zeros((4, 3))
    for b in range(50):
        expected_grad[user[b]] += weights[b] @ tensor[session[b]]
    for impl in IMPLS.values():
        out = kernels.scatter_add_rows(values, index, 7, impl=impl)
        np.testing.assert_allclose(out, [values[index == g].sum(axis=0) for g in range(7)],
                                   atol=1e-13)
        np.testing.assert_allclose(kernels.gather_dot3(tensor, coef, session, user, impl=impl),
                                   expected_dot, atol=1e-13)
        np.testing.assert_allclose(
            kernels.gather_dot3_grad(tensor, weights, session, user, 4, impl=impl),
            expected_grad, atol=1e-12)


def test_environment_variable_forces_fallback():
    env = dict(os.environ, CHOICEKIT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c",
                          "import choicekit.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
