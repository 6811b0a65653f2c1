"""Pure numpy implementations of the hot kernels.

Signatures match the compiled ``_kernels`` extension exactly; see
``choicekit.kernels`` for how one of the two is chosen.
"""
import numpy as np

SENTINEL = -1e30

_CHUNK = 8192


def masked_log_softmax(util, avail, session, category, n_categories):
    """Log choice probabilities normalized within category and availability.

    Parameters
    ----------
    util : float64 (B, I)
    avail : uint8 (S, I)
    session : int64 (B,)
    category : int64 (I,)
    n_categories : int

    Returns
    -------
    logp : float64 (B, I), ``SENTINEL`` where unavailable
    empty : int, number of (record, category) pairs with no available item
    """
    mask = avail[session].astype(bool)
    logp = np.full(util.shape, SENTINEL)
    empty = 0
    if n_categories == 1:
        groups = [slice(None)]
    else:
        groups = [np.flatnonzero(category == c) for c in range(n_categories)]
    for cols in groups:
        u = util[:, cols]
        m = mask[:, cols]
        has = m.any(axis=1)
        empty += int((~has).sum())
        masked = np.where(m, u, -np.inf)
        top = masked.max(axis=1, keepdims=True)
        top[~has] = 0.0
        with np.errstate(under="ignore"):
            s = np.exp(masked - top).sum(axis=1, keepdims=True)
        s[~has] = 1.0
        lp = u - top - np.log(s)
        logp[:, cols] = np.where(m, lp, SENTINEL)
    return logp, empty


def softmax_residual(util, avail, session, category, n_categories, chosen):
    """Probability residuals ``P - onehot(chosen)`` and chosen log-probabilities.

    Fuses the masked softmax with the gradient residual of the negative
    log-likelihood.  Only the chosen item's category enters the likelihood,
    so the residual is 0 outside it and at unavailable entries.

    Returns ``(resid (B, I), chosen_logp (B,), empty)``.
    """
    logp, empty = masked_log_softmax(util, avail, session, category, n_categories)
    rows = np.arange(util.shape[0])
    chosen_lp = logp[rows, chosen].copy()
    same = category[None, :] == category[chosen][:, None]
    resid = np.where((logp <= SENTINEL) | ~same, 0.0, np.exp(logp))
    resid[rows, chosen] -= 1.0
    return resid, chosen_lp, empty


def scatter_add_rows(values, index, n_groups):
    """``out[g] = sum of values[b] over b with index[b] == g``; values (B, J)."""
    out = np.zeros((n_groups, values.shape[1]))
    np.add.at(out, index, values)
    return out


def gather_dot3(tensor, coef, session, user):
    """``out[b, i] = tensor[session[b], i, :] @ coef[user[b], :]``."""
    b = session.shape[0]
    out = np.empty((b, tensor.shape[1]))
    for lo in range(0, b, _CHUNK):
        hi = min(b, lo + _CHUNK)
        out[lo:hi] = np.einsum("bik,bk->bi", tensor[session[lo:hi]], coef[user[lo:hi]])
    return out


def gather_dot3_grad(tensor, weights, session, user, n_users):
    """Adjoint of :func:`gather_dot3` with respect to ``coef``; returns (U, K)."""
    out = np.zeros((n_users, tensor.shape[2]))
    b = session.shape[0]
    for lo in range(0, b, _CHUNK):
        hi = min(b, lo + _CHUNK)
        per_record = np.einsum("bi,bik->bk", weights[lo:hi], tensor[session[lo:hi]])
        np.add.at(out, user[lo:hi], per_record)
    return out
