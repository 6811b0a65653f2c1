"""Random instances and independent reference implementations for tests.

The oracles here deliberately avoid the package's vectorized code paths:
utilities are assembled record by record from explicitly unpacked
coefficients, and probabilities come from plain loops.
"""
from __future__ import annotations

import math

import numpy as np

from choicekit.dataset import CategoryPartition, ChoiceDataset, JointDataset
from choicekit.formula import COEF_VARIATIONS, INTERCEPT

OBS_DIMS = {"user_a": 2, "item_b": 2, "session_c": 1, "itemsession_d": 2}


def random_availability(rng, S, I, category=None, p=0.7):
    """Random (S, I) availability with at least one item per session and category."""
    avail = rng.random((S, I)) < p
    cats = np.zeros(I, dtype=int) if category is None else category
    for s in range(S):
        for c in np.unique(cats):
            members = np.flatnonzero(cats == c)
            if not avail[s, members].any():
                avail[s, rng.choice(members)] = True
    return avail


def random_choices(rng, avail, session_index):
    return np.array([rng.choice(np.flatnonzero(avail[s])) for s in session_index], dtype=np.int64)


def random_observables(rng, U, A, S, prefix_dims=OBS_DIMS):
    obs = {}
    for name, k in prefix_dims.items():
        kind = name.split("_")[0]
        shape = {"user": (U, k), "item": (A, k), "session": (S, k),
                 "itemsession": (S, A, k)}[kind]
        obs[name] = rng.normal(size=shape)
    return obs


def random_dataset(rng, N=40, I=5, U=4, S=6, categories=1, avail_p=0.7):
    U, S = min(U, N), min(S, N)
    category = None
    if categories > 1:
        cat = np.concatenate([np.arange(categories), rng.integers(0, categories, I - categories)])
        category = CategoryPartition(rng.permutation(cat))
    avail = random_availability(rng, S, I, None if category is None else category.category_of_item,
                                avail_p)
    session = rng.integers(0, S, N)
    user = rng.integers(0, U, N)
    # ensure the index arrays demand every entity so counts match the observables
    session[:S] = np.arange(S)
    user[:U] = np.arange(U)
    item = random_choices(rng, avail, session)
    return ChoiceDataset(item, user_index=user, session_index=session, availability=avail,
                         category=category, observables=random_observables(rng, U, I, S))


def all_terms():
    return [(obs, var) for obs in [INTERCEPT, *OBS_DIMS] for var in COEF_VARIATIONS]


def random_formula(rng, max_terms=5):
    terms = all_terms()
    k = int(rng.integers(1, max_terms + 1))
    pick = rng.choice(len(terms), size=k, replace=False)
    return " + ".join(f"({terms[i][0]}|{terms[i][1]})" for i in sorted(pick))


def covering_formula(rng, intercept=True):
    """Every coefficient variation and every observable kind, paired at random."""
    obs = rng.permutation(list(OBS_DIMS))
    terms = [f"({o}|{v})" for o, v in zip(obs, COEF_VARIATIONS)]
    if intercept:
        terms.append(f"({INTERCEPT}|{rng.choice(['item', 'item-full', 'user'])})")
    return " + ".join(terms)


def unpack(spec, theta):
    """Coefficient matrices keyed by (observable, variation); pinned rows added."""
    out = {}
    pos = 0
    for t in spec.terms:
        blk = np.asarray(theta[pos:pos + t.param_count]).reshape(t.rows, t.dim)
        pos += t.param_count
        if t.variation == "item":
            blk = np.vstack([np.zeros((1, t.dim)), blk])
        out[(t.observable, t.variation)] = blk
    assert pos == spec.total_params
    return out


def naive_utility(spec, theta, ds: ChoiceDataset, n: int, a: int) -> float:
    """Utility of alternative ``a`` for record ``n``, one term at a time."""
    coefs = unpack(spec, theta)
    u, s = int(ds.user_index[n]), int(ds.session_index[n])
    total = 0.0
    for (obs, var), coef in coefs.items():
        row = {"constant": 0, "user": u, "item": a, "item-full": a}[var]
        if obs == INTERCEPT:
            x = np.ones(1)
        else:
            kind = ds.variation[obs]
            arr = ds.observables[obs]
            x = {"user": lambda: arr[u], "item": lambda: arr[a], "session": lambda: arr[s],
                 "itemsession": lambda: arr[s, a]}[kind]()
        total += float(sum(c * v for c, v in zip(coef[row], x)))
    return total


def naive_log_probs(spec, theta, ds: ChoiceDataset, n: int):
    """Per-item log-probabilities of record ``n`` (None where unavailable)."""
    s = int(ds.session_index[n])
    cats = ds.category.category_of_item
    util = [naive_utility(spec, theta, ds, n, i) for i in range(ds.num_items)]
    out = [None] * ds.num_items
    for c in np.unique(cats):
        members = [i for i in range(ds.num_items) if cats[i] == c and ds.availability[s, i]]
        top = max(util[i] for i in members)
        lse = top + math.log(math.fsum(math.exp(util[i] - top) for i in members))
        for i in members:
            out[i] = util[i] - lse
    return out


def naive_clm_nll(spec, theta, ds: ChoiceDataset) -> float:
    return -math.fsum(naive_log_probs(spec, theta, ds, n)[int(ds.item_index[n])]
                      for n in range(len(ds)))


def fd_gradient(f, theta, h=1e-5):
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


# ----------------------------------------------------------------------
def random_nests(rng, I, K):
    perm = rng.permutation(I)
    cuts = np.sort(rng.choice(np.arange(1, I), size=K - 1, replace=False))
    groups = np.split(perm, cuts)
    return {k: sorted(int(i) for i in g) for k, g in enumerate(groups)}


def random_joint(rng, N=30, I=6, K=3, U=4, S=5, avail_p=0.7):
    """Item-level and nest-level datasets sharing records."""
    item_ds = random_dataset(rng, N=N, I=I, U=U, S=S, avail_p=avail_p)
    nest_obs = random_observables(rng, item_ds.num_users, K, item_ds.num_sessions)
    nest_ds = ChoiceDataset(item_ds.item_index, user_index=item_ds.user_index,
                            session_index=item_ds.session_index,
                            availability=item_ds.availability, num_nests=K,
                            observables=nest_obs)
    return JointDataset(nest=nest_ds, item=item_ds), random_nests(rng, I, K)


def nested_direct_log_prob(W, T, nest_of_item, lam, avail_row, i):
    """Choice probability from the original nested-logit form, total utility W+T.

    ``W`` per nest, ``T`` per item; sums run over available items only and
    nests with no available item are skipped.
    """
    K = len(lam)
    mu = [W[nest_of_item[j]] + T[j] for j in range(len(T))]
    sums = []
    for k in range(K):
        terms = [math.exp(mu[j] / lam[k]) for j in range(len(T))
                 if nest_of_item[j] == k and avail_row[j]]
        sums.append(math.fsum(terms) if terms else None)
    k = nest_of_item[i]
    num = math.exp(mu[i] / lam[k]) * sums[k] ** (lam[k] - 1.0)
    den = math.fsum(sm ** lam[l] for l, sm in enumerate(sums) if sm is not None)
    return math.log(num / den)
