"""Acceptance checks; each test records one PASS/FAIL line for the summary."""
import math
import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from choicekit import kernels
from choicekit.cli import main as cli_main
from choicekit.conditional_logit import ConditionalLogitModel
from choicekit.dataset import ChoiceDataset
from choicekit.estimation import FitOptions, fit, standard_errors
from choicekit.formula import Regularization
from choicekit.ingest import ColumnRoles, from_long_format
from choicekit.io import write_dataset_dir
from choicekit.nested_logit import NestedLogitModel
from choicekit.synth import SimSpec, loglog_slope, simulate

from helpers import (
    covering_formula,
    fd_gradient,
    naive_clm_nll,
    nested_direct_log_prob,
    random_dataset,
    random_formula,
    random_joint,
)

DATA = Path(__file__).parent / "data"


def test_mode_choice_spec_has_13_parameters(record_criterion):
    rng = np.random.default_rng(0)
    S, I = 8, 4
    avail = np.ones((S, I), dtype=bool)
    ds = ChoiceDataset(rng.integers(0, I, S), availability=avail,
                       itemsession_cost_freq_ovt=rng.normal(size=(S, I, 3)),
                       session_income=rng.normal(size=(S, 1)),
                       itemsession_ivt=rng.normal(size=(S, I, 1)))
    formula = ("(itemsession_cost_freq_ovt|constant) + (session_income|item) + "
               "(itemsession_ivt|item-full) + (intercept|item)")
    model = ConditionalLogitModel(formula=formula, dataset=ds, num_items=4)
    ok = record_criterion(1, model.num_params == 13, f"{model.num_params} parameters")
    assert ok


def _iia_gap(model, theta, ds, rng):
    """Change in log(P_i / P_j) when a third item of their category is removed."""
    cats = ds.category.category_of_item
    for _ in range(10):
        n = int(rng.integers(len(ds)))
        s = int(ds.session_index[n])
        chosen = int(ds.item_index[n])
        c = cats[chosen]
        pool = [i for i in np.flatnonzero(ds.availability[s]) if cats[i] == c]
        removable = [k for k in pool if k != chosen]
        if len(pool) < 3:
            continue
        k = int(rng.choice(removable))
        i, j = [x for x in pool if x != k][:2]
        sub = ds.subset([n])
        avail = sub.availability.copy()
        avail[s, k] = False
        cut = ChoiceDataset(sub.item_index, user_index=sub.user_index,
                            session_index=sub.session_index, availability=avail,
                            category=ds.category, observables=sub.observables)
        before, _ = model.log_prob(sub, theta)
        after, _ = model.log_prob(cut, theta)
        assert after[0, k] <= kernels.SENTINEL
        return abs((before[0, i] - before[0, j]) - (after[0, i] - after[0, j]))
    return None


def test_probability_laws(record_criterion):
    rng = np.random.default_rng(2024)
    worst_sum = worst_iia = 0.0
    zero_ok = True
    iia_checked = 0
    t0 = time.perf_counter()
    for _ in range(1000):
        ds = random_dataset(rng, N=int(rng.integers(5, 40)), I=int(rng.integers(3, 8)),
                            categories=int(rng.integers(1, 3)))
        model = ConditionalLogitModel(formula=random_formula(rng), dataset=ds)
        theta = rng.normal(scale=2.0, size=model.num_params)
        P = model.predict_proba(ds, theta)
        avail = ds.availability[ds.session_index]
        zero_ok &= bool(np.all(P[~avail] == 0.0))
        cats = ds.category.category_of_item
        for c in range(ds.category.num_categories):
            sums = P[:, cats == c].sum(axis=1)
            worst_sum = max(worst_sum, float(np.max(np.abs(sums - 1.0))))
        gap = _iia_gap(model, theta, ds, rng)
        if gap is not None:
            iia_checked += 1
            worst_iia = max(worst_iia, gap)
    elapsed = time.perf_counter() - t0
    ok = worst_sum <= 1e-12 and zero_ok and worst_iia <= 1e-10 and iia_checked > 100
    record_criterion(2, ok, f"max |sum-1|={worst_sum:.1e}, unavailable exactly 0: {zero_ok}, "
                            f"max IIA drift={worst_iia:.1e} over {iia_checked} checks, "
                            f"{elapsed:.1f} s")
    assert ok


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def test_gradients_match_finite_differences(record_criterion):
    rng = np.random.default_rng(7)
    worst_cl = worst_nl = 0.0
    for trial in range(100):
        N, I = int(rng.integers(20, 201)), int(rng.integers(3, 7))
        ds = random_dataset(rng, N=N, I=I, categories=1 + trial % 2)
        model = ConditionalLogitModel(formula=covering_formula(rng), dataset=ds)
        theta = rng.normal(size=model.num_params)
        g = model.gradient(ds, theta)
        fd = fd_gradient(lambda t: model.neg_log_likelihood(ds, t), theta, h=1e-5)
        worst_cl = max(worst_cl, _rel(g, fd))

        joint, nests = random_joint(rng, N=N, I=I, K=int(rng.integers(2, min(I, 4) + 1)))
        nl = NestedLogitModel(nests, nest_formula=covering_formula(rng, intercept=False),
                              item_formula=covering_formula(rng), dataset=joint,
                              shared_lambda=bool(trial % 3 == 0))
        theta = rng.normal(scale=0.5, size=nl.num_params)
        theta[nl._lam_slice] = np.log(rng.uniform(0.3, 1.5, nl.nests.num_lambdas))
        g = nl.gradient(joint, theta)
        fd = fd_gradient(lambda t: nl.neg_log_likelihood(joint, t), theta, h=1e-5)
        worst_nl = max(worst_nl, _rel(g, fd))
    ok = worst_cl <= 1e-6 and worst_nl <= 1e-6
    record_criterion(3, ok, f"max relative error CLM {worst_cl:.1e}, NLM {worst_nl:.1e}")
    assert ok


def test_nested_logit_reductions(record_criterion):
    rng = np.random.default_rng(11)
    worst_cl = worst_direct = 0.0
    for trial in range(100):
        I = int(rng.integers(3, 8))
        joint, nests = random_joint(rng, N=int(rng.integers(10, 60)), I=I,
                                    K=int(rng.integers(2, min(I, 4) + 1)))
        nl = NestedLogitModel(nests, nest_formula=random_formula(rng, 3),
                              item_formula=random_formula(rng, 3), dataset=joint)
        theta = rng.normal(scale=0.7, size=nl.num_params)
        item_ds = joint["item"]

        # lambda = 1: a conditional logit on W + T
        theta[nl._lam_slice] = 0.0
        W, T = nl.utilities(joint, theta)
        util = W[:, nl.nests.nest_of_item] + T
        logp = kernels.masked_log_softmax(util, item_ds.availability, item_ds.session_index,
                                          np.zeros(I, dtype=np.int64), 1)[0]
        clm_nll = -logp[np.arange(len(item_ds)), item_ds.item_index].sum()
        worst_cl = max(worst_cl, abs(nl.neg_log_likelihood(joint, theta) - clm_nll))

        # general lambda: two-stage form against the original nested form
        theta[nl._lam_slice] = np.log(rng.uniform(0.2, 1.0, nl.nests.num_lambdas))
        W, T = nl.utilities(joint, theta)
        lam = nl.lambdas(theta)
        logp, _ = nl.log_prob(joint, theta)
        for n in range(len(item_ds)):
            row = item_ds.availability[item_ds.session_index[n]]
            for i in np.flatnonzero(row):
                direct = nested_direct_log_prob(W[n], T[n], nl.nests.nest_of_item, lam, row, i)
                worst_direct = max(worst_direct, abs(math.exp(direct) - math.exp(logp[n, i])))
    ok = worst_cl <= 1e-10 and worst_direct <= 1e-12
    record_criterion(4, ok, f"max |NLL(lambda=1) - CLM NLL|={worst_cl:.1e}, "
                            f"max |P direct - P two-stage|={worst_direct:.1e}")
    assert ok


def test_vectorized_nll_matches_naive_enumeration(record_criterion):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        ds = random_dataset(rng, N=int(rng.integers(1, 101)), I=int(rng.integers(2, 7)),
                            categories=int(rng.integers(1, 3)))
        model = ConditionalLogitModel(formula=random_formula(rng), dataset=ds)
        theta = rng.normal(size=model.num_params)
        fast = model.neg_log_likelihood(ds, theta)
        slow = naive_clm_nll(model.spec, theta, ds)
        worst = max(worst, abs(fast - slow) / max(1.0, abs(slow)))
    ok = worst <= 1e-12
    record_criterion(5, ok, f"max relative difference {worst:.1e} on 100 instances")
    assert ok


@pytest.mark.slow
def test_parameter_recovery(record_criterion):
    opts = FitOptions(optimizer="lbfgs", learning_rate=0.03)
    spec = SimSpec(num_users=1000, num_items=30, num_sessions=1000, num_records=100_000,
                   user_dim=0, item_dim=10, model="m1", seed=42)
    data, truth = simulate(spec)
    model = ConditionalLogitModel(formula=spec.formula, dataset=data)
    res = fit(model, data, opts)
    se = standard_errors(model, data)
    err1 = float(np.max(np.abs(res.theta - truth.theta)))
    z = float(np.max(np.abs(res.theta - truth.theta) / se))

    spec2 = SimSpec(num_users=1000, num_items=10, num_sessions=1000, num_records=100_000,
                    user_dim=5, item_dim=0, model="m2", seed=42)
    data2, truth2 = simulate(spec2)
    model2 = ConditionalLogitModel(formula=spec2.formula, dataset=data2)
    res2 = fit(model2, data2, opts)
    err2 = float(np.max(np.abs(res2.theta - truth2.theta)))
    ok = err1 <= 0.05 and z <= 3.0 and err2 <= 0.1
    record_criterion(6, ok, f"beta max error {err1:.4f} (max {z:.2f} SE), "
                            f"alpha max error {err2:.4f}")
    assert ok


def _timed_fit(spec, opts):
    data, _ = simulate(spec)
    model = ConditionalLogitModel(formula=spec.formula, dataset=data)
    t0 = time.perf_counter()
    fit(model, data, opts)
    return time.perf_counter() - t0


@pytest.mark.slow
def test_scaling_shape(record_criterion):
    opts = FitOptions(optimizer="lbfgs", learning_rate=0.03)
    records = [1_000, 10_000, 100_000]
    t_rec = []
    for n in records:
        runs = [_timed_fit(SimSpec(num_users=100, num_items=10, num_sessions=100, num_records=n,
                                   user_dim=0, item_dim=10, model="m1", seed=rep), opts)
                for rep in range(3)]
        t_rec.append(float(np.median(runs)))
    items = [10, 50, 200]
    t_items = [_timed_fit(SimSpec(num_users=500, num_items=i, num_sessions=500,
                                  num_records=30_000, user_dim=30, item_dim=30, model="m3",
                                  seed=0), opts) for i in items]
    s_rec, s_items = loglog_slope(records, t_rec), loglog_slope(items, t_items)
    ok = s_rec <= 1.3 and s_items <= 1.5
    record_criterion(7, ok, f"slope vs N {s_rec:.2f} (times {', '.join(f'{t:.2f}' for t in t_rec)} s), "
                            f"slope vs I {s_items:.2f} (times "
                            f"{', '.join(f'{t:.1f}' for t in t_items)} s)")
    assert ok


@pytest.mark.slow
def test_regularization_shrinks_estimates(record_criterion):
    spec = SimSpec(num_users=1000, num_items=30, num_sessions=1000, num_records=100_000,
                   user_dim=0, item_dim=10, model="m1", seed=42)
    data, _ = simulate(spec)
    details, ok = [], True
    for norm, order in (("L2", 2), ("L1", 1)):
        norms = []
        for w in (0.0, 0.1, 1.0, 10.0):
            model = ConditionalLogitModel(formula=spec.formula, dataset=data)
            res = fit(model, data, optimizer="lbfgs", learning_rate=0.03,
                      regularization=Regularization(norm, w))
            norms.append(float(np.linalg.norm(res.theta, order)))
        ok &= all(b <= a + 1e-4 for a, b in zip(norms, norms[1:]))
        details.append(f"{norm} norms " + ", ".join(f"{v:.5f}" for v in norms))

    plain = fit(ConditionalLogitModel(formula=spec.formula, dataset=data), data,
                optimizer="lbfgs", learning_rate=0.03)
    zero = fit(ConditionalLogitModel(formula=spec.formula, dataset=data), data,
               optimizer="lbfgs", learning_rate=0.03, regularization=Regularization("L2", 0.0))
    same = (np.array_equal(plain.trace_nll, zero.trace_nll)
            and np.array_equal(plain.trace_grad_norm, zero.trace_grad_norm)
            and np.array_equal(plain.theta, zero.theta))
    ok &= same
    record_criterion(8, ok, "; ".join(details) + f"; weight 0 trace bit-exact: {same}")
    assert ok


def test_car_choice_fixture(record_criterion):
    main = pd.read_csv(DATA / "car_choice_head.csv")
    roles = ColumnRoles(record="record_id", item="car", choice="purchase",
                        user="consumer_id", session="session_id")
    ds, enc = from_long_format(main, roles, obs_from_columns={
        "user": ["gender", "income"], "item": ["speed"], "session": ["discount"],
        "itemsession": ["price"]})
    items, sessions, users = enc["item"], enc["session"], enc["user"]
    korean, american = items.encode(["Korean"])[0], items.encode(["American"])[0]
    s1, s4 = sessions.encode([1])[0], sessions.encode([4])[0]
    u1 = users.encode([1])[0]
    checks = {
        "Korean unavailable in session 4": not ds.availability[s4, korean],
        "session 4 has 3 available items": int(ds.availability[s4].sum()) == 3,
        "chosen items match purchase": items.decode(ds.item_index) ==
            main.loc[main.purchase == 1, "car"].tolist(),
        "income 46.699997 for consumer 1": ds.observables["user_income"][u1, 0] == 46.699997,
        "price 90 for American in session 1":
            ds.observables["itemsession_price"][s1, american, 0] == 90.0,
        "variation slots": ds.variation == {"user_gender": "user", "user_income": "user",
                                            "item_speed": "item", "session_discount": "session",
                                            "itemsession_price": "itemsession"},
        "labels read back as strings": items.labels == ["American", "Japanese", "European",
                                                        "Korean"],
    }
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    record_criterion(9, ok, "all fixture checks hold" if ok else f"failed: {failed}")
    assert ok


def test_cli_fit_is_deterministic(tmp_path, record_criterion):
    data, _ = simulate(SimSpec(num_users=50, num_items=5, num_sessions=50, num_records=2000,
                               user_dim=2, item_dim=3, model="m3", seed=3))
    manifest = write_dataset_dir(data, tmp_path / "data")
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = cli_main(["fit", "--data", str(manifest), "--out", str(out),
                         "--formula", "(user_obs|item) + (item_obs|constant)",
                         "--optimizer", "adam", "--lr", "0.05", "--epochs", "300",
                         "--seed", "9", "--init", "normal"])
        assert code == 0
        outs.append(out)
    same = {name: (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
            for name in ("coefficients.csv", "trace.csv")}
    ok = all(same.values())
    record_criterion(10, ok, ", ".join(f"{k} identical: {v}" for k, v in same.items()))
    assert ok
