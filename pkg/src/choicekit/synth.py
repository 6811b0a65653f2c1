"""Synthetic choice data and the scaling benchmark harness.

Three data-generating models with all items available:

``m1``  U = beta' Z_i                 (item observables, constant coefficient)
``m2``  U = alpha_i' X_u              (user observables, item-specific coefficient, alpha_0 = 0)
``m3``  U = alpha_i' X_u + beta' Z_i

Observables are standard normal, users and sessions are drawn uniformly and
the chosen item is drawn by inverse-CDF sampling from the exact logit
probabilities.  Random streams come from a counter-based generator (Philox)
split by purpose, so a seed reproduces the same data on every platform.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from choicekit.conditional_logit import ConditionalLogitModel
from choicekit.dataset import ChoiceDataset
from choicekit.estimation import FitOptions, fit
from choicekit.layout import ParamStore

MODEL_FORMULAS = {
    "m1": "(item_obs|constant)",
    "m2": "(user_obs|item)",
    "m3": "(user_obs|item) + (item_obs|constant)",
}
AXES = {"records": ("num_records",), "covariates": ("user_dim", "item_dim"),
        "items": ("num_items",)}


@dataclass
class SimSpec:
    num_users: int = 100
    num_items: int = 10
    num_sessions: int = 100
    num_records: int = 10000
    user_dim: int = 30
    item_dim: int = 30
    model: str = "m1"
    seed: int = 0
    session_dim: int = 0
    itemsession_dim: int = 0
    # {coefficient name: array}; drawn N(0, 1) when None
    true_params: dict | None = None

    def __post_init__(self):
        for name in ("num_users", "num_items", "num_sessions", "num_records"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model not in MODEL_FORMULAS:
            raise ValueError(f"model must be one of {sorted(MODEL_FORMULAS)}, got {self.model!r}")
        if self.model in ("m2", "m3") and self.num_items < 2:
            raise ValueError("item-specific coefficients need at least two items")
        if self.model in ("m2", "m3") and self.user_dim < 1:
            raise ValueError(f"model {self.model} needs user_dim >= 1")
        if self.model in ("m1", "m3") and self.item_dim < 1:
            raise ValueError(f"model {self.model} needs item_dim >= 1")

    @property
    def formula(self) -> str:
        return MODEL_FORMULAS[self.model]

    def to_json(self) -> dict:
        d = asdict(self)
        if self.true_params is not None:
            d["true_params"] = {k: np.asarray(v).tolist() for k, v in self.true_params.items()}
        return d


def _streams(seed):
    """Independent generators for observables, indices, choices and parameters."""
    children = np.random.SeedSequence(seed).spawn(4)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def simulate(spec: SimSpec):
    """Draw a dataset from ``spec``; returns ``(ChoiceDataset, true ParamStore)``.

    The true parameters use the same layout as a conditional logit fitted
    with ``spec.formula``, so they can be compared entry by entry.
    """
    rng_obs, rng_idx, rng_choice, rng_par = _streams(spec.seed)
    U, I, S, N = spec.num_users, spec.num_items, spec.num_sessions, spec.num_records
    obs = {}
    if spec.user_dim:
        obs["user_obs"] = rng_obs.standard_normal((U, spec.user_dim))
    if spec.item_dim:
        obs["item_obs"] = rng_obs.standard_normal((I, spec.item_dim))
    if spec.session_dim:
        obs["session_obs"] = rng_obs.standard_normal((S, spec.session_dim))
    if spec.itemsession_dim:
        obs["itemsession_obs"] = rng_obs.standard_normal((S, I, spec.itemsession_dim))
    user_index = rng_idx.integers(0, U, size=N)
    session_index = rng_idx.integers(0, S, size=N)
    availability = np.ones((S, I), dtype=bool)

    # probabilities depend on the user only, so evaluate one row per user
    per_user = ChoiceDataset(np.zeros(U, dtype=np.int64), user_index=np.arange(U),
                             session_index=np.zeros(U, dtype=np.int64),
                             availability=np.ones((1, I), dtype=bool), observables=obs)
    model = ConditionalLogitModel(formula=spec.formula, dataset=per_user, num_items=I,
                                  num_users=U)
    truth = ParamStore(model.layout)
    for block in model.layout.blocks:
        if spec.true_params is not None and block.name in spec.true_params:
            value = np.asarray(spec.true_params[block.name], dtype=np.float64)
            if block.pinned_first_row and value.shape[0] == block.rows + 1:
                value = value[1:]
            truth.block(block.name)[...] = value.reshape(block.rows, block.cols)
        else:
            truth.block(block.name)[...] = rng_par.standard_normal((block.rows, block.cols))
    probs = model.predict_proba(per_user, truth.theta)

    cdf = np.cumsum(probs[user_index], axis=1)
    draws = rng_choice.random(N)
    item_index = np.minimum((draws[:, None] >= cdf).sum(axis=1), I - 1).astype(np.int64)
    dataset = ChoiceDataset(item_index, user_index=user_index, session_index=session_index,
                            availability=availability, observables=obs)
    return dataset, truth


def truth_to_json(spec: SimSpec, truth: ParamStore) -> dict:
    coefficients = {b.name: truth.materialize(b.name).tolist() for b in truth.layout.blocks}
    return {
        "spec": spec.to_json(),
        "formula": spec.formula,
        "parameter_source": "user-supplied" if spec.true_params else "standard normal N(0, 1)",
        "generator": "numpy Philox, SeedSequence(seed).spawn(4): observables, indices, choices, parameters",
        "coefficients": coefficients,
    }


# ----------------------------------------------------------------------
@dataclass
class BenchConfig:
    axis: str = "records"
    grid: tuple = (1000, 10000, 100000)
    models: tuple = ("m1",)
    repetitions: int = 5
    base: SimSpec = field(default_factory=SimSpec)
    fit_options: FitOptions = field(default_factory=lambda: FitOptions(optimizer="lbfgs",
                                                                       learning_rate=0.03))

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {sorted(AXES)}, got {self.axis!r}")
        if not self.grid:
            raise ValueError("grid must be nonempty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


TIMING_FIELDS = ("axis", "axis_value", "model", "rep", "wall_seconds", "final_nll", "epochs",
                 "ratio", "error")


def run_scaling_suite(config: BenchConfig, progress=None) -> list[dict]:
    """Fit one model per (grid value, model, repetition) and time the fit.

    ``ratio`` divides each wall time by the mean wall time of the same model
    at the first grid value.  A failing run is recorded with its error
    message and the suite carries on.
    """
    rows = []
    for value in config.grid:
        for model_name in config.models:
            for rep in range(config.repetitions):
                fields = {k: int(value) for k in AXES[config.axis]}
                row = {"axis": config.axis, "axis_value": value, "model": model_name,
                       "rep": rep, "wall_seconds": float("nan"), "final_nll": float("nan"),
                       "epochs": 0, "ratio": float("nan"), "error": ""}
                try:
                    spec = replace(config.base, model=model_name, seed=config.base.seed + rep,
                                   true_params=None, **fields)
                    data, _ = simulate(spec)
                    model = ConditionalLogitModel(formula=spec.formula, dataset=data)
                    t0 = time.perf_counter()
                    result = fit(model, data, config.fit_options)
                    row["wall_seconds"] = time.perf_counter() - t0
                    row["final_nll"] = result.nll
                    row["epochs"] = result.epochs
                except Exception as exc:  # recorded per row; the suite continues
                    row["error"] = f"{type(exc).__name__}: {exc}"
                rows.append(row)
                if progress is not None:
                    progress(row)
    for model_name in config.models:
        base = [r["wall_seconds"] for r in rows
                if r["model"] == model_name and r["axis_value"] == config.grid[0] and not r["error"]]
        if base:
            ref = float(np.mean(base))
            for r in rows:
                if r["model"] == model_name and not r["error"]:
                    r["ratio"] = r["wall_seconds"] / ref
    return rows


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


def write_timing_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TIMING_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in TIMING_FIELDS})
