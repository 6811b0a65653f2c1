"""Two-level nested logit.

Utility splits into a nest component ``W`` (one value per record and nest)
and an item component ``T``.  With dissimilarity ``lam[k]`` for nest ``k``::

    iv[k]   = log sum_{j in nest k, available} exp(T[j] / lam[k])
    log P(i) = T[i]/lam[k] - iv[k]                      # item within nest
             + W[k] + lam[k] iv[k] - logsumexp_l(W[l] + lam[l] iv[l])

The ``lam`` parameters are optimized as ``log lam`` so they stay positive.
"""
from __future__ import annotations

import warnings
from typing import Mapping

import numpy as np

from choicekit import kernels
from choicekit.conditional_logit import _squeeze, coefficient_rows, make_regularization, penalty
from choicekit.dataset import JointDataset
from choicekit.errors import (
    EmptyChoiceSet,
    MissingLevel,
    ModelConfigError,
    ShapeMismatch,
    UnknownCoefficient,
)
from choicekit.formula import ModelSpec, dict_config, parse_formula, resolve
from choicekit.layout import Layout, LinearUtility, ParamStore

SENTINEL = kernels.SENTINEL


class NestStructure:
    """Partition of items ``0..I-1`` into nests."""

    def __init__(self, nest_to_item: Mapping[int, list], shared_lambda: bool = False):
        if not nest_to_item:
            raise ModelConfigError("nest_to_item is empty")
        keys = sorted(nest_to_item)
        if keys != list(range(len(keys))):
            raise ModelConfigError(f"nest ids must be 0..K-1, got {keys}")
        members = [np.asarray(sorted(nest_to_item[k]), dtype=np.int64) for k in keys]
        for k, items in enumerate(members):
            if items.size == 0:
                raise ModelConfigError(f"nest {k} is empty")
        flat = np.concatenate(members)
        if np.unique(flat).size != flat.size:
            raise ModelConfigError("an item appears in more than one nest")
        if flat.min() < 0 or not np.array_equal(np.sort(flat), np.arange(flat.size)):
            raise ModelConfigError("nests must cover items 0..I-1 exactly once")
        self.members = members
        self.shared_lambda = bool(shared_lambda)
        self.nest_of_item = np.empty(flat.size, dtype=np.int64)
        for k, items in enumerate(members):
            self.nest_of_item[items] = k

    @property
    def num_nests(self) -> int:
        return len(self.members)

    @property
    def num_items(self) -> int:
        return int(self.nest_of_item.size)

    @property
    def num_lambdas(self) -> int:
        return 1 if self.shared_lambda else self.num_nests

    def nest_to_item(self) -> dict[int, list[int]]:
        return {k: items.tolist() for k, items in enumerate(self.members)}

    def expand_lambda(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64).reshape(-1)
        return np.full(self.num_nests, lam[0]) if self.shared_lambda else lam


def inclusive_values(T, nests: NestStructure, lam, avail=None) -> np.ndarray:
    """Inclusive value of every nest for every record, shape (B, K).

    Nests with no available item get ``-inf``.
    """
    T = np.asarray(T, dtype=np.float64)
    lam = nests.expand_lambda(lam)
    if avail is None:
        avail = np.ones(T.shape, dtype=bool)
    out = np.empty((T.shape[0], nests.num_nests))
    for k, idx in enumerate(nests.members):
        a = np.where(avail[:, idx], T[:, idx] / lam[k], -np.inf)
        top = a.max(axis=1)
        has = np.isfinite(top)
        safe = np.where(has, top, 0.0)
        with np.errstate(under="ignore"):
            s = np.exp(a - safe[:, None]).sum(axis=1)
        out[:, k] = np.where(has, safe + np.log(np.where(has, s, 1.0)), -np.inf)
    return out


def _as_joint(data):
    if isinstance(data, JointDataset):
        return data
    if isinstance(data, Mapping):
        return JointDataset(dict(data))
    raise ShapeMismatch("a nested logit evaluates a JointDataset with 'nest' and 'item' members")


class NestedLogitModel:
    """Nested logit with nest-level and item-level linear utilities.

    The joint dataset must have members named ``nest`` and ``item``.  The
    nest-level member treats nests as its alternatives: its ``item_``
    observables have one row per nest (build it with ``num_nests=K``).
    """

    def __init__(self, nest_to_item, nest_formula=None, item_formula=None, dataset=None,
                 nest_coef_variation_dict=None, nest_num_param_dict=None,
                 item_coef_variation_dict=None, item_num_param_dict=None,
                 num_users=None, shared_lambda=False, regularization=None,
                 regularization_weight=0.0, regularization_squared=False,
                 nest_spec: ModelSpec | None = None, item_spec: ModelSpec | None = None):
        self.nests = nest_to_item if isinstance(nest_to_item, NestStructure) else \
            NestStructure(nest_to_item, shared_lambda)
        self.regularization = make_regularization(regularization, regularization_weight,
                                                  regularization_squared)
        K, I = self.nests.num_nests, self.nests.num_items
        joint = None if dataset is None else _as_joint(dataset)

        if item_spec is None:
            if item_formula is not None:
                if joint is None:
                    raise ModelConfigError("formulas need a dataset to infer dimensions")
                item_spec = resolve(parse_formula(item_formula, allow_empty=True),
                                    joint["item"], num_items=I, num_users=num_users)
            elif item_coef_variation_dict is not None:
                item_spec = dict_config(item_coef_variation_dict, item_num_param_dict or {},
                                        I, num_users=num_users)
            else:
                raise ModelConfigError("the item-level model is required")
        if item_spec.is_empty:
            raise ModelConfigError(
                "the item-level model is empty; a nested logit without item-level "
                "utilities is a conditional logit over nests")
        if nest_spec is None:
            if nest_formula is not None:
                if joint is None:
                    raise ModelConfigError("formulas need a dataset to infer dimensions")
                nest_spec = resolve(parse_formula(nest_formula, allow_empty=True),
                                    joint["nest"], num_items=K, num_users=num_users)
            elif nest_coef_variation_dict is not None:
                nest_spec = dict_config(nest_coef_variation_dict, nest_num_param_dict or {},
                                        K, num_users=num_users)
            else:
                nest_spec = ModelSpec((), K, num_users)
        if nest_spec.num_items != K or item_spec.num_items != I:
            raise ShapeMismatch("model specs disagree with the nest structure")

        self.nest_spec = nest_spec
        self.item_spec = item_spec
        self.nest_linear = LinearUtility(nest_spec)
        self.item_linear = LinearUtility(item_spec)
        self.layout = Layout({"nest": nest_spec, "item": item_spec},
                             extras={"lambda": self.nests.num_lambdas})
        self.params = ParamStore(self.layout)
        self._nest_slice = self.layout.segment_slices["nest"]
        self._item_slice = self.layout.segment_slices["item"]
        lam_block = self.layout.find("lambda")
        self._lam_slice = slice(lam_block.offset, lam_block.stop)

    # ------------------------------------------------------------------
    @property
    def num_params(self) -> int:
        return self.layout.size

    @property
    def num_items(self) -> int:
        return self.nests.num_items

    @property
    def num_nests(self) -> int:
        return self.nests.num_nests

    @property
    def theta(self) -> np.ndarray:
        return self.params.theta

    @theta.setter
    def theta(self, value):
        self.params = ParamStore(self.layout, value)

    def initialize(self, method="zeros", seed=0, scale=0.1):
        theta = np.zeros(self.num_params)
        if method == "normal":
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
            theta = scale * rng.standard_normal(self.num_params)
            theta[self._lam_slice] = 0.0
        elif method != "zeros":
            raise ModelConfigError(f"unknown initialization {method!r}")
        self.theta = theta
        return self

    def lambdas(self, theta=None) -> np.ndarray:
        """Per-nest dissimilarity parameters, length K."""
        theta = self._theta(theta)
        return self.nests.expand_lambda(np.exp(theta[self._lam_slice]))

    def set_lambda(self, lam):
        lam = np.asarray(lam, dtype=np.float64).reshape(-1)
        if np.any(lam <= 0):
            raise ModelConfigError("lambda must be positive")
        theta = self.theta.copy()
        theta[self._lam_slice] = np.log(lam)
        self.theta = theta

    def set_regularization(self, regularization):
        self.regularization = regularization

    def penalized_mask(self) -> np.ndarray:
        mask = np.ones(self.num_params, dtype=bool)
        mask[self._lam_slice] = False
        return mask

    def _theta(self, theta):
        return self.params.theta if theta is None else np.asarray(theta, dtype=np.float64)

    # ------------------------------------------------------------------
    def _evaluate(self, data, theta, need_grad):
        joint = _as_joint(data)
        item_ds, nest_ds = joint["item"], joint["nest"]
        if item_ds.num_items != self.num_items:
            raise ShapeMismatch(
                f"item dataset has {item_ds.num_items} items, nests cover {self.num_items}")
        theta = self._theta(theta)
        B = len(item_ds)
        rows = np.arange(B)
        T = self.item_linear.utility(theta[self._item_slice], item_ds)
        if self.nest_spec.is_empty:
            W = np.zeros((B, self.num_nests))
        else:
            W = self.nest_linear.utility(theta[self._nest_slice], nest_ds)
        avail = item_ds.availability[item_ds.session_index]
        lam = self.lambdas(theta)
        nest_of = self.nests.nest_of_item

        iv = inclusive_values(T, self.nests, lam, avail)
        nest_avail = np.isfinite(iv)
        if not nest_avail.any(axis=1).all():
            raise EmptyChoiceSet("some records have no available item in any nest")
        iv_safe = np.where(nest_avail, iv, 0.0)
        V = np.where(nest_avail, W + lam * iv_safe, -np.inf)
        top = V.max(axis=1, keepdims=True)
        log_q = V - top - np.log(np.exp(V - top).sum(axis=1, keepdims=True))
        log_q = np.where(nest_avail, log_q, SENTINEL)

        log_cond = T / lam[nest_of] - iv_safe[:, nest_of]
        logp = np.where(avail, log_cond + log_q[:, nest_of], SENTINEL)
        chosen = logp[rows, item_ds.item_index]
        if not need_grad:
            return logp, chosen, None

        q = np.where(nest_avail, np.exp(log_q), 0.0)
        p_cond = np.where(avail, np.exp(np.where(avail, log_cond, 0.0)), 0.0)
        chosen_nest = nest_of[item_ds.item_index]
        in_chosen = nest_of[None, :] == chosen_nest[:, None]
        lam_item = lam[nest_of]
        q_item = q[:, nest_of]

        dlogp_T = in_chosen * p_cond * (1.0 - 1.0 / lam_item) - q_item * p_cond
        dlogp_T[rows, item_ds.item_index] += 1.0 / lam[chosen_nest]
        dlogp_W = -q
        dlogp_W[rows, chosen_nest] += 1.0

        # per-nest expected item utility under the within-nest probabilities
        weighted = p_cond * T
        ebar = np.zeros((B, self.num_nests))
        for k, idx in enumerate(self.nests.members):
            ebar[:, k] = weighted[:, idx].sum(axis=1)
        dlogp_lam = -q * (iv_safe - ebar / lam)
        lm = lam[chosen_nest]
        t_c = T[rows, item_ds.item_index]
        e_m = ebar[rows, chosen_nest]
        dlogp_lam[rows, chosen_nest] += (e_m - t_c) / lm**2 + iv_safe[rows, chosen_nest] - e_m / lm

        grad = np.zeros(self.num_params)
        grad[self._item_slice] = self.item_linear.backward(theta[self._item_slice], -dlogp_T, item_ds)
        if not self.nest_spec.is_empty:
            grad[self._nest_slice] = self.nest_linear.backward(theta[self._nest_slice], -dlogp_W, nest_ds)
        dloglam = -(dlogp_lam * lam).sum(axis=0)
        grad[self._lam_slice] = dloglam.sum(keepdims=True) if self.nests.shared_lambda else dloglam
        return logp, chosen, grad

    def utilities(self, data, theta=None):
        """Return ``(W, T)``: nest-level (B, K) and item-level (B, I) utilities."""
        joint = _as_joint(data)
        theta = self._theta(theta)
        T = self.item_linear.utility(theta[self._item_slice], joint["item"])
        if self.nest_spec.is_empty:
            W = np.zeros((len(joint), self.num_nests))
        else:
            W = self.nest_linear.utility(theta[self._nest_slice], joint["nest"])
        return W, T

    def log_prob(self, data, theta=None):
        logp, chosen, _ = self._evaluate(data, theta, need_grad=False)
        return logp, chosen

    nested_log_prob = log_prob

    def predict_proba(self, data, theta=None):
        logp, _ = self.log_prob(data, theta)
        return np.where(logp <= SENTINEL, 0.0, np.exp(logp))

    def neg_log_likelihood(self, data, theta=None) -> float:
        _, chosen = self.log_prob(data, theta)
        return float(-chosen.sum())

    def nll_and_grad(self, data, theta=None):
        _, chosen, grad = self._evaluate(data, theta, need_grad=True)
        return float(-chosen.sum()), grad

    def gradient(self, data, theta=None):
        return self.nll_and_grad(data, theta)[1]

    def _penalty(self, theta):
        mask = self.penalized_mask()
        value, g = penalty(theta[mask], self.regularization)
        full = np.zeros_like(theta)
        full[mask] = g
        return value, full

    def objective(self, data, theta=None) -> float:
        theta = self._theta(theta)
        nll = self.neg_log_likelihood(data, theta)
        reg = self.regularization
        if reg is None or reg.weight == 0:
            return nll
        return nll + self._penalty(theta)[0]

    def objective_and_grad(self, data, theta=None):
        theta = self._theta(theta)
        nll, grad = self.nll_and_grad(data, theta)
        reg = self.regularization
        if reg is None or reg.weight == 0:
            return nll, grad
        pen, pg = self._penalty(theta)
        return nll + pen, grad + pg

    # estimation protocol ---------------------------------------------------
    def subset_data(self, data, indices):
        return _as_joint(data).subset_joint(indices)

    def full_data(self, data):
        return _as_joint(data)

    def to_natural(self, theta) -> np.ndarray:
        out = np.asarray(theta, dtype=np.float64).copy()
        out[self._lam_slice] = np.exp(out[self._lam_slice])
        return out

    def natural_jacobian_diag(self, theta) -> np.ndarray:
        jac = np.ones(self.num_params)
        jac[self._lam_slice] = np.exp(np.asarray(theta)[self._lam_slice])
        return jac

    def check_lambda(self):
        lam = np.exp(self.theta[self._lam_slice])
        bad = (lam <= 0) | (lam > 1)
        if bad.any():
            warnings.warn(
                f"estimated lambda {np.round(lam, 4).tolist()} lies outside (0, 1]; "
                "the fitted model is not consistent with utility maximization for all "
                "utility values", RuntimeWarning, stacklevel=2)
        return not bad.any()

    # post-estimation ---------------------------------------------------------
    def get_coefficient(self, name: str, level: str | None = None):
        if name == "lambda":
            lam = np.exp(self.theta[self._lam_slice])
            return float(lam[0]) if self.nests.shared_lambda else lam.copy()
        if level is None:
            raise MissingLevel(f"pass level='nest' or level='item' for {name!r}")
        if level not in ("nest", "item"):
            raise MissingLevel(f"level must be 'nest' or 'item', got {level!r}")
        spec = self.nest_spec if level == "nest" else self.item_spec
        if name not in spec._names:
            raise UnknownCoefficient(f"no coefficient {name!r} in the {level}-level model")
        return _squeeze(self.params.materialize(name, level))

    def coefficient_rows(self, std_errors=None, item_labels=None, user_labels=None,
                         nest_labels=None):
        rows = []
        for level in ("nest", "item"):
            rows += coefficient_rows(self.params, std_errors, level,
                                     item_labels=nest_labels if level == "nest" else item_labels,
                                     user_labels=user_labels)
        lam = np.exp(self.theta[self._lam_slice])
        for k, value in enumerate(lam):
            se = None
            if std_errors is not None:
                s = std_errors[self._lam_slice][k]
                se = float(s) if np.isfinite(s) else None
            rows.append({
                "coefficient": "lambda",
                "level": "",
                "entity_index": "shared" if self.nests.shared_lambda else
                                (k if nest_labels is None else nest_labels[k]),
                "dim": 0,
                "estimate": float(value),
                "std_error": se,
            })
        return rows
