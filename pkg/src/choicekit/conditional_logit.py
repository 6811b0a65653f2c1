"""Conditional logit model.

Utilities are linear in the coefficients; choice probabilities are a softmax
over the items that are available in the record's session, taken separately
within each item category.
"""
from __future__ import annotations

import numpy as np

from choicekit import kernels
from choicekit.dataset import CategoryPartition, ChoiceDataset
from choicekit.errors import EmptyChoiceSet, ModelConfigError, ShapeMismatch
from choicekit.formula import ModelSpec, Regularization, dict_config, parse_formula, resolve
from choicekit.layout import Layout, LinearUtility, ParamStore

SENTINEL = kernels.SENTINEL


def make_regularization(regularization=None, weight=0.0, squared=False):
    if regularization is None or isinstance(regularization, Regularization):
        if regularization is None and weight:
            raise ModelConfigError("regularization_weight given without a norm")
        return regularization
    return Regularization(regularization, weight, squared)


def penalty(theta, reg: Regularization | None):
    """Value and (sub)gradient of the regularization term."""
    if reg is None or reg.weight == 0:
        return 0.0, np.zeros_like(theta)
    if reg.norm == "L1":
        return reg.weight * np.abs(theta).sum(), reg.weight * np.sign(theta)
    if reg.squared:
        return reg.weight * float(theta @ theta), 2.0 * reg.weight * theta
    norm = float(np.sqrt(theta @ theta))
    if norm == 0.0:
        return 0.0, np.zeros_like(theta)
    return reg.weight * norm, reg.weight * theta / norm


def masked_log_softmax(util, batch: ChoiceDataset, category: CategoryPartition | None = None):
    category = category or batch.category
    if category.num_items != util.shape[1]:
        raise ShapeMismatch("category partition does not match the number of items")
    logp, empty = kernels.masked_log_softmax(
        util, batch.availability, batch.session_index, category.category_of_item,
        category.num_categories)
    if empty:
        raise EmptyChoiceSet(
            f"{empty} (record, category) pairs have no available item in their session"
        )
    return logp


class ConditionalLogitModel:
    """Conditional logit with formula or dictionary configuration.

    Either pass ``formula`` together with a ``dataset`` (dimensions are read
    from the dataset), or ``coef_variation_dict`` with ``num_param_dict``.

    Examples
    --------
    >>> model = ConditionalLogitModel(
    ...     formula="(itemsession_cost|constant) + (intercept|item)",
    ...     dataset=dataset, num_items=4)               # doctest: +SKIP
    """

    def __init__(self, formula=None, dataset=None, coef_variation_dict=None,
                 num_param_dict=None, num_items=None, num_users=None,
                 regularization=None, regularization_weight=0.0,
                 regularization_squared=False, category=None, spec: ModelSpec | None = None):
        reg = make_regularization(regularization, regularization_weight, regularization_squared)
        if spec is None:
            if formula is not None:
                if dataset is None:
                    raise ModelConfigError("a formula needs a dataset to infer dimensions")
                spec = resolve(parse_formula(formula), dataset, num_items=num_items,
                               num_users=num_users, regularization=reg)
            elif coef_variation_dict is not None:
                if num_items is None:
                    raise ModelConfigError("num_items is required with dictionary configuration")
                spec = dict_config(coef_variation_dict, num_param_dict or {}, num_items,
                                   num_users=num_users, regularization=reg)
            else:
                raise ModelConfigError("provide a formula or coef_variation_dict")
        elif reg is not None:
            spec = spec.with_regularization(reg)
        if spec.is_empty:
            raise ModelConfigError("a conditional logit needs at least one term")
        self.spec = spec
        self.linear = LinearUtility(spec)
        self.layout = Layout({"item": spec})
        self.params = ParamStore(self.layout)
        self.category = category

    # ------------------------------------------------------------------
    @property
    def num_items(self) -> int:
        return self.spec.num_items

    @property
    def num_users(self):
        return self.spec.num_users

    @property
    def num_params(self) -> int:
        return self.layout.size

    @property
    def regularization(self):
        return self.spec.regularization

    @property
    def theta(self) -> np.ndarray:
        return self.params.theta

    @theta.setter
    def theta(self, value):
        self.params = ParamStore(self.layout, value)

    def initialize(self, method="zeros", seed=0, scale=0.1):
        if method == "zeros":
            self.theta = np.zeros(self.num_params)
        elif method == "normal":
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
            self.theta = scale * rng.standard_normal(self.num_params)
        else:
            raise ModelConfigError(f"unknown initialization {method!r}")
        return self

    def set_regularization(self, regularization):
        self.spec = self.spec.with_regularization(regularization)

    def penalized_mask(self) -> np.ndarray:
        return np.ones(self.num_params, dtype=bool)

    def _theta(self, theta):
        return self.params.theta if theta is None else np.asarray(theta, dtype=np.float64)

    def _check(self, batch):
        if not isinstance(batch, ChoiceDataset):
            raise ShapeMismatch("a conditional logit evaluates a ChoiceDataset")
        if batch.num_items != self.num_items:
            raise ShapeMismatch(
                f"dataset has {batch.num_items} items, model expects {self.num_items}")

    # ------------------------------------------------------------------
    def utilities(self, batch, theta=None) -> np.ndarray:
        self._check(batch)
        return self.linear.utility(self._theta(theta), batch)

    def log_prob(self, batch, theta=None):
        """Return ``(log P, chosen log-likelihood)``.

        Unavailable items carry ``SENTINEL`` (-1e30) instead of ``-inf``.
        """
        logp = masked_log_softmax(self.utilities(batch, theta), batch, self.category)
        chosen = logp[np.arange(len(batch)), batch.item_index]
        return logp, chosen

    def predict_proba(self, batch, theta=None) -> np.ndarray:
        logp, _ = self.log_prob(batch, theta)
        return np.where(logp <= SENTINEL, 0.0, np.exp(logp))

    def neg_log_likelihood(self, batch, theta=None) -> float:
        _, chosen = self.log_prob(batch, theta)
        return float(-chosen.sum())

    def nll_and_grad(self, batch, theta=None):
        theta = self._theta(theta)
        category = self.category or batch.category
        util = self.utilities(batch, theta)
        if category.num_items != util.shape[1]:
            raise ShapeMismatch("category partition does not match the number of items")
        resid, chosen, empty = kernels.softmax_residual(
            util, batch.availability, batch.session_index, category.category_of_item,
            category.num_categories, batch.item_index)
        if empty:
            raise EmptyChoiceSet(
                f"{empty} (record, category) pairs have no available item in their session")
        return float(-chosen.sum()), self.linear.backward(theta, resid, batch)

    def gradient(self, batch, theta=None) -> np.ndarray:
        return self.nll_and_grad(batch, theta)[1]

    def objective(self, batch, theta=None) -> float:
        theta = self._theta(theta)
        nll = self.neg_log_likelihood(batch, theta)
        reg = self.regularization
        if reg is None or reg.weight == 0:
            return nll
        return nll + penalty(theta, reg)[0]

    def objective_and_grad(self, batch, theta=None):
        theta = self._theta(theta)
        nll, grad = self.nll_and_grad(batch, theta)
        reg = self.regularization
        if reg is None or reg.weight == 0:
            return nll, grad
        pen, pen_grad = penalty(theta, reg)
        return nll + pen, grad + pen_grad

    # estimation protocol ------------------------------------------------
    def subset_data(self, data, indices):
        return data.subset(indices)

    def full_data(self, data):
        return data

    def to_natural(self, theta) -> np.ndarray:
        """Internal parameters are already on the natural scale."""
        return np.asarray(theta, dtype=np.float64).copy()

    def natural_jacobian_diag(self, theta) -> np.ndarray:
        return np.ones(self.num_params)

    # post-estimation ------------------------------------------------------
    def get_coefficient(self, name: str) -> np.ndarray | float:
        """Estimated coefficient by ``<observable>[<variation>]`` name.

        The trailing axis is dropped when the observable is one-dimensional,
        so ``intercept[constant]`` is a scalar and ``intercept[user]`` a
        vector of length U.
        """
        return _squeeze(self.params.materialize(name))

    def coefficient_rows(self, std_errors=None, item_labels=None, user_labels=None):
        return coefficient_rows(self.params, std_errors, "item",
                                item_labels=item_labels, user_labels=user_labels)


def _squeeze(mat):
    rows, cols = mat.shape
    if rows == 1 and cols == 1:
        return float(mat[0, 0])
    if rows == 1:
        return mat[0]
    if cols == 1:
        return mat[:, 0]
    return mat


def coefficient_rows(params: ParamStore, std_errors, level, item_labels=None,
                     user_labels=None):
    """Flatten the blocks of one level into export rows.

    Each row is a dict with keys ``coefficient, level, entity_index, dim,
    estimate, std_error``; ``std_error`` is None for pinned rows or when no
    standard errors were computed.
    """
    rows = []
    for b in params.layout.blocks:
        if b.level != level:
            continue
        est = params.materialize(b.name, b.level)
        se = None if std_errors is None else params.materialize(b.name, b.level, values=std_errors)
        for r in range(est.shape[0]):
            if b.variation == "constant":
                entity = ""
            elif b.variation == "user":
                entity = user_labels[r] if user_labels is not None else r
            else:
                entity = item_labels[r] if item_labels is not None else r
            for k in range(est.shape[1]):
                s = None
                if se is not None and np.isfinite(se[r, k]):
                    s = float(se[r, k])
                rows.append({
                    "coefficient": b.name,
                    "level": b.level,
                    "entity_index": entity,
                    "dim": k,
                    "estimate": float(est[r, k]),
                    "std_error": s,
                })
    return rows
