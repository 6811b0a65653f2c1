"""Flat parameter vectors and the linear utility they parameterize.

Every model keeps its coefficients in one flat float64 vector.  A
:class:`Layout` records which slice belongs to which coefficient block, and
:class:`LinearUtility` evaluates ``sum_p theta_p(selector)' x_p`` for a batch
of records together with the adjoint needed for analytic gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from choicekit import kernels
from choicekit.errors import ShapeMismatch, UnknownCoefficient
from choicekit.formula import INTERCEPT, CoefficientSpec, ModelSpec


@dataclass(frozen=True)
class Block:
    level: str
    name: str
    offset: int
    rows: int
    cols: int
    variation: str
    pinned_first_row: bool = False

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def stop(self) -> int:
        return self.offset + self.size


class Layout:
    """Offsets of coefficient blocks inside the flat parameter vector.

    ``segments`` maps a level name (``"item"``, ``"nest"``) to its model spec;
    ``extras`` appends free-standing blocks such as the nested-logit
    ``lambda`` vector.
    """

    def __init__(self, segments: Mapping[str, ModelSpec], extras: Mapping[str, int] | None = None):
        self.segments = dict(segments)
        self.blocks: list[Block] = []
        self.segment_slices: dict[str, slice] = {}
        offset = 0
        for level, spec in self.segments.items():
            start = offset
            for t in spec.terms:
                self.blocks.append(Block(level, t.name, offset, t.rows, t.dim, t.variation,
                                         pinned_first_row=t.variation == "item"))
                offset += t.param_count
            self.segment_slices[level] = slice(start, offset)
        for name, size in (extras or {}).items():
            self.blocks.append(Block("", name, offset, int(size), 1, "extra"))
            offset += int(size)
        self.size = offset

    def find(self, name: str, level: str | None = None) -> Block:
        hits = [b for b in self.blocks if b.name == name and (level is None or b.level in (level, ""))]
        if not hits:
            where = "" if level is None else f" at level {level!r}"
            raise UnknownCoefficient(f"no coefficient named {name!r}{where}")
        if len(hits) > 1:
            levels = sorted(b.level for b in hits)
            raise UnknownCoefficient(f"{name!r} exists at levels {levels}; pass level=")
        return hits[0]

    def check_tiling(self) -> bool:
        pos = 0
        for b in self.blocks:
            if b.offset != pos:
                return False
            pos = b.stop
        return pos == self.size


class ParamStore:
    """A flat parameter vector plus its :class:`Layout`."""

    def __init__(self, layout: Layout, theta=None):
        self.layout = layout
        if theta is None:
            theta = np.zeros(layout.size)
        theta = np.array(theta, dtype=np.float64, copy=True)
        if theta.shape != (layout.size,):
            raise ShapeMismatch(f"expected {layout.size} parameters, got shape {theta.shape}")
        self.theta = theta

    def __len__(self):
        return self.layout.size

    def block(self, name, level=None) -> np.ndarray:
        """Writable (rows, cols) view of the free parameters of one block."""
        b = self.layout.find(name, level)
        return self.theta[b.offset:b.stop].reshape(b.rows, b.cols)

    def materialize(self, name, level=None, values=None) -> np.ndarray:
        """Coefficient matrix including the pinned zero row of 'item' blocks.

        ``values`` substitutes another vector aligned with the layout (e.g.
        standard errors); pinned rows are then filled with NaN.
        """
        b = self.layout.find(name, level)
        src = self.theta if values is None else np.asarray(values, dtype=np.float64)
        free = src[b.offset:b.stop].reshape(b.rows, b.cols)
        if b.pinned_first_row:
            fill = 0.0 if values is None else np.nan
            free = np.vstack([np.full((1, b.cols), fill), free])
        return free.copy()

    def copy(self) -> "ParamStore":
        return ParamStore(self.layout, self.theta)


def _full_rows(theta_block, variation, cols):
    if variation == "item":
        return np.vstack([np.zeros((1, cols)), theta_block])
    return theta_block


class LinearUtility:
    """Utility ``sum_p theta_p' x_p`` for one :class:`ModelSpec`.

    ``num_alternatives`` is the item axis the utilities live on: items for a
    conditional logit, nests for the nest level of a nested logit.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.num_alternatives = spec.num_items
        self.size = spec.total_params

    def _unpack(self, theta):
        pos = 0
        for t in self.spec.terms:
            blk = theta[pos:pos + t.param_count].reshape(t.rows, t.dim)
            pos += t.param_count
            yield t, blk

    def _observable(self, t: CoefficientSpec, batch):
        arr = batch.observables.get(t.observable)
        if arr is None:
            raise ShapeMismatch(f"batch lacks observable {t.observable!r}")
        var = batch.variation[t.observable]
        if arr.shape[-1] != t.dim:
            raise ShapeMismatch(
                f"{t.observable!r} has {arr.shape[-1]} columns but the model expects {t.dim}"
            )
        axis = {"item": 0, "itemsession": 1}.get(var)
        if axis is not None and arr.shape[axis] != self.num_alternatives:
            raise ShapeMismatch(
                f"{t.observable!r} has {arr.shape[axis]} alternatives, "
                f"model expects {self.num_alternatives}"
            )
        return var, np.asarray(arr, dtype=np.float64)

    def _check_batch(self, batch):
        if self.spec.num_users is not None and any(t.variation == "user" for t in self.spec.terms):
            if batch.user_index.size and batch.user_index.max() >= self.spec.num_users:
                raise ShapeMismatch(
                    f"batch has user index {batch.user_index.max()} but model was "
                    f"built for {self.spec.num_users} users"
                )

    def utility(self, theta, batch) -> np.ndarray:
        """Utilities of shape (B, A) before any availability masking.

        Terms that depend only on (user, alternative) or (session,
        alternative) are first summed into small U x A and S x A tables so
        the (B, A) result is assembled with as few full passes as possible.
        """
        self._check_batch(batch)
        users = batch.user_index
        sessions = batch.session_index
        A = self.num_alternatives
        by_user = None     # (U, A) or broadcastable (1, A)
        by_session = None  # (S, A)
        direct = []        # full (B, A) contributions

        def add_user(t):
            nonlocal by_user
            by_user = t if by_user is None else by_user + t

        def add_session(t):
            nonlocal by_session
            by_session = t if by_session is None else by_session + t

        for t, blk in self._unpack(theta):
            coef = _full_rows(blk, t.variation, t.dim)
            v = t.variation
            if t.observable == INTERCEPT:
                if v == "constant":
                    add_user(np.full((1, A), coef[0, 0]))
                elif v == "user":
                    add_user(np.repeat(coef[:, :1], A, axis=1))
                else:
                    add_user(coef[:, 0][None, :])
                continue
            kind, x = self._observable(t, batch)
            if kind == "user":
                if v == "constant":
                    add_user(np.repeat((x @ coef[0])[:, None], A, axis=1))
                elif v == "user":
                    add_user(np.repeat(np.einsum("uk,uk->u", x, coef)[:, None], A, axis=1))
                else:
                    add_user(x @ coef.T)
            elif kind == "item":
                if v == "constant":
                    add_user((x @ coef[0])[None, :])
                elif v == "user":
                    add_user(coef @ x.T)
                else:
                    add_user(np.einsum("ak,ak->a", x, coef)[None, :])
            elif kind == "session":
                if v == "constant":
                    add_session(np.repeat((x @ coef[0])[:, None], A, axis=1))
                elif v == "user":
                    direct.append(np.repeat(
                        np.einsum("bk,bk->b", x[sessions], coef[users])[:, None], A, axis=1))
                else:
                    add_session(x @ coef.T)
            else:
                if v == "constant":
                    add_session(x @ coef[0])
                elif v == "user":
                    direct.append(kernels.gather_dot3(x, coef, sessions, users))
                else:
                    add_session(np.einsum("sak,ak->sa", x, coef))

        n = len(batch)
        if by_user is None:
            out = np.zeros((n, A))
        elif by_user.shape[0] == 1:
            out = np.repeat(by_user, n, axis=0)
        else:
            out = by_user[self._row_index(users, by_user.shape[0])]
        if by_session is not None:
            out += by_session[sessions]
        for d in direct:
            out += d
        return out

    @staticmethod
    def _row_index(users, n_rows):
        if users.size and users.max() >= n_rows:
            raise ShapeMismatch(f"user index {users.max()} outside {n_rows} coefficient rows")
        return users

    def backward(self, theta, grad_util, batch) -> np.ndarray:
        """Gradient w.r.t. ``theta`` given ``d objective / d utility`` (B, A)."""
        users = batch.user_index
        sessions = batch.session_index
        g = np.ascontiguousarray(grad_util, dtype=np.float64)
        cache = {}

        def per_user_alt():
            # one pass over g; the other user/item reductions derive from it
            if "GU" not in cache:
                cache["GU"] = kernels.scatter_add_rows(g, users, self._n_users(batch))
            return cache["GU"]

        def per_user_total():
            if "gu" not in cache:
                cache["gu"] = per_user_alt().sum(axis=1)
            return cache["gu"]

        def per_alt():
            if "ga" not in cache:
                cache["ga"] = per_user_alt().sum(axis=0)
            return cache["ga"]

        def per_record():
            if "gr" not in cache:
                cache["gr"] = g.sum(axis=1)
            return cache["gr"]

        def per_session_alt():
            if "GS" not in cache:
                cache["GS"] = kernels.scatter_add_rows(g, sessions, batch.num_sessions)
            return cache["GS"]

        grads = []
        for t, _ in self._unpack(theta):
            v = t.variation
            if t.observable == INTERCEPT:
                if v == "constant":
                    gr = np.array([[per_alt().sum()]])
                elif v == "user":
                    gr = per_user_total()[:, None]
                else:
                    gr = per_alt()[:, None]
            else:
                kind, x = self._observable(t, batch)
                if kind == "user":
                    if v == "constant":
                        gr = (x.T @ per_user_total())[None, :]
                    elif v == "user":
                        gr = per_user_total()[:, None] * x
                    else:
                        gr = per_user_alt().T @ x
                elif kind == "item":
                    if v == "constant":
                        gr = (per_alt() @ x)[None, :]
                    elif v == "user":
                        gr = per_user_alt() @ x
                    else:
                        gr = per_alt()[:, None] * x
                elif kind == "session":
                    if v == "constant":
                        gr = (x.T @ per_session_alt().sum(axis=1))[None, :]
                    elif v == "user":
                        gr = kernels.scatter_add_rows(per_record()[:, None] * x[sessions], users,
                                                      self._n_users(batch))
                    else:
                        gr = per_session_alt().T @ x
                else:
                    if v == "constant":
                        gr = np.einsum("sa,sak->k", per_session_alt(), x)[None, :]
                    elif v == "user":
                        gr = kernels.gather_dot3_grad(x, g, sessions, users, self._n_users(batch))
                    else:
                        gr = np.einsum("sa,sak->ak", per_session_alt(), x)
            if v == "item":
                gr = gr[1:]
            if v == "user":
                gr = gr[: t.rows]
            grads.append(np.asarray(gr, dtype=np.float64).reshape(-1))
        if not grads:
            return np.zeros(0)
        return np.concatenate(grads)

    def _n_users(self, batch):
        return max(self.spec.num_users or 0, batch.num_users)
