"""Columnar storage for choice records.

A :class:`ChoiceDataset` keeps one row per choice record (chosen item, user,
session) and stores observables once per entity instead of once per
(record, item) pair.  Observable names carry a prefix that tells the dataset
how the values vary:

=================  ======================  =====================
prefix             stored shape            broadcast per record
=================  ======================  =====================
``user_``          (U, K)                  row ``u[n]``
``item_``          (I, K)                  every row
``session_``       (S, K)                  row ``s[n]``
``itemsession_``   (S, I, K)               slab ``s[n]``
=================  ======================  =====================

``price_`` is accepted as an alias of ``itemsession_``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from choicekit.errors import (
    BadBatchSize,
    BadPrefix,
    ChosenItemUnavailable,
    IndexOutOfRange,
    LengthMismatch,
    ShapeMismatch,
)

VARIATIONS = ("user", "item", "session", "itemsession")

# longest prefix first so that "itemsession_" never resolves as "item_"
_PREFIXES = (
    ("itemsession_", "itemsession"),
    ("session_", "session"),
    ("price_", "itemsession"),
    ("user_", "user"),
    ("item_", "item"),
)


def observable_variation(name: str) -> str:
    """Return the variation level encoded in an observable name."""
    for prefix, variation in _PREFIXES:
        if name.startswith(prefix) and len(name) > len(prefix):
            return variation
    raise BadPrefix(
        f"observable {name!r} must start with one of "
        "'user_', 'item_', 'session_', 'itemsession_' (or 'price_')"
    )


@dataclass
class CategoryPartition:
    """Assignment of every item to exactly one category."""

    category_of_item: np.ndarray

    def __post_init__(self):
        cat = np.asarray(self.category_of_item)
        if cat.ndim != 1 or cat.size == 0:
            raise ShapeMismatch("category_of_item must be a nonempty 1-d array")
        if not np.issubdtype(cat.dtype, np.integer):
            raise ShapeMismatch("category_of_item must hold integers")
        if cat.min() < 0:
            raise IndexOutOfRange("category codes must be nonnegative")
        counts = np.bincount(cat)
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0).tolist()
            raise ShapeMismatch(f"categories {missing} contain no items")
        self.category_of_item = cat.astype(np.int64)

    @classmethod
    def single(cls, num_items: int) -> "CategoryPartition":
        return cls(np.zeros(num_items, dtype=np.int64))

    @property
    def num_categories(self) -> int:
        return int(self.category_of_item.max()) + 1

    @property
    def num_items(self) -> int:
        return int(self.category_of_item.size)

    def items_in(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.category_of_item == c)

    def __eq__(self, other):
        if not isinstance(other, CategoryPartition):
            return NotImplemented
        return np.array_equal(self.category_of_item, other.category_of_item)


def _as_index(name, values):
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ShapeMismatch(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ShapeMismatch(f"{name} must hold integers")
    arr = arr.astype(np.int64, copy=True)
    if arr.size and arr.min() < 0:
        raise IndexOutOfRange(f"{name} contains negative entries")
    return arr


class ChoiceDataset:
    """Choice records plus observables stored at their natural granularity.

    Parameters
    ----------
    item_index : array_like of int, shape (N,)
        Item chosen in each record.
    user_index : array_like of int, shape (N,), optional
        Deciding user of each record.  When omitted every record belongs to
        user 0 and ``has_user_index`` is False.
    session_index : array_like of int, shape (N,), optional
        Session of each record.  When omitted record ``n`` gets session ``n``.
    availability : array_like of bool, shape (S, I), optional
        ``availability[s, i]`` tells whether item ``i`` could be chosen in
        session ``s``.  Defaults to all True.
    category : CategoryPartition, optional
        Item categories; a single category by default.
    num_nests : int, optional
        Marks a nest-level dataset.  Item-axis observables (``item_`` and
        ``itemsession_``) are then indexed by nest and must have ``num_nests``
        entries along that axis.  Availability is still stored per item.
    dtype : numpy dtype
        Float precision for observables, ``float64`` (default) or ``float32``.
    observables : mapping, optional
        Named observables; may also be passed as keyword arguments.
    """

    def __init__(
        self,
        item_index,
        user_index=None,
        session_index=None,
        availability=None,
        category: CategoryPartition | None = None,
        num_nests: int | None = None,
        dtype=np.float64,
        observables: Mapping[str, np.ndarray] | None = None,
        **observable_kwargs,
    ):
        dtype = np.dtype(dtype)
        if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
            raise ValueError("dtype must be float64 or float32")
        self.dtype = dtype

        self.item_index = _as_index("item_index", item_index)
        n = self.item_index.size
        if n == 0:
            raise ShapeMismatch("item_index must be nonempty")

        self.has_user_index = user_index is not None
        if user_index is None:
            self.user_index = np.zeros(n, dtype=np.int64)
        else:
            self.user_index = _as_index("user_index", user_index)
        if session_index is None:
            self.session_index = np.arange(n, dtype=np.int64)
        else:
            self.session_index = _as_index("session_index", session_index)
        for name in ("user_index", "session_index"):
            if getattr(self, name).size != n:
                raise ShapeMismatch(
                    f"{name} has length {getattr(self, name).size}, expected {n}"
                )

        merged = dict(observables or {})
        for key, value in observable_kwargs.items():
            if key in merged:
                raise ValueError(f"observable {key!r} given twice")
            merged[key] = value
        self.observables: dict[str, np.ndarray] = {}
        self.variation: dict[str, str] = {}
        for name, value in merged.items():
            variation = observable_variation(name)
            arr = np.array(value, dtype=dtype, copy=True)
            expected_ndim = 3 if variation == "itemsession" else 2
            if arr.ndim == expected_ndim - 1:
                arr = arr[..., None]
            if arr.ndim != expected_ndim:
                raise ShapeMismatch(
                    f"{variation} observable {name!r} must be {expected_ndim}-d, "
                    f"got shape {arr.shape}"
                )
            if arr.shape[-1] < 1:
                raise ShapeMismatch(f"observable {name!r} has zero columns")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"observable {name!r} contains non-finite values")
            self.observables[name] = arr
            self.variation[name] = variation

        self.num_nests = None if num_nests is None else int(num_nests)
        if self.num_nests is not None and self.num_nests < 1:
            raise ShapeMismatch("num_nests must be positive")

        avail = None if availability is None else np.asarray(availability)
        if avail is not None:
            if avail.ndim != 2:
                raise ShapeMismatch("availability must be an (S, I) matrix")
            avail = avail.astype(bool, copy=True)

        self.num_users = self._infer("user", self.user_index, [])
        self.num_items = self._infer(
            "item",
            self.item_index,
            [] if avail is None else [("availability", avail.shape[1])],
            obs_axis=self.num_nests is None,
        )
        self.num_sessions = self._infer(
            "session",
            self.session_index,
            [] if avail is None else [("availability", avail.shape[0])],
        )
        if self.num_nests is not None:
            for name, arr in self.observables.items():
                var = self.variation[name]
                axis = {"item": 0, "itemsession": 1}.get(var)
                if axis is not None and arr.shape[axis] != self.num_nests:
                    raise ShapeMismatch(
                        f"nest-level observable {name!r} has {arr.shape[axis]} "
                        f"entries on the nest axis, expected {self.num_nests}"
                    )

        if avail is None:
            avail = np.ones((self.num_sessions, self.num_items), dtype=bool)
        self.availability = avail

        if category is None:
            category = CategoryPartition.single(self.num_items)
        elif category.num_items != self.num_items:
            raise ShapeMismatch(
                f"category partition covers {category.num_items} items, "
                f"dataset has {self.num_items}"
            )
        self.category = category

        empty = np.flatnonzero(~self.availability.any(axis=1))
        if empty.size:
            raise ChosenItemUnavailable(
                f"sessions {empty[:10].tolist()} have no available item"
            )
        ok = self.availability[self.session_index, self.item_index]
        if not ok.all():
            bad = np.flatnonzero(~ok)
            raise ChosenItemUnavailable(
                f"records {bad[:10].tolist()} chose an item that was unavailable "
                "in their session"
            )

    def _infer(self, level, index, extra, obs_axis=True):
        """Reconcile an entity count from its index array and stored shapes."""
        demanded = int(index.max()) + 1
        dims = list(extra)
        if obs_axis:
            for name, arr in self.observables.items():
                var = self.variation[name]
                if var == level:
                    dims.append((name, arr.shape[0]))
                elif level == "item" and var == "itemsession":
                    dims.append((name, arr.shape[1]))
                elif level == "session" and var == "itemsession":
                    dims.append((name, arr.shape[0]))
        if dims:
            sizes = {size for _, size in dims}
            if len(sizes) > 1:
                desc = ", ".join(f"{name}={size}" for name, size in dims)
                raise ShapeMismatch(f"inconsistent number of {level}s: {desc}")
            size = sizes.pop()
            if size < demanded:
                raise ShapeMismatch(
                    f"{level}_index requires at least {demanded} {level}s but "
                    f"{dims[0][0]} provides {size}"
                )
            return size
        return demanded

    # ------------------------------------------------------------------
    # container protocol

    def __len__(self):
        return int(self.item_index.size)

    @property
    def num_records(self) -> int:
        return len(self)

    @property
    def num_alternatives(self) -> int:
        """Length of the item axis of item-level observables."""
        return self.num_items if self.num_nests is None else self.num_nests

    def observables_of(self, variation: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.observables.items() if self.variation[k] == variation}

    def __getitem__(self, indices):
        return self.subset(indices)

    def __eq__(self, other):
        if not isinstance(other, ChoiceDataset):
            return NotImplemented
        if self.observables.keys() != other.observables.keys():
            return False
        return (
            self.has_user_index == other.has_user_index
            and self.num_nests == other.num_nests
            and self.dtype == other.dtype
            and self.category == other.category
            and np.array_equal(self.item_index, other.item_index)
            and np.array_equal(self.user_index, other.user_index)
            and np.array_equal(self.session_index, other.session_index)
            and np.array_equal(self.availability, other.availability)
            and all(
                np.array_equal(self.observables[k], other.observables[k])
                for k in self.observables
            )
        )

    __hash__ = None

    def __repr__(self):
        parts = [
            f"item_index=[{len(self)}]",
            f"user_index=[{len(self)}]",
            f"session_index=[{len(self)}]",
            f"item_availability={list(self.availability.shape)}",
        ]
        parts += [f"{k}={list(v.shape)}" for k, v in self.observables.items()]
        return f"ChoiceDataset({', '.join(parts)})"

    # ------------------------------------------------------------------
    # copies

    def clone(self) -> "ChoiceDataset":
        """Deep copy; no array is shared with the original."""
        return copy.deepcopy(self)

    def _check_indices(self, indices):
        ix = np.asarray(indices)
        if ix.dtype == bool:
            raise IndexOutOfRange("boolean masks are not supported; pass positions")
        ix = np.atleast_1d(ix).astype(np.int64)
        if ix.ndim != 1:
            raise IndexOutOfRange("record indices must be one-dimensional")
        if ix.size and (ix.min() < 0 or ix.max() >= len(self)):
            raise IndexOutOfRange(
                f"record indices must lie in [0, {len(self)}), got "
                f"[{ix.min()}, {ix.max()}]"
            )
        return ix

    def subset(self, indices) -> "ChoiceDataset":
        """Records ``indices`` in the given order, with full observable copies."""
        ix = self._check_indices(indices)
        if ix.size == 0:
            raise IndexOutOfRange("a subset needs at least one record")
        out = copy.copy(self)
        out.item_index = self.item_index[ix]
        out.user_index = self.user_index[ix]
        out.session_index = self.session_index[ix]
        out.availability = self.availability.copy()
        out.observables = {k: v.copy() for k, v in self.observables.items()}
        out.variation = dict(self.variation)
        out.category = CategoryPartition(self.category.category_of_item.copy())
        return out

    # ------------------------------------------------------------------
    # views

    def expand_observables(self, indices=None) -> dict[str, np.ndarray]:
        """Broadcast every observable to shape (B, I, K) for the given records.

        The returned arrays are read-only broadcast views where possible.
        """
        ix = np.arange(len(self)) if indices is None else self._check_indices(indices)
        users = self.user_index[ix]
        sessions = self.session_index[ix]
        n_alt = self.num_alternatives
        out = {}
        for name, arr in self.observables.items():
            var = self.variation[name]
            k = arr.shape[-1]
            if var == "user":
                out[name] = np.broadcast_to(arr[users][:, None, :], (ix.size, n_alt, k))
            elif var == "item":
                out[name] = np.broadcast_to(arr[None, :, :], (ix.size, n_alt, k))
            elif var == "session":
                out[name] = np.broadcast_to(arr[sessions][:, None, :], (ix.size, n_alt, k))
            else:
                out[name] = arr[sessions]
        return out

    @property
    def x_dict(self) -> dict[str, np.ndarray]:
        return self.expand_observables()

    def availability_rows(self, indices=None) -> np.ndarray:
        """Availability of every item for each record, shape (B, I)."""
        if indices is None:
            return self.availability[self.session_index]
        return self.availability[self.session_index[self._check_indices(indices)]]

    def iterate_batches(self, batch_size=-1, shuffle=False, seed=0) -> Iterator[tuple[np.ndarray, "ChoiceDataset"]]:
        """Yield ``(record_indices, subset)`` pairs covering every record once."""
        for ix in batch_indices(len(self), batch_size, shuffle, seed):
            yield ix, self.subset(ix)

    # ------------------------------------------------------------------
    # reporting

    def validate(self) -> list[str]:
        """Re-check all construction invariants; returns a list of violations."""
        problems = []
        n = len(self)
        for name in ("item_index", "user_index", "session_index"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                problems.append(f"{name} has shape {arr.shape}, expected ({n},)")
        limits = {
            "item_index": self.num_items,
            "user_index": self.num_users,
            "session_index": self.num_sessions,
        }
        for name, limit in limits.items():
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0 or arr.max() >= limit):
                problems.append(f"{name} outside [0, {limit})")
        if self.availability.shape != (self.num_sessions, self.num_items):
            problems.append(
                f"availability shape {self.availability.shape} != "
                f"({self.num_sessions}, {self.num_items})"
            )
        else:
            if not problems and not self.availability[self.session_index, self.item_index].all():
                problems.append("some chosen items are unavailable in their session")
            if not self.availability.any(axis=1).all():
                problems.append("some sessions have no available item")
        n_alt = self.num_alternatives
        expected = {
            "user": lambda a: a.shape[0] == self.num_users,
            "item": lambda a: a.shape[0] == n_alt,
            "session": lambda a: a.shape[0] == self.num_sessions,
            "itemsession": lambda a: a.shape[:2] == (self.num_sessions, n_alt),
        }
        for name, arr in self.observables.items():
            if not expected[self.variation[name]](arr):
                problems.append(f"observable {name} has unexpected shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                problems.append(f"observable {name} has non-finite values")
        return problems

    def summary(self) -> str:
        lines = [
            "ChoiceDataset summary",
            f"  records (N):  {len(self)}",
            f"  users (U):    {self.num_users}",
            f"  items (I):    {self.num_items}",
            f"  sessions (S): {self.num_sessions}",
            f"  categories:   {self.category.num_categories}",
        ]
        if self.num_nests is not None:
            lines.append(f"  nests:        {self.num_nests}")
        density = float(self.availability.mean())
        lines.append(f"  availability density: {density:.4f}")
        lines.append(f"  observables: {len(self.observables)}")
        for name, arr in self.observables.items():
            lines.append(f"    {name:<28s} {self.variation[name]:<12s} {tuple(arr.shape)}")
        return "\n".join(lines)


def build_dataset(item_index, user_index=None, session_index=None, availability=None,
                  observables=None, **kwargs) -> ChoiceDataset:
    return ChoiceDataset(item_index, user_index=user_index, session_index=session_index,
                         availability=availability, observables=observables, **kwargs)


def batch_indices(n: int, batch_size: int = -1, shuffle: bool = False, seed=0) -> list[np.ndarray]:
    """Partition ``range(n)`` into batches.

    ``batch_size=-1`` gives one full batch.  With ``shuffle`` the order is a
    permutation drawn from a Philox stream keyed by ``seed``; ``seed`` may be
    an int or a sequence of ints (e.g. ``(seed, epoch)``).
    """
    if batch_size == 0 or batch_size < -1:
        raise BadBatchSize(f"batch_size must be -1 or positive, got {batch_size}")
    if shuffle:
        order = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed))).permutation(n)
    else:
        order = np.arange(n)
    if batch_size == -1 or batch_size >= n:
        return [order]
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


class JointDataset:
    """Several datasets over the same records, indexed together."""

    def __init__(self, datasets: Mapping[str, ChoiceDataset] | None = None, **kwargs):
        members = dict(datasets or {})
        members.update(kwargs)
        if not members:
            raise LengthMismatch("a JointDataset needs at least one member")
        lengths = {name: len(d) for name, d in members.items()}
        if len(set(lengths.values())) > 1:
            raise LengthMismatch(f"member datasets differ in length: {lengths}")
        first = next(iter(members.values()))
        for name, d in members.items():
            if not np.array_equal(d.item_index, first.item_index):
                raise LengthMismatch(f"member {name!r} has a different item_index")
        self.datasets = members

    def __len__(self):
        return len(next(iter(self.datasets.values())))

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.datasets[key]
        return self.subset(key)

    def __contains__(self, name):
        return name in self.datasets

    def subset(self, indices) -> dict[str, ChoiceDataset]:
        return {name: d.subset(indices) for name, d in self.datasets.items()}

    def subset_joint(self, indices) -> "JointDataset":
        return JointDataset(self.subset(indices))

    def clone(self) -> "JointDataset":
        return JointDataset({k: v.clone() for k, v in self.datasets.items()})

    def __eq__(self, other):
        if not isinstance(other, JointDataset):
            return NotImplemented
        return self.datasets.keys() == other.datasets.keys() and all(
            self.datasets[k] == other.datasets[k] for k in self.datasets
        )

    __hash__ = None

    def __repr__(self):
        inner = "\n".join(f"    {k}: {v!r}" for k, v in self.datasets.items())
        return f"JointDataset with {len(self.datasets)} sub-datasets: (\n{inner}\n)"


def join(**datasets) -> JointDataset:
    return JointDataset(datasets)


def subset_joint(joint: JointDataset, indices) -> dict[str, ChoiceDataset]:
    return joint.subset(indices)
