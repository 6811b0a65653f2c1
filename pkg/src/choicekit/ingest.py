"""Build a :class:`ChoiceDataset` from long-format tables.

The main table has one row per (record, candidate item).  Rows sharing a
record label form one choice record; the candidate rows of all records in a
session define which items were available in that session.  Observables come
either from columns of the main table or from side tables keyed by user,
item and/or session labels.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from choicekit.dataset import VARIATIONS as OBSERVABLE_VARIATIONS, ChoiceDataset
from choicekit.errors import (
    DuplicateKey,
    InconsistentUserOrSession,
    IngestError,
    MissingKeyColumn,
    MultipleChosen,
    NoneChosen,
)

ENCODING_MODES = ("first-appearance", "sorted")


class LabelEncoding:
    """Bijection between raw labels and codes ``0..M-1``."""

    def __init__(self, labels: Sequence, mode: str = "first-appearance"):
        self.labels = list(labels)
        self.mode = mode
        self._code = {label: i for i, label in enumerate(self.labels)}
        if len(self._code) != len(self.labels):
            raise ValueError("labels must be distinct")

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return isinstance(other, LabelEncoding) and self.labels == other.labels

    def __repr__(self):
        shown = ", ".join(f"{lab!r}:{i}" for i, lab in enumerate(self.labels[:5]))
        more = ", ..." if len(self.labels) > 5 else ""
        return f"LabelEncoding({{{shown}{more}}}, mode={self.mode!r})"

    def encode(self, values) -> np.ndarray:
        try:
            return np.array([self._code[v] for v in values], dtype=np.int64)
        except KeyError as exc:
            raise IngestError(f"label {exc.args[0]!r} is not in the encoding") from None

    def decode(self, codes) -> list:
        return [self.labels[int(c)] for c in np.asarray(codes).reshape(-1)]

    def to_json(self) -> dict:
        return {"mode": self.mode, "labels": [_plain(v) for v in self.labels]}

    @classmethod
    def from_json(cls, obj) -> "LabelEncoding":
        return cls(obj["labels"], obj.get("mode", "first-appearance"))


def _plain(v):
    """numpy scalars -> Python scalars for JSON."""
    return v.item() if isinstance(v, np.generic) else v


def encode_labels(values, mode: str = "first-appearance"):
    """Map labels to consecutive integer codes.

    ``first-appearance`` numbers labels in the order they are first seen,
    ``sorted`` in ascending label order.  Returns ``(codes, LabelEncoding)``.
    """
    if mode not in ENCODING_MODES:
        raise ValueError(f"encoding mode must be one of {ENCODING_MODES}, got {mode!r}")
    values = pd.Series(values) if not isinstance(values, pd.Series) else values
    if len(values) == 0:
        raise IngestError("cannot encode an empty column")
    if values.isna().any():
        raise IngestError("label column contains missing values")
    codes, uniques = pd.factorize(values, sort=(mode == "sorted"))
    return codes.astype(np.int64), LabelEncoding([_plain(u) for u in uniques], mode)


@dataclass(frozen=True)
class ColumnRoles:
    record: str
    item: str
    choice: str
    user: str | None = None
    session: str | None = None

    def key_for(self, variation: str) -> list[str]:
        keys = {"user": [self.user], "item": [self.item], "session": [self.session],
                "itemsession": [self.session, self.item]}[variation]
        if any(k is None for k in keys):
            raise MissingKeyColumn(
                f"{variation} observables need a {'/'.join(_key_role(variation))} column role")
        return keys


def _key_role(variation):
    return {"itemsession": ["session", "item"]}.get(variation, [variation])


def observable_name(variation: str, name: str) -> str:
    """Dataset key of an observable: ``<variation>_<name>`` unless already prefixed."""
    prefix = f"{variation}_"
    return name if name.startswith(prefix) else prefix + name


def _require(table, cols, what):
    missing = [c for c in cols if c not in table.columns]
    if missing:
        raise MissingKeyColumn(f"{what} lacks column(s) {missing}")


def _numeric(frame, what) -> np.ndarray:
    try:
        return frame.apply(pd.to_numeric).to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise IngestError(f"{what} has non-numeric values: {exc}") from None


def _constant_within(codes, frame, what):
    """Values per code; raises if a code maps to more than one value row."""
    df = frame.copy()
    df["__code"] = codes
    counts = df.groupby("__code", sort=True).nunique(dropna=False)
    bad = counts.index[(counts > 1).any(axis=1)]
    if len(bad):
        raise InconsistentUserOrSession(f"{what} varies within code(s) {bad[:10].tolist()}")
    return df.groupby("__code", sort=True).first()


def from_long_format(main: pd.DataFrame, roles: ColumnRoles,
                     obs_from_columns: Mapping[str, Sequence[str]] | None = None,
                     obs_from_tables: Mapping[str, Mapping[str, pd.DataFrame]] | None = None,
                     mode: str = "first-appearance"):
    """Convert a long-format table into ``(ChoiceDataset, encodings)``.

    ``obs_from_columns`` maps a variation (``user``, ``item``, ``session``,
    ``itemsession``) to main-table columns; each column becomes a
    one-dimensional observable ``<variation>_<column>``.
    ``obs_from_tables`` maps a variation to ``{name: side_table}``; the side
    table holds the key column(s) of that variation plus value columns, which
    together form the observable ``<variation>_<name>``.

    Records are numbered in order of first appearance of their label.
    ``encodings`` holds the :class:`LabelEncoding` of items, users, sessions
    and records.
    """
    obs_from_columns = dict(obs_from_columns or {})
    obs_from_tables = dict(obs_from_tables or {})
    for var in list(obs_from_columns) + list(obs_from_tables):
        if var not in OBSERVABLE_VARIATIONS:
            raise IngestError(f"unknown observable variation {var!r}")
    keys = [c for c in (roles.record, roles.item, roles.choice, roles.user, roles.session) if c]
    _require(main, keys, "main table")
    if len(main) == 0:
        raise IngestError("main table is empty")
    main = main.reset_index(drop=True)

    rec_codes, rec_enc = encode_labels(main[roles.record], "first-appearance")
    n_rec = len(rec_enc)
    choice = pd.to_numeric(main[roles.choice], errors="coerce")
    if choice.isna().any() or not choice.isin([0, 1]).all():
        raise IngestError(f"choice column {roles.choice!r} must contain only 0 and 1")
    chosen_per_rec = np.bincount(rec_codes, weights=choice.to_numpy(), minlength=n_rec)
    if (chosen_per_rec == 0).any():
        bad = rec_enc.decode(np.flatnonzero(chosen_per_rec == 0)[:10])
        raise NoneChosen(f"records {bad} have no chosen row")
    if (chosen_per_rec > 1).any():
        bad = rec_enc.decode(np.flatnonzero(chosen_per_rec > 1)[:10])
        raise MultipleChosen(f"records {bad} have more than one chosen row")

    for role in (roles.user, roles.session):
        if role is None:
            continue
        per_rec = pd.Series(main[role].to_numpy()).groupby(rec_codes).nunique(dropna=False)
        bad = per_rec.index[per_rec > 1]
        if len(bad):
            raise InconsistentUserOrSession(
                f"column {role!r} is not constant within records {rec_enc.decode(bad[:10])}")

    encodings = {"record": rec_enc}
    item_codes, encodings["item"] = encode_labels(main[roles.item], mode)
    num_items = len(encodings["item"])
    user_codes = None
    if roles.user is not None:
        user_codes, encodings["user"] = encode_labels(main[roles.user], mode)
    if roles.session is not None:
        sess_codes, encodings["session"] = encode_labels(main[roles.session], mode)
    else:
        # without a session column every record is its own session
        sess_codes = rec_codes
        encodings["session"] = LabelEncoding(rec_enc.labels, "first-appearance")
    num_sessions = len(encodings["session"])

    dup = pd.DataFrame({"r": rec_codes, "i": item_codes}).duplicated()
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise DuplicateKey(
            f"record {rec_enc.labels[rec_codes[row]]!r} lists item "
            f"{encodings['item'].labels[item_codes[row]]!r} more than once")

    chosen_rows = np.flatnonzero(choice.to_numpy() == 1)
    order = np.argsort(rec_codes[chosen_rows], kind="stable")
    chosen_rows = chosen_rows[order]
    item_index = item_codes[chosen_rows]
    user_index = None if user_codes is None else user_codes[chosen_rows]
    session_index = sess_codes[chosen_rows]

    availability = np.zeros((num_sessions, num_items), dtype=bool)
    availability[sess_codes, item_codes] = True

    level_codes = {"user": user_codes, "item": item_codes, "session": sess_codes}
    level_sizes = {"user": len(encodings["user"]) if user_codes is not None else 0,
                   "item": num_items, "session": num_sessions}
    observables: dict[str, np.ndarray] = {}

    def add(name, value):
        if name in observables:
            raise IngestError(f"observable {name!r} is supplied twice")
        observables[name] = value

    for var, cols in obs_from_columns.items():
        cols = list(cols)
        _require(main, cols, "main table")
        roles.key_for(var)
        for col in cols:
            name = observable_name(var, col)
            if var == "itemsession":
                vals = _numeric(main[[col]], f"column {col!r}")[:, 0]
                _check_pairs_unique(sess_codes, item_codes, vals, col)
                arr = np.zeros((num_sessions, num_items, 1))
                arr[sess_codes, item_codes, 0] = vals
            else:
                per = _constant_within(level_codes[var], main[[col]], f"{var} column {col!r}")
                arr = _numeric(per[[col]], f"column {col!r}")
            add(name, arr)

    for var, tables in obs_from_tables.items():
        key_cols = roles.key_for(var)
        for tname, table in tables.items():
            name = observable_name(var, tname)
            _require(table, key_cols, f"side table {tname!r}")
            value_cols = [c for c in table.columns if c not in key_cols]
            if not value_cols:
                raise IngestError(f"side table {tname!r} has no value columns")
            if table.duplicated(subset=key_cols).any():
                raise DuplicateKey(f"side table {tname!r} repeats a key in {key_cols}")
            if var == "itemsession":
                add(name, _itemsession_table(table, key_cols, value_cols, encodings,
                                             availability, tname))
            else:
                enc = encodings[var]
                known = table[key_cols[0]].isin(enc.labels)
                sub = table[known.to_numpy()]
                if len(sub) < level_sizes[var]:
                    present = set(sub[key_cols[0]])
                    missing = [lab for lab in enc.labels if lab not in present]
                    raise IngestError(
                        f"side table {tname!r} lacks rows for {var} labels {missing[:10]}")
                arr = np.zeros((level_sizes[var], len(value_cols)))
                arr[enc.encode(sub[key_cols[0]])] = _numeric(sub[value_cols], f"side table {tname!r}")
                if not np.all(np.isfinite(arr)):
                    raise IngestError(f"side table {tname!r} has missing values")
                add(name, arr)

    dataset = ChoiceDataset(item_index, user_index=user_index, session_index=session_index,
                            availability=availability, observables=observables)
    return dataset, encodings


def _check_pairs_unique(sess_codes, item_codes, vals, col):
    df = pd.DataFrame({"s": sess_codes, "i": item_codes, "v": vals})
    counts = df.groupby(["s", "i"]).v.nunique(dropna=False)
    if (counts > 1).any():
        s, i = counts.index[counts > 1][0]
        raise InconsistentUserOrSession(
            f"itemsession column {col!r} has conflicting values for session code {s}, "
            f"item code {i}")


def _itemsession_table(table, key_cols, value_cols, encodings, availability, tname):
    s_col, i_col = key_cols
    s_enc, i_enc = encodings["session"], encodings["item"]
    known = (table[s_col].isin(s_enc.labels) & table[i_col].isin(i_enc.labels)).to_numpy()
    sub = table[known]
    s = s_enc.encode(sub[s_col])
    i = i_enc.encode(sub[i_col])
    vals = _numeric(sub[value_cols], f"side table {tname!r}")
    # unavailable pairs stay 0.0 whatever the table says (often NaN)
    keep = availability[s, i]
    arr = np.zeros(availability.shape + (len(value_cols),))
    arr[s[keep], i[keep]] = vals[keep]
    covered = np.zeros_like(availability)
    covered[s[keep], i[keep]] = True
    if (availability & ~covered).any():
        raise IngestError(f"side table {tname!r} lacks rows for some available (session, item) pairs")
    if not np.all(np.isfinite(arr)):
        raise IngestError(f"side table {tname!r} has missing values for available pairs")
    return arr


def to_long_format(dataset: ChoiceDataset, encodings: Mapping[str, LabelEncoding] | None = None,
                   roles: ColumnRoles | None = None):
    """Emit ``(main_table, roles, obs_from_tables)`` that re-ingest to ``dataset``.

    The main table lists, for every record, each item available in its
    session.  Every observable becomes a side table so multi-column
    observables survive the round trip.  Labels are decoded with
    ``encodings`` when given, otherwise the integer codes are written.
    """
    encodings = dict(encodings or {})
    roles = roles or ColumnRoles("record", "item", "choice",
                                 "user" if dataset.has_user_index else None, "session")

    def labels(level, codes):
        enc = encodings.get(level)
        return np.asarray(codes) if enc is None else np.asarray(enc.decode(codes), dtype=object)

    avail = dataset.availability[dataset.session_index]
    rec, item = np.nonzero(avail)
    main = {
        roles.record: labels("record", rec),
        roles.item: labels("item", item),
        roles.choice: (dataset.item_index[rec] == item).astype(np.int64),
    }
    if roles.user:
        main[roles.user] = labels("user", dataset.user_index[rec])
    if roles.session:
        main[roles.session] = labels("session", dataset.session_index[rec])
    main = pd.DataFrame(main)

    tables: dict[str, dict[str, pd.DataFrame]] = {}
    for name, arr in dataset.observables.items():
        var = dataset.variation[name]
        vcols = [f"v{k}" for k in range(arr.shape[-1])]
        if var == "itemsession":
            s, i = np.nonzero(dataset.availability)
            frame = pd.DataFrame(arr[s, i], columns=vcols)
            frame.insert(0, roles.item, labels("item", i))
            frame.insert(0, roles.session, labels("session", s))
        else:
            level = var
            key = roles.key_for(var)[0]
            frame = pd.DataFrame(arr, columns=vcols)
            frame.insert(0, key, labels(level, np.arange(arr.shape[0])))
        tables.setdefault(var, {})[name] = frame
    return main, roles, tables
