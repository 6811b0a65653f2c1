"""The ``(observable|variation)`` formula language.

A formula is a sum of terms such as::

    (itemsession_cost|constant) + (session_income|item) + (intercept|item)

Each term pairs an observable (or the intercept, spelled ``1`` or
``intercept``) with a coefficient variation:

``constant``   one coefficient vector shared by everyone
``user``       one vector per user
``item``       one vector per item, with item 0 pinned to zero
``item-full``  one vector per item, none pinned
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from choicekit.errors import (
    BadRegularization,
    DuplicateTerm,
    FormulaSyntaxError,
    KeyMismatch,
    MissingUserIndex,
    ModelConfigError,
    UnknownObservable,
    UnknownVariation,
)

INTERCEPT = "intercept"
COEF_VARIATIONS = ("constant", "user", "item", "item-full")

# accepted spellings; normalized to the hyphenated form used in coefficient names
_VARIATION_ALIASES = {"item_full": "item-full"}

_TOKEN = re.compile(
    r"\s*(?:(?P<lparen>\()|(?P<rparen>\))|(?P<bar>\|)|(?P<plus>\+)"
    r"|(?P<word>[A-Za-z_][A-Za-z0-9_\-]*|1))"
)


@dataclass(frozen=True)
class Term:
    """One parsed ``(observable|variation)`` pair."""

    observable: str
    variation: str

    def __str__(self):
        return f"({self.observable}|{self.variation})"


def _tokenize(text):
    pos = 0
    tokens = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise FormulaSyntaxError(f"unexpected character {text[start]!r}", start)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


def parse_formula(text: str, allow_empty: bool = False) -> list[Term]:
    """Parse formula text into an ordered list of :class:`Term`.

    ``allow_empty`` admits a blank formula (used for the nest level of a
    nested logit model).
    """
    if text is None or text.strip() == "":
        if allow_empty:
            return []
        raise FormulaSyntaxError("empty formula", 0)
    tokens = _tokenize(text)
    i = 0

    def expect(kind, what):
        nonlocal i
        tk = tokens[i]
        if tk[0] != kind:
            shown = "end of input" if tk[0] == "end" else repr(tk[1])
            raise FormulaSyntaxError(f"expected {what}, found {shown}", tk[2])
        i += 1
        return tk

    terms: list[Term] = []
    seen = set()
    while True:
        expect("lparen", "'('")
        _, obs, obs_pos = expect("word", "an observable name")
        if "-" in obs:
            raise FormulaSyntaxError(f"invalid observable name {obs!r}", obs_pos)
        expect("bar", "'|'")
        _, var, var_pos = expect("word", "a variation")
        expect("rparen", "')'")
        var = _VARIATION_ALIASES.get(var, var)
        if var not in COEF_VARIATIONS:
            raise UnknownVariation(
                f"unknown variation {var!r} at position {var_pos}; "
                f"expected one of {', '.join(COEF_VARIATIONS)}"
            )
        obs = INTERCEPT if obs in ("1", INTERCEPT) else obs
        term = Term(obs, var)
        if term in seen:
            raise DuplicateTerm(f"term {term} appears more than once")
        seen.add(term)
        terms.append(term)
        if tokens[i][0] == "end":
            return terms
        expect("plus", "'+' or end of formula")


def format_formula(terms: Sequence[Term]) -> str:
    return " + ".join(str(t) for t in terms)


@dataclass(frozen=True)
class CoefficientSpec:
    """A resolved coefficient block.

    ``rows`` is the number of free coefficient vectors: 1, U, I-1 or I
    depending on the variation.
    """

    observable: str
    variation: str
    dim: int
    rows: int

    @property
    def name(self) -> str:
        return f"{self.observable}[{self.variation}]"

    @property
    def param_count(self) -> int:
        return self.rows * self.dim

    @property
    def is_intercept(self) -> bool:
        return self.observable == INTERCEPT


@dataclass(frozen=True)
class Regularization:
    norm: str = "L2"
    weight: float = 0.0
    squared: bool = False

    def __post_init__(self):
        norm = str(self.norm).upper()
        if norm not in ("L1", "L2"):
            raise BadRegularization(f"regularization must be 'L1' or 'L2', got {self.norm!r}")
        if not self.weight >= 0:
            raise BadRegularization(f"regularization weight must be >= 0, got {self.weight}")
        if self.squared and norm != "L2":
            raise BadRegularization("the squared penalty only applies to L2")
        object.__setattr__(self, "norm", norm)
        object.__setattr__(self, "weight", float(self.weight))


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple[CoefficientSpec, ...]
    num_items: int
    num_users: int | None = None
    regularization: Regularization | None = None
    _names: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise DuplicateTerm("duplicate (observable, variation) pairs in model spec")
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "_names", frozenset(names))

    @property
    def total_params(self) -> int:
        return sum(t.param_count for t in self.terms)

    @property
    def is_empty(self) -> bool:
        return not self.terms

    def term(self, name: str) -> CoefficientSpec:
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)

    def with_regularization(self, regularization) -> "ModelSpec":
        return replace(self, regularization=regularization)

    def formula(self) -> str:
        return format_formula([Term(t.observable, t.variation) for t in self.terms])


def _rows(variation, num_items, num_users):
    if variation == "constant":
        return 1
    if variation == "user":
        return num_users
    if variation == "item":
        return num_items - 1
    return num_items


def _check_counts(variations, num_items, num_users):
    if num_items is None or num_items < 1:
        raise ModelConfigError(f"num_items must be a positive integer, got {num_items}")
    if "item" in variations and num_items < 2:
        raise ModelConfigError("'item' variation needs at least two items (item 0 is pinned)")
    if "user" in variations and not num_users:
        raise MissingUserIndex("a 'user' coefficient requires user indices / num_users")


def resolve(terms: Sequence[Term], dataset, num_items: int | None = None,
            num_users: int | None = None, regularization=None) -> ModelSpec:
    """Bind parsed terms to a dataset, fixing every block's dimensions.

    ``num_items`` defaults to the dataset's item-axis length (nests for a
    nest-level dataset); ``num_users`` to its user count.
    """
    variations = {t.variation for t in terms}
    if "user" in variations and not dataset.has_user_index:
        raise MissingUserIndex("a 'user' coefficient needs a dataset with user_index")
    if num_items is None:
        num_items = dataset.num_alternatives
    if num_users is None and dataset.has_user_index:
        num_users = dataset.num_users
    _check_counts(variations, num_items, num_users)
    specs = []
    for t in terms:
        if t.observable == INTERCEPT:
            dim = 1
        else:
            if t.observable not in dataset.observables:
                raise UnknownObservable(
                    f"observable {t.observable!r} is not in the dataset "
                    f"(available: {sorted(dataset.observables)})"
                )
            dim = int(dataset.observables[t.observable].shape[-1])
        specs.append(CoefficientSpec(t.observable, t.variation, dim,
                                     _rows(t.variation, num_items, num_users)))
    return ModelSpec(tuple(specs), int(num_items),
                     None if num_users is None else int(num_users), regularization)


def dict_config(coef_variation: Mapping[str, str], num_params: Mapping[str, int],
                num_items: int, num_users: int | None = None,
                regularization=None) -> ModelSpec:
    """Build a :class:`ModelSpec` from name→variation and name→dimension maps."""
    if set(coef_variation) != set(num_params):
        missing = set(coef_variation) ^ set(num_params)
        raise KeyMismatch(f"coefficient maps disagree on keys: {sorted(missing)}")
    variations = set()
    specs = []
    for obs, var in coef_variation.items():
        var = _VARIATION_ALIASES.get(var, var)
        if var not in COEF_VARIATIONS:
            raise UnknownVariation(f"unknown variation {var!r} for {obs!r}")
        variations.add(var)
        name = INTERCEPT if obs in ("1", INTERCEPT) else obs
        dim = int(num_params[obs])
        if dim < 1:
            raise ModelConfigError(f"{obs!r} needs a positive number of parameters")
        specs.append((name, var, dim))
    _check_counts(variations, num_items, num_users)
    return ModelSpec(
        tuple(CoefficientSpec(n, v, d, _rows(v, num_items, num_users)) for n, v, d in specs),
        int(num_items), None if num_users is None else int(num_users), regularization)


def spec_from_formula(formula: str, dataset, num_items=None, num_users=None,
                      regularization=None, allow_empty=False) -> ModelSpec:
    terms = parse_formula(formula, allow_empty=allow_empty)
    return resolve(terms, dataset, num_items=num_items, num_users=num_users,
                   regularization=regularization)
