"""Token vocabulary and prompt-template composition.

A condition is a weighted multiset of tokens; its embedding is the weighted mean
of the member rows, so adding tokens never grows the embedding norm beyond the
largest row.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

KINDS = ("null", "category", "subject", "attribute", "context")
TEMPLATES = ("P0", "P1", "P2", "P3")

CATEGORY_NAMES = ("disc", "cross", "bar", "ring")
# attribute axes: each value is one token
ATTRIBUTE_AXES = {
    "rotation": ("rot0", "rot45"),
    "thickness": ("thin", "thick"),
    "size": ("small", "large"),
}
CONTEXT_AXES = {"background": ("dark", "light")}
ATTRIBUTE_NAMES = tuple(v for vals in ATTRIBUTE_AXES.values() for v in vals)
CONTEXT_NAMES = tuple(v for vals in CONTEXT_AXES.values() for v in vals)


@dataclass(frozen=True, order=True)
class ConditionToken:
    kind: str
    ident: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown token kind {self.kind!r}")


NULL = ConditionToken("null", 0)


def category(name_or_id) -> ConditionToken:
    ident = CATEGORY_NAMES.index(name_or_id) if isinstance(name_or_id, str) else int(name_or_id)
    return ConditionToken("category", ident)


def attribute(name_or_id) -> ConditionToken:
    ident = ATTRIBUTE_NAMES.index(name_or_id) if isinstance(name_or_id, str) else int(name_or_id)
    return ConditionToken("attribute", ident)


def context(name_or_id) -> ConditionToken:
    ident = CONTEXT_NAMES.index(name_or_id) if isinstance(name_or_id, str) else int(name_or_id)
    return ConditionToken("context", ident)


def subject(slot: int = 0) -> ConditionToken:
    return ConditionToken("subject", int(slot))


@dataclass(frozen=True)
class Vocabulary:
    """Row layout of the embedding table (subject rows are stored separately)."""

    n_categories: int = len(CATEGORY_NAMES)
    n_subjects: int = 4
    n_attributes: int = len(ATTRIBUTE_NAMES)
    n_contexts: int = len(CONTEXT_NAMES)

    def size(self, kind: str) -> int:
        return {"null": 1, "category": self.n_categories, "subject": self.n_subjects,
                "attribute": self.n_attributes, "context": self.n_contexts}[kind]

    @property
    def n_shared(self) -> int:
        """Rows in the shared table (everything except subject slots)."""
        return 1 + self.n_categories + self.n_attributes + self.n_contexts

    def validate(self, tok: ConditionToken) -> None:
        if not (0 <= tok.ident < self.size(tok.kind)):
            raise ValueError(f"unknown {tok.kind} token id {tok.ident} "
                             f"(vocabulary has {self.size(tok.kind)})")

    def shared_row(self, tok: ConditionToken) -> int:
        self.validate(tok)
        if tok.kind == "subject":
            raise ValueError("subject tokens live outside the shared table")
        offset = {"null": 0, "category": 1, "attribute": 1 + self.n_categories,
                  "context": 1 + self.n_categories + self.n_attributes}[tok.kind]
        return offset + tok.ident

    def to_dict(self) -> dict:
        return {"n_categories": self.n_categories, "n_subjects": self.n_subjects,
                "n_attributes": self.n_attributes, "n_contexts": self.n_contexts}


@dataclass(frozen=True)
class Condition:
    tokens: tuple[ConditionToken, ...]  # sorted multiset

    @property
    def weights(self) -> Counter:
        return Counter(self.tokens)

    @classmethod
    def of(cls, tokens: Iterable[ConditionToken]) -> "Condition":
        toks = tuple(sorted(tokens))
        if not toks:
            raise ValueError("a condition needs at least one token")
        if NULL in toks and len(toks) > 1:
            raise ValueError("the null token cannot be combined with other tokens")
        return cls(toks)

    @property
    def is_null(self) -> bool:
        return self.tokens == (NULL,)

    def mixing_rows(self, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
        """Normalised weights over (shared rows, subject slots)."""
        shared = np.zeros(vocab.n_shared)
        subj = np.zeros(vocab.n_subjects)
        for tok, w in self.weights.items():
            vocab.validate(tok)
            if tok.kind == "subject":
                subj[tok.ident] += w
            else:
                shared[vocab.shared_row(tok)] += w
        total = len(self.tokens)
        return shared / total, subj / total

    def embedding(self, table: np.ndarray, subject_rows: np.ndarray, vocab: Vocabulary) -> np.ndarray:
        shared, subj = self.mixing_rows(vocab)
        return shared @ table + subj @ subject_rows

    def describe(self) -> str:
        if self.is_null:
            return "<null>"
        parts = []
        for tok in self.tokens:
            if tok.kind == "category":
                parts.append(CATEGORY_NAMES[tok.ident] if tok.ident < len(CATEGORY_NAMES) else f"C{tok.ident}")
            elif tok.kind == "subject":
                parts.append(f"S{tok.ident}")
            elif tok.kind == "attribute":
                parts.append(ATTRIBUTE_NAMES[tok.ident] if tok.ident < len(ATTRIBUTE_NAMES) else f"a{tok.ident}")
            else:
                parts.append(CONTEXT_NAMES[tok.ident] if tok.ident < len(CONTEXT_NAMES) else f"x{tok.ident}")
        return " ".join(parts)


def null_condition() -> Condition:
    return Condition.of([NULL])


def compose(subject: ConditionToken | None = None, category: ConditionToken | None = None,
            attributes: Sequence[ConditionToken] = (), context: Sequence[ConditionToken] = (),
            template: str = "P1", vocab: Vocabulary | None = None) -> Condition:
    """Build a condition from its parts following a prompt template.

    P0 keeps only the subject token; P1 adds the category; P2 counts the
    category twice; P3 counts the category and every attribute twice.  With no
    subject, the category is always kept (plain category prompts).  ``null``
    ignores every part.
    """
    if template == "null":
        return null_condition()
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}")
    vocab = vocab or Vocabulary()
    parts = [t for t in (subject, category, *attributes, *context) if t is not None]
    for tok in parts:
        vocab.validate(tok)
        if tok.kind == "null":
            raise ValueError("use template='null' for the unconditional condition")
    for tok in attributes:
        if tok.kind != "attribute":
            raise ValueError(f"expected attribute token, got {tok}")
    for tok in context:
        if tok.kind != "context":
            raise ValueError(f"expected context token, got {tok}")
    if subject is None and category is None:
        raise ValueError("a non-null condition needs a subject or a category")

    tokens: list[ConditionToken] = []
    if subject is not None:
        tokens.append(subject)
    keep_category = category is not None and (subject is None or template != "P0")
    if keep_category:
        tokens.append(category)
        if template in ("P2", "P3") and subject is not None:
            tokens.append(category)
    tokens.extend(attributes)
    if template == "P3" and subject is not None:
        tokens.extend(attributes)
    tokens.extend(context)
    return Condition.of(tokens)


def stack_conditions(conds: Sequence[Condition], vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Row-stacked mixing weights for a batch of conditions."""
    shared = np.zeros((len(conds), vocab.n_shared))
    subj = np.zeros((len(conds), vocab.n_subjects))
    cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
    for i, c in enumerate(conds):
        if c.tokens not in cache:
            cache[c.tokens] = c.mixing_rows(vocab)
        shared[i], subj[i] = cache[c.tokens]
    return shared, subj
