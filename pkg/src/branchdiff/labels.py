"""Genealogy labels and population bookkeeping.

A particle label is a tuple of nonnegative integers; the founding particle is
the empty tuple.  The k-th child of particle ``i`` is ``i + (k-1,)``, so the
label encodes the full line of descent.  A population is a mapping from labels
to positions and must form an antichain: no living particle's label may be a
prefix of another living particle's label.
"""

from __future__ import annotations

import struct

import numpy as np

Label = tuple[int, ...]

ROOT: Label = ()

_MAX_CHILD_INDEX = 2**32 - 1


def concat(i: Label, j: Label) -> Label:
    """Concatenate two labels; the empty label is the identity."""
    return i + j


def is_strict_ancestor(j: Label, i: Label) -> bool:
    """True iff ``j`` is a proper prefix of ``i``."""
    return len(j) < len(i) and i[: len(j)] == j


def children(i: Label, k: int) -> list[Label]:
    """Labels of the ``k`` children born to particle ``i``."""
    if k < 0:
        raise ValueError("child count must be nonnegative")
    return [i + (l,) for l in range(k)]


def encode(i: Label) -> bytes:
    """Self-delimiting byte encoding: a length prefix followed by the
    elements, all as big-endian uint32.  Injective over valid labels, which is
    what keys per-label random streams apart."""
    for v in i:
        if not 0 <= v <= _MAX_CHILD_INDEX:
            raise ValueError(f"label element {v} outside uint32 range")
    return struct.pack(">I", len(i)) + b"".join(struct.pack(">I", v) for v in i)


def encode_words(i: Label) -> tuple[int, ...]:
    """The uint32 words of :func:`encode`, usable as seed entropy."""
    return (len(i),) + i


def label_to_str(i: Label) -> str:
    """Dot-joined rendering used in output files; the root is the empty string."""
    return ".".join(str(v) for v in i)


def label_from_str(s: str) -> Label:
    """Inverse of :func:`label_to_str`."""
    if s == "":
        return ROOT
    return tuple(int(part) for part in s.split("."))


def is_antichain(labels) -> bool:
    """Check the no-prefix condition.

    Sorting lexicographically puts any prefix immediately before one of its
    extensions, so only adjacent pairs need checking.
    """
    ordered = sorted(labels)
    for a, b in zip(ordered, ordered[1:]):
        if b[: len(a)] == a:
            return False
    return True


def assert_antichain(labels) -> None:
    if not is_antichain(labels):
        raise ValueError("population labels violate the antichain condition")


def replace_by_children(pop: dict[Label, np.ndarray], i: Label, k: int,
                        x: np.ndarray) -> dict[Label, np.ndarray]:
    """Remove ``i`` and insert its ``k`` children at position ``x``.

    Pure: returns a new mapping.  ``k = 0`` is a death with no offspring.
    Antichain inputs yield antichain outputs.
    """
    if i not in pop:
        raise KeyError(f"label {i!r} not present in population")
    out = dict(pop)
    del out[i]
    for child in children(i, k):
        out[child] = x
    return out
