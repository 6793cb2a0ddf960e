"""Ulam-Harris label algebra.

A particle in a branching population is named by the sequence of child
indices along its lineage: the founding mother is the empty sequence,
her third child is (2,), that child's first child is (2, 0), and so on.
Labels are plain tuples of non-negative ints, immutable and hashable.
"""
from __future__ import annotations

from typing import Iterable, Tuple

Label = Tuple[int, ...]

MOTHER: Label = ()


def make_label(indices: Iterable[int]) -> Label:
    lab = tuple(int(i) for i in indices)
    if any(i < 0 for i in lab):
        raise ValueError(f"label indices must be non-negative: {lab}")
    return lab


def concat(i: Label, j: Label) -> Label:
    """Concatenation ij: the particle reached by following j below i."""
    return i + j


def parent(i: Label) -> Label:
    if not i:
        raise ValueError("the mother particle has no parent")
    return i[:-1]


def generation(i: Label) -> int:
    """Depth of the label: number of indices in its path."""
    return len(i)


def child(i: Label, k: int) -> Label:
    if k < 0:
        raise ValueError("child index must be non-negative")
    return i + (k,)


def is_ancestor(j: Label, i: Label) -> bool:
    """True iff j is i or a prefix of i."""
    return i[: len(j)] == j


def is_strict_ancestor(j: Label, i: Label) -> bool:
    """True iff i strictly extends j, i.e. j is a proper prefix of i."""
    return len(i) > len(j) and i[: len(j)] == j


def common_prefix_length(i: Label, j: Label) -> int:
    p = 0
    for a, b in zip(i, j):
        if a != b:
            break
        p += 1
    return p


def depth_weight(i: Label) -> int:
    """Weight of the path from the mother: each index k costs k + 1.

    This equals ulam_distance(i, MOTHER) and grows with both generation
    and sibling rank, unlike generation() which counts indices only.
    """
    return sum(k + 1 for k in i)


def ulam_distance(i: Label, j: Label) -> int:
    """Tree distance: total weight of both paths below the common ancestor.

    Each edge from a parent to its k-th child weighs k + 1, so siblings
    with large indices are farther apart.  Symmetric, zero iff equal, and
    satisfies the triangle inequality (it is a weighted tree path metric).
    """
    p = common_prefix_length(i, j)
    return sum(k + 1 for k in i[p:]) + sum(k + 1 for k in j[p:])


def is_antichain(labels: Iterable[Label]) -> bool:
    """True iff no label in the collection is a strict ancestor of another."""
    labs = sorted(set(labels))
    # After sorting, any strict ancestor of labs[k] appears earlier; a
    # prefix-of-next check over the sorted order finds every violation.
    for a, b in zip(labs, labs[1:]):
        if is_strict_ancestor(a, b):
            return False
    return True


def format_label(i: Label) -> str:
    """Render a label for CSV/JSON output: the mother is "∅", else "1.2.0"."""
    if not i:
        return "∅"
    return ".".join(str(k) for k in i)


def parse_label(text: str) -> Label:
    text = text.strip()
    if text in ("∅", "", "()"):
        return MOTHER
    try:
        return make_label(int(part) for part in text.split("."))
    except ValueError as exc:
        raise ValueError(f"cannot parse label {text!r}") from exc
