"""Random entry-selection masks with a fixed number of ones."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

MAX_ENUMERATION = 10**6


@dataclass(frozen=True, eq=False)
class SelectionMask:
    """Binary length-``L`` vector with exactly ``ones_count`` ones."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=float)
        if bits.ndim != 1 or not np.all((bits == 0) | (bits == 1)):
            raise ValueError("mask bits must be a 1-D 0/1 vector")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def ones_count(self) -> int:
        return int(self.bits.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def matrix(self) -> np.ndarray:
        return np.diag(self.bits)

    def __eq__(self, other):
        return isinstance(other, SelectionMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())


def _check(L: int, M: int):
    if L < 1:
        raise ValueError(f"L must be positive, got {L}")
    if not 0 <= M <= L:
        raise ValueError(f"need 0 <= M <= L, got M={M}, L={L}")


def mask_from_keys(keys: np.ndarray, M: int) -> np.ndarray:
    """Turn uniform keys into masks by marking the ``M`` smallest along the last axis.

    Ties have probability zero for continuous keys. Exchangeability of the
    keys makes every support of size ``M`` equally likely.
    """
    L = keys.shape[-1]
    if M == 0:
        return np.zeros(keys.shape)
    if M == L:
        return np.ones(keys.shape)
    kth = np.partition(keys, M - 1, axis=-1)[..., M - 1 : M]
    return (keys <= kth).astype(float)


def sample_masks(L: int, M: int, rng, size=()) -> np.ndarray:
    """Draw masks of shape ``size + (L,)``. ``M`` in ``{0, L}`` consumes no randomness."""
    _check(L, M)
    size = tuple(np.atleast_1d(size)) if size != () else ()
    if M in (0, L):
        return np.full(size + (L,), float(M == L))
    return mask_from_keys(rng.random(size + (L,)), M)


def sample_mask(L: int, M: int, rng) -> SelectionMask:
    return SelectionMask(sample_masks(L, M, rng))


def mask_mean(L: int, M: int) -> float:
    """Per-entry selection probability ``M / L``."""
    _check(L, M)
    return M / L


def enumerate_masks(L: int, M: int) -> list[SelectionMask]:
    """Every mask with ``M`` ones, in lexicographic order of the support."""
    _check(L, M)
    n = comb(L, M)
    if n > MAX_ENUMERATION:
        raise ValueError(f"C({L},{M}) = {n} masks exceeds the enumeration limit {MAX_ENUMERATION}")
    out = []
    for support in combinations(range(L), M):
        bits = np.zeros(L)
        bits[list(support)] = 1.0
        out.append(SelectionMask(bits))
    return out


def enumerate_mask_array(L: int, M: int) -> np.ndarray:
    """Same as :func:`enumerate_masks` stacked into a ``(C(L,M), L)`` array."""
    masks = enumerate_masks(L, M)
    return np.array([m.bits for m in masks]).reshape(len(masks), L)
