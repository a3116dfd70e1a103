"""The implicit language model: a categorical distribution over attested sentences."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class _LogZero:
    """Tagged log(0).  Deliberately supports no arithmetic."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "LOG_ZERO"

    def __bool__(self):
        return False


LOG_ZERO = _LogZero()


def is_log_zero(value):
    return value is LOG_ZERO


@dataclass(frozen=True)
class EmpiricalLM:
    support: tuple
    counts: tuple
    total: int

    def __post_init__(self):
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.support)})
        object.__setattr__(self, "_cum", np.cumsum(np.array(self.counts, dtype=np.int64)))

    def __len__(self):
        return len(self.support)

    def prob(self, sentence):
        i = self._index.get(sentence)
        return Fraction(0) if i is None else Fraction(self.counts[i], self.total)

    @property
    def log_probs(self):
        return np.log(np.array(self.counts, dtype=float)) - math.log(self.total)


def build_lm(monotext):
    """Count the exact multiset of sentences in a monotext."""
    sentences = monotext.sentences if hasattr(monotext, "sentences") else tuple(monotext)
    if not sentences:
        raise ValueError("cannot build a language model from an empty monotext")
    counts = Counter(sentences)
    support = tuple(counts)  # first-occurrence order
    return EmpiricalLM(support, tuple(counts[s] for s in support), len(sentences))


def lm_sample_indices(lm, rng, n):
    u = rng.integers(0, lm.total, size=n)
    return np.searchsorted(lm._cum, u, side="right")


def lm_sample(lm, rng, n=None):
    """Draw one sentence (or a list of ``n``) with replacement."""
    if n is None:
        return lm.support[int(lm_sample_indices(lm, rng, 1)[0])]
    return [lm.support[i] for i in lm_sample_indices(lm, rng, n)]


def lm_log_prob(lm, sentence):
    """log(count/total), or ``LOG_ZERO`` for unattested sentences."""
    i = lm._index.get(sentence)
    if i is None:
        return LOG_ZERO
    return math.log(lm.counts[i]) - math.log(lm.total)
