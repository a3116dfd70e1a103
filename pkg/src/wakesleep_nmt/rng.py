"""Named, counter-based random streams.

Every stochastic operation in the package takes an explicit
``numpy.random.Generator``.  Generators are derived from a single run seed
plus a path of names, so that e.g. ``stream(7, "iter1", "wake")`` always
yields the same Philox key regardless of what other streams were used.
"""
import hashlib

import numpy as np


def _key(seed, names):
    h = hashlib.sha256(repr((int(seed),) + tuple(str(n) for n in names)).encode("utf-8"))
    return int.from_bytes(h.digest()[:16], "little")


def stream(seed, *names):
    """Return a Philox-backed generator for ``(seed, *names)``."""
    return np.random.Generator(np.random.Philox(key=_key(seed, names)))


def child_seed(seed, *names):
    """Derive a 63-bit integer seed, for APIs that want a plain int."""
    return _key(seed, names) & ((1 << 63) - 1)
