"""Seeded synthetic translation tasks.

Source sentences come from a Zipfian unigram process; targets are a
bijective word substitution of the source, optionally followed by swapping
each pair of adjacent tokens (positions 0<->1, 2<->3, ...).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import file_sha256
from .rng import stream

KINDS = ("substitution_cipher", "cipher_with_local_reorder")
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class TaskSpec:
    kind: str = "cipher_with_local_reorder"
    src_vocab_size: int = 50
    trg_vocab_size: int = 50
    min_len: int = 3
    max_len: int = 10
    n_train: int = 1000
    n_mono: int = 5000
    n_dev: int = 500
    n_test: int = 500
    seed: int = 0
    zipf_exponent: float = 1.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.src_vocab_size != self.trg_vocab_size:
            raise ValueError("a bijective cipher needs equal vocabulary sizes")
        if self.src_vocab_size < 1 or not 1 <= self.min_len <= self.max_len:
            raise ValueError("invalid vocabulary size or length range")
        for name in ("n_train", "n_mono", "n_dev", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class SynthTask:
    spec: TaskSpec
    src_words: list
    trg_words: list
    mapping: dict
    train: list = field(default_factory=list)      # (src tokens, trg tokens)
    mono_src: list = field(default_factory=list)   # src tokens
    mono_trg: list = field(default_factory=list)   # trg tokens
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def translate(self, tokens):
        return ground_truth(tokens, self.mapping, self.spec.kind)

    def write(self, directory):
        """Write every split in corpus format plus ``manifest.json``."""
        os.makedirs(directory, exist_ok=True)
        files = {
            "train.src": [p[0] for p in self.train], "train.trg": [p[1] for p in self.train],
            "mono.src": self.mono_src, "mono.trg": self.mono_trg,
            "dev.src": [p[0] for p in self.dev], "dev.trg": [p[1] for p in self.dev],
            "test.src": [p[0] for p in self.test], "test.trg": [p[1] for p in self.test],
        }
        checksums = {}
        for name, lines in files.items():
            path = os.path.join(directory, name)
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                for toks in lines:
                    f.write(" ".join(toks) + "\n")
            checksums[name] = file_sha256(path)
        manifest = {"spec": asdict(self.spec), "checksums": checksums, "mapping": self.mapping}
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        return checksums


def ground_truth(tokens, mapping, kind):
    out = [mapping[t] for t in tokens]
    if kind == "cipher_with_local_reorder":
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
    return out


def _make_words(rng, n):
    words, seen = [], set()
    while len(words) < n:
        k = int(rng.integers(1, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _space_size(v, lo, hi):
    return sum(v ** n for n in range(lo, hi + 1))


def generate_task(spec):
    """Build every split of a task; identical specs give identical tasks."""
    total = spec.n_train + 2 * spec.n_mono + spec.n_dev + spec.n_test
    space = _space_size(spec.src_vocab_size, spec.min_len, spec.max_len)
    if total > space:
        raise ValueError(f"requested {total} distinct sentences but only {space} exist")
    words = _make_words(stream(spec.seed, "words"), spec.src_vocab_size + spec.trg_vocab_size)
    src_words, trg_words = words[: spec.src_vocab_size], words[spec.src_vocab_size :]
    perm = stream(spec.seed, "cipher").permutation(spec.trg_vocab_size)
    mapping = {s: trg_words[perm[i]] for i, s in enumerate(src_words)}

    ranks = np.arange(1, spec.src_vocab_size + 1, dtype=float)
    probs = ranks ** -spec.zipf_exponent
    probs /= probs.sum()
    rng = stream(spec.seed, "sentences")
    seen = set()
    budget = 50 * total + 1000

    def draw(n):
        nonlocal budget
        out = []
        while len(out) < n:
            budget -= 1
            if budget < 0:
                raise ValueError("could not draw enough distinct sentences; enlarge the sentence space")
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            sent = tuple(src_words[i] for i in rng.choice(spec.src_vocab_size, size=length, p=probs))
            if sent not in seen:
                seen.add(sent)
                out.append(list(sent))
        return out

    task = SynthTask(spec, src_words, trg_words, mapping)

    def pairs(srcs):
        return [(s, task.translate(s)) for s in srcs]

    task.train = pairs(draw(spec.n_train))
    task.dev = pairs(draw(spec.n_dev))
    task.test = pairs(draw(spec.n_test))
    task.mono_src = draw(spec.n_mono)
    task.mono_trg = [task.translate(s) for s in draw(spec.n_mono)]
    return task
