"""Sentences, vocabularies, monotexts and bitexts, plus plain-text I/O.

Corpus files are UTF-8, one sentence per line, tokens separated by single
spaces.  EOS is never written to disk; it is appended on load.
"""
from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass

log = logging.getLogger(__name__)

EOS = "</s>"
ROLES = ("observed", "back", "dreamt")


class CorpusError(ValueError):
    pass


class OOVError(CorpusError):
    pass


class Vocabulary:
    """Dense token <-> id mapping.  EOS always has id 0."""

    def __init__(self, tokens, eos=EOS):
        tokens = [t for t in tokens if t != eos]
        if len(set(tokens)) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        self.tokens = (eos,) + tuple(tokens)
        self.eos = eos
        self.eos_id = 0
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, token_lists, extra=()):
        """Vocabulary over every token seen, sorted for determinism."""
        seen = set(extra)
        for toks in token_lists:
            seen.update(toks)
        seen.discard(EOS)
        return cls(sorted(seen))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self):
        return hash(self.tokens)

    def __repr__(self):
        return f"Vocabulary(size={len(self)})"

    def id(self, token):
        return self._index[token]

    def digest(self):
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def sentence(self, tokens, strict=True, fallback=None):
        """Map surface tokens to a Sentence, appending EOS.

        Unknown tokens raise :class:`OOVError` when ``strict`` is set or no
        ``fallback`` is available; otherwise ``fallback(token)`` supplies a
        list of replacement tokens which must all be known.
        """
        ids = []
        for tok in tokens:
            if tok == self.eos:
                raise CorpusError("EOS may not appear inside a sentence")
            i = self._index.get(tok)
            if i is not None:
                ids.append(i)
                continue
            if strict or fallback is None:
                raise OOVError(f"unknown token {tok!r}")
            parts = fallback(tok)
            missing = [p for p in parts if p not in self._index]
            if missing:
                raise OOVError(f"unknown token {tok!r} (no fallback for {missing[0]!r})")
            ids.extend(self._index[p] for p in parts)
        ids.append(self.eos_id)
        return Sentence(tuple(ids))

    def words(self, sentence):
        """Surface tokens of a sentence, without EOS."""
        return [self.tokens[i] for i in sentence.token_ids if i != self.eos_id]

    def validate(self, sentence):
        ids = sentence.token_ids
        if not ids or ids[-1] != self.eos_id:
            raise CorpusError("sentence must end with EOS")
        if self.eos_id in ids[:-1]:
            raise CorpusError("EOS may only appear at the end of a sentence")
        if min(ids) < 0 or max(ids) >= len(self):
            raise CorpusError("token id out of range")

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.tokens[1:]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.strip()])


@dataclass(frozen=True)
class Sentence:
    token_ids: tuple

    def __len__(self):
        return len(self.token_ids)

    def __iter__(self):
        return iter(self.token_ids)


@dataclass(frozen=True)
class Monotext:
    sentences: tuple
    vocab: Vocabulary

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)


@dataclass(frozen=True)
class Bitext:
    """Aligned (source, target) pairs.  ``role`` records provenance only."""

    pairs: tuple
    src_vocab: Vocabulary
    trg_vocab: Vocabulary
    role: str = "observed"

    def __post_init__(self):
        if self.role not in ROLES:
            raise CorpusError(f"unknown bitext role {self.role!r}")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def sources(self):
        return [p[0] for p in self.pairs]

    @property
    def targets(self):
        return [p[1] for p in self.pairs]


def union(a, b):
    """Multiset union of two bitexts, ``a``'s pairs first."""
    if a.src_vocab != b.src_vocab or a.trg_vocab != b.trg_vocab:
        raise CorpusError("cannot union bitexts over different vocabularies")
    role = a.role if a.role == b.role else "observed"
    return Bitext(a.pairs + b.pairs, a.src_vocab, a.trg_vocab, role)


def sentence_counts(sentences):
    return Counter(sentences)


# --------------------------------------------------------------------------
# file I/O


def _read_lines(path):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CorpusError(f"cannot read {path}: {e.strerror}") from e
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorpusError(f"{path}: invalid UTF-8 at byte {e.start}") from e
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.rstrip("\r") for line in lines]


def _encoder(vocab, merges, strict):
    if merges is None:
        return lambda words: vocab.sentence(words, strict=True)
    from .subword import char_fallback, segment_words

    return lambda words: vocab.sentence(segment_words(words, merges), strict=strict,
                                        fallback=lambda t: char_fallback(t, merges.marker))


def load_monotext(path, vocab, merges=None, strict=False):
    """Read a monotext; blank lines are skipped with a warning.

    With ``merges`` given, words are BPE-segmented before lookup and, unless
    ``strict``, unknown subwords fall back to character symbols.
    """
    encode = _encoder(vocab, merges, strict)
    sentences = []
    for lineno, line in enumerate(_read_lines(path), 1):
        words = line.split()
        if not words:
            log.warning("%s:%d: skipping blank line", path, lineno)
            continue
        sentences.append(encode(words))
    return Monotext(tuple(sentences), vocab)


def load_bitext(src_path, trg_path, src_vocab, trg_vocab, merges=None, strict=False):
    src_lines = _read_lines(src_path)
    trg_lines = _read_lines(trg_path)
    if len(src_lines) != len(trg_lines):
        raise CorpusError(f"line count mismatch: {src_path} has {len(src_lines)} lines, "
                          f"{trg_path} has {len(trg_lines)}")
    enc_src = _encoder(src_vocab, merges, strict)
    enc_trg = _encoder(trg_vocab, merges, strict)
    pairs = []
    for lineno, (s, t) in enumerate(zip(src_lines, trg_lines), 1):
        sw, tw = s.split(), t.split()
        if not sw or not tw:
            raise CorpusError(f"blank line {lineno} in bitext ({src_path} / {trg_path})")
        pairs.append((enc_src(sw), enc_trg(tw)))
    return Bitext(tuple(pairs), src_vocab, trg_vocab, "observed")


def format_sentence(sentence, vocab):
    return " ".join(vocab.words(sentence))


def write_sentences(path, sentences, vocab):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in sentences:
            f.write(format_sentence(s, vocab) + "\n")


def write_monotext(path, monotext):
    write_sentences(path, monotext.sentences, monotext.vocab)


def write_bitext(src_path, trg_path, bitext):
    write_sentences(src_path, bitext.sources, bitext.src_vocab)
    write_sentences(trg_path, bitext.targets, bitext.trg_vocab)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
