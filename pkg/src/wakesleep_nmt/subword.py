"""Byte-pair-encoding segmentation with a word-final suffix marker.

A word ``abc`` starts life as the symbols ``a b c</w>``; merges are learned
greedily by adjacent-pair frequency and applied in table order.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .corpus import Monotext

MARKER = "</w>"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MergeTable:
    merges: tuple = ()
    marker: str = MARKER

    def __len__(self):
        return len(self.merges)

    def __post_init__(self):
        object.__setattr__(self, "_ranks", {m: i for i, m in enumerate(self.merges)})
        object.__setattr__(self, "_cache", {})

    def rank(self, pair):
        return self._ranks.get(pair)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"#version: {_FORMAT_VERSION} marker: {self.marker}\n")
            for left, right in self.merges:
                f.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            header = f.readline().split()
            if len(header) != 4 or header[0] != "#version:" or header[2] != "marker:":
                raise ValueError(f"{path}: bad merge table header")
            if int(header[1]) != _FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported merge table version {header[1]}")
            merges = []
            for line in f:
                parts = line.split()
                if len(parts) != 2:
                    raise ValueError(f"{path}: malformed merge line {line!r}")
                merges.append((parts[0], parts[1]))
        return cls(tuple(merges), header[3])


def _initial_symbols(word, marker):
    return tuple(word[:-1]) + (word[-1] + marker,)


def _merge_word(symbols, pair):
    out, i = [], 0
    a, b = pair
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _corpus_words(corpus):
    words = Counter()
    for item in corpus:
        if isinstance(item, Monotext):
            for s in item.sentences:
                words.update(item.vocab.words(s))
        elif isinstance(item, str):
            words.update(item.split())
        else:
            for line in item:
                words.update(line.split() if isinstance(line, str) else line)
    return words


def learn_bpe(corpus, num_merges, marker=MARKER):
    """Learn up to ``num_merges`` merges from monotexts or lines of text.

    The most frequent adjacent pair wins; ties go to the lexicographically
    smallest pair.  Learning stops early once every word is a single symbol.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be nonnegative")
    freqs = _corpus_words(corpus)
    if not freqs:
        raise ValueError("cannot learn BPE from an empty corpus")
    vocab = {_initial_symbols(w, marker): c for w, c in freqs.items()}
    merges = []
    for _ in range(num_merges):
        stats = Counter()
        for symbols, c in vocab.items():
            for pair in zip(symbols, symbols[1:]):
                stats[pair] += c
        if not stats:
            break
        best = min(stats.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        merged = {}
        for symbols, c in vocab.items():
            if best[0] in symbols:
                symbols = _merge_word(symbols, best)
            merged[symbols] = merged.get(symbols, 0) + c
        vocab = merged
    return MergeTable(tuple(merges), marker)


def segment_word(word, table):
    cached = table._cache.get(word)
    if cached is not None:
        return cached
    symbols = _initial_symbols(word, table.marker)
    last = -1
    while len(symbols) > 1:
        # lowest-ranked applicable merge that comes after the last one applied
        best = None
        for pair in zip(symbols, symbols[1:]):
            r = table.rank(pair)
            if r is not None and r > last and (best is None or r < best):
                best = r
        if best is None:
            break
        symbols = _merge_word(symbols, table.merges[best])
        last = best
    table._cache[word] = symbols
    return symbols


def segment_words(words, table):
    out = []
    for w in words:
        out.extend(segment_word(w, table))
    return out


def join_subwords(tokens, marker=MARKER):
    """Invert segmentation: concatenate pieces and split after each marker."""
    words, buf = [], ""
    for tok in tokens:
        if tok.endswith(marker):
            words.append(buf + tok[: -len(marker)])
            buf = ""
        else:
            buf += tok
    if buf:
        words.append(buf)
    return words


def char_fallback(token, marker=MARKER):
    """Character-level decomposition of a subword unit."""
    if token.endswith(marker):
        body = token[: -len(marker)]
        return list(body[:-1]) + [body[-1] + marker] if body else [token]
    return list(token)


def subword_alphabet(words, marker=MARKER):
    """Every character symbol (with and without the marker) needed for fallback."""
    chars = set()
    for w in words:
        chars.update(w)
    return sorted(chars) + sorted(c + marker for c in chars)


def apply_bpe(sentence, table, word_vocab, subword_vocab):
    """Segment a word-level Sentence into a subword-level Sentence."""
    words = word_vocab.words(sentence)
    return subword_vocab.sentence(segment_words(words, table), strict=False,
                                  fallback=lambda t: char_fallback(t, table.marker))


def undo_bpe(sentence, subword_vocab, word_vocab=None, marker=MARKER):
    """Join a subword Sentence back into words.

    Returns a word-level Sentence when ``word_vocab`` is given, otherwise the
    list of word strings.
    """
    words = join_subwords(subword_vocab.words(sentence), marker)
    if word_vocab is None:
        return words
    return word_vocab.sentence(words)


def is_subword_vocab(vocab, marker=MARKER):
    flag = getattr(vocab, "_subword_flag", None)
    if flag is None:
        flag = any(t.endswith(marker) for t in vocab.tokens)
        vocab._subword_flag = flag
    return flag


def detokenize(sentence, vocab, marker=MARKER):
    """Plain text of a sentence, undoing BPE when the vocabulary is subword-level."""
    words = vocab.words(sentence)
    if is_subword_vocab(vocab, marker):
        words = join_subwords(words, marker)
    return " ".join(words)
