"""Corpus BLEU, paired approximate randomization, and the results table."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

NGRAM_ORDER = 4


@dataclass(frozen=True)
class BleuScore:
    score: float
    precisions: tuple
    brevity_penalty: float
    sys_len: int
    ref_len: int
    counts: tuple
    totals: tuple

    def __str__(self):
        return f"{self.score:.2f}"


@dataclass(frozen=True)
class SignificanceResult:
    p_value: float
    significant: bool
    trials: int
    observed_delta: float


def tokenize(line, lowercase=False):
    """Language-independent split close to mteval's 13a rules.

    Spaces go around every non-alphanumeric character, except ``.``, ``,``
    and ``:`` sitting between two digits.
    """
    if lowercase:
        line = line.lower()
    out = []
    n = len(line)
    for i, ch in enumerate(line):
        if ch.isalnum() or ch.isspace():
            out.append(ch)
        elif ch in ".,:" and 0 < i < n - 1 and line[i - 1].isdigit() and line[i + 1].isdigit():
            out.append(ch)
        else:
            out.append(f" {ch} ")
    return "".join(out).split()


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp, ref, lowercase=False):
    """[matches_1..4, totals_1..4, hyp_len, ref_len] for one segment."""
    h = tokenize(hyp, lowercase) if isinstance(hyp, str) else list(hyp)
    r = tokenize(ref, lowercase) if isinstance(ref, str) else list(ref)
    stats = np.zeros(2 * NGRAM_ORDER + 2, dtype=np.int64)
    for n in range(1, NGRAM_ORDER + 1):
        hc, rc = _ngrams(h, n), _ngrams(r, n)
        stats[n - 1] = sum(min(c, rc[g]) for g, c in hc.items())
        stats[NGRAM_ORDER + n - 1] = max(0, len(h) - n + 1)
    stats[-2], stats[-1] = len(h), len(r)
    return stats


def corpus_stats(hyps, refs, lowercase=False):
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise ValueError("cannot score an empty corpus")
    return np.stack([sentence_stats(h, r, lowercase) for h, r in zip(hyps, refs)])


def bleu_from_stats(totals_row):
    """Vectorised BLEU over the last axis of summed statistics.

    Orders with zero matches get exponential smoothing: the k-th such order
    uses 1 / (2^k * total_n).  A corpus with no n-grams of some order scores 0.
    """
    s = np.asarray(totals_row, dtype=float)
    matches, totals = s[..., :NGRAM_ORDER], s[..., NGRAM_ORDER : 2 * NGRAM_ORDER]
    sys_len, ref_len = s[..., -2], s[..., -1]
    zero = matches == 0
    k = np.cumsum(zero, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(zero, 1.0 / (2.0 ** k * totals), matches / totals)
        log_mean = np.log(prec).mean(axis=-1)
        bp = np.where(sys_len < ref_len, np.exp(1.0 - ref_len / sys_len), 1.0)
    ok = (totals > 0).all(axis=-1) & (sys_len > 0)
    return np.where(ok, 100.0 * bp * np.exp(np.where(ok, log_mean, 0.0)), 0.0)


def bleu(hyps, refs, lowercase=False):
    """Corpus BLEU-4 with one reference per hypothesis."""
    tot = corpus_stats(hyps, refs, lowercase).sum(axis=0)
    matches, totals = tot[:NGRAM_ORDER], tot[NGRAM_ORDER : 2 * NGRAM_ORDER]
    sys_len, ref_len = int(tot[-2]), int(tot[-1])
    precs, k = [], 0
    for m, t in zip(matches, totals):
        if t == 0:
            precs.append(0.0)
        elif m == 0:
            k += 1
            precs.append(1.0 / (2 ** k * t))
        else:
            precs.append(m / t)
    if sys_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if sys_len >= ref_len else math.exp(1.0 - ref_len / sys_len)
    if min(precs) == 0.0 or bp == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precs) / NGRAM_ORDER)
    return BleuScore(score, tuple(precs), bp, sys_len, ref_len, tuple(int(m) for m in matches),
                     tuple(int(t) for t in totals))


def paired_significance(hyps_a, hyps_b, refs, trials=10000, alpha=0.05, rng=None, lowercase=False,
                        chunk=1000):
    """Paired approximate randomization on corpus BLEU.

    In each trial every segment's pair of outputs is swapped between the two
    systems with probability 1/2.  The p-value is add-one smoothed:
    (#{|delta_trial| >= |delta_obs|} + 1) / (trials + 1).
    """
    if not len(hyps_a) == len(hyps_b) == len(refs):
        raise ValueError("hypotheses and references are not aligned")
    if trials < 1000:
        raise ValueError("at least 1000 randomization trials are required")
    if rng is None:
        rng = np.random.default_rng(0)
    sa = corpus_stats(hyps_a, refs, lowercase).astype(float)
    sb = corpus_stats(hyps_b, refs, lowercase).astype(float)
    base_a, base_b = sa.sum(axis=0), sb.sum(axis=0)
    observed = float(bleu_from_stats(base_a) - bleu_from_stats(base_b))
    diff = sb - sa
    hits, done = 0, 0
    while done < trials:
        n = min(chunk, trials - done)
        swap = (rng.random((n, len(refs))) < 0.5).astype(float)
        moved = swap @ diff
        delta = bleu_from_stats(base_a + moved) - bleu_from_stats(base_b - moved)
        hits += int(np.count_nonzero(np.abs(delta) >= abs(observed) - 1e-9))
        done += n
    p = (hits + 1) / (trials + 1)
    return SignificanceResult(p, p < alpha, trials, observed)


# --------------------------------------------------------------------------
# report


def _fmt_delta(v):
    return "—" if v is None else f"{v:+.2f}"


def render_report(metrics, directions=None, alpha=0.05):
    """Render per-iteration test BLEU in the layout of the results table.

    Returns ``(text, tsv)``.  Cells carry ``*`` (significant vs. previous
    iteration) and ``+`` (significant vs. iteration 0); the column maximum
    is wrapped in brackets.
    """
    metrics = sorted(metrics, key=lambda m: m.iteration)
    if not metrics or metrics[0].iteration != 0:
        raise ValueError("report needs iteration 0")
    if directions is None:
        directions = list(metrics[0].test_bleu)
    best = {d: max(m.test_bleu[d] for m in metrics) for d in directions}

    header = [""] + list(directions)
    rows = []
    for m in metrics:
        cells = [f"Iteration {m.iteration}"]
        for d in directions:
            v = m.test_bleu[d]
            cell = f"[{v:.2f}]" if v == best[d] and len(metrics) > 1 else f"{v:.2f}"
            if (m.sig_prev or {}).get(d):
                cell += "*"
            if (m.sig_base or {}).get(d):
                cell += "+"
            cells.append(cell)
        rows.append(cells)
    by_iter = {m.iteration: m for m in metrics}
    for ref_iter in (1, 0):
        cells = [f"Δ(best, Iteration {ref_iter})"]
        for d in directions:
            if ref_iter not in by_iter or len(metrics) < 2:
                cells.append(_fmt_delta(None))
            else:
                cells.append(_fmt_delta(best[d] - by_iter[ref_iter].test_bleu[d]))
        rows.append(cells)
    legend = (f"legend: * significant vs previous iteration (p < {alpha:g}); "
              f"+ significant vs iteration 0; [x] best in column")

    table = [header] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    body = ["  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r)).rstrip()
            for r in table]
    rule = "-" * max(len(line) for line in body)
    lines = body[:1] + [rule] + body[1 : len(metrics) + 1] + [rule] + body[len(metrics) + 1 :] + [legend]
    text = "\n".join(lines) + "\n"
    tsv = "\n".join("\t".join(r) for r in table) + "\n# " + legend + "\n"
    return text, tsv
