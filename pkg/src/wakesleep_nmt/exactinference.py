"""Exact posterior quantities under the finite-support sentence prior.

Because the language model only puts mass on attested sentences, the sum
over all source strings collapses to a sum over the LM support and the
marginal likelihood, the posterior over sources and the inclusive KL
become finite computations.  These functions are test oracles, not the
training path.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .corpus import Sentence
from .langmodel import lm_sample_indices
from .seq2seq import DecodeConfig, score, translate


@dataclass(frozen=True)
class PosteriorTable:
    y: Sentence
    support: tuple
    log_joint: np.ndarray
    posterior: np.ndarray
    log_normalizer: float


def _log_prior(lm):
    # only attested sentences are in the support, so no LOG_ZERO terms arise
    return lm.log_probs


def _log_likelihoods(p_model, lm, y):
    return score(p_model, list(lm.support), [y] * len(lm.support))


def marginal_log_likelihood(p_model, lm, y):
    """log sum_k p(y | x_k) p(x_k) over the LM support."""
    return float(logsumexp(_log_likelihoods(p_model, lm, y) + _log_prior(lm)))


def exact_posterior(p_model, lm, y):
    log_joint = _log_likelihoods(p_model, lm, y) + _log_prior(lm)
    log_z = float(logsumexp(log_joint))
    return PosteriorTable(y, lm.support, log_joint, np.exp(log_joint - log_z), log_z)


def _log_q(q, y, support):
    if callable(q) and not hasattr(q, "params"):
        return np.asarray(q(y, support), dtype=float)
    return score(q, [y] * len(support), list(support))


def inclusive_kl(p_model, lm, q, y, table=None):
    """KL(p(.|y) || q(.|y)) restricted to the LM support.

    ``q`` is either an inference network or a callable ``(y, support) ->
    log q(x_k | y)`` array.  Zero-posterior terms contribute nothing.
    """
    if table is None:
        table = exact_posterior(p_model, lm, y)
    log_q = _log_q(q, y, table.support)
    post = table.posterior
    nz = post > 0
    return float(np.sum(post[nz] * (np.log(post[nz]) - log_q[nz])))


def total_inclusive_kl(p_model, lm, q, ys):
    """Unweighted sum of per-sentence inclusive KLs over a monotext."""
    return sum(inclusive_kl(p_model, lm, q, y) for y in ys)


def mc_sleep_objective(p_model, lm, q_model, M, rng, max_len=None, temperature=1.0):
    """Mean log q(x~ | y~) over M dreamt pairs x~ ~ p(x), y~ ~ p(y | x~).

    This is the Monte Carlo estimate of the q-dependent part of the sleep
    objective, E_{p(x, y)}[log q(x | y)] (to be maximised).
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    idx = lm_sample_indices(lm, rng, M)
    xs = [lm.support[i] for i in idx]
    seed = int(rng.integers(0, 2 ** 63 - 1))
    ys = translate(p_model, xs, DecodeConfig("sample", max_len=max_len, temperature=temperature, seed=seed),
                   chunk=512)
    return float(np.mean(score(q_model, ys, xs)))


def enumerate_sentences(vocab_size, eos_id, max_len):
    """Every EOS-terminated id sequence of total length <= ``max_len``."""
    tokens = [i for i in range(vocab_size) if i != eos_id]
    for n in range(max_len):
        for body in itertools.product(tokens, repeat=n):
            yield Sentence(body + (eos_id,))


def decode_distribution(p_model, x, max_len):
    """All outputs of length-``max_len`` sampling and their log-probabilities.

    A sentence that hits the length cap gets EOS forced, so it carries the
    probability of its prefix.
    """
    ys = list(enumerate_sentences(len(p_model.out_vocab), p_model.out_vocab.eos_id, max_len))
    return ys, score(p_model, [x] * len(ys), ys, truncate_at=max_len)


def exact_sleep_objective(p_model, lm, q_model, max_len):
    """E_{x ~ p(x), y ~ p(y|x)}[log q(x | y)] by full enumeration."""
    prior = np.exp(_log_prior(lm))
    total = 0.0
    for x, px in zip(lm.support, prior):
        ys, lp = decode_distribution(p_model, x, max_len)
        lq = score(q_model, ys, [x] * len(ys))
        total += px * float(np.sum(np.exp(lp) * lq))
    return total


def autoencoder_objective(p_model, q_model, y, lm):
    """sum_k p(y | x_k) q(x_k | y) over the LM support (prior left out)."""
    lp = _log_likelihoods(p_model, lm, y)
    lq = score(q_model, [y] * len(lm.support), list(lm.support))
    return float(np.sum(np.exp(lp + lq)))
