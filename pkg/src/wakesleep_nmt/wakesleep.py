"""Iterated back-translation as wake-sleep.

Wake: the inference network q_phi (target -> source) back-translates the
target monotext, and the translator p_theta is retrained on the real bitext
plus those pairs.  Sleep: pairs are dreamt from the generative model
(x ~ p(x), y ~ p_theta(y | x)) and q_phi is retrained on them.  In the
symmetric variant the dreams are replaced by p_theta's translations of a
source-side monotext.  One greedy iteration is classic back-translation.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

from .autodiff import TrainHyper
from .corpus import Bitext, union, write_bitext
from .langmodel import lm_sample
from .rng import child_seed, stream
from .seq2seq import BACKWARD, FORWARD, DecodeConfig, EarlyStopper, dev_bleu_scorer, train_mle, translate

log = logging.getLogger(__name__)

PHASE_MODES = ("greedy", "sample")


@dataclass
class WakeSleepConfig:
    iterations: int = 1
    dream_count: int | None = None
    wake_mode: str = "greedy"
    sleep_mode: str = "greedy"
    symmetric: bool = True
    hyper: TrainHyper = field(default_factory=TrainHyper)
    seed: int = 0
    sleep_includes_bitext: bool = True
    temperature: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.dream_count is not None and self.dream_count < 0:
            raise ValueError("dream_count must be >= 0")
        for mode in (self.wake_mode, self.sleep_mode):
            if mode not in PHASE_MODES:
                raise ValueError(f"phase decode mode must be greedy or sample, not {mode!r}")


@dataclass
class IterationMetrics:
    iteration: int
    dev_bleu: dict = field(default_factory=dict)
    test_bleu: dict = field(default_factory=dict)
    back_size: int = 0
    dreamt_size: int = 0
    early_stop_epoch: dict = field(default_factory=dict)
    sig_prev: dict = field(default_factory=dict)
    sig_base: dict = field(default_factory=dict)
    p_prev: dict = field(default_factory=dict)
    p_base: dict = field(default_factory=dict)
    theta_hash: str = ""
    phi_hash: str = ""

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class WakeSleepResult:
    theta: object
    phi: object
    metrics: list
    histories: list = field(default_factory=list)


def wake_phase(model, monotext, mode="greedy", seed=0, temperature=1.0, workers=1):
    """Translate every monotext sentence with ``model`` and pair it with its translation.

    A backward model reads target sentences y and yields pairs (x~, y); a
    forward model (symmetric variant) reads source sentences x and yields
    (x, y~).  Pairs are always oriented (source, target).
    """
    if monotext.vocab != model.in_vocab:
        raise ValueError("monotext vocabulary does not match the model input vocabulary")
    cfg = DecodeConfig(mode, temperature=temperature, seed=seed)
    outs = translate(model, monotext.sentences, cfg, workers=workers)
    if model.direction == BACKWARD:
        pairs = tuple(zip(outs, monotext.sentences))
        return Bitext(pairs, model.out_vocab, model.in_vocab, "back")
    pairs = tuple(zip(monotext.sentences, outs))
    return Bitext(pairs, model.in_vocab, model.out_vocab, "back")


def sleep_phase(p_model, lm, M, mode, rng, temperature=1.0, workers=1):
    """Dream M pairs: x~ drawn from the sentence prior, y~ decoded by p_theta."""
    if p_model.direction != FORWARD:
        raise ValueError("sleep phase needs the source->target model")
    xs = lm_sample(lm, rng, M) if M else []
    seed = int(rng.integers(0, 2 ** 63 - 1))
    ys = translate(p_model, xs, DecodeConfig(mode, temperature=temperature, seed=seed), workers=workers)
    return Bitext(tuple(zip(xs, ys)), p_model.in_vocab, p_model.out_vocab, "dreamt")


def train_early_stopping(model, data, hyper, dev, rng, workers):
    stopper = EarlyStopper(dev_bleu_scorer(dev, workers), hyper.patience)
    return train_mle(model, data, hyper, stopper=stopper, rng=rng)


def _dump(run_dir, i, name, bitext):
    if run_dir is None:
        return
    d = os.path.join(run_dir, f"iter{i}")
    os.makedirs(d, exist_ok=True)
    write_bitext(os.path.join(d, f"{name}.{bitext.role}.src"), os.path.join(d, f"{name}.{bitext.role}.trg"), bitext)


def _record(run_dir, i, theta, phi, metrics):
    metrics.theta_hash = theta.checkpoint_hash()
    metrics.phi_hash = phi.checkpoint_hash()
    if run_dir is None:
        return
    d = os.path.join(run_dir, f"iter{i}")
    os.makedirs(d, exist_ok=True)
    theta.save(os.path.join(d, "theta.ckpt"))
    phi.save(os.path.join(d, "phi.ckpt"))
    with open(os.path.join(run_dir, "metrics.jsonl"), "a", encoding="utf-8") as f:
        f.write(metrics.to_json() + "\n")


def run_wake_sleep(theta, phi, bitext, mono_trg, cfg, dev, lm_src=None, mono_src=None, hook=None,
                   run_dir=None, initial_info=None):
    """Run ``cfg.iterations`` wake-sleep iterations from MLE-trained models.

    ``hook(iteration, theta, phi, info)`` returns an :class:`IterationMetrics`
    (or None); it is called for iteration 0 and after every iteration.
    Strict mode needs ``lm_src``; symmetric mode needs ``mono_src``.
    """
    if dev is None:
        raise ValueError("wake-sleep needs a dev set for early stopping")
    if theta.direction != FORWARD or phi.direction != BACKWARD:
        raise ValueError("theta must be source->target and phi target->source")
    if theta.in_vocab != phi.out_vocab or theta.out_vocab != phi.in_vocab:
        raise ValueError("theta and phi disagree on vocabularies")
    if cfg.symmetric and mono_src is None:
        raise ValueError("symmetric mode needs a source-side monotext")
    if not cfg.symmetric and lm_src is None and cfg.iterations:
        raise ValueError("strict mode needs a source language model")

    def evaluate(i, info):
        m = hook(i, theta, phi, info) if hook is not None else None
        if m is None:
            m = IterationMetrics(i)
        m.back_size = info.get("back_size", 0)
        m.dreamt_size = info.get("dreamt_size", 0)
        m.early_stop_epoch = info.get("early_stop_epoch", {})
        _record(run_dir, i, theta, phi, m)
        return m

    metrics = [evaluate(0, dict(initial_info or {}))]
    histories = []
    seed = cfg.seed
    for i in range(1, cfg.iterations + 1):
        hyper = cfg.hyper
        # wake: back-translate target monotext with q_phi, retrain p_theta
        b_back = wake_phase(phi, mono_trg, cfg.wake_mode, child_seed(seed, "iter", i, "wake"), cfg.temperature,
                            cfg.workers)
        _dump(run_dir, i, "wake", b_back)
        res_theta = train_early_stopping(theta, union(bitext, b_back), hyper, dev,
                                         stream(seed, "iter", i, "train", FORWARD), cfg.workers)
        theta = res_theta.model

        # sleep: dream (or, symmetric, forward-translate source monotext), retrain q_phi
        if cfg.symmetric:
            b_sleep = wake_phase(theta, mono_src, cfg.sleep_mode, child_seed(seed, "iter", i, "sleep"),
                                 cfg.temperature, cfg.workers)
        else:
            M = len(mono_trg) if cfg.dream_count is None else cfg.dream_count
            b_sleep = sleep_phase(theta, lm_src, M, cfg.sleep_mode, stream(seed, "iter", i, "dream"),
                                  cfg.temperature, cfg.workers)
        _dump(run_dir, i, "sleep", b_sleep)
        phi_data = union(bitext, b_sleep) if cfg.sleep_includes_bitext else b_sleep
        if len(phi_data):
            res_phi = train_early_stopping(phi, phi_data, hyper, dev, stream(seed, "iter", i, "train", BACKWARD),
                                           cfg.workers)
            phi = res_phi.model
            phi_epoch = res_phi.best_epoch
            phi_hist = res_phi.history
        else:
            phi_epoch, phi_hist = None, []
        histories.append({"iteration": i, "forward": res_theta.history, "backward": phi_hist})
        info = {"back_size": len(b_back), "dreamt_size": len(b_sleep),
                "early_stop_epoch": {"forward": res_theta.best_epoch, "backward": phi_epoch}}
        metrics.append(evaluate(i, info))
        log.info("iteration %d done: %s", i, metrics[-1].test_bleu)
    return WakeSleepResult(theta, phi, metrics, histories)
