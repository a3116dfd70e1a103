"""End-to-end experiment: data, subwords, iteration-0 training, wake-sleep, report.

Everything random is derived from ``config.seed``.  A run directory holds
the corpora, merge table, vocabularies, per-iteration checkpoints and
synthetic bitexts, ``metrics.jsonl``, ``report.txt``/``report.tsv`` and a
``manifest.json`` from which the run can be repeated.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, replace

from . import __version__
from .config import dump_config
from .corpus import Bitext, Monotext, Vocabulary, file_sha256, load_bitext, load_monotext
from .evaluation import bleu, paired_significance, render_report
from .langmodel import build_lm
from .rng import stream
from .seq2seq import BACKWARD, FORWARD, DecodeConfig, Seq2Seq, translate
from .subword import MergeTable, detokenize, learn_bpe, segment_words, subword_alphabet
from .synthdata import generate_task
from .wakesleep import IterationMetrics, WakeSleepConfig, run_wake_sleep, train_early_stopping

log = logging.getLogger(__name__)

DIRECTIONS = {FORWARD: "src-trg", BACKWARD: "trg-src"}
SPLITS = ("train.src", "train.trg", "mono.src", "mono.trg", "dev.src", "dev.trg", "test.src", "test.trg")


@dataclass
class Data:
    src_vocab: Vocabulary
    trg_vocab: Vocabulary
    merges: MergeTable | None
    bitext: Bitext
    mono_src: Monotext
    mono_trg: Monotext
    dev: Bitext
    test: Bitext
    checksums: dict


def _read_tokens(path):
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f if line.strip()]


def materialize_corpora(cfg, data_dir):
    """Write the raw (word-level) corpora into ``data_dir``; returns checksums."""
    if cfg.data.dir is not None:
        os.makedirs(data_dir, exist_ok=True)
        checksums = {}
        for name in SPLITS:
            src = os.path.join(cfg.data.dir, name)
            if not os.path.exists(src):
                raise FileNotFoundError(f"missing corpus file {src}")
            dst = os.path.join(data_dir, name)
            if os.path.abspath(src) != os.path.abspath(dst):
                with open(src, "rb") as f, open(dst, "wb") as g:
                    g.write(f.read())
            checksums[name] = file_sha256(dst)
        return checksums
    task = generate_task(replace(cfg.task, seed=cfg.seed))
    return task.write(data_dir)


def prepare_data(cfg, data_dir):
    checksums = materialize_corpora(cfg, data_dir)
    raw = {name: _read_tokens(os.path.join(data_dir, name)) for name in SPLITS}
    training = {"src": raw["train.src"] + raw["mono.src"], "trg": raw["train.trg"] + raw["mono.trg"]}

    merges = None
    if cfg.bpe.enabled:
        merges = learn_bpe(training["src"] + training["trg"], cfg.bpe.merges)
        merges.save(os.path.join(data_dir, "bpe.merges"))
        vocabs = {}
        for side, lines in training.items():
            words = {w for line in lines for w in line}
            units = {u for w in words for u in segment_words([w], merges)}
            vocabs[side] = Vocabulary.build([sorted(units)], extra=subword_alphabet(words, merges.marker))
    else:
        vocabs = {side: Vocabulary.build(lines) for side, lines in training.items()}
    src_vocab, trg_vocab = vocabs["src"], vocabs["trg"]
    src_vocab.save(os.path.join(data_dir, "vocab.src"))
    trg_vocab.save(os.path.join(data_dir, "vocab.trg"))

    def path(name):
        return os.path.join(data_dir, name)

    return Data(
        src_vocab, trg_vocab, merges,
        load_bitext(path("train.src"), path("train.trg"), src_vocab, trg_vocab, merges),
        load_monotext(path("mono.src"), src_vocab, merges),
        load_monotext(path("mono.trg"), trg_vocab, merges),
        load_bitext(path("dev.src"), path("dev.trg"), src_vocab, trg_vocab, merges),
        load_bitext(path("test.src"), path("test.trg"), src_vocab, trg_vocab, merges),
        checksums,
    )


class Evaluator:
    """Per-iteration hook: dev BLEU, test BLEU (beam) and significance marks."""

    def __init__(self, data, cfg, run_dir=None):
        self.data = data
        self.cfg = cfg
        self.run_dir = run_dir
        self.hyps = {}   # iteration -> direction label -> detokenized test outputs
        self.refs = {}

    def _outputs(self, model, bitext, mode):
        pairs = [model.orient(p) for p in bitext.pairs]
        dcfg = DecodeConfig(mode, beam_width=self.cfg.eval.beam_width)
        outs = translate(model, [p[0] for p in pairs], dcfg, workers=self.cfg.workers)
        hyps = [detokenize(h, model.out_vocab) for h in outs]
        refs = [detokenize(p[1], model.out_vocab) for p in pairs]
        return hyps, refs

    def _significant(self, i, label, other):
        ev = self.cfg.eval
        rng = stream(self.cfg.seed, "significance", i, label, other)
        res = paired_significance(self.hyps[i][label], self.hyps[other][label], self.refs[label],
                                  trials=ev.trials, alpha=ev.alpha, rng=rng, lowercase=ev.lowercase)
        return res

    def __call__(self, i, theta, phi, info):
        m = IterationMetrics(i)
        self.hyps[i] = {}
        lc = self.cfg.eval.lowercase
        for model in (theta, phi):
            label = DIRECTIONS[model.direction]
            dh, dr = self._outputs(model, self.data.dev, "greedy")
            m.dev_bleu[label] = round(bleu(dh, dr, lc).score, 6)
            th, tr = self._outputs(model, self.data.test, "beam")
            self.hyps[i][label], self.refs[label] = th, tr
            m.test_bleu[label] = round(bleu(th, tr, lc).score, 6)
            if self.run_dir is not None:
                d = os.path.join(self.run_dir, f"iter{i}")
                os.makedirs(d, exist_ok=True)
                with open(os.path.join(d, f"test.{label}.hyp"), "w", encoding="utf-8", newline="\n") as f:
                    f.writelines(h + "\n" for h in th)
            if i > 0:
                prev = self._significant(i, label, i - 1)
                base = self._significant(i, label, 0)
                m.sig_prev[label], m.p_prev[label] = prev.significant, prev.p_value
                m.sig_base[label], m.p_base[label] = base.significant, base.p_value
        log.info("iteration %d test BLEU %s", i, m.test_bleu)
        return m


def build_manifest(cfg, data):
    return {
        "config": cfg.flat(),
        "seed": cfg.seed,
        "code_version": __version__,
        "corpus_checksums": data.checksums,
        "vocab_digests": {"src": data.src_vocab.digest(), "trg": data.trg_vocab.digest()},
        "wake_mode": cfg.wakesleep.wake_mode,
        "sleep_mode": cfg.wakesleep.sleep_mode,
        "symmetric": cfg.wakesleep.symmetric,
    }


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class ExperimentResult:
    metrics: list
    report_text: str
    report_tsv: str
    run_dir: str
    theta: Seq2Seq
    phi: Seq2Seq
    seconds: float


def train_initial(cfg, data, run_dir=None):
    """Iteration 0: both directions trained by MLE on the observed bitext only."""
    models, epochs = {}, {}
    for direction in (FORWARD, BACKWARD):
        model = Seq2Seq.init(cfg.model, data.src_vocab, data.trg_vocab, direction,
                             stream(cfg.seed, "init", direction))
        res = train_early_stopping(model, data.bitext, cfg.train, data.dev,
                                   stream(cfg.seed, "iter", 0, "train", direction), cfg.workers)
        models[direction], epochs[direction] = res.model, res.best_epoch
    return models[FORWARD], models[BACKWARD], {"early_stop_epoch": epochs}


def wakesleep_config(cfg):
    ws = cfg.wakesleep
    hyper = cfg.train if ws.epochs is None else replace(cfg.train, max_epochs=ws.epochs)
    return WakeSleepConfig(iterations=ws.iterations, dream_count=ws.dream_count, wake_mode=ws.wake_mode,
                           sleep_mode=ws.sleep_mode, symmetric=ws.symmetric, hyper=hyper, seed=cfg.seed,
                           sleep_includes_bitext=ws.sleep_includes_bitext, temperature=ws.temperature,
                           workers=cfg.workers)


def run_experiment(cfg, run_dir=None):
    """Run the full pipeline and write every artifact under ``run_dir``."""
    cfg.validate()
    run_dir = run_dir or cfg.run_dir
    os.makedirs(run_dir, exist_ok=True)
    t0 = time.perf_counter()
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)

    data = prepare_data(cfg, os.path.join(run_dir, "data"))
    manifest = build_manifest(cfg, data)
    _write_json(os.path.join(run_dir, "manifest.json"), manifest)
    with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write(dump_config(cfg))

    theta, phi, info = train_initial(cfg, data, run_dir)
    wcfg = wakesleep_config(cfg)
    lm_src = build_lm(data.mono_src) if not wcfg.symmetric else None
    evaluator = Evaluator(data, cfg, run_dir)
    result = run_wake_sleep(theta, phi, data.bitext, data.mono_trg, wcfg, data.dev, lm_src=lm_src,
                            mono_src=data.mono_src, hook=evaluator, run_dir=run_dir, initial_info=info)

    text, tsv = render_report(result.metrics, list(DIRECTIONS.values()), cfg.eval.alpha)
    for name, body in (("report.txt", text), ("report.tsv", tsv)):
        with open(os.path.join(run_dir, name), "w", encoding="utf-8", newline="\n") as f:
            f.write(body)
    _write_json(os.path.join(run_dir, "histories.json"), result.histories)
    manifest["report_sha256"] = file_sha256(os.path.join(run_dir, "report.txt"))
    manifest["checkpoints"] = {"theta": result.metrics[-1].theta_hash, "phi": result.metrics[-1].phi_hash}
    _write_json(os.path.join(run_dir, "manifest.json"), manifest)
    seconds = time.perf_counter() - t0
    log.info("run finished in %.1f s", seconds)
    return ExperimentResult(result.metrics, text, tsv, run_dir, result.theta, result.phi, seconds)


def load_metrics(path):
    """Read ``metrics.jsonl`` back into :class:`IterationMetrics` records."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(IterationMetrics(**json.loads(line)))
    return out
