"""Command-line interface.

Every subcommand logs JSON lines to stderr.  Failures print exactly one
JSON line ``{"level": "error", "error": <kind>, "message": <text>}`` to
stderr and exit nonzero (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import __version__
from .config import ConfigError, load_config
from .corpus import CorpusError, Vocabulary, format_sentence
from .evaluation import bleu, paired_significance, render_report
from .rng import stream

log = logging.getLogger("wakesleep_nmt")

WORKERS_ENV = "WSNMT_WORKERS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class JsonFormatter(logging.Formatter):
    def format(self, record):
        rec = {"ts": round(record.created, 3), "level": record.levelname.lower(), "logger": record.name,
               "message": record.getMessage()}
        if record.exc_info:
            rec["exc"] = self.formatException(record.exc_info)
        return json.dumps(rec, ensure_ascii=False)


def _setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger("wakesleep_nmt")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def default_workers():
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be >= 1")
        return n
    return os.cpu_count() or 1


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_lines(path):
    from .corpus import _read_lines as read

    return read(path)


def _write_lines(path, lines):
    if path in (None, "-"):
        sys.stdout.writelines(line + "\n" for line in lines)
        return
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(line + "\n" for line in lines)


# --------------------------------------------------------------------------
# config handling shared by train / wakesleep / synth


def _overrides(args):
    pairs = []
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    for flag, key in (("seed", "seed"), ("run_dir", "run_dir"), ("iterations", "wakesleep.iterations"),
                      ("wake_mode", "wakesleep.wake_mode"), ("sleep_mode", "wakesleep.sleep_mode"),
                      ("dream_count", "wakesleep.dream_count")):
        value = getattr(args, flag, None)
        if value is not None:
            pairs.append((key, str(value)))
    if getattr(args, "strict", False):
        pairs.append(("wakesleep.symmetric", "false"))
    pairs.append(("workers", str(args.workers if args.workers is not None else default_workers())))
    return pairs


def _config(args):
    return load_config(args.config, _overrides(args)).validate()


def _add_config_args(p, run=True):
    p.add_argument("--config", help="flat key = value config file or a run manifest.json")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    if run:
        p.add_argument("--run-dir")


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from .synthdata import generate_task

    cfg = load_config(args.config, _overrides(args))
    if cfg.seed is None:
        raise ConfigError("seed is mandatory")
    task = generate_task(replace(cfg.task, seed=cfg.seed))
    checksums = task.write(args.out)
    manifest_path = os.path.join(args.out, "manifest.json")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    manifest.update({"command": "synth", "seed": cfg.seed, "code_version": __version__})
    _write_json(manifest_path, manifest)
    log.info("wrote task to %s", args.out)
    print(json.dumps({"out": args.out, "checksums": checksums}, sort_keys=True))


def cmd_bpe_learn(args):
    from .subword import learn_bpe

    lines = []
    for path in args.input:
        lines.extend(_read_lines(path))
    table = learn_bpe(lines, args.merges)
    table.save(args.out)
    print(json.dumps({"out": args.out, "merges": len(table)}))


def cmd_bpe_apply(args):
    from .subword import MergeTable, segment_words

    table = MergeTable.load(args.merges)
    out = [" ".join(segment_words(line.split(), table)) for line in _read_lines(args.input)]
    _write_lines(args.output, out)


def _run_manifest(cfg, data, extra):
    from .experiment import build_manifest

    m = build_manifest(cfg, data)
    m.update(extra)
    return m


def cmd_train(args):
    from .experiment import prepare_data, train_initial

    cfg = _config(args)
    run_dir = cfg.run_dir
    os.makedirs(run_dir, exist_ok=True)
    data = prepare_data(cfg, os.path.join(run_dir, "data"))
    theta, phi, info = train_initial(cfg, data)
    hashes = {"theta": theta.save(os.path.join(run_dir, "theta.ckpt")),
              "phi": phi.save(os.path.join(run_dir, "phi.ckpt"))}
    _write_json(os.path.join(run_dir, "manifest.json"),
                _run_manifest(cfg, data, {"command": "train", "checkpoints": hashes, **info}))
    print(json.dumps({"run_dir": run_dir, "checkpoints": hashes, **info}, sort_keys=True))


def _load_run_models(run_dir, checkpoint):
    from .seq2seq import Seq2Seq
    from .subword import MergeTable

    data_dir = os.path.join(run_dir, "data")
    src_vocab = Vocabulary.load(os.path.join(data_dir, "vocab.src"))
    trg_vocab = Vocabulary.load(os.path.join(data_dir, "vocab.trg"))
    merges_path = os.path.join(data_dir, "bpe.merges")
    merges = MergeTable.load(merges_path) if os.path.exists(merges_path) else None
    model = Seq2Seq.load(checkpoint, src_vocab, trg_vocab)
    return model, merges


def _find_checkpoint(run_dir, direction, iteration):
    name = "theta.ckpt" if direction == "forward" else "phi.ckpt"
    if iteration is not None:
        return os.path.join(run_dir, f"iter{iteration}", name)
    if os.path.exists(os.path.join(run_dir, name)):
        return os.path.join(run_dir, name)
    iters = sorted(int(d[4:]) for d in os.listdir(run_dir) if d.startswith("iter") and d[4:].isdigit())
    if not iters:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    return os.path.join(run_dir, f"iter{iters[-1]}", name)


def _encode_lines(lines, vocab, merges):
    from .subword import char_fallback, segment_words

    out = []
    for line in lines:
        words = line.split()
        if merges is None:
            out.append(vocab.sentence(words))
        else:
            out.append(vocab.sentence(segment_words(words, merges), strict=False,
                                      fallback=lambda t: char_fallback(t, merges.marker)))
    return out


def cmd_translate(args):
    from .seq2seq import DecodeConfig, translate
    from .subword import detokenize

    ckpt = args.checkpoint or _find_checkpoint(args.run_dir, args.direction, args.iteration)
    model, merges = _load_run_models(args.run_dir, ckpt)
    inputs = _encode_lines(_read_lines(args.input), model.in_vocab, merges)
    cfg = DecodeConfig(args.mode, beam_width=args.beam_width, max_len=args.max_len, seed=args.seed or 0)
    workers = args.workers if args.workers is not None else default_workers()
    outs = translate(model, inputs, cfg, workers=workers)
    _write_lines(args.output, [detokenize(o, model.out_vocab) for o in outs])


def cmd_wakesleep(args):
    from .experiment import run_experiment

    cfg = _config(args)
    result = run_experiment(cfg)
    sys.stdout.write(result.report_text)


def cmd_evaluate(args):
    hyps, refs = _read_lines(args.hyp), _read_lines(args.ref)
    if len(hyps) != len(refs):
        raise ValueError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    score = bleu(hyps, refs, args.lowercase)
    print(f"{score.score:.2f}")
    if args.baseline:
        base = _read_lines(args.baseline)
        if len(base) != len(refs):
            raise ValueError(f"{args.baseline} has {len(base)} lines but {args.ref} has {len(refs)}")
        rng = stream(args.seed, "evaluate", "significance")
        res = paired_significance(hyps, base, refs, args.trials, args.alpha, rng, args.lowercase)
        base_score = bleu(base, refs, args.lowercase).score
        print(json.dumps({"bleu": round(score.score, 4), "baseline_bleu": round(base_score, 4),
                          "delta": round(res.observed_delta, 4), "p_value": res.p_value,
                          "significant": res.significant, "trials": res.trials}, sort_keys=True))


def cmd_diagnose(args):
    from . import exactinference as ex
    from .corpus import load_monotext
    from .langmodel import build_lm

    theta, merges = _load_run_models(args.run_dir, _find_checkpoint(args.run_dir, "forward", args.iteration))
    phi, _ = _load_run_models(args.run_dir, _find_checkpoint(args.run_dir, "backward", args.iteration))
    data_dir = os.path.join(args.run_dir, "data")
    mono_src = load_monotext(os.path.join(data_dir, "mono.src"), theta.in_vocab, merges)
    if args.support:
        mono_src = replace(mono_src, sentences=mono_src.sentences[: args.support])
    lm = build_lm(mono_src)
    ys = _encode_lines(_read_lines(os.path.join(data_dir, "dev.trg"))[: args.sentences], theta.out_vocab, merges)
    for k, y in enumerate(ys):
        table = ex.exact_posterior(theta, lm, y)
        rec = {"sentence": k, "target": format_sentence(y, theta.out_vocab),
               "marginal_log_likelihood": table.log_normalizer,
               "posterior_max": float(table.posterior.max()),
               "inclusive_kl": ex.inclusive_kl(theta, lm, phi, y, table),
               "autoencoder": ex.autoencoder_objective(theta, phi, y, lm)}
        print(json.dumps(rec, sort_keys=True))
    rng = stream(args.seed, "diagnose", "sleep")
    print(json.dumps({"mc_sleep_objective": ex.mc_sleep_objective(theta, lm, phi, args.dreams, rng),
                      "dreams": args.dreams, "support": len(lm)}, sort_keys=True))


def cmd_report(args):
    from .experiment import DIRECTIONS, load_metrics

    metrics = load_metrics(args.metrics)
    text, tsv = render_report(metrics, list(DIRECTIONS.values()), args.alpha)
    sys.stdout.write(tsv if args.tsv else text)


# --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="wsnmt", description="Back-translation as wake-sleep: experiments on bitext and monotext.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="INFO")
    p.add_argument("--workers", type=int, help=f"decoding threads (default: ${WORKERS_ENV} or CPU count)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic translation task")
    _add_config_args(s, run=False)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("bpe-learn", help="learn a BPE merge table")
    s.add_argument("--input", nargs="+", required=True)
    s.add_argument("--merges", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bpe_learn)

    s = sub.add_parser("bpe-apply", help="segment a text file with a merge table")
    s.add_argument("--merges", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", default="-")
    s.set_defaults(func=cmd_bpe_apply)

    s = sub.add_parser("train", help="MLE-train both directions on the observed bitext")
    _add_config_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="decode a text file with a trained model")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--direction", choices=("forward", "backward"), default="forward")
    s.add_argument("--iteration", type=int)
    s.add_argument("--input", required=True)
    s.add_argument("--output", default="-")
    s.add_argument("--mode", choices=("greedy", "sample", "beam"), default="beam")
    s.add_argument("--beam-width", type=int, default=10)
    s.add_argument("--max-len", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("wakesleep", help="run iterated back-translation / wake-sleep")
    _add_config_args(s)
    s.add_argument("--iterations", type=int)
    s.add_argument("--wake-mode", choices=("greedy", "sample"))
    s.add_argument("--sleep-mode", choices=("greedy", "sample"))
    s.add_argument("--dream-count", type=int)
    s.add_argument("--strict", action="store_true", help="dream from the source LM instead of the symmetric variant")
    s.set_defaults(func=cmd_wakesleep)

    s = sub.add_parser("evaluate", help="corpus BLEU, optionally with a significance test")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--baseline")
    s.add_argument("--trials", type=int, default=10000)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--lowercase", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("diagnose", help="exact posterior diagnostics under the source LM")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--iteration", type=int)
    s.add_argument("--sentences", type=int, default=5)
    s.add_argument("--support", type=int, help="use only the first N source monotext sentences as LM support")
    s.add_argument("--dreams", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("report", help="render the results table from metrics.jsonl")
    s.add_argument("--metrics", required=True)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--tsv", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"level": "error", "error": kind, "message": " ".join(str(message).split())})
                     + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        _setup_logging(args.log_level.upper())
        args.func(args)
        return 0
    except UsageError as e:
        return _fail("usage", e, 2)
    except ConfigError as e:
        return _fail("config", e, 1)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        return _fail("path", f"{e.strerror}: {e.filename}" if e.filename else e, 1)
    except CorpusError as e:
        return _fail("path" if isinstance(e.__cause__, OSError) else "corpus", e, 1)
    except (ValueError, KeyError, OSError) as e:
        return _fail(type(e).__name__, e, 1)


if __name__ == "__main__":
    sys.exit(main())
