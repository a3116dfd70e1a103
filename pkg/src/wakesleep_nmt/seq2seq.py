"""Attentional GRU encoder-decoder.

One architecture serves both translation directions: a bidirectional GRU
encoder, additive attention over the concatenated encoder states, and a
single-layer GRU decoder whose readout sees the decoder state, the attention
context and the previous output embedding.  ``direction`` only records which
side of a bitext the model reads.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .corpus import Sentence
from .rng import stream

log = logging.getLogger(__name__)

FORWARD = "forward"
BACKWARD = "backward"
MODES = ("greedy", "sample", "beam")
_NEG = -1e30


@dataclass
class ModelConfig:
    emb_dim: int = 32
    hidden: int = 64
    max_len: int = 30
    init_scale: float = 0.1


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    beam_width: int = 10
    max_len: int | None = None
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _param_shapes(cfg, n_in, n_out):
    E, H = cfg.emb_dim, cfg.hidden
    shapes = {
        "emb_in": (n_in, E),
        "emb_out": (n_out, E),
        "init_W": (H, H),
        "init_b": (H,),
        "att_Wk": (2 * H, H),
        "att_Wq": (H, H),
        "att_v": (H, 1),
        "out_W": (H + 2 * H + E, n_out),
        "out_b": (n_out,),
    }
    for name, n_x in (("encf", E), ("encb", E), ("dec", E + 2 * H)):
        shapes[f"{name}_Wx"] = (n_x, 3 * H)
        shapes[f"{name}_b"] = (3 * H,)
        shapes[f"{name}_Wh"] = (H, 2 * H)
        shapes[f"{name}_Whc"] = (H, H)
    return shapes


class Seq2Seq:
    """Parameters of one translation direction (``theta`` or ``phi``)."""

    def __init__(self, config, in_vocab, out_vocab, direction, params):
        if direction not in (FORWARD, BACKWARD):
            raise ValueError(f"bad direction {direction!r}")
        self.config = config
        self.in_vocab = in_vocab
        self.out_vocab = out_vocab
        self.direction = direction
        self.params = params
        expected = _param_shapes(config, len(in_vocab), len(out_vocab))
        for name, shape in expected.items():
            if name not in params or params[name].shape != shape:
                raise ValueError(f"parameter {name} missing or has wrong shape")

    @classmethod
    def init(cls, config, src_vocab, trg_vocab, direction, rng):
        in_vocab, out_vocab = (src_vocab, trg_vocab) if direction == FORWARD else (trg_vocab, src_vocab)
        params = {}
        for name, shape in _param_shapes(config, len(in_vocab), len(out_vocab)).items():
            if name.endswith("_b"):
                data = np.zeros(shape)
            else:
                data = rng.uniform(-config.init_scale, config.init_scale, size=shape)
            params[name] = ad.parameter(data)
        return cls(config, in_vocab, out_vocab, direction, params)

    # -- bookkeeping -------------------------------------------------------

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=ad.DTYPE)

    def copy(self):
        params = {k: ad.parameter(p.data.copy()) for k, p in self.params.items()}
        return Seq2Seq(copy.copy(self.config), self.in_vocab, self.out_vocab, self.direction, params)

    def header(self):
        return {
            "config": asdict(self.config),
            "direction": self.direction,
            "in_vocab": self.in_vocab.digest(),
            "out_vocab": self.out_vocab.digest(),
        }

    def to_bytes(self, optimizer=None):
        return ad.checkpoint_bytes(self.state_dict(), self.header(), optimizer)

    def checkpoint_hash(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path, optimizer=None):
        return ad.save_checkpoint(path, self.state_dict(), self.header(), optimizer)

    @classmethod
    def load(cls, path, src_vocab, trg_vocab):
        tensors, header, _ = ad.load_checkpoint(path)
        direction = header["direction"]
        in_vocab, out_vocab = (src_vocab, trg_vocab) if direction == FORWARD else (trg_vocab, src_vocab)
        if header["in_vocab"] != in_vocab.digest() or header["out_vocab"] != out_vocab.digest():
            raise ValueError(f"{path}: vocabulary hash mismatch")
        cfg = ModelConfig(**header["config"])
        return cls(cfg, in_vocab, out_vocab, direction, {k: ad.parameter(v) for k, v in tensors.items()})

    def orient(self, pair):
        """(input, output) for a (source, target) bitext pair."""
        return pair if self.direction == FORWARD else (pair[1], pair[0])


ModelParameters = Seq2Seq


# --------------------------------------------------------------------------
# network pieces


def _pad(seqs, pad_id):
    B, L = len(seqs), max(len(s) for s in seqs)
    ids = np.full((B, L), pad_id, dtype=np.int64)
    mask = np.zeros((B, L))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.token_ids if isinstance(s, Sentence) else s
        mask[i, : len(s)] = 1.0
    return ids, mask


def _gru_step(P, prefix, xp, h, m):
    return ad.gru_cell(xp, h, P[prefix + "_Wh"], P[prefix + "_Whc"], m)


class _Encoded:
    __slots__ = ("enc", "keys", "bias", "s0")

    def __init__(self, enc, keys, bias, s0):
        self.enc, self.keys, self.bias, self.s0 = enc, keys, bias, s0

    def rows(self, idx):
        return _Encoded(Tensor(self.enc.data[idx]), Tensor(self.keys.data[idx]), self.bias[idx],
                        Tensor(self.s0.data[idx]))


def _encode(model, inputs, p_drop=0.0, rng=None):
    P, H = model.params, model.config.hidden
    ids, mask = _pad(inputs, model.in_vocab.eos_id)
    B, S = ids.shape
    emb = ad.embedding(P["emb_in"], ids)
    if p_drop:
        emb = ad.dropout(emb, p_drop, rng)
    h0 = Tensor(np.zeros((B, H)))
    fwd, bwd = [None] * S, [None] * S
    for prefix, order, out in (("encf", range(S), fwd), ("encb", range(S - 1, -1, -1), bwd)):
        xp = emb @ P[prefix + "_Wx"] + P[prefix + "_b"]
        h = h0
        for t in order:
            m = mask[:, t : t + 1]
            h = _gru_step(P, prefix, xp[:, t], h, None if m.all() else m)
            out[t] = h
    enc = ad.concat([ad.stack(fwd, axis=1), ad.stack(bwd, axis=1)], axis=-1)
    keys = enc @ P["att_Wk"]
    s0 = ad.tanh(bwd[0] @ P["init_W"] + P["init_b"])
    bias = np.where(mask > 0, 0.0, _NEG)
    return _Encoded(enc, keys, bias, s0)


def _attend(model, cache, s):
    P = model.params
    return ad.additive_attention(cache.keys, s @ P["att_Wq"], P["att_v"], cache.bias, cache.enc)


def _dec_step(model, cache, s, prev_emb):
    """Advance the decoder one step; returns (new state, readout features)."""
    P = model.params
    ctx = _attend(model, cache, s)
    x = ad.concat([prev_emb, ctx], axis=-1)
    xp = x @ P["dec_Wx"] + P["dec_b"]
    s = _gru_step(P, "dec", xp, s, None)
    return s, ad.concat([s, ctx, prev_emb], axis=-1)


def sequence_log_probs(model, inputs, outputs, p_drop=0.0, rng=None, truncate_at=None):
    """Teacher-forced log p(output | input) for a batch, as a (B,) Tensor.

    Every output step, including the final EOS, contributes its
    log-softmax entry; padding positions are masked out.  With
    ``truncate_at=L``, outputs of length exactly L drop their final (forced)
    EOS term, matching length-capped decoding.
    """
    P = model.params
    eos = model.out_vocab.eos_id
    cache = _encode(model, inputs, p_drop, rng)
    out_ids, out_mask = _pad(outputs, eos)
    B, T = out_ids.shape
    if truncate_at is not None and truncate_at <= T:
        capped = out_mask.sum(axis=1) == truncate_at
        out_mask[capped, truncate_at - 1] = 0.0
    prev = np.concatenate([np.full((B, 1), eos), out_ids[:, :-1]], axis=1)
    prev_emb = ad.embedding(P["emb_out"], prev)
    if p_drop:
        prev_emb = ad.dropout(prev_emb, p_drop, rng)
    s = cache.s0
    feats = []
    for t in range(T):
        s, f = _dec_step(model, cache, s, prev_emb[:, t])
        feats.append(f)
    feat = ad.stack(feats, axis=1)
    if p_drop:
        feat = ad.dropout(feat, p_drop, rng)
    logits = feat @ P["out_W"] + P["out_b"]
    logp = ad.log_softmax(ad.reshape(logits, (B * T, -1)), axis=-1)
    tok = ad.pick(logp, out_ids.reshape(-1)) * out_mask.reshape(-1)
    return ad.sum(ad.reshape(tok, (B, T)), axis=1)


def _check_len(model, seq, what):
    if len(seq) > model.config.max_len:
        raise ValueError(f"{what} of length {len(seq)} exceeds max_len {model.config.max_len}")


def score(model, inputs, outputs, batch_size=256, truncate_at=None):
    """log p(outputs[i] | inputs[i]) for every i, as a numpy array."""
    for x, y in zip(inputs, outputs):
        _check_len(model, x, "input")
        _check_len(model, y, "output")
    res = []
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            res.append(sequence_log_probs(model, inputs[i : i + batch_size], outputs[i : i + batch_size],
                                          truncate_at=truncate_at).data)
    return np.concatenate(res) if res else np.zeros(0)


def log_prob(model, x, y):
    """log p(y | x) under ``model`` (x is the model's input side)."""
    return float(score(model, [x], [y])[0])


def _step_log_probs(model, cache, s, prev_ids, temperature=1.0):
    P = model.params
    emb = ad.embedding(P["emb_out"], prev_ids)
    s, f = _dec_step(model, cache, s, emb)
    logits = (f @ P["out_W"] + P["out_b"]).data
    if temperature != 1.0:
        logits = logits / temperature
    return s, ad.log_softmax_np(logits)


def step_log_probs(model, x, y):
    """Per-step log-softmax entries of ``y`` computed incrementally."""
    eos = model.out_vocab.eos_id
    with no_grad():
        cache = _encode(model, [x])
        s, prev, out = cache.s0, np.array([eos]), []
        for tok in y.token_ids:
            s, lp = _step_log_probs(model, cache, s, prev)
            out.append(lp[0, tok])
            prev = np.array([tok])
    return np.array(out)


def next_token_distribution(model, x, prefix=()):
    """Probabilities over the output vocabulary after emitting ``prefix``."""
    eos = model.out_vocab.eos_id
    with no_grad():
        cache = _encode(model, [x])
        s, prev = cache.s0, np.array([eos])
        for tok in prefix:
            s, _ = _step_log_probs(model, cache, s, prev)
            prev = np.array([tok])
        _, lp = _step_log_probs(model, cache, s, prev)
    return np.exp(lp[0])


def truncated_log_prob(model, x, y, max_len):
    """log-probability that length-``max_len`` decoding emits ``y``.

    Decoding forces EOS at position ``max_len``, so a sentence of exactly
    that length carries the mass of its prefix and the final EOS factor is
    dropped.
    """
    steps = step_log_probs(model, x, y)
    if len(y) == max_len:
        steps = steps[:-1]
    return float(steps.sum())


# --------------------------------------------------------------------------
# decoding


def _max_len(model, cfg):
    return min(cfg.max_len or model.config.max_len, model.config.max_len)


def _decode_batch(model, inputs, cfg, rngs):
    """Greedy or ancestral-sampling decoding of a batch."""
    eos = model.out_vocab.eos_id
    max_len = _max_len(model, cfg)
    B = len(inputs)
    cache = _encode(model, inputs)
    s, prev = cache.s0, np.full(B, eos)
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for t in range(max_len):
        s, lp = _step_log_probs(model, cache, s, prev, cfg.temperature if cfg.mode == "sample" else 1.0)
        if t == max_len - 1:
            tok = np.full(B, eos)
        elif cfg.mode == "greedy":
            tok = lp.argmax(axis=1)
        else:
            cdf = np.cumsum(np.exp(lp), axis=1)
            tok = np.empty(B, dtype=np.int64)
            for i in range(B):
                if done[i]:
                    tok[i] = eos
                    continue
                u = rngs[i].random() * cdf[i, -1]
                tok[i] = min(int(np.searchsorted(cdf[i], u, side="right")), cdf.shape[1] - 1)
        for i in np.flatnonzero(~done):
            out[i].append(int(tok[i]))
        done |= tok == eos
        if done.all():
            break
        prev = tok
    return [Sentence(tuple(o)) for o in out]


def _beam_search(model, x, width, max_len):
    eos = model.out_vocab.eos_id
    cache = _encode(model, [x])
    s, prev = cache.s0, np.array([eos])
    scores = np.zeros(1)
    hyps = [[]]
    finished = []
    for t in range(max_len):
        k = len(hyps)
        s, lp = _step_log_probs(model, cache.rows(np.zeros(k, dtype=np.int64)), s, prev)
        if t == max_len - 1:
            for b in range(k):
                finished.append((scores[b] + lp[b, eos], hyps[b] + [eos]))
            break
        cand = (scores[:, None] + lp).reshape(-1)
        order = np.argsort(-cand, kind="stable")[: 2 * width]
        V = lp.shape[1]
        keep = []
        for rank, idx in enumerate(order):
            b, tok = divmod(int(idx), V)
            if tok == eos:
                if rank < width:
                    finished.append((cand[idx], hyps[b] + [eos]))
            elif len(keep) < width:
                keep.append((b, tok, cand[idx]))
        if len(finished) >= width or not keep:
            break
        best_done = max((f[0] for f in finished), default=-math.inf)
        if best_done >= keep[0][2]:
            break
        rows = np.array([b for b, _, _ in keep])
        hyps = [hyps[b] + [tok] for b, tok, _ in keep]
        scores = np.array([sc for _, _, sc in keep])
        prev = np.array([tok for _, tok, _ in keep])
        s = Tensor(s.data[rows])
    best = max(range(len(finished)), key=lambda i: (finished[i][0], -i))
    return Sentence(tuple(finished[best][1]))


def decode(model, x, cfg, rng=None):
    """Translate a single sentence."""
    _check_len(model, x, "input")
    with no_grad():
        if cfg.mode == "beam":
            return _beam_search(model, x, cfg.beam_width, _max_len(model, cfg))
        if rng is None:
            rng = stream(cfg.seed, "sentence", 0)
        return _decode_batch(model, [x], cfg, [rng])[0]


def translate(model, sentences, cfg, workers=1, chunk=64):
    """Decode a corpus.

    Sentence ``i`` always lands in chunk ``i // chunk`` and, in sample mode,
    draws from ``stream(cfg.seed, "sentence", i)``, so the output does not
    depend on ``workers``.
    """
    sentences = list(sentences)
    for x in sentences:
        _check_len(model, x, "input")

    def run(start):
        with no_grad():
            part = sentences[start : start + chunk]
            if cfg.mode == "beam":
                return [_beam_search(model, x, cfg.beam_width, _max_len(model, cfg)) for x in part]
            rngs = [stream(cfg.seed, "sentence", start + j) for j in range(len(part))] \
                if cfg.mode == "sample" else None
            return _decode_batch(model, part, cfg, rngs)

    starts = list(range(0, len(sentences), chunk))
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(st) for st in starts]
    return [s for p in parts for s in p]


# --------------------------------------------------------------------------
# training


class EarlyStopper:
    """Keep the best-scoring checkpoint; stop after ``patience`` evaluations without gain."""

    def __init__(self, score_fn, patience=3):
        self.score_fn = score_fn
        self.patience = patience
        self.best_score = -math.inf
        self.best_state = None
        self.best_epoch = None
        self.bad = 0

    def update(self, model, epoch):
        value = self.score_fn(model)
        if value > self.best_score:
            self.best_score, self.best_state, self.best_epoch = value, model.state_dict(), epoch
            self.bad = 0
        else:
            self.bad += 1
        return value

    @property
    def should_stop(self):
        return self.bad >= self.patience


def dev_bleu_scorer(dev, workers=1):
    """Greedy-decoding BLEU of a model on a dev bitext (its own direction)."""
    from .evaluation import bleu
    from .subword import detokenize

    def score_fn(model):
        pairs = [model.orient(p) for p in dev.pairs]
        hyps = translate(model, [p[0] for p in pairs], DecodeConfig("greedy"), workers=workers)
        return bleu([detokenize(h, model.out_vocab) for h in hyps],
                    [detokenize(p[1], model.out_vocab) for p in pairs]).score

    return score_fn


@dataclass
class TrainResult:
    model: Seq2Seq
    history: list
    best_epoch: int | None
    optimizer: ad.AdamState


def train_mle(model, data, hyper, dev=None, stopper=None, rng=None):
    """Minibatch maximum-likelihood training on a bitext.

    Works on a copy; the input model is not modified.  When ``dev`` (or an
    explicit ``stopper``) is given, dev BLEU is measured before training and
    after each epoch and the best checkpoint is returned.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty bitext")
    if rng is None:
        rng = stream(0, "train")
    model = model.copy()
    limit = min(hyper.max_len, model.config.max_len)
    pairs = [model.orient(p) for p in data.pairs]
    pairs = [p for p in pairs if len(p[0]) <= limit and len(p[1]) <= limit]
    if len(pairs) < len(data):
        log.info("dropped %d overlong pairs", len(data) - len(pairs))
    if not pairs:
        raise ValueError("no training pairs within max_len")
    if stopper is None and dev is not None:
        stopper = EarlyStopper(dev_bleu_scorer(dev), hyper.patience)
    opt = ad.AdamState(lr=hyper.lr)
    names = sorted(model.params)
    history = []
    if stopper is not None:
        history.append({"epoch": 0, "train_loss": None, "dev_bleu": stopper.update(model, 0)})
    for epoch in range(1, hyper.max_epochs + 1):
        perm = rng.permutation(len(pairs))
        total, count = 0.0, 0
        for start in range(0, len(perm), hyper.batch_size):
            batch = [pairs[i] for i in perm[start : start + hyper.batch_size]]
            lp = sequence_log_probs(model, [b[0] for b in batch], [b[1] for b in batch],
                                    hyper.dropout_prob, rng)
            loss = ad.mul(ad.sum(lp), -1.0 / len(batch))
            loss.backward()
            grads = [model.params[n].grad if model.params[n].grad is not None
                     else np.zeros_like(model.params[n].data) for n in names]
            grads = ad.clip_global_norm(grads, hyper.clip_norm) if hyper.clip_norm > 0 else grads
            new, opt = ad.adam_step({n: model.params[n].data for n in names}, dict(zip(names, grads)), opt,
                                    hyper.l2_weight)
            for n in names:
                model.params[n].data = new[n]
                model.params[n].grad = None
            total += -float(lp.data.sum())
            count += len(batch)
        rec = {"epoch": epoch, "train_loss": total / count, "dev_bleu": None}
        if stopper is not None:
            rec["dev_bleu"] = stopper.update(model, epoch)
        history.append(rec)
        log.debug("epoch %d loss %.4f dev %s", epoch, rec["train_loss"], rec["dev_bleu"])
        if stopper is not None and stopper.should_stop:
            break
    best_epoch = None
    if stopper is not None and stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
        best_epoch = stopper.best_epoch
    return TrainResult(model, history, best_epoch, opt)
