"""Shared fixtures: tiny vocabularies and randomly initialised tiny models."""
import numpy as np
import pytest

from wakesleep_nmt import autodiff as ad
from wakesleep_nmt.corpus import Sentence, Vocabulary
from wakesleep_nmt.rng import stream
from wakesleep_nmt.seq2seq import BACKWARD, FORWARD, ModelConfig, Seq2Seq


def make_vocab(n):
    """Vocabulary with ``n`` entries including EOS."""
    return Vocabulary([f"t{i}" for i in range(1, n)])


def make_model(src_size=4, trg_size=4, direction=FORWARD, emb=4, hidden=5, max_len=6, seed=0, scale=0.8,
               src_vocab=None, trg_vocab=None):
    src = src_vocab or make_vocab(src_size)
    trg = trg_vocab or make_vocab(trg_size)
    cfg = ModelConfig(emb_dim=emb, hidden=hidden, max_len=max_len, init_scale=scale)
    model = Seq2Seq.init(cfg, src, trg, direction, stream(seed, "test-model", direction))
    # nonzero biases so every parameter influences the loss
    rng = stream(seed, "test-bias")
    for name, p in model.params.items():
        if name.endswith("_b"):
            p.data = rng.uniform(-scale, scale, size=p.data.shape)
    return model


def sent(*ids):
    return Sentence(tuple(ids) + (0,))


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# (criterion, passed, detail) lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name, passed, detail in sorted(ACCEPTANCE):
            terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")


@pytest.fixture
def tiny_pair():
    theta = make_model(direction=FORWARD, seed=1)
    phi = make_model(direction=BACKWARD, seed=2, src_vocab=theta.in_vocab, trg_vocab=theta.out_vocab)
    return theta, phi


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


__all__ = ["ACCEPTANCE", "ad", "make_vocab", "make_model", "sent", "numeric_grad", "rel_error"]
