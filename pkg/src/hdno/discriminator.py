"""First-order Markov language models that score generated words.

The reward for emitting ``w`` after ``w_prev`` is ``log D(w | w_prev)``.
Sequences are scored with ``<bos>`` prepended; callers append ``<eos>``
themselves when the end symbol should be scored too.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .dialoguesim import BOS_ID
from .diffcore import OptimizerState, Tensor, adam_step, add, clip_grad_norm, embedding, log_softmax, matmul, mul, sum_


def pair_counts(seqs, vocab_size: int, bos_id: int = BOS_ID) -> np.ndarray:
    counts = np.zeros((vocab_size, vocab_size))
    for s in seqs:
        ids = np.asarray([bos_id] + list(s), dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
            raise ValueError("token id outside the vocabulary")
        np.add.at(counts, (ids[:-1], ids[1:]), 1.0)
    return counts


@dataclass
class BigramTable:
    counts: np.ndarray
    k_smooth: float = 1.0

    @property
    def vocab_size(self) -> int:
        return self.counts.shape[0]

    def probs(self) -> np.ndarray:
        num = self.counts + self.k_smooth
        den = num.sum(axis=1, keepdims=True)
        empty = den[:, 0] == 0
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        out[empty] = 1.0 / self.vocab_size
        return out

    def log_table(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs())


def bigram_fit(seqs, vocab_size: int, k_smooth: float = 1.0, bos_id: int = BOS_ID) -> BigramTable:
    seqs = list(seqs)
    if not seqs:
        raise ValueError("empty corpus")
    if k_smooth < 0:
        raise ValueError("k_smooth must be non-negative")
    return BigramTable(pair_counts(seqs, vocab_size, bos_id), k_smooth)


@dataclass
class DiscConfig:
    vocab_size: int
    embed_size: int
    hidden: int


class NeuralDisc:
    """Embedding -> one LSTM step from a zero state -> projection.

    The network only ever sees the previous token, so its conditional table
    over all V contexts is computed in one batched pass.
    """

    def __init__(self, vocab_size: int, embed_size: int, hidden: int, rng: np.random.Generator):
        p = nets.Params({"disc.embed": nets.uniform_init(rng, embed_size, (vocab_size, embed_size))})
        p.update(nets.init_lstm(rng, "disc.cell", embed_size, hidden))
        p["disc.out.w"] = nets.uniform_init(rng, hidden, (hidden, vocab_size))
        p["disc.out.b"] = nets.uniform_init(rng, hidden, (vocab_size,))
        self.params = p
        self.config = DiscConfig(vocab_size, embed_size, hidden)
        self.vocab_size = vocab_size
        self.hidden = hidden
        self._cache = None

    def log_table_t(self) -> Tensor:
        p = self.params
        x = embedding(p["disc.embed"], np.arange(self.vocab_size))
        zeros = Tensor(np.zeros((self.vocab_size, self.hidden)))
        h, _ = nets.lstm_cell(p, "disc.cell", x, zeros, zeros)
        return log_softmax(add(matmul(h, p["disc.out.w"]), p["disc.out.b"]), axis=-1)

    def log_table(self) -> np.ndarray:
        if self._cache is None:
            self._cache = self.log_table_t().data
        return self._cache

    def invalidate(self):
        self._cache = None

    def probs(self) -> np.ndarray:
        return np.exp(self.log_table())


def disc_reward(model, w_prev: int, w_cur: int) -> float:
    V = model.vocab_size
    if not (0 <= w_prev < V and 0 <= w_cur < V):
        raise ValueError("token outside the discriminator vocabulary")
    return float(model.log_table()[w_prev, w_cur])


def sequence_rewards(model, seq, bos_id: int = BOS_ID) -> np.ndarray:
    """Per-position rewards log D(w_t | w_{t-1}) with ``<bos>`` as w_0."""
    ids = np.asarray([bos_id] + list(seq), dtype=np.int64)
    return model.log_table()[ids[:-1], ids[1:]]


def per_token_nll(model, seqs, bos_id: int = BOS_ID) -> float:
    counts = pair_counts(seqs, model.vocab_size, bos_id)
    return float(-(counts * model.log_table()).sum() / counts.sum())


def disc_train(disc: NeuralDisc, oracle_seqs, generated_seqs, eta: float) -> Tensor:
    """Negative of sum log D over oracle pairs plus eta times generated pairs."""
    oracle_seqs = list(oracle_seqs)
    if not oracle_seqs:
        raise ValueError("empty oracle batch")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    weights = pair_counts(oracle_seqs, disc.vocab_size)
    if eta > 0 and generated_seqs:
        weights = weights + eta * pair_counts(generated_seqs, disc.vocab_size)
    return mul(sum_(mul(disc.log_table_t(), weights)), -1.0)


def fit_neural_disc(disc: NeuralDisc, seqs, epochs: int, lr: float = 1e-2, eta: float = 0.0,
                    generated=None, grad_clip: float = 5.0) -> list:
    """Full-batch Adam on the pair-count objective; returns per-epoch per-token NLL."""
    seqs = list(seqs)
    n_tokens = pair_counts(seqs, disc.vocab_size).sum()
    state = OptimizerState("adam", lr)
    params = disc.params.tensors()
    curve = []
    for _ in range(epochs):
        for t in params:
            t.grad = None
        loss = disc_train(disc, seqs, generated or [], eta)
        mul(loss, 1.0 / n_tokens).backward()
        grads, _ = clip_grad_norm([t.grad for t in params], grad_clip)
        adam_step([t.data for t in params], grads, state)
        disc.invalidate()
        curve.append(float(loss.data) / n_tokens)
    return curve


def save_disc(path: str, disc: NeuralDisc, meta: dict | None = None):
    from .model import save_checkpoint
    save_checkpoint(path, disc.params.arrays(), disc.config, meta)


def load_disc(path: str) -> NeuralDisc:
    from .model import load_checkpoint
    arrays, cfg, _ = load_checkpoint(path, DiscConfig)
    disc = NeuralDisc(cfg.vocab_size, cfg.embed_size, cfg.hidden, np.random.default_rng(0))
    if set(arrays) != set(disc.params):
        raise ValueError(f"{path}: parameter names do not match a discriminator")
    for k, t in disc.params.items():
        t.data[...] = arrays[k]
    return disc
