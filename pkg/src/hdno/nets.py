"""Recurrent building blocks on top of :mod:`hdno.diffcore`.

Gate conventions (batched, row vectors, ``x @ W``):

GRU::

    z  = sigmoid(x Wz + h Uz + bz)          update gate, gates the candidate
    r  = sigmoid(x Wr + h Ur + br)
    h~ = tanh(x Wh + (r * h) Uh + bh)
    h' = (1 - z) * h + z * h~

LSTM::

    i, f, o = sigmoid(x W + h U + b) split
    g       = tanh(...)
    c'      = f * c + i * g
    h'      = o * tanh(c')

Fused weight layouts: GRU ``w_x`` is (in, 3H) in [z | r | h~] order and
``u_zr`` is (H, 2H); LSTM ``w_x`` and ``u_h`` are (in, 4H) / (H, 4H) in
[i | f | g | o] order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, add, concat, embedding, matmul, mul, sigmoid, softmax, sum_, tanh

MASK_FILL = -1e9


class Params(dict):
    """Named parameter tensors; insertion order is the checkpoint order."""

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.items()}

    def tensors(self) -> list:
        return list(self.values())

    def prefixed(self, prefix: str) -> "Params":
        return Params((k, v) for k, v in self.items() if k.startswith(prefix))


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def init_gru(rng, prefix: str, input_size: int, hidden: int) -> Params:
    return Params({
        f"{prefix}.w_x": uniform_init(rng, input_size, (input_size, 3 * hidden)),
        f"{prefix}.u_zr": uniform_init(rng, hidden, (hidden, 2 * hidden)),
        f"{prefix}.u_h": uniform_init(rng, hidden, (hidden, hidden)),
        f"{prefix}.b": uniform_init(rng, hidden, (3 * hidden,)),
    })


def init_lstm(rng, prefix: str, input_size: int, hidden: int) -> Params:
    return Params({
        f"{prefix}.w_x": uniform_init(rng, input_size, (input_size, 4 * hidden)),
        f"{prefix}.u_h": uniform_init(rng, hidden, (hidden, 4 * hidden)),
        f"{prefix}.b": uniform_init(rng, hidden, (4 * hidden,)),
    })


def _check_dims(x, h, w_x, hidden):
    if x.shape[-1] != w_x.shape[0]:
        raise ValueError(f"input size {x.shape[-1]} does not match weights {w_x.shape[0]}")
    if h.shape[-1] != hidden:
        raise ValueError(f"hidden size {h.shape[-1]} does not match {hidden}")


def gru_cell(p: Params, prefix: str, x, h, x_proj=None) -> Tensor:
    """One GRU step. ``x_proj`` may carry a precomputed ``x @ w_x + b``."""
    w_x, u_zr, u_h, b = (p[f"{prefix}.{k}"] for k in ("w_x", "u_zr", "u_h", "b"))
    H = u_h.shape[0]
    if x_proj is None:
        _check_dims(x, h, w_x, H)
        x_proj = add(matmul(x, w_x), b)
    elif h.shape[-1] != H:
        raise ValueError(f"hidden size {h.shape[-1]} does not match {H}")
    hzr = matmul(h, u_zr)
    z = sigmoid(add(x_proj[..., :H], hzr[..., :H]))
    r = sigmoid(add(x_proj[..., H:2 * H], hzr[..., H:]))
    cand = tanh(add(x_proj[..., 2 * H:], matmul(mul(r, h), u_h)))
    return add(h, mul(z, add(cand, mul(h, -1.0))))


def lstm_cell(p: Params, prefix: str, x, h, c, x_proj=None):
    w_x, u_h, b = (p[f"{prefix}.{k}"] for k in ("w_x", "u_h", "b"))
    H = u_h.shape[0]
    if x_proj is None:
        _check_dims(x, h, w_x, H)
        x_proj = add(matmul(x, w_x), b)
    elif h.shape[-1] != H:
        raise ValueError(f"hidden size {h.shape[-1]} does not match {H}")
    gates = add(x_proj, matmul(h, u_h))
    i = sigmoid(gates[..., :H])
    f = sigmoid(gates[..., H:2 * H])
    g = tanh(gates[..., 2 * H:3 * H])
    o = sigmoid(gates[..., 3 * H:])
    c_new = add(mul(f, c), mul(i, g))
    return mul(o, tanh(c_new)), c_new


# encoder ---------------------------------------------------------------------


@dataclass
class EncoderOutput:
    encoding: Tensor  # (B, 2H)
    attention: np.ndarray  # (B, T) weights, zero on padding


def init_encoder(rng, vocab_size: int, embed_size: int, hidden: int) -> Params:
    p = Params({"enc.embed": uniform_init(rng, embed_size, (vocab_size, embed_size))})
    p.update(init_gru(rng, "enc.fwd", embed_size, hidden))
    p.update(init_gru(rng, "enc.bwd", embed_size, hidden))
    p["enc.query"] = uniform_init(rng, 2 * hidden, (2 * hidden,))
    return p


def pad_batch(seqs, pad_id: int = 0):
    if any(len(s) == 0 for s in seqs):
        raise ValueError("empty token sequence")
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def encode_utterances(p: Params, seqs, dropout_mask=None) -> EncoderOutput:
    """Bidirectional GRU with a learned global attention query.

    Scores are ``[h_fwd; h_bwd] . query``; padded positions are masked out of
    the softmax, so a length-1 utterance puts weight 1.0 on its only token.
    """
    vocab = p["enc.embed"].shape[0]
    for s in seqs:
        if len(s) and (min(s) < 0 or max(s) >= vocab):
            raise ValueError("token id outside the vocabulary")
    ids, mask = pad_batch(seqs)
    B, T = ids.shape
    H = p["enc.fwd.u_h"].shape[0]
    emb = embedding(p["enc.embed"], ids)
    if dropout_mask is not None:
        emb = mul(emb, dropout_mask)
    proj_f = add(matmul(emb, p["enc.fwd.w_x"]), p["enc.fwd.b"])
    proj_b = add(matmul(emb, p["enc.bwd.w_x"]), p["enc.bwd.b"])
    h = Tensor(np.zeros((B, H)))
    fwd = []
    for t in range(T):
        m = mask[:, t:t + 1]
        h_new = gru_cell(p, "enc.fwd", None, h, x_proj=proj_f[:, t])
        h = add(mul(h_new, m), mul(h, 1.0 - m))
        fwd.append(h)
    h = Tensor(np.zeros((B, H)))
    bwd = [None] * T
    for t in reversed(range(T)):
        m = mask[:, t:t + 1]
        h_new = gru_cell(p, "enc.bwd", None, h, x_proj=proj_b[:, t])
        h = add(mul(h_new, m), mul(h, 1.0 - m))
        bwd[t] = h
    states = concat([concat([f, b], axis=-1)[:, None, :] for f, b in zip(fwd, bwd)], axis=1)
    scores = add(matmul(states, p["enc.query"]), (1.0 - mask) * MASK_FILL)
    weights = softmax(scores, axis=-1)
    encoding = sum_(mul(states, weights[:, :, None]), axis=1)
    return EncoderOutput(encoding, weights.data * mask)


def encode_utterance(p: Params, tokens) -> EncoderOutput:
    if len(tokens) == 0:
        raise ValueError("empty token sequence")
    return encode_utterances(p, [list(tokens)])


# heads -----------------------------------------------------------------------


def init_gaussian_head(rng, context_size: int, latent_size: int) -> Params:
    return Params({
        "head.w": uniform_init(rng, context_size, (context_size, 2 * latent_size)),
        "head.b": uniform_init(rng, context_size, (2 * latent_size,)),
    })


def gaussian_head(p: Params, c):
    """Diagonal Gaussian over latent acts: returns (mean, log-variance)."""
    w = p["head.w"]
    if c.shape[-1] != w.shape[0]:
        raise ValueError(f"context size {c.shape[-1]} does not match head input {w.shape[0]}")
    out = add(matmul(c, w), p["head.b"])
    K = w.shape[1] // 2
    return out[..., :K], out[..., K:]


def softmax_temperature(logits, T: float):
    if T <= 0:
        raise ValueError("temperature must be positive")
    if T == 1.0:
        return softmax(logits, axis=-1)
    return softmax(mul(logits, 1.0 / T), axis=-1)


def softmax_temperature_np(logits: np.ndarray, T: float) -> np.ndarray:
    if T <= 0:
        raise ValueError("temperature must be positive")
    x = logits / T if T != 1.0 else logits
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
