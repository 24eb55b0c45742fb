"""Option-level dialogue policy and word-level generator.

The high-level policy maps a context vector ``c`` to a diagonal Gaussian over a
latent act ``z``.  The low-level policy is an LSTM generator whose initial
hidden state is a linear projection of ``[c; z]``; emitting ``<eos>`` ends the
option.  Training-time code goes through :mod:`hdno.diffcore`; rollouts and
decoding use the numpy mirror in :class:`FastDecoder`.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import nets
from .diffcore import Tensor, add, concat, embedding, exp, log_softmax, matmul, mul, no_grad, square, sum_
from .dialoguesim import BOS_ID, EOS_ID, PAD_ID, UNK_ID

LOG_2PI = float(np.log(2.0 * np.pi))
CKPT_MAGIC = b"HDNOCKPT"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    state_size: int
    db_size: int = 4
    embed_size: int = 32
    utt_cell_size: int = 64
    dec_cell_size: int = 64
    y_size: int = 16
    max_utt_len: int = 30
    max_dec_len: int = 30

    @property
    def context_size(self) -> int:
        return 2 * self.utt_cell_size + self.state_size + self.db_size

    def digest(self) -> str:
        return config_digest(self)


def config_digest(config) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


class HdnoModel:
    """Parameter bundle plus policy-version counters."""

    ENCODER = "enc."
    HIGH = "head."
    LOW = "dec."

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        cfg = config
        self.config = cfg
        p = nets.init_encoder(rng, cfg.vocab_size, cfg.embed_size, cfg.utt_cell_size)
        p.update(nets.init_gaussian_head(rng, cfg.context_size, cfg.y_size))
        p["dec.embed"] = nets.uniform_init(rng, cfg.embed_size, (cfg.vocab_size, cfg.embed_size))
        fan = cfg.context_size + cfg.y_size
        p["dec.init.w"] = nets.uniform_init(rng, fan, (fan, cfg.dec_cell_size))
        p["dec.init.b"] = nets.uniform_init(rng, fan, (cfg.dec_cell_size,))
        p.update(nets.init_lstm(rng, "dec.cell", cfg.embed_size, cfg.dec_cell_size))
        p["dec.out.w"] = nets.uniform_init(rng, cfg.dec_cell_size, (cfg.dec_cell_size, cfg.vocab_size))
        p["dec.out.b"] = nets.uniform_init(rng, cfg.dec_cell_size, (cfg.vocab_size,))
        self.params = p
        self.encoder_frozen = False
        self.version = {"high": 0, "low": 0}

    def group(self, level: str) -> list:
        prefix = {"encoder": self.ENCODER, "high": self.HIGH, "low": self.LOW}[level]
        return [t for k, t in self.params.items() if k.startswith(prefix)]

    def group_names(self, level: str) -> list:
        prefix = {"encoder": self.ENCODER, "high": self.HIGH, "low": self.LOW}[level]
        return [k for k in self.params if k.startswith(prefix)]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def freeze_encoder(self):
        self.encoder_frozen = True
        for t in self.group("encoder"):
            t.requires_grad = False

    def copy_arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict):
        for k, v in arrays.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)


# context ---------------------------------------------------------------------


def build_context(model: HdnoModel, user_ids, state, db, dropout_mask=None) -> Tensor:
    """Context rows ``[encoding; state; db]`` for a batch of user utterances.

    ``user_ids`` is a list of id lists; ``state`` and ``db`` are (B, n) arrays.
    When the encoder is frozen the context is a constant.
    """
    cfg = model.config
    state = np.atleast_2d(np.asarray(state, dtype=np.float64))
    db = np.atleast_2d(np.asarray(db, dtype=np.float64))
    if state.shape[1] != cfg.state_size or db.shape[1] != cfg.db_size:
        raise ValueError(f"state/db widths {state.shape[1]}/{db.shape[1]} do not match "
                         f"{cfg.state_size}/{cfg.db_size}")
    if len(user_ids) != state.shape[0] or state.shape[0] != db.shape[0]:
        raise ValueError("batch sizes of utterances, state and db differ")
    seqs = [list(u)[:cfg.max_utt_len] for u in user_ids]
    if model.encoder_frozen:
        with no_grad():
            enc = nets.encode_utterances(model.params, seqs).encoding.data
        return Tensor(np.concatenate([enc, state, db], axis=1))
    enc = nets.encode_utterances(model.params, seqs, dropout_mask).encoding
    return concat([enc, Tensor(state), Tensor(db)], axis=1)


# latent acts -----------------------------------------------------------------


@dataclass
class LatentAct:
    z: object  # Tensor in reparameterize mode, ndarray in score mode
    mu: Tensor
    logvar: Tensor
    logprob: Tensor


def gaussian_logprob(z, mu, logvar) -> Tensor:
    """Diagonal Gaussian log-density summed over the last axis."""
    diff = add(z, mul(mu, -1.0))
    quad = mul(square(diff), exp(mul(logvar, -1.0)))
    return mul(sum_(add(add(quad, logvar), LOG_2PI), axis=-1), -0.5)


def gaussian_logprob_np(z, mu, logvar) -> np.ndarray:
    return -0.5 * np.sum((z - mu) ** 2 * np.exp(-logvar) + logvar + LOG_2PI, axis=-1)


def sample_act(model: HdnoModel, c, mode: str, rng: np.random.Generator | None = None,
               eps: np.ndarray | None = None) -> LatentAct:
    """Draw z from the dialogue policy.

    ``reparameterize``: z = mu + exp(logvar / 2) * eps keeps gradients to
    (mu, logvar).  ``score``: z is a constant sample and only ``logprob``
    carries gradient, as REINFORCE needs.
    """
    if mode not in ("reparameterize", "score"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    mu, logvar = nets.gaussian_head(model.params, c)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    if mode == "reparameterize":
        z = add(mu, mul(exp(mul(logvar, 0.5)), eps))
        logprob = gaussian_logprob(z.data, mu, logvar)
        return LatentAct(z, mu, logvar, logprob)
    z = mu.data + np.exp(0.5 * logvar.data) * eps
    return LatentAct(z, mu, logvar, gaussian_logprob(z, mu, logvar))


def gaussian_kl(mu, logvar) -> float:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over every entry."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(mu ** 2 + np.exp(logvar) - logvar - 1.0))


def gaussian_kl_t(mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-row KL as a differentiable tensor."""
    inner = add(add(add(square(mu), exp(logvar)), mul(logvar, -1.0)), -1.0)
    return mul(sum_(inner, axis=-1), 0.5)


# teacher-forced log-probabilities --------------------------------------------


def initial_state(model: HdnoModel, c, z):
    p = model.params
    h0 = add(matmul(concat([c, z], axis=-1), p["dec.init.w"]), p["dec.init.b"])
    return h0, Tensor(np.zeros(h0.shape))


def pad_targets(seqs, max_len: int):
    """Inputs ``<bos> w1..wn`` and targets ``w1..wn <eos>``, truncated to max_len."""
    rows = [list(s)[:max_len - 1] + [EOS_ID] for s in seqs]
    L = max(len(r) for r in rows)
    inp = np.full((len(rows), L), PAD_ID, dtype=np.int64)
    tgt = np.full((len(rows), L), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), L))
    for i, r in enumerate(rows):
        inp[i, 0] = BOS_ID
        inp[i, 1:len(r)] = r[:-1]
        tgt[i, :len(r)] = r
        mask[i, :len(r)] = 1.0
    return inp, tgt, mask


def token_logprobs(model: HdnoModel, c, z, inp: np.ndarray, tgt: np.ndarray,
                   temperature: float = 1.0, dropout_mask=None) -> Tensor:
    """(B, L) log pi(tgt_t | prefix, c, z); padded positions are garbage, mask them."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = model.params
    B, L = inp.shape
    h, cell = initial_state(model, c, z)
    emb = embedding(p["dec.embed"], inp)
    if dropout_mask is not None:
        emb = mul(emb, dropout_mask)
    proj = add(matmul(emb, p["dec.cell.w_x"]), p["dec.cell.b"])
    hs = []
    for t in range(L):
        h, cell = nets.lstm_cell(p, "dec.cell", None, h, cell, x_proj=proj[:, t])
        hs.append(h[:, None, :])
    logits = add(matmul(concat(hs, axis=1), p["dec.out.w"]), p["dec.out.b"])
    if temperature != 1.0:
        logits = mul(logits, 1.0 / temperature)
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros((B, L, p["dec.out.w"].shape[1]))
    onehot[np.arange(B)[:, None], np.arange(L)[None, :], tgt] = 1.0
    return sum_(mul(logp, onehot), axis=-1)


# numpy decoding --------------------------------------------------------------


@dataclass
class DecoderState:
    h: np.ndarray
    cell: np.ndarray
    prev: np.ndarray  # previously emitted token ids


class FastDecoder:
    """Graph-free mirror of the generator for sampling and search."""

    def __init__(self, model: HdnoModel):
        a = {k: v.data for k, v in model.params.items()}
        self.embed = a["dec.embed"]
        self.w_x, self.u_h, self.b = a["dec.cell.w_x"], a["dec.cell.u_h"], a["dec.cell.b"]
        self.init_w, self.init_b = a["dec.init.w"], a["dec.init.b"]
        self.out_w, self.out_b = a["dec.out.w"], a["dec.out.b"]
        self.H = self.u_h.shape[0]
        self.V = self.out_w.shape[1]

    def start(self, c: np.ndarray, z: np.ndarray) -> DecoderState:
        c, z = np.atleast_2d(c), np.atleast_2d(z)
        h = np.concatenate([c, z], axis=1) @ self.init_w + self.init_b
        return DecoderState(h, np.zeros_like(h), np.full(h.shape[0], BOS_ID, dtype=np.int64))

    def logits(self, state: DecoderState):
        H = self.H
        gates = self.embed[state.prev] @ self.w_x + self.b + state.h @ self.u_h
        sig = lambda x: 0.5 * (np.tanh(0.5 * x) + 1.0)
        i, f, g, o = sig(gates[:, :H]), sig(gates[:, H:2 * H]), np.tanh(gates[:, 2 * H:3 * H]), sig(gates[:, 3 * H:])
        cell = f * state.cell + i * g
        h = o * np.tanh(cell)
        return h @ self.out_w + self.out_b, h, cell


def decode_step(decoder: FastDecoder, state: DecoderState, T: float = 1.0):
    """Next-token distribution over the full vocabulary and the advanced state.

    The returned state still has ``prev`` unset; callers choose the token.
    """
    logits, h, cell = decoder.logits(state)
    return nets.softmax_temperature_np(logits, T), DecoderState(h, cell, state.prev)


def _log_softmax_np(x):
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def decode_batch(decoder: FastDecoder, c, z, max_len: int, T: float = 1.0,
                 rng: np.random.Generator | None = None):
    """Greedy (rng None) or temperature sampling for a batch.

    Returns the surface token lists (no ``<eos>``) and the emitted action
    sequences (with ``<eos>`` when it was produced).
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    state = decoder.start(c, z)
    B = state.h.shape[0]
    actions = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    for _ in range(max_len):
        logits, h, cell = decoder.logits(state)
        if rng is None:
            tok = np.argmax(logits, axis=1)
        else:
            probs = nets.softmax_temperature_np(logits, T)
            cdf = np.cumsum(probs, axis=1)
            u = rng.random(B)[:, None] * cdf[:, -1:]
            tok = np.minimum((cdf < u).sum(axis=1), decoder.V - 1)
        for i in np.flatnonzero(alive):
            actions[i].append(int(tok[i]))
        alive &= tok != EOS_ID
        state = DecoderState(h, cell, tok)
        if not alive.any():
            break
    surface = [[t for t in a if t != EOS_ID] for a in actions]
    return surface, actions


def decode_greedy(model_or_decoder, c, z, max_len: int = 30) -> list:
    dec = model_or_decoder if isinstance(model_or_decoder, FastDecoder) else FastDecoder(model_or_decoder)
    return decode_batch(dec, c, z, max_len)[0][0]


def sequence_logprob(decoder: FastDecoder, c, z, actions) -> float:
    state = decoder.start(c, z)
    total = 0.0
    for tok in actions:
        logits, h, cell = decoder.logits(state)
        total += float(_log_softmax_np(logits)[0, tok])
        state = DecoderState(h, cell, np.array([tok]))
    return total


def decode_beam(model_or_decoder, c, z, width: int, max_len: int = 30) -> list:
    """Length-normalized beam search for a single context.

    Each step keeps the ``width`` best expansions by cumulative log-prob;
    those ending in ``<eos>`` (or hitting max_len) retire.  Retired
    hypotheses are ranked by log-prob divided by the number of emitted steps
    (``<eos>`` included).  Ties go to the lexicographically smaller id sequence.  The
    greedy path joins the final pool so the result never scores below it.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    dec = model_or_decoder if isinstance(model_or_decoder, FastDecoder) else FastDecoder(model_or_decoder)
    s0 = dec.start(c, z)
    beams = [((), 0.0, s0.h, s0.cell)]
    finished = []
    for step in range(max_len):
        prev = np.array([b[0][-1] if b[0] else BOS_ID for b in beams], dtype=np.int64)
        hs = np.concatenate([b[2] for b in beams])
        cs = np.concatenate([b[3] for b in beams])
        logits, h, cell = dec.logits(DecoderState(hs, cs, prev))
        logp = _log_softmax_np(logits)
        cands = []
        for bi, (seq, score, _, _) in enumerate(beams):
            for tok in range(dec.V):
                cands.append((score + float(logp[bi, tok]), seq + (tok,), bi))
        cands.sort(key=lambda x: (-x[0], x[1]))
        live = []
        for score, seq, bi in cands[:width]:
            if seq[-1] == EOS_ID or step == max_len - 1:
                finished.append((score / len(seq), seq))
            else:
                live.append((seq, score, h[bi:bi + 1], cell[bi:bi + 1]))
        if not live:
            break
        beams = live
    greedy = decode_batch(dec, c, z, max_len)[1][0]
    finished.append((sequence_logprob(dec, c, z, greedy) / len(greedy), tuple(greedy)))
    finished.sort(key=lambda x: (-x[0], x[1]))
    return [t for t in finished[0][1] if t != EOS_ID]


# token encoding --------------------------------------------------------------


class Vocab:
    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, toks) -> list:
        return [self.index.get(t, UNK_ID) for t in toks]

    def decode(self, ids) -> list:
        return [self.tokens[i] for i in ids]


# checkpoints -----------------------------------------------------------------


def save_checkpoint(path: str, arrays: dict, config, meta: dict | None = None):
    """Binary parameter blocks plus a JSON sidecar at ``path + '.json'``."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(config_digest(config).encode("ascii"))
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())
    side = {"config": asdict(config), "config_hash": config_digest(config), "format_version": CKPT_VERSION}
    side.update(meta or {})
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(side, f, indent=1, sort_keys=True)


def load_checkpoint(path: str, config_cls=None):
    """Returns (arrays, config, metadata); ``config_cls`` defaults to ModelConfig."""
    with open(path, "rb") as f:
        if f.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        digest = f.read(64).decode("ascii")
        (n,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n):
            (ln,) = struct.unpack("<I", f.read(4))
            name = f.read(ln).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape).copy()
    with open(path + ".json", encoding="utf-8") as f:
        meta = json.load(f)
    config = (config_cls or ModelConfig)(**meta["config"])
    if config_digest(config) != digest:
        raise ValueError(f"{path}: config hash does not match the sidecar")
    return arrays, config, meta


def model_from_checkpoint(path: str) -> tuple:
    arrays, config, meta = load_checkpoint(path)
    model = HdnoModel(config, np.random.default_rng(0))
    model.load_arrays(arrays)
    return model, meta
