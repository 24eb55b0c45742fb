"""Variational pretraining and hierarchical REINFORCE fine-tuning."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import discriminator as disc_mod
from .dialoguesim import BOS_ID, EOS_ID, PAD_ID
from .diffcore import OptimizerState, Tensor, adam_step, clip_grad_norm, mul, no_grad, sgd_step, sum_
from .evalkit import dialogue_outcome, make_report
from .model import (FastDecoder, HdnoModel, build_context, decode_batch, decode_beam, gaussian_kl_t,
                    gaussian_logprob, pad_targets, sample_act, token_logprobs)
from .nets import gaussian_head

TRACE_COLUMNS = ("epoch", "inform", "success", "bleu", "total", "mean_reward")


class StaleTrajectoryError(RuntimeError):
    pass


# data ------------------------------------------------------------------------


@dataclass
class EncodedDialogue:
    goal: object
    user: list
    state: np.ndarray
    db: np.ndarray
    sys: list
    acts: list


def encode_dialogues(dialogues, vocab) -> list:
    out = []
    for d in dialogues:
        out.append(EncodedDialogue(
            d.goal,
            [vocab.encode(t.user) for t in d.turns],
            np.array([t.state for t in d.turns], dtype=np.float64),
            np.array([t.db for t in d.turns], dtype=np.float64),
            [vocab.encode(t.sys) for t in d.turns],
            [t.act for t in d.turns],
        ))
    return out


@dataclass
class TurnBatch:
    user: list
    state: np.ndarray
    db: np.ndarray
    sys: list

    def __len__(self):
        return len(self.user)


def flatten_turns(dialogues) -> TurnBatch:
    return TurnBatch([u for d in dialogues for u in d.user],
                     np.concatenate([d.state for d in dialogues]),
                     np.concatenate([d.db for d in dialogues]),
                     [s for d in dialogues for s in d.sys])


def subset(batch: TurnBatch, idx) -> TurnBatch:
    return TurnBatch([batch.user[i] for i in idx], batch.state[idx], batch.db[idx], [batch.sys[i] for i in idx])


# pretraining -----------------------------------------------------------------


def _dropout(rng, shape, rate):
    if rate <= 0 or rng is None:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def elbo_loss(model: HdnoModel, batch: TurnBatch, beta: float, rng=None, eps=None,
              dropout: float = 0.0, per_token: bool = False) -> Tensor:
    """Mean over turns of teacher-forced NLL plus beta * KL(q(z|c) || N(0, I)).

    ``eps`` fixes the reparameterization noise; zeros decode from the mean.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    cfg = model.config
    B = len(batch)
    enc_T = min(max(len(u) for u in batch.user), cfg.max_utt_len)
    c = build_context(model, batch.user, batch.state, batch.db,
                      _dropout(rng, (B, enc_T, cfg.embed_size), dropout))
    if eps is None:
        eps = rng.standard_normal((B, cfg.y_size))
    act = sample_act(model, c, "reparameterize", eps=eps)
    inp, tgt, mask = pad_targets(batch.sys, cfg.max_dec_len)
    logp = token_logprobs(model, c, act.z, inp, tgt,
                          dropout_mask=_dropout(rng, inp.shape + (cfg.embed_size,), dropout))
    nll = mul(sum_(mul(logp, mask)), -1.0)
    denom = mask.sum() if per_token else B
    loss = mul(nll, 1.0 / denom)
    if beta > 0:
        loss = loss + mul(sum_(gaussian_kl_t(act.mu, act.logvar)), beta / B)
    return loss


def reconstruction_nll(model: HdnoModel, batch: TurnBatch) -> float:
    """Per-token NLL decoding from z = mu, no dropout."""
    with no_grad():
        loss = elbo_loss(model, batch, 0.0, eps=np.zeros((len(batch), model.config.y_size)), per_token=True)
    return float(loss.data)


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    grad_clip: float = 1.0
    beta: float = 1e-2
    dropout: float = 0.0
    eta: float = 0.1
    disc_lr: float = 1e-2
    disc_steps: int = 1


def pretrain(model: HdnoModel, train, valid, cfg: PretrainConfig, rng: np.random.Generator,
             disc: disc_mod.NeuralDisc | None = None):
    """Adam on the ELBO; optionally co-trains the discriminator each batch.

    Returns (curve rows, best parameter arrays).  Row 0 is the untrained model.
    """
    tr, va = flatten_turns(train), flatten_turns(valid)
    params = model.params.tensors()
    opt = OptimizerState("adam", cfg.lr)
    disc_opt = OptimizerState("adam", cfg.disc_lr) if disc is not None else None
    zeros = np.zeros((len(va), model.config.y_size))

    def valid_loss():
        with no_grad():
            return float(elbo_loss(model, va, cfg.beta, eps=zeros).data)

    curve = [{"epoch": 0, "train_loss": float("nan"), "valid_loss": valid_loss(),
              "valid_nll": reconstruction_nll(model, va)}]
    best = (curve[0]["valid_loss"], model.copy_arrays())
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(tr))
        losses = []
        for start in range(0, len(tr), cfg.batch_size):
            b = subset(tr, order[start:start + cfg.batch_size])
            model.zero_grad()
            loss = elbo_loss(model, b, cfg.beta, rng=rng, dropout=cfg.dropout)
            loss.backward()
            grads, _ = clip_grad_norm([_grad(t) for t in params], cfg.grad_clip)
            adam_step([t.data for t in params], grads, opt)
            losses.append(float(loss.data))
            if disc is not None:
                _disc_update(model, disc, b, cfg, disc_opt, rng)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_loss": valid_loss(),
               "valid_nll": reconstruction_nll(model, va)}
        curve.append(row)
        if row["valid_loss"] < best[0]:
            best = (row["valid_loss"], model.copy_arrays())
    return curve, best[1]


def _grad(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def _disc_update(model, disc, batch: TurnBatch, cfg: PretrainConfig, opt, rng):
    oracle = [s + [EOS_ID] for s in batch.sys]
    generated = []
    if cfg.eta > 0:
        with no_grad():
            c = build_context(model, batch.user, batch.state, batch.db).data
            mu, _ = gaussian_head(model.params, Tensor(c))
        generated = decode_batch(FastDecoder(model), c, mu.data, model.config.max_dec_len, 1.0, rng)[1]
    n = max(sum(len(s) for s in oracle), 1)
    params = disc.params.tensors()
    for _ in range(cfg.disc_steps):
        for t in params:
            t.grad = None
        mul(disc_mod.disc_train(disc, oracle, generated, cfg.eta), 1.0 / n).backward()
        grads, _ = clip_grad_norm([_grad(t) for t in params], 5.0)
        adam_step([t.data for t in params], grads, opt)
    disc.invalidate()


def write_rows(path: str, rows: list, columns):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(float(r[c])) for c in columns])


# rewards and returns ---------------------------------------------------------


@dataclass
class RewardConfig:
    alpha: float = 1e-4
    gamma: float = 0.99
    gamma_nll: float = 0.99
    success2reward: bool = True
    disc2reward: bool = True
    nll_normalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        for g in (self.gamma, self.gamma_nll):
            if not 0.0 < g < 1.0:
                raise ValueError("discounts must lie in (0, 1)")


@dataclass
class ScheduleConfig:
    high_freq: int = 1
    low_freq: int = 1
    synchron: bool = False
    high_lr: float = 9e-3
    low_lr: float = 9e-3
    grad_clip: float = 0.85
    temperature: float = 0.1
    batch_size: int = 16
    batches_per_epoch: int = 20

    def __post_init__(self):
        if self.high_freq < 1 or self.low_freq < 1:
            raise ValueError("update frequencies must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def discounted_return(rewards, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    r = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def zscore(values, eps: float = 1e-8) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty sequence")
    return (v - v.mean()) / max(v.std(), eps)


def total_reward(r_succ, r_disc, config: RewardConfig) -> np.ndarray:
    """(1 - alpha) * success + alpha * discriminator, each z-scored first when
    ``nll_normalize`` is set.  Disabled streams contribute zero."""
    s = np.asarray(r_succ, dtype=np.float64)
    d = np.asarray(r_disc, dtype=np.float64)
    if s.shape != d.shape:
        raise ValueError("reward streams are not aligned")
    if config.nll_normalize:
        s, d = zscore(s), zscore(d)
    if not config.success2reward:
        s = np.zeros_like(s)
    if not config.disc2reward:
        d = np.zeros_like(d)
    return (1.0 - config.alpha) * s + config.alpha * d


@dataclass
class Trajectory:
    """One dialogue rollout.  ``actions[k]`` are the words of turn k,
    ``<eos>`` included when it was emitted."""
    dialogue: int
    contexts: np.ndarray
    z: np.ndarray
    actions: list
    disc_rewards: list
    version: dict
    outcome: float | None = None
    surface: list = field(default_factory=list)

    @property
    def events(self) -> list:
        """Token index at which each option starts (the event times M)."""
        return np.concatenate([[0], np.cumsum([len(a) for a in self.actions])[:-1]]).astype(int).tolist()

    @property
    def n_tokens(self) -> int:
        return sum(len(a) for a in self.actions)


def assign_success_reward(traj: Trajectory, outcome: float | None = None) -> list:
    """Per-turn success reward arrays: the outcome sits on the very last word."""
    outcome = traj.outcome if outcome is None else outcome
    if outcome is None:
        raise ValueError("dialogue has no outcome yet")
    out = [np.zeros(len(a)) for a in traj.actions]
    out[-1][-1] = float(outcome)
    return out


def low_level_returns(trajs, reward: RewardConfig) -> list:
    """Per-trajectory arrays of combined per-word returns."""
    succ, disc, sizes = [], [], []
    for tr in trajs:
        rs = np.concatenate(assign_success_reward(tr))
        rd = np.concatenate([np.asarray(d, dtype=np.float64) for d in tr.disc_rewards])
        succ.append(discounted_return(rs, reward.gamma))
        disc.append(discounted_return(rd, reward.gamma_nll))
        sizes.append(len(rs))
    combined = total_reward(np.concatenate(succ), np.concatenate(disc), reward)
    return np.split(combined, np.cumsum(sizes)[:-1])


def option_returns(trajs, reward: RewardConfig) -> list:
    """Per-trajectory arrays of option returns g_k, one per turn.

    g_k = discounted discriminator rewards inside turn k plus the terminal
    success discounted from the turn's first word.
    """
    succ, disc, sizes = [], [], []
    for tr in trajs:
        T = tr.n_tokens
        for start, rd in zip(tr.events, tr.disc_rewards):
            disc.append(discounted_return(rd, reward.gamma_nll)[0])
            succ.append(reward.gamma ** (T - 1 - start) * float(tr.outcome))
        sizes.append(len(tr.actions))
    combined = total_reward(np.array(succ), np.array(disc), reward)
    return np.split(combined, np.cumsum(sizes)[:-1])


# policy gradients ------------------------------------------------------------


def _check_fresh(model: HdnoModel, trajs):
    for tr in trajs:
        if tr.version != model.version:
            raise StaleTrajectoryError(f"trajectory from policy version {tr.version}, model is at {model.version}")


def action_batch(actions):
    L = max(len(a) for a in actions)
    inp = np.full((len(actions), L), PAD_ID, dtype=np.int64)
    tgt = np.full((len(actions), L), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(actions), L))
    for i, a in enumerate(actions):
        inp[i, 0] = BOS_ID
        inp[i, 1:len(a)] = a[:-1]
        tgt[i, :len(a)] = a
        mask[i, :len(a)] = 1.0
    return inp, tgt, mask


def reinforce_step_low(model: HdnoModel, trajs, reward: RewardConfig, schedule: ScheduleConfig,
                       returns=None) -> list:
    """Gradient of -mean_dialogues sum_t G_t log pi(w_t) over the generator."""
    _check_fresh(model, trajs)
    returns = low_level_returns(trajs, reward) if returns is None else returns
    C = np.concatenate([tr.contexts for tr in trajs])
    Z = np.concatenate([tr.z for tr in trajs])
    acts = [a for tr in trajs for a in tr.actions]
    inp, tgt, mask = action_batch(acts)
    adv = np.zeros_like(mask)
    row = 0
    for tr, g in zip(trajs, returns):
        pos = 0
        for a in tr.actions:
            adv[row, :len(a)] = g[pos:pos + len(a)]
            pos += len(a)
            row += 1
    model.zero_grad()
    logp = token_logprobs(model, Tensor(C), Tensor(Z), inp, tgt, temperature=schedule.temperature)
    loss = mul(sum_(mul(logp, adv * mask)), -1.0 / len(trajs))
    if loss._backward is not None:
        loss.backward()
    return [_grad(t) for t in model.group("low")]


def reinforce_step_high(model: HdnoModel, trajs, reward: RewardConfig, returns=None) -> list:
    """Gradient of -mean_dialogues sum_{k in M} g_k log N(z_k | mu_k, sigma_k)."""
    _check_fresh(model, trajs)
    returns = option_returns(trajs, reward) if returns is None else returns
    C = np.concatenate([tr.contexts for tr in trajs])
    Z = np.concatenate([tr.z for tr in trajs])
    g = np.concatenate(returns)
    model.zero_grad()
    mu, logvar = gaussian_head(model.params, Tensor(C))
    loss = mul(sum_(mul(gaussian_logprob(Z, mu, logvar), g)), -1.0 / len(trajs))
    if loss._backward is not None:
        loss.backward()
    return [_grad(t) for t in model.group("high")]


def apply_update(model: HdnoModel, level: str, grads, lr: float, clip: float) -> float:
    params = model.group(level)
    grads, norm = clip_grad_norm(grads, clip)
    sgd_step([t.data for t in params], grads, OptimizerState("sgd", lr))
    model.version[level] += 1
    return norm


# rollouts and evaluation -----------------------------------------------------


class HrlEnv:
    """Fixed user turns from a corpus split with cached (frozen) contexts."""

    def __init__(self, model: HdnoModel, dialogues, schemas=None):
        self.dialogues = dialogues
        self.schemas = schemas
        self.contexts = []
        with no_grad():
            for d in dialogues:
                self.contexts.append(build_context(model, d.user, d.state, d.db).data)

    def __len__(self):
        return len(self.dialogues)


def latent_means(model: HdnoModel, contexts: np.ndarray):
    with no_grad():
        mu, logvar = gaussian_head(model.params, Tensor(contexts))
    return mu.data, logvar.data


def collect_rollouts(model: HdnoModel, env: HrlEnv, idx, schedule: ScheduleConfig, disc, vocab,
                     rng: np.random.Generator) -> list:
    C = np.concatenate([env.contexts[i] for i in idx])
    mu, logvar = latent_means(model, C)
    Z = mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
    surface, actions = decode_batch(FastDecoder(model), C, Z, model.config.max_dec_len,
                                    schedule.temperature, rng)
    table = disc.log_table()
    trajs, row = [], 0
    for i in idx:
        n = len(env.dialogues[i].user)
        acts = actions[row:row + n]
        rd = [table[np.array([BOS_ID] + a[:-1]), np.array(a)] for a in acts]
        tr = Trajectory(int(i), C[row:row + n], Z[row:row + n], acts, rd, dict(model.version),
                        surface=surface[row:row + n])
        turns = [vocab.decode(s) for s in tr.surface]
        tr.outcome = float(dialogue_outcome(env.dialogues[i].goal, turns, env.schemas).success)
        trajs.append(tr)
        row += n
    return trajs


def generate_responses(model: HdnoModel, env: HrlEnv, beam: int = 1) -> list:
    """Per-dialogue lists of generated id sequences, decoding from z = mu."""
    C = np.concatenate(env.contexts)
    mu, _ = latent_means(model, C)
    dec = FastDecoder(model)
    if beam == 1:
        flat = decode_batch(dec, C, mu, model.config.max_dec_len)[0]
    else:
        flat = [decode_beam(dec, C[i:i + 1], mu[i:i + 1], beam, model.config.max_dec_len) for i in range(len(C))]
    out, row = [], 0
    for d in env.dialogues:
        out.append(flat[row:row + len(d.user)])
        row += len(d.user)
    return out


def evaluate_env(model: HdnoModel, env: HrlEnv, vocab, beam: int = 1, disc=None, reward: RewardConfig | None = None):
    """EvalReport plus the validation reward used for model selection."""
    gen = generate_responses(model, env, beam)
    gen_tok = [[vocab.decode(s) for s in turns] for turns in gen]
    refs = [[vocab.decode(s) for s in d.sys] for d in env.dialogues]
    report = make_report([d.goal for d in env.dialogues], gen_tok, refs, env.schemas)
    mean_reward = report.success / 100.0
    if disc is not None and reward is not None:
        table = disc.log_table()
        lp = [table[np.array([BOS_ID] + s), np.array(s + [EOS_ID])].mean() for turns in gen for s in turns]
        mean_reward = (1.0 - reward.alpha) * mean_reward + reward.alpha * float(np.mean(lp))
    return report, mean_reward


def run_hrl(model: HdnoModel, train_env: HrlEnv, valid_env: HrlEnv, vocab, disc, schedule: ScheduleConfig,
            reward: RewardConfig, epochs: int, rng: np.random.Generator, log=None):
    """Alternating (or synchronous) REINFORCE on the option policy and the
    generator.  Returns (trace rows, best parameter arrays, update log)."""
    if not model.encoder_frozen:
        raise ValueError("freeze the pretrained encoder before HRL")
    report, mr = evaluate_env(model, valid_env, vocab, 1, disc, reward)
    trace = [_trace_row(0, report, mr)]
    best = (mr, model.copy_arrays())
    cycle = ["high"] * schedule.high_freq + ["low"] * schedule.low_freq
    updates = []
    tick = 0
    for epoch in range(1, epochs + 1):
        for _ in range(schedule.batches_per_epoch):
            idx = rng.choice(len(train_env), size=schedule.batch_size, replace=False)
            trajs = collect_rollouts(model, train_env, idx, schedule, disc, vocab, rng)
            if schedule.synchron:
                g_hi = reinforce_step_high(model, trajs, reward)
                g_lo = reinforce_step_low(model, trajs, reward, schedule)
                apply_update(model, "high", g_hi, schedule.high_lr, schedule.grad_clip)
                apply_update(model, "low", g_lo, schedule.low_lr, schedule.grad_clip)
                updates.append("both")
            else:
                level = cycle[tick % len(cycle)]
                if level == "high":
                    g = reinforce_step_high(model, trajs, reward)
                    apply_update(model, "high", g, schedule.high_lr, schedule.grad_clip)
                else:
                    g = reinforce_step_low(model, trajs, reward, schedule)
                    apply_update(model, "low", g, schedule.low_lr, schedule.grad_clip)
                updates.append(level)
            tick += 1
        report, mr = evaluate_env(model, valid_env, vocab, 1, disc, reward)
        trace.append(_trace_row(epoch, report, mr))
        if log:
            log(trace[-1])
        if mr > best[0]:
            best = (mr, model.copy_arrays())
    return trace, best[1], updates


def _trace_row(epoch, report, mean_reward) -> dict:
    return {"epoch": epoch, "inform": report.inform, "success": report.success, "bleu": report.bleu,
            "total": report.total, "mean_reward": float(mean_reward)}
