"""Exact tabular semi-MDP testbed for option-level policy updates.

States are decision points for the policy over options. Once an option runs,
its intra-option policy emits primitives; the last primitive index is the
termination symbol, which ends the option. Every primitive (termination
included) earns ``rewards[s, w]``, moves the state through
``transitions[s, w]`` and costs one discount factor. The final column of
``transitions`` is the absorbing end of the episode.

Values are computed exactly (linear solve or backward induction), never by
sampling, so monotonicity of update traces can be checked deterministically.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_ENUM_EVENTS = 12
WITNESS_PATH = Path(__file__).parent / "fixtures" / "prop1_witness.json"
# largest step size used by the monotonicity suite
MONOTONE_LR = 1e-3


class NonTerminatingOption(RuntimeError):
    pass


class HorizonTooLarge(ValueError):
    pass


@dataclass
class TabularSMDP:
    transitions: np.ndarray  # (S, V, S + 1); last column is episode end
    rewards: np.ndarray  # (S, V)
    n_options: int
    gamma: float
    horizon: int | None = None
    start: np.ndarray | None = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        S, V, S1 = self.transitions.shape
        if S1 != S + 1:
            raise ValueError("transitions must have shape (S, V, S + 1)")
        if self.rewards.shape != (S, V):
            raise ValueError("rewards must have shape (S, V)")
        if not np.allclose(self.transitions.sum(axis=-1), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")
        if np.any(self.transitions < 0):
            raise ValueError("negative transition probability")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be bounded")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.horizon is None and self.gamma >= 1.0:
            raise ValueError("infinite horizon needs gamma < 1")
        if self.start is None:
            self.start = np.full(S, 1.0 / S)
        self.start = np.asarray(self.start, dtype=float)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_vocab(self) -> int:
        return self.transitions.shape[1]

    @property
    def term(self) -> int:
        return self.n_vocab - 1

    def to_json(self) -> dict:
        return {
            "states": self.n_states,
            "options": self.n_options,
            "vocab": self.n_vocab,
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "gamma": self.gamma,
            "horizon": self.horizon,
            "start": self.start.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TabularSMDP":
        smdp = cls(np.array(obj["transitions"]), np.array(obj["rewards"]), int(obj["options"]),
                   float(obj["gamma"]), obj.get("horizon"), obj.get("start"))
        if (smdp.n_states, smdp.n_vocab) != (obj["states"], obj["vocab"]):
            raise ValueError("declared sizes do not match tables")
        return smdp


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TabularPolicies:
    """Softmax policies over options and primitives.

    ``low_mode="tabular"`` keeps one logit row per (option, state).
    ``low_mode="shared"`` builds intra-option logits as
    ``state_logits[s] + option_logits[o]``: one word model shared by all
    options and conditioned on the option, as a single generator network is.
    """

    high_logits: np.ndarray  # (S, O)
    low_logits: np.ndarray  # (O, S, V) tabular, or (S + O, V) shared
    low_mode: str = "tabular"

    def __post_init__(self):
        if self.low_mode not in ("tabular", "shared"):
            raise ValueError(f"unknown low_mode {self.low_mode!r}")
        self.high_logits = np.asarray(self.high_logits, dtype=float)
        self.low_logits = np.asarray(self.low_logits, dtype=float)

    def copy(self) -> "TabularPolicies":
        return TabularPolicies(self.high_logits.copy(), self.low_logits.copy(), self.low_mode)

    def phi(self) -> np.ndarray:
        return _softmax(self.high_logits)

    def pi(self) -> np.ndarray:
        S = self.high_logits.shape[0]
        if self.low_mode == "tabular":
            return _softmax(self.low_logits)
        logits = self.low_logits[S:][:, None, :] + self.low_logits[:S][None, :, :]
        return _softmax(logits)


def random_policies(smdp: TabularSMDP, rng: np.random.Generator, scale: float = 1.0,
                    low_mode: str = "tabular") -> TabularPolicies:
    S, O, V = smdp.n_states, smdp.n_options, smdp.n_vocab
    high = rng.normal(0.0, scale, (S, O))
    low = rng.normal(0.0, scale, (O, S, V) if low_mode == "tabular" else (S + O, V))
    return TabularPolicies(high, low, low_mode)


def random_instance(seed: int, n_states: int = 4, n_options: int = 2, n_vocab: int = 3,
                    gamma: float = 0.9, end_prob: float = 0.1,
                    horizon: int | None = None, acyclic: bool = False,
                    concentration: float = 1.0) -> TabularSMDP:
    """Random instance; small ``concentration`` gives peaked transition rows."""
    rng = np.random.default_rng(seed)
    S, V = n_states, n_vocab
    trans = np.zeros((S, V, S + 1))
    for s in range(S):
        for w in range(V):
            if acyclic:
                # strictly forward moves bound every trajectory by S primitives
                succ = np.arange(s + 1, S + 1)
                trans[s, w, succ] = rng.dirichlet(np.full(len(succ), concentration))
            else:
                row = rng.dirichlet(np.full(S, concentration)) * (1.0 - end_prob)
                trans[s, w, :S] = row
                trans[s, w, S] = end_prob
    rewards = rng.uniform(0.0, 1.0, (S, V))
    return TabularSMDP(trans, rewards, n_options, gamma, horizon)


# exact evaluation ------------------------------------------------------------


def _option_system(smdp: TabularSMDP, phi: np.ndarray, pi: np.ndarray):
    """Matrix M and vector r with U = r + M U over in-option states (o, s)."""
    S, O, t = smdp.n_states, smdp.n_options, smdp.term
    P = smdp.transitions[:, :, :S]  # drop the end column: value 0 there
    g = smdp.gamma
    r = np.einsum("osw,sw->os", pi, smdp.rewards).reshape(-1)
    inner = g * np.einsum("osw,swt->ost", pi[:, :, :t], P[:, :t])  # stay in option
    exit_ = g * pi[:, :, t][:, :, None] * P[None, :, t]  # (O, S, S') then choose o'
    M = np.zeros((O, S, O, S))
    for o in range(O):
        M[o, :, o, :] += inner[o]
    M += np.einsum("ost,tp->ospt", exit_, phi)
    return M.reshape(O * S, O * S), r


def check_termination(smdp: TabularSMDP, pi: np.ndarray):
    S, O, t = smdp.n_states, smdp.n_options, smdp.term
    P = smdp.transitions[:, :t, :S]
    for o in range(O):
        inner = np.einsum("sw,swt->st", pi[o, :, :t], P)
        try:
            steps = np.linalg.solve(np.eye(S) - inner, np.ones(S))
        except np.linalg.LinAlgError:
            steps = np.full(S, np.inf)
        if not np.all(np.isfinite(steps)) or np.any(steps > 1e12) or np.any(steps < 0):
            raise NonTerminatingOption(f"option {o} does not terminate with probability 1")


@dataclass
class ValueResult:
    decision: np.ndarray  # v(s) at decision states
    option: np.ndarray  # U(o, s)
    q_low: np.ndarray  # (O, S, V)


def evaluate(smdp: TabularSMDP, policies: TabularPolicies) -> ValueResult:
    phi, pi = policies.phi(), policies.pi()
    check_termination(smdp, pi)
    S, O = smdp.n_states, smdp.n_options
    if smdp.horizon is not None:
        return _evaluate_finite(smdp, phi, pi)
    M, r = _option_system(smdp, phi, pi)
    U = np.linalg.solve(np.eye(O * S) - M, r).reshape(O, S)
    v = np.einsum("so,os->s", phi, U)
    q = _q_low(smdp, U, v)
    return ValueResult(v, U, q)


def _q_low(smdp: TabularSMDP, U: np.ndarray, v: np.ndarray) -> np.ndarray:
    S, t = smdp.n_states, smdp.term
    P = smdp.transitions[:, :, :S]
    cont = np.einsum("swt,ot->osw", P, U)
    cont[:, :, t] = np.einsum("st,t->s", P[:, t], v)[None, :]
    return smdp.rewards[None] + smdp.gamma * cont


def _evaluate_finite(smdp, phi, pi) -> ValueResult:
    S, O = smdp.n_states, smdp.n_options
    U = np.zeros((O, S))
    v = np.zeros(S)
    q = np.zeros((O, S, smdp.n_vocab))
    for _ in range(smdp.horizon):
        q = _q_low(smdp, U, v)
        U = np.einsum("osw,osw->os", pi, q)
        v = np.einsum("so,os->s", phi, U)
    return ValueResult(v, U, q)


def exact_value(smdp: TabularSMDP, policies: TabularPolicies) -> np.ndarray:
    return evaluate(smdp, policies).decision


def bellman_residual(smdp: TabularSMDP, policies: TabularPolicies) -> float:
    """Largest violation of the option-level Bellman equations (infinite horizon)."""
    res = evaluate(smdp, policies)
    phi, pi = policies.phi(), policies.pi()
    q = _q_low(smdp, res.option, res.decision)
    r1 = np.abs(np.einsum("osw,osw->os", pi, q) - res.option).max()
    r2 = np.abs(np.einsum("so,os->s", phi, res.option) - res.decision).max()
    return float(max(r1, r2))


# exact gradients ---------------------------------------------------------------


def _occupancy(smdp, phi, pi):
    S, O, t = smdp.n_states, smdp.n_options, smdp.term
    M, _ = _option_system(smdp, phi, pi)
    entry = (smdp.start[:, None] * phi).T.reshape(-1)  # enter (o, s) from the start
    lam = np.linalg.solve((np.eye(O * S) - M).T, entry).reshape(O, S)
    P = smdp.transitions[:, t, :S]
    dec = smdp.start + smdp.gamma * np.einsum("os,st->t", lam * pi[:, :, t], P)
    return lam, dec


def exact_policy_gradient(smdp: TabularSMDP, policies: TabularPolicies, level: str,
                          method: str = "analytic") -> np.ndarray:
    """Gradient of sum_s start(s) v(s) with respect to one level's logits.

    ``method="analytic"`` uses discounted occupancies (infinite horizon);
    ``method="enumerate"`` sums score-function terms over every trajectory of a
    finite-horizon instance and refuses more than 12 primitive events.
    """
    if level not in ("high", "low"):
        raise ValueError(f"level must be 'high' or 'low', got {level!r}")
    if method == "enumerate":
        return _enumerate_gradient(smdp, policies)[level]
    if method != "analytic":
        raise ValueError(f"unknown method {method!r}")
    if smdp.horizon is not None:
        raise ValueError("analytic gradients need an infinite-horizon instance")
    phi, pi = policies.phi(), policies.pi()
    res = evaluate(smdp, policies)
    lam, dec = _occupancy(smdp, phi, pi)
    if level == "high":
        adv = res.option.T - res.decision[:, None]
        return dec[:, None] * phi * adv
    adv = res.q_low - res.option[:, :, None]
    g = lam[:, :, None] * pi * adv  # d/d tabular logits
    if policies.low_mode == "tabular":
        return g
    return np.concatenate([g.sum(axis=0), g.sum(axis=1)], axis=0)


def _enumerate_gradient(smdp: TabularSMDP, policies: TabularPolicies) -> dict:
    H = smdp.horizon
    if H is None:
        raise HorizonTooLarge("enumeration needs a finite horizon")
    if H > MAX_ENUM_EVENTS:
        raise HorizonTooLarge(f"horizon {H} exceeds {MAX_ENUM_EVENTS} events")
    phi, pi = policies.phi(), policies.pi()
    S, O, V, t = smdp.n_states, smdp.n_options, smdp.n_vocab, smdp.term
    g_high = np.zeros((S, O))
    g_low = np.zeros((O, S, V))
    value = 0.0

    # Each trajectory is a list of (kind, state, option, choice) decisions.
    def walk(state, option, steps, prob, ret, disc, decisions):
        if steps == H:
            finish(prob, ret, decisions)
            return
        if option is None:
            for o in range(O):
                walk(state, o, steps, prob * phi[state, o], ret, disc,
                     decisions + [("h", state, o)])
            return
        for w in range(V):
            pw = prob * pi[option, state, w]
            r = ret + disc * smdp.rewards[state, w]
            dec = decisions + [("l", option, state, w)]
            nxt_option = None if w == t else option
            for s2 in range(S + 1):
                p = pw * smdp.transitions[state, w, s2]
                if p == 0.0:
                    continue
                if s2 == S:
                    finish(p, r, dec)
                else:
                    walk(s2, nxt_option, steps + 1, p, r, disc * smdp.gamma, dec)

    def finish(prob, ret, decisions):
        nonlocal value
        value += prob * ret
        w = prob * ret
        for d in decisions:
            if d[0] == "h":
                _, s, o = d
                g_high[s] -= w * phi[s]
                g_high[s, o] += w
            else:
                _, o, s, a = d
                g_low[o, s] -= w * pi[o, s]
                g_low[o, s, a] += w

    for s0 in range(S):
        if smdp.start[s0] > 0:
            walk(s0, None, 0, smdp.start[s0], 0.0, 1.0, [])
    if policies.low_mode == "shared":
        g_low = np.concatenate([g_low.sum(axis=0), g_low.sum(axis=1)], axis=0)
    return {"high": g_high, "low": g_low, "value": value}


def enumerate_value(smdp: TabularSMDP, policies: TabularPolicies) -> float:
    return _enumerate_gradient(smdp, policies)["value"]


def monte_carlo_value(smdp: TabularSMDP, policies: TabularPolicies, state: int,
                      n: int, rng: np.random.Generator, max_steps: int = 10_000):
    """Vectorized rollouts from ``state``; returns (mean, standard error)."""
    phi, pi = policies.phi(), policies.pi()
    S, t = smdp.n_states, smdp.term
    cum_phi = np.cumsum(phi, axis=1)
    cum_pi = np.cumsum(pi, axis=2)
    cum_P = np.cumsum(smdp.transitions, axis=2)
    s = np.full(n, state)
    opt = np.full(n, -1)
    alive = np.ones(n, dtype=bool)
    ret = np.zeros(n)
    disc = np.ones(n)
    for step in range(max_steps):
        if smdp.horizon is not None and step >= smdp.horizon:
            break
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        need = idx[opt[idx] < 0]
        if need.size:
            u = rng.random(need.size)
            opt[need] = np.minimum((u[:, None] > cum_phi[s[need]]).sum(axis=1), smdp.n_options - 1)
        u = rng.random(idx.size)
        w = np.minimum((u[:, None] > cum_pi[opt[idx], s[idx]]).sum(axis=1), smdp.n_vocab - 1)
        ret[idx] += disc[idx] * smdp.rewards[s[idx], w]
        disc[idx] *= smdp.gamma
        u = rng.random(idx.size)
        nxt = np.minimum((u[:, None] > cum_P[s[idx], w]).sum(axis=1), S)
        opt[idx[w == t]] = -1
        ended = nxt == S
        alive[idx[ended]] = False
        s[idx[~ended]] = nxt[~ended]
    return float(ret.mean()), float(ret.std(ddof=1) / np.sqrt(n))


# update traces ---------------------------------------------------------------


@dataclass
class UpdateTrace:
    values: np.ndarray  # (steps + 1, S)
    updated: list = field(default_factory=list)  # "high" | "low" | "both" per step

    def max_decrease(self) -> float:
        d = self.values[:-1] - self.values[1:]
        return float(max(d.max(), 0.0)) if len(d) else 0.0

    def first_decrease(self, tol: float = 0.0):
        d = self.values[:-1] - self.values[1:]
        hits = np.argwhere(d > tol)
        return (int(hits[0, 0]), int(hits[0, 1])) if len(hits) else None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "state", "value", "updated_policy"])
            for n, row in enumerate(self.values):
                label = "init" if n == 0 else self.updated[n - 1]
                for s, v in enumerate(row):
                    w.writerow([n, s, repr(float(v)), label])


def run_update_trace(smdp: TabularSMDP, policies: TabularPolicies, mode: str, lr: float,
                     steps: int) -> UpdateTrace:
    """Exact-gradient ascent; async alternates high then low, sync moves both at once."""
    if mode not in ("sync", "async"):
        raise ValueError(f"mode must be 'sync' or 'async', got {mode!r}")
    pol = policies.copy()
    values = [exact_value(smdp, pol)]
    updated = []
    for n in range(steps):
        if mode == "sync":
            gh = exact_policy_gradient(smdp, pol, "high")
            gl = exact_policy_gradient(smdp, pol, "low")
            pol.high_logits += lr * gh
            pol.low_logits += lr * gl
            updated.append("both")
        elif n % 2 == 0:
            pol.high_logits += lr * exact_policy_gradient(smdp, pol, "high")
            updated.append("high")
        else:
            pol.low_logits += lr * exact_policy_gradient(smdp, pol, "low")
            updated.append("low")
        values.append(exact_value(smdp, pol))
    return UpdateTrace(np.array(values), updated)


def fejer_check(trace, tol: float = 0.0):
    """Check |x_{n+1} - sup| <= |x_n - sup| along a trace (per column if 2-D).

    Returns (ok, first violating index n or None).
    """
    arr = np.asarray(trace, dtype=float)
    if arr.size == 0:
        raise ValueError("empty trace")
    if arr.ndim == 1:
        arr = arr[:, None]
    sup = arr.max(axis=0)
    dist = np.abs(arr - sup)
    bad = dist[1:] > dist[:-1] + tol
    rows = np.flatnonzero(bad.any(axis=1))
    if rows.size:
        return False, int(rows[0])
    return True, None


@dataclass
class WitnessSearch:
    """Where to look for a synchronous-update value decrease."""
    lr: float = 10.0
    steps: int = 50
    scale: float = 2.0
    concentration: float = 0.2
    low_mode: str = "shared"
    threshold: float = 1e-6
    max_seeds: int = 1000


def witness_candidate(seed: int, search: WitnessSearch):
    smdp = random_instance(seed, concentration=search.concentration)
    pol = random_policies(smdp, np.random.default_rng([seed, 1]), search.scale, search.low_mode)
    return smdp, pol


def find_witness(search: WitnessSearch = WitnessSearch()):
    """First seed whose sync trace drops by more than the threshold while the
    async trace stays monotone.  Returns (seed, smdp, policies, sync, async)
    or None."""
    for seed in range(search.max_seeds):
        smdp, pol = witness_candidate(seed, search)
        sync = run_update_trace(smdp, pol, "sync", search.lr, search.steps)
        if sync.max_decrease() <= search.threshold:
            continue
        asyn = run_update_trace(smdp, pol, "async", search.lr, search.steps)
        if asyn.max_decrease() <= 1e-9:
            return seed, smdp, pol, sync, asyn
    return None


def monotone_instance(seed: int):
    """Instance family of the monotonicity suite."""
    smdp = random_instance(seed)
    return smdp, random_policies(smdp, np.random.default_rng([seed, 1]))


def monotonicity_suite(seeds=range(100), lr: float = MONOTONE_LR, steps: int = 200,
                       tol: float = 1e-9, window: int = 10) -> list:
    """Async traces per seed: largest single-step value drop and the change
    over the final ``window`` updates."""
    rows = []
    for seed in seeds:
        smdp, pol = monotone_instance(seed)
        tr = run_update_trace(smdp, pol, "async", lr, steps)
        fejer_ok, _ = fejer_check(tr.values, tol)
        rows.append({"seed": seed, "max_decrease": tr.max_decrease(),
                     "final_change": float(np.abs(tr.values[-1] - tr.values[-1 - window]).max()),
                     "monotone": tr.max_decrease() <= tol, "fejer": fejer_ok})
    return rows


def verify_witness(path=WITNESS_PATH) -> dict:
    """Replay a pinned instance.  ``ok`` needs a sync drop above the stored
    threshold at the recorded step and a monotone async trace."""
    smdp, pol, obj = load_instance(path)
    search = obj["search"]
    sync = run_update_trace(smdp, pol, "sync", search["lr"], search["steps"])
    asyn = run_update_trace(smdp, pol, "async", search["lr"], search["steps"])
    step, state = obj["step"], obj["state"]
    drop = float(sync.values[step, state] - sync.values[step + 1, state])
    async_bad = asyn.first_decrease(1e-9)
    ok = drop > search["threshold"] and async_bad is None
    return {"ok": ok, "seed": obj.get("seed"), "step": step, "state": state, "decrease": drop,
            "sync_first_decrease": sync.first_decrease(search["threshold"]),
            "async_first_violation": async_bad, "async_max_decrease": asyn.max_decrease()}


# persistence ------------------------------------------------------------------


def save_instance(path, smdp: TabularSMDP, policies: TabularPolicies | None = None, **extra):
    obj = smdp.to_json()
    if policies is not None:
        obj["policies"] = {"high_logits": policies.high_logits.tolist(),
                           "low_logits": policies.low_logits.tolist(),
                           "low_mode": policies.low_mode}
    obj.update(extra)
    Path(path).write_text(json.dumps(obj, indent=1))


def load_instance(path):
    obj = json.loads(Path(path).read_text())
    smdp = TabularSMDP.from_json(obj)
    pol = None
    if "policies" in obj:
        p = obj["policies"]
        pol = TabularPolicies(np.array(p["high_logits"]), np.array(p["low_logits"]), p["low_mode"])
    return smdp, pol, obj
