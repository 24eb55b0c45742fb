"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk experiments (criteria 4-6 and 8-10) share one session fixture that
drives the CLI command functions for seeds 0, 1 and 2.
"""
import os
import shutil
import time
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest

from hdno import cli
from hdno import diffcore as dc
from hdno import dialoguesim as ds
from hdno import discriminator as D
from hdno import evalkit as ek
from hdno import nets
from hdno import optionverify as ov
from hdno import trainer as T
from hdno.diffcore import Tensor

from test_diffcore import OPS
from test_evalkit import REPORTED_20, REPORTED_21
from test_trainer import tiny

SEEDS = (0, 1, 2)
QUIET = dict(out=lambda *a: None)


# criterion 1: gradient integrity

def _net_trials(seed):
    rng = np.random.default_rng(seed)
    p = nets.init_encoder(rng, 8, 4, 3)
    p.update(nets.init_gru(rng, "g", 6, 3))
    p.update(nets.init_lstm(rng, "l", 6, 3))
    p.update(nets.init_gaussian_head(rng, 6, 2))
    h0 = Tensor(rng.normal(size=(2, 3)))
    toks = [rng.integers(4, 8, size=rng.integers(1, 5)).tolist() for _ in range(2)]
    enc = lambda: nets.encode_utterances(p, toks).encoding
    yield "encoder", lambda: dc.sum_(dc.square(enc())), p.tensors()
    yield "gru", lambda: dc.sum_(dc.square(nets.gru_cell(p, "g", enc(), h0))), p.tensors()
    yield "lstm", lambda: dc.sum_(dc.square(dc.concat(list(nets.lstm_cell(p, "l", enc(), h0, h0)), axis=1))), \
        p.tensors()
    yield "gaussian_head", lambda: dc.sum_(dc.concat(list(nets.gaussian_head(p, enc())), axis=1)), p.tensors()


def _loss_trials(seed):
    rng = np.random.default_rng(seed)
    m = tiny(10, seed=seed, state=3)
    b = T.TurnBatch([[4, 5, 6], [7, 8]], rng.integers(0, 2, (2, 3)).astype(float), np.eye(4)[[0, 2]],
                    [rng.integers(4, 10, size=3).tolist(), [6]])
    eps = rng.standard_normal((len(b), 2))
    yield "elbo", lambda: T.elbo_loss(m, b, 0.5, eps=eps), m.params.tensors()
    disc = D.NeuralDisc(6, 3, 4, rng)
    oracle = [rng.integers(1, 6, size=4).tolist()]
    generated = [rng.integers(0, 6, size=3).tolist()]
    yield "disc_train", lambda: D.disc_train(disc, oracle, generated, 0.1), disc.params.tensors()


def test_criterion_01_gradient_integrity(verdict):
    t0 = time.time()
    trials, failures = 0, []
    for name, (shapes, fn) in sorted(OPS.items()):
        for seed in range(7):
            rng = np.random.default_rng([seed, len(name)])
            leaves = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
            ok, worst = dc.grad_check(lambda: fn(*leaves), leaves, h=1e-5, rtol=1e-4)
            trials += 1
            if not ok:
                failures.append((name, seed, worst))
    for seed in range(3):
        for gen in (_net_trials(seed), _loss_trials(seed)):
            for name, fn, leaves in gen:
                ok, worst = dc.grad_check(fn, leaves, h=1e-5, rtol=1e-4)
                trials += 1
                if not ok:
                    failures.append((name, seed, worst))
    elapsed = time.time() - t0
    ok = not failures and trials >= 100 and elapsed < 120
    verdict(1, ok, f"{trials} trials, {len(failures)} failures, {elapsed:.1f}s")
    assert not failures, failures
    assert trials >= 100 and elapsed < 120


# criteria 2 and 3: option-level verification

def test_criterion_02_async_monotone(verdict):
    t0 = time.time()
    rows = ov.monotonicity_suite(range(100), ov.MONOTONE_LR, 200, 1e-9)
    elapsed = time.time() - t0
    mono = sum(r["monotone"] for r in rows)
    plateau = sum(r["final_change"] < 1e-6 for r in rows)
    ok = mono == 100 and plateau == 100 and elapsed < 300
    verdict(2, ok, f"monotone {mono}/100, final-10 change < 1e-6 on {plateau}/100 "
                   f"(min {min(r['final_change'] for r in rows):.2e}), lr {ov.MONOTONE_LR}, {elapsed:.1f}s")
    assert mono == 100 and elapsed < 300
    assert plateau == 100, "traces still rising after 200 updates"


def test_criterion_03_sync_witness(verdict):
    res = ov.verify_witness()
    _, _, obj = ov.load_instance(ov.WITNESS_PATH)
    search = ov.WitnessSearch(**obj["search"])
    found = ov.find_witness(search)
    smdp, pol = ov.witness_candidate(obj["seed"], search)
    pinned, pinned_pol, _ = ov.load_instance(ov.WITNESS_PATH)
    same = (np.array_equal(smdp.transitions, pinned.transitions) and np.array_equal(smdp.rewards, pinned.rewards)
            and np.array_equal(pol.high_logits, pinned_pol.high_logits)
            and np.array_equal(pol.low_logits, pinned_pol.low_logits))
    ok = (res["ok"] and res["decrease"] > 1e-6 and res["async_first_violation"] is None
          and found is not None and found[0] == obj["seed"] <= search.max_seeds and same)
    verdict(3, ok, f"seed {obj['seed']} step {res['step']}: sync decrease {res['decrease']:.2e}, "
                   f"async max decrease {res['async_max_decrease']:.2e}")
    assert ok


# desk experiments

def _copy_base(base, dest):
    os.makedirs(dest)
    for sub in ("corpus", "pretrain"):
        shutil.copytree(os.path.join(base, sub), os.path.join(dest, sub))


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Pretrain once per seed, then fine-tune three reward/schedule variants
    from the same checkpoint.  ``core_seconds`` covers corpus, pretraining and
    the async run with its evaluations."""
    root = tmp_path_factory.mktemp("desk")
    out = {"root": root, "seeds": {}, "core_seconds": 0.0}
    for s in SEEDS:
        base = str(root / f"s{s}")
        cfg = cli.load_config("desk", None, [{"seed": s, "run_dir": base}])
        t0 = time.time()
        cli.cmd_gen_corpus(cfg, **QUIET)
        cli.cmd_pretrain(cfg, **QUIET)
        res = {"base": base, "sl": cli.cmd_evaluate(cfg, checkpoint=cli.RunPaths(base).pretrain_ckpt, **QUIET)}
        out["core_seconds"] += time.time() - t0
        for name, rl in (("async", {}), ("sync", {"synchron": True}), ("success_only", {"disc2reward": False})):
            rd = str(root / f"s{s}_{name}")
            _copy_base(base, rd)
            c = cli.load_config("desk", None, [{"seed": s, "run_dir": rd, "rl": rl}])
            t0 = time.time()
            cli.cmd_hrl(c, **QUIET)
            res[name] = cli.cmd_evaluate(c, **QUIET)
            if name == "async":
                out["core_seconds"] += time.time() - t0
            res[name + "_dir"] = rd
        out["seeds"][s] = res
    return out


def _fmt(r):
    return f"success {r.success:.0f} bleu {r.bleu:.2f} total {r.total:.2f}"


def test_criterion_04_rl_over_sl(desk, verdict):
    parts, ok = [], True
    for s, r in desk["seeds"].items():
        ds_, db = r["async"].success - r["sl"].success, r["async"].bleu - r["sl"].bleu
        good = ds_ >= 15 and db > -5
        ok &= good
        parts.append(f"seed {s} dS {ds_:+.0f} dBLEU {db:+.2f}")
    ok &= desk["core_seconds"] < 1800
    verdict(4, ok, "; ".join(parts) + f"; {desk['core_seconds']:.0f}s")
    assert ok


def test_criterion_05_async_vs_sync(desk, verdict):
    wins = [r["async"].total >= r["sync"].total for r in desk["seeds"].values()]
    detail = "; ".join(f"seed {s} async {r['async'].total:.2f} sync {r['sync'].total:.2f}"
                       for s, r in desk["seeds"].items())
    verdict(5, sum(wins) >= 2, f"{sum(wins)}/3 seeds; {detail}")
    assert sum(wins) >= 2


def test_criterion_06_disc_reward_bleu(desk, verdict):
    wins = [r["async"].bleu >= r["success_only"].bleu and abs(r["async"].success - r["success_only"].success) <= 3
            for r in desk["seeds"].values()]
    detail = "; ".join(f"seed {s} with disc {_fmt(r['async'])} / success only {_fmt(r['success_only'])}"
                       for s, r in desk["seeds"].items())
    verdict(6, sum(wins) >= 2, f"{sum(wins)}/3 seeds; {detail}")
    assert sum(wins) >= 2


# criterion 7: metric arithmetic

def _exact_total(i, s, b):
    return Decimal("0.5") * (Decimal(str(i)) + Decimal(str(s))) + Decimal(str(b))


def _printed(x):
    return float(x.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def test_criterion_07_metric_arithmetic(verdict):
    bad = []
    for row, (i, s, b, t) in REPORTED_20.items():
        exact = _exact_total(i, s, b)
        if abs(ek.total_score(i, s, b) - float(exact)) > 1e-9 or abs(_printed(exact) - t) > 1e-9:
            bad.append(row)
    headline = abs(ek.total_score(96.40, 84.70, 18.85) - 109.40) <= 1e-9
    fixtures = [
        (ek.bleu([["the"] * 4], ["the cat sat on the mat".split()]),
         100 * np.exp(1 - 6 / 4) * (2 / 4 * 1 / 6 * 1 / 4 * 1 / 2) ** 0.25),
        (ek.bleu(["a b c d".split(), "a b".split()], ["a b c d e".split(), "a c".split()]),
         100 * np.exp(1 - 7 / 6) * (5 / 6 * 3 / 4 * 2 / 2 * 1 / 1) ** 0.25),
        (ek.bleu(["a b c d e".split()], ["a b c d".split()]), 100 * (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25),
    ]
    bleu_ok = all(abs(got - want) <= 1e-9 for got, want in fixtures)
    other = [row for row, (i, s, b, t) in REPORTED_21.items() if abs(_printed(_exact_total(i, s, b)) - t) > 1e-9]
    ok = not bad and headline and bleu_ok
    verdict(7, ok, f"{len(REPORTED_20) - len(bad)}/{len(REPORTED_20)} rows, BLEU fixtures {'ok' if bleu_ok else 'bad'}; "
                   f"2.1 column inconsistent rows: {other}")
    assert ok, bad


# criteria 8-10

def test_criterion_08_latent_semantics(desk, verdict):
    parts, ok = [], True
    for s, r in desk["seeds"].items():
        cfg = cli.load_config("desk", None, [{"seed": s, "run_dir": r["async_dir"]}])
        rep = cli.cmd_latents(cfg, **QUIET)
        corpus, _ = cli._load_corpus(cfg)
        acts = [t.act for d in corpus.test for t in d.turns]
        perm = ek.permutation_nmi(rep.assignments, acts, 100, cli.stream_seed(s, "perm")).mean()
        ok &= cfg.eval.latent_k == 8 and rep.nmi >= 3 * perm
        parts.append(f"seed {s} nmi {rep.nmi:.3f} permuted {perm:.3f}")
    verdict(8, ok, "; ".join(parts))
    assert ok


def test_criterion_09_discriminator_quality(desk, verdict):
    parts, ok = [], True
    for s, r in desk["seeds"].items():
        cfg = cli.load_config("desk", None, [{"seed": s, "run_dir": r["base"]}])
        corpus, vocab = cli._load_corpus(cfg)
        seqs = lambda split: [x + [ds.EOS_ID] for d in T.encode_dialogues(split, vocab) for x in d.sys]
        neural = D.per_token_nll(cli.load_disc(cli.RunPaths(r["base"]).disc), seqs(corpus.test))
        bigram = D.per_token_nll(D.bigram_fit(seqs(corpus.train), len(vocab)), seqs(corpus.test))
        ok &= neural <= 1.1 * bigram
        parts.append(f"seed {s} neural {neural:.4f} bigram {bigram:.4f}")
    verdict(9, ok, "; ".join(parts))
    assert ok


def _read(*parts):
    with open(os.path.join(*parts), "rb") as f:
        return f.read()


def test_criterion_10_determinism(desk, verdict, tmp_path):
    """Rerun every command for seed 0 in a fresh directory."""
    r = desk["seeds"][0]
    rd = str(tmp_path / "again")
    cfg = cli.load_config("desk", None, [{"seed": 0, "run_dir": rd}])
    cli.cmd_gen_corpus(cfg, **QUIET)
    cli.cmd_pretrain(cfg, **QUIET)
    cli.cmd_hrl(cfg, **QUIET)
    cli.cmd_evaluate(cfg, **QUIET)
    cli.cmd_latents(cfg, **QUIET)
    cli.cmd_verify_props(cfg, **QUIET)
    cli.cmd_latents(cli.load_config("desk", None, [{"seed": 0, "run_dir": r["async_dir"]}]), **QUIET)
    other = str(tmp_path / "verify")
    cli.cmd_verify_props(cli.load_config("desk", None, [{"seed": 0, "run_dir": other}]), **QUIET)
    pairs = [(f"corpus/{s}.jsonl", r["base"]) for s in ds.SPLITS]
    pairs += [("pretrain/curve.csv", r["base"]), ("hrl/trace.csv", r["async_dir"]),
              ("eval/report.csv", r["async_dir"]), ("latents/latents.csv", r["async_dir"]),
              ("verify/monotone.csv", other)]
    diff = [f for f, ref in pairs if _read(rd, f) != _read(ref, f)]
    verdict(10, not diff, f"{len(pairs) - len(diff)}/{len(pairs)} files identical" + (f", differ: {diff}" if diff else ""))
    assert not diff
