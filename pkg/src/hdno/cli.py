"""Command-line pipelines: corpus generation, pretraining, HRL, evaluation,
update-order checks and latent-act analysis.

Every command reads a nested JSON config built from a named preset, an
optional config file and command-line overrides, and writes its outputs
under one run directory next to a snapshot of that config.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import dialoguesim as ds
from . import discriminator as disc_mod
from . import evalkit, optionverify, trainer
from .model import HdnoModel, ModelConfig, Vocab, model_from_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class ConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


# configuration ---------------------------------------------------------------


@dataclass
class CorpusSection:
    n_train: int = 400
    n_valid: int = 100
    n_test: int = 100
    noise_rate: float = 0.3
    max_turns: int = ds.MAX_TURNS


@dataclass
class ModelSection:
    embed_size: int = 32
    utt_cell_size: int = 64
    dec_cell_size: int = 64
    y_size: int = 16
    max_utt_len: int = 30
    max_dec_len: int = 30


@dataclass
class PretrainSection:
    batch_size: int = 32
    lr: float = 1e-3
    grad_clip: float = 1.0
    dropout: float = 0.0
    num_epoch: int = 50
    beta: float = 1e-2
    eta: float = 0.1
    disc: bool = True
    gen_guide: bool = True
    disc_embed_size: int = 32
    disc_cell_size: int = 64
    disc_lr: float = 1e-2


@dataclass
class RLSection:
    high_lr: float = 9e-3
    low_lr: float = 9e-3
    num_epoch: int = 60
    temperature: float = 0.1
    gamma: float = 0.99
    gamma_nll: float = 0.99
    grad_clip: float = 0.85
    alpha: float = 0.1
    high_freq: int = 1
    low_freq: int = 1
    synchron: bool = False
    disc2reward: bool = True
    success2reward: bool = True
    nll_normalize: bool = True
    batch_size: int = 16
    batches_per_epoch: int = 20


@dataclass
class EvalSection:
    beam: int = 1
    latent_k: int = 8
    n_perm: int = 100


@dataclass
class VerifySection:
    n_seeds: int = 100
    lr: float = optionverify.MONOTONE_LR
    steps: int = 200
    tol: float = 1e-9


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/default"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    rl: RLSection = field(default_factory=RLSection)
    eval: EvalSection = field(default_factory=EvalSection)
    verify: VerifySection = field(default_factory=VerifySection)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"corpus": CorpusSection, "model": ModelSection, "pretrain": PretrainSection,
             "rl": RLSection, "eval": EvalSection, "verify": VerifySection}

PRESETS = {
    "desk": {},
    # MultiWOZ 2.0 column of the published hyperparameter table
    "paper-2.0": {
        "model": {"embed_size": 100, "utt_cell_size": 300, "dec_cell_size": 300, "y_size": 200,
                  "max_utt_len": 50, "max_dec_len": 50},
        "pretrain": {"batch_size": 32, "lr": 1e-3, "grad_clip": 1.0, "dropout": 0.5, "num_epoch": 50,
                     "beta": 1e-2, "eta": 0.1, "disc": True, "gen_guide": True},
        "rl": {"high_lr": 9e-3, "low_lr": 9e-3, "num_epoch": 1, "temperature": 0.1, "gamma": 0.99,
               "gamma_nll": 0.99, "grad_clip": 0.85, "alpha": 1e-4, "high_freq": 1, "low_freq": 1,
               "synchron": False, "disc2reward": True, "success2reward": True, "nll_normalize": True},
    },
}


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def _typed(cls, name, raw):
    want = {f.name: f.type for f in fields(cls)}
    if name not in want:
        raise ConfigError(f"unknown key {cls.__name__}.{name}")
    t = want[name]
    if t in ("bool", bool):
        if not isinstance(raw, bool):
            raise ConfigError(f"{name} must be a boolean")
        return raw
    if t in ("int", int):
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"{name} must be an integer")
        return raw
    if t in ("float", float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(raw)
    return raw


def config_from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    for key, val in d.items():
        if key in _SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"section {key} must be an object")
            sec = getattr(cfg, key)
            for k, v in val.items():
                setattr(sec, k, _typed(_SECTIONS[key], k, v))
        elif key == "seed":
            cfg.seed = _typed(RunConfig, key, val)
        elif key == "run_dir":
            cfg.run_dir = str(val)
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    validate(cfg)
    return cfg


def _check(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: RunConfig):
    c, m, p, r, e, v = cfg.corpus, cfg.model, cfg.pretrain, cfg.rl, cfg.eval, cfg.verify
    _check(cfg.seed >= 0, "seed must be non-negative")
    _check(min(c.n_train, c.n_valid, c.n_test) > 0, "split sizes must be positive")
    _check(0.0 <= c.noise_rate <= 1.0, "noise_rate must lie in [0, 1]")
    _check(c.max_turns >= 1, "max_turns must be at least 1")
    _check(min(m.embed_size, m.utt_cell_size, m.dec_cell_size, m.y_size) > 0, "model sizes must be positive")
    _check(m.max_utt_len >= 1 and m.max_dec_len >= 1, "length limits must be at least 1")
    _check(p.batch_size >= 1 and p.num_epoch >= 0, "bad pretraining batch size or epochs")
    _check(p.lr > 0 and p.disc_lr > 0 and p.grad_clip > 0, "learning rates and clip must be positive")
    _check(0.0 <= p.dropout < 1.0, "dropout must lie in [0, 1)")
    _check(p.beta >= 0 and p.eta >= 0, "beta and eta must be non-negative")
    _check(p.disc_embed_size > 0 and p.disc_cell_size > 0, "discriminator sizes must be positive")
    _check(r.high_lr >= 0 and r.low_lr >= 0 and r.grad_clip > 0, "bad RL learning rate or clip")
    _check(r.num_epoch >= 0 and r.temperature > 0, "bad RL epochs or temperature")
    _check(0.0 < r.gamma < 1.0 and 0.0 < r.gamma_nll < 1.0, "discounts must lie in (0, 1)")
    _check(0.0 <= r.alpha <= 1.0, "alpha must lie in [0, 1]")
    _check(r.high_freq >= 1 and r.low_freq >= 1, "update frequencies must be at least 1")
    _check(r.success2reward or r.disc2reward, "at least one reward stream must be enabled")
    _check(1 <= r.batch_size <= c.n_train and r.batches_per_epoch >= 1, "bad RL batch settings")
    _check(e.beam in (1, 2, 5), "beam width must be 1, 2 or 5")
    _check(e.latent_k >= 1 and e.n_perm >= 1, "bad latent analysis settings")
    _check(v.n_seeds >= 1 and v.steps >= 1 and v.lr > 0 and v.tol >= 0, "bad verification settings")


def parse_override(text: str) -> dict:
    """``section.key=value`` with a JSON value (bare strings allowed)."""
    if "=" not in text:
        raise UsageError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    out = val
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


def load_config(preset: str = "desk", path: str | None = None, overrides=()) -> RunConfig:
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    d = merge(RunConfig().to_dict(), PRESETS[preset])
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                d = merge(d, json.load(f))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}")
    for o in overrides:
        d = merge(d, o)
    return config_from_dict(d)


def stream_seed(seed: int, name: str) -> int:
    """Independent integer seed for a named component stream."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))


# run-directory layout --------------------------------------------------------


class RunPaths:
    def __init__(self, root: str):
        self.root = root

    def __getattr__(self, name):
        table = {
            "config": "config.json",
            "corpus": "corpus",
            "pretrain_ckpt": "pretrain/model.ckpt",
            "disc": "pretrain/disc.ckpt",
            "pretrain_curve": "pretrain/curve.csv",
            "hrl_ckpt": "hrl/model.ckpt",
            "hrl_trace": "hrl/trace.csv",
            "hrl_updates": "hrl/updates.txt",
            "report_json": "eval/report.json",
            "report_csv": "eval/report.csv",
            "latents_csv": "latents/latents.csv",
            "latents_txt": "latents/samples.txt",
            "verify_csv": "verify/monotone.csv",
            "verify_json": "verify/summary.json",
        }
        if name not in table:
            raise AttributeError(name)
        return os.path.join(self.root, table[name])


def _ensure_dir(path: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)


def _guard(paths, force: bool):
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not force:
        raise UsageError(f"{existing[0]} exists; pass --force to overwrite")


def write_snapshot(cfg: RunConfig, command: str):
    path = RunPaths(cfg.run_dir).config
    _ensure_dir(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"command": command, **cfg.to_dict()}, f, indent=1, sort_keys=True)


def model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(vocab_size, len(ds.state_layout(ds.default_schemas())), len(ds.DB_BUCKETS),
                       m.embed_size, m.utt_cell_size, m.dec_cell_size, m.y_size, m.max_utt_len, m.max_dec_len)


def _load_corpus(cfg: RunConfig):
    root = RunPaths(cfg.run_dir).corpus
    if not os.path.exists(os.path.join(root, "vocab.txt")):
        raise UsageError(f"no corpus under {root}; run gen-corpus first")
    corpus = ds.load_corpus(root, cfg.seed)
    return corpus, Vocab(corpus.vocab)


def _load_model(path: str, what: str):
    if not os.path.exists(path):
        raise UsageError(f"missing {what} checkpoint {path}")
    return model_from_checkpoint(path)


def load_disc(path: str) -> disc_mod.NeuralDisc:
    if not os.path.exists(path):
        raise UsageError(f"missing discriminator checkpoint {path}")
    return disc_mod.load_disc(path)


def schedule_config(cfg: RunConfig) -> trainer.ScheduleConfig:
    r = cfg.rl
    return trainer.ScheduleConfig(r.high_freq, r.low_freq, r.synchron, r.high_lr, r.low_lr, r.grad_clip,
                                  r.temperature, r.batch_size, r.batches_per_epoch)


def reward_config(cfg: RunConfig) -> trainer.RewardConfig:
    r = cfg.rl
    return trainer.RewardConfig(r.alpha, r.gamma, r.gamma_nll, r.success2reward, r.disc2reward, r.nll_normalize)


# commands --------------------------------------------------------------------


def cmd_gen_corpus(cfg: RunConfig, force: bool = False, out=print) -> ds.DialogueCorpus:
    p = RunPaths(cfg.run_dir)
    _guard([os.path.join(p.corpus, f"{s}.jsonl") for s in ds.SPLITS], force)
    c = cfg.corpus
    corpus = ds.generate_corpus(ds.CorpusConfig(c.n_train, c.n_valid, c.n_test, c.noise_rate, c.max_turns),
                                stream_seed(cfg.seed, "corpus"), p.corpus)
    write_snapshot(cfg, "gen-corpus")
    out(f"vocab {len(corpus.vocab)} train {len(corpus.train)} valid {len(corpus.valid)} test {len(corpus.test)}")
    return corpus


def cmd_pretrain(cfg: RunConfig, force: bool = False, out=print):
    p = RunPaths(cfg.run_dir)
    _guard([p.pretrain_ckpt, p.pretrain_curve], force)
    corpus, vocab = _load_corpus(cfg)
    init = stream(cfg.seed, "init")
    model = HdnoModel(model_config(cfg, len(vocab)), init)
    pc = cfg.pretrain
    disc = disc_mod.NeuralDisc(len(vocab), pc.disc_embed_size, pc.disc_cell_size, init) if pc.disc else None
    train = trainer.encode_dialogues(corpus.train, vocab)
    valid = trainer.encode_dialogues(corpus.valid, vocab)
    tc = trainer.PretrainConfig(pc.num_epoch, pc.batch_size, pc.lr, pc.grad_clip, pc.beta, pc.dropout,
                                pc.eta if pc.gen_guide else 0.0, pc.disc_lr)
    t0 = time.time()
    curve, best = trainer.pretrain(model, train, valid, tc, stream(cfg.seed, "pretrain"), disc)
    _ensure_dir(p.pretrain_ckpt)
    save_checkpoint(p.pretrain_ckpt, best, model.config, {"stage": "pretrain"})
    trainer.write_rows(p.pretrain_curve, curve, ("epoch", "train_loss", "valid_loss", "valid_nll"))
    if disc is not None:
        disc_mod.save_disc(p.disc, disc, {"stage": "pretrain"})
        nll = disc_mod.per_token_nll(disc, [s + [ds.EOS_ID] for d in valid for s in d.sys])
        out(f"discriminator valid per-token nll {nll:.4f}")
    best_row = min(curve, key=lambda r: r["valid_loss"])
    out(f"pretrained {pc.num_epoch} epochs in {time.time() - t0:.1f}s; best epoch {best_row['epoch']} "
        f"valid loss {best_row['valid_loss']:.4f} nll {best_row['valid_nll']:.4f}")
    write_snapshot(cfg, "pretrain")
    return curve


def cmd_hrl(cfg: RunConfig, force: bool = False, out=print):
    p = RunPaths(cfg.run_dir)
    _guard([p.hrl_ckpt, p.hrl_trace], force)
    corpus, vocab = _load_corpus(cfg)
    model, _ = _load_model(p.pretrain_ckpt, "pretrained")
    disc = load_disc(p.disc)
    model.freeze_encoder()
    schemas = ds.default_schemas()
    train_env = trainer.HrlEnv(model, trainer.encode_dialogues(corpus.train, vocab), schemas)
    valid_env = trainer.HrlEnv(model, trainer.encode_dialogues(corpus.valid, vocab), schemas)
    t0 = time.time()
    trace, best, updates = trainer.run_hrl(model, train_env, valid_env, vocab, disc, schedule_config(cfg),
                                           reward_config(cfg), cfg.rl.num_epoch, stream(cfg.seed, "rollout"))
    _ensure_dir(p.hrl_ckpt)
    save_checkpoint(p.hrl_ckpt, best, model.config, {"stage": "hrl", "synchron": cfg.rl.synchron})
    trainer.write_rows(p.hrl_trace, trace, trainer.TRACE_COLUMNS)
    with open(p.hrl_updates, "w", encoding="utf-8") as f:
        f.write("\n".join(updates) + "\n")
    last = trace[-1]
    out(f"hrl {'sync' if cfg.rl.synchron else 'async'} {cfg.rl.num_epoch} epochs in {time.time() - t0:.1f}s; "
        f"valid success {last['success']:.2f} bleu {last['bleu']:.2f}")
    write_snapshot(cfg, "hrl")
    return trace


def _default_checkpoint(p: RunPaths) -> str:
    return p.hrl_ckpt if os.path.exists(p.hrl_ckpt) else p.pretrain_ckpt


def cmd_evaluate(cfg: RunConfig, checkpoint: str | None = None, beam: int | None = None,
                 split: str = "test", out=print) -> evalkit.EvalReport:
    beam = cfg.eval.beam if beam is None else beam
    if beam not in (1, 2, 5):
        raise UsageError(f"beam width must be 1, 2 or 5, got {beam}")
    p = RunPaths(cfg.run_dir)
    corpus, vocab = _load_corpus(cfg)
    model, _ = _load_model(checkpoint or _default_checkpoint(p), "model")
    env = trainer.HrlEnv(model, trainer.encode_dialogues(corpus.split(split), vocab), ds.default_schemas())
    report, _ = trainer.evaluate_env(model, env, vocab, beam)
    _ensure_dir(p.report_json)
    report.write(p.report_json, p.report_csv)
    out(f"{split} beam {beam}: inform {report.inform:.2f} success {report.success:.2f} "
        f"bleu {report.bleu:.2f} total {report.total:.2f}")
    write_snapshot(cfg, "evaluate")
    return report


def turn_latents(model, env: trainer.HrlEnv) -> np.ndarray:
    mu, _ = trainer.latent_means(model, np.concatenate(env.contexts))
    return mu


def cmd_latents(cfg: RunConfig, checkpoint: str | None = None, out=print) -> evalkit.LatentReport:
    p = RunPaths(cfg.run_dir)
    corpus, vocab = _load_corpus(cfg)
    model, _ = _load_model(checkpoint or _default_checkpoint(p), "model")
    env = trainer.HrlEnv(model, trainer.encode_dialogues(corpus.test, vocab), ds.default_schemas())
    acts = [t.act for d in corpus.test for t in d.turns]
    utts = [" ".join(t.sys) for d in corpus.test for t in d.turns]
    rep = evalkit.latent_report(turn_latents(model, env), acts, utts, cfg.eval.latent_k,
                                stream_seed(cfg.seed, "eval"))
    perm = evalkit.permutation_nmi(rep.assignments, acts, cfg.eval.n_perm, stream_seed(cfg.seed, "perm"))
    _ensure_dir(p.latents_csv)
    rep.write(p.latents_csv, p.latents_txt)
    with open(p.latents_txt, "a", encoding="utf-8") as f:
        f.write(f"\npermutation nmi mean {perm.mean():.6f} over {len(perm)}\n")
    out(f"k {cfg.eval.latent_k} purity {rep.purity:.4f} nmi {rep.nmi:.4f} "
        f"permutation nmi {perm.mean():.4f} ratio {rep.nmi / max(perm.mean(), 1e-12):.2f}")
    write_snapshot(cfg, "latents")
    return rep


def cmd_verify_props(cfg: RunConfig, witness: str | None = None, out=print) -> bool:
    v = cfg.verify
    p = RunPaths(cfg.run_dir)
    rows = optionverify.monotonicity_suite(range(v.n_seeds), v.lr, v.steps, v.tol)
    _ensure_dir(p.verify_csv)
    trainer.write_rows(p.verify_csv, rows, ("seed", "max_decrease", "final_change", "monotone", "fejer"))
    for r in rows:
        out(f"seed {r['seed']:3d} max violation {r['max_decrease']:.3e} final change {r['final_change']:.3e}")
    mono = all(r["monotone"] for r in rows)
    wit = optionverify.verify_witness(witness or optionverify.WITNESS_PATH)
    out(f"async monotone on {sum(r['monotone'] for r in rows)}/{len(rows)} seeds")
    if wit["ok"]:
        out(f"witness seed {wit['seed']}: sync decrease {wit['decrease']:.3e} at step {wit['step']} "
            f"state {wit['state']}; async max decrease {wit['async_max_decrease']:.3e}")
    else:
        out(f"witness FAILED at step {wit['step']}: recorded decrease not reproduced "
            f"(first sync decrease {wit['sync_first_decrease']}, first async violation {wit['async_first_violation']})")
    with open(p.verify_json, "w", encoding="utf-8") as f:
        json.dump({"monotone": mono, "witness": wit}, f, indent=1, sort_keys=True, default=str)
    ok = mono and wit["ok"]
    out("PASS" if ok else "FAIL")
    write_snapshot(cfg, "verify-props")
    return ok


# argument parsing ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config layered over the preset")
    common.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--run-dir", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override, e.g. rl.alpha=0.01")
    ap = _Parser(prog="hdno", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("gen-corpus", parents=[common], help="simulate and save the dialogue corpus")
    g.add_argument("--force", action="store_true")
    g = sub.add_parser("pretrain", parents=[common], help="supervised ELBO pretraining")
    g.add_argument("--force", action="store_true")
    g = sub.add_parser("hrl", parents=[common], help="hierarchical RL fine-tuning")
    g.add_argument("--force", action="store_true")
    g.add_argument("--synchron", action="store_true", help="update both levels at once")
    g = sub.add_parser("evaluate", parents=[common], help="decode the test split and score it")
    g.add_argument("--checkpoint")
    g.add_argument("--beam", type=int, help="beam width (1, 2 or 5)")
    g = sub.add_parser("verify-props", parents=[common], help="tabular update-order checks")
    g.add_argument("--witness", help="witness fixture to check instead of the shipped one")
    g = sub.add_parser("latents", parents=[common], help="cluster latent acts")
    g.add_argument("--checkpoint")
    g.add_argument("--k", type=int, help="number of clusters")
    return ap


def config_from_args(args) -> RunConfig:
    overrides = [parse_override(s) for s in args.set]
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    if args.run_dir:
        overrides.append({"run_dir": args.run_dir})
    if getattr(args, "synchron", False):
        overrides.append({"rl": {"synchron": True}})
    if getattr(args, "k", None) is not None:
        overrides.append({"eval": {"latent_k": args.k}})
    return load_config(args.preset, args.config, overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        cfg = config_from_args(args)
        if args.command == "gen-corpus":
            cmd_gen_corpus(cfg, args.force)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.force)
        elif args.command == "hrl":
            cmd_hrl(cfg, args.force)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.beam)
        elif args.command == "latents":
            cmd_latents(cfg, args.checkpoint)
        elif args.command == "verify-props":
            return EXIT_OK if cmd_verify_props(cfg, args.witness) else EXIT_FAIL
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
