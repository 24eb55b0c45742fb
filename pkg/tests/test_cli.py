import json

import pytest

from hdno import cli
from hdno.evalkit import EvalReport, total_score

TINY = {
    "corpus": {"n_train": 12, "n_valid": 4, "n_test": 4},
    "model": {"embed_size": 6, "utt_cell_size": 5, "dec_cell_size": 6, "y_size": 3, "max_dec_len": 12},
    "pretrain": {"num_epoch": 2, "batch_size": 8, "disc_embed_size": 4, "disc_cell_size": 5},
    "rl": {"num_epoch": 1, "batch_size": 4, "batches_per_epoch": 2},
    "eval": {"latent_k": 3, "n_perm": 5},
    "verify": {"n_seeds": 3, "steps": 20},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def args(cfg_file, run_dir, *extra):
    return ["--config", cfg_file, "--run-dir", str(run_dir), "--seed", "42", *extra]


@pytest.fixture
def pipeline(tmp_path, cfg_file, capsys):
    rd = tmp_path / "run"
    for cmd in ("gen-corpus", "pretrain", "hrl"):
        code, _, err = run([cmd, *args(cfg_file, rd)], capsys)
        assert code == 0, err
    return rd


# configuration

def test_full_size_preset_values():
    c = cli.load_config("paper-2.0")
    assert (c.model.embed_size, c.model.utt_cell_size, c.model.dec_cell_size, c.model.y_size) == (100, 300, 300, 200)
    assert (c.model.max_utt_len, c.model.max_dec_len) == (50, 50)
    p = c.pretrain
    assert (p.batch_size, p.lr, p.grad_clip, p.dropout, p.num_epoch, p.beta, p.eta) == (32, 1e-3, 1.0, 0.5, 50, 1e-2, 0.1)
    assert p.disc and p.gen_guide
    r = c.rl
    assert (r.high_lr, r.low_lr, r.num_epoch, r.temperature, r.gamma, r.gamma_nll) == (9e-3, 9e-3, 1, 0.1, 0.99, 0.99)
    assert (r.grad_clip, r.alpha, r.high_freq, r.low_freq) == (0.85, 1e-4, 1, 1)
    assert not r.synchron and r.disc2reward and r.success2reward and r.nll_normalize


def test_overrides_and_inheritance(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"rl": {"alpha": 0.01}}))
    c = cli.load_config("paper-2.0", str(path), [cli.parse_override("rl.temperature=0.5")])
    assert c.rl.alpha == 0.01 and c.rl.temperature == 0.5 and c.model.y_size == 200
    assert cli.parse_override("run_dir=out/x") == {"run_dir": "out/x"}
    assert cli.parse_override("rl.synchron=true") == {"rl": {"synchron": True}}


@pytest.mark.parametrize("bad", [
    {"rl": {"alpha": 1.5}}, {"rl": {"gamma": 1.0}}, {"rl": {"high_freq": 0}}, {"eval": {"beam": 3}},
    {"corpus": {"noise_rate": -0.1}}, {"model": {"y_size": 0}}, {"pretrain": {"dropout": 1.0}},
    {"rl": {"synchron": "yes"}}, {"rl": {"batch_size": 1.5}}, {"rl": {"nope": 1}}, {"extra": 1},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(cli.ConfigError):
        cli.load_config("desk", None, [bad])


def test_stream_seeds():
    assert cli.stream_seed(1, "corpus") == cli.stream_seed(1, "corpus")
    names = ["corpus", "init", "rollout", "eval"]
    assert len({cli.stream_seed(1, n) for n in names}) == 4
    assert cli.stream_seed(1, "init") != cli.stream_seed(2, "init")


def test_synchron_flag_flips_schedule(cfg_file, tmp_path):
    parser = cli.build_parser()
    a = parser.parse_args(["hrl", *args(cfg_file, tmp_path), "--synchron"])
    assert cli.schedule_config(cli.config_from_args(a)).synchron
    a = parser.parse_args(["hrl", *args(cfg_file, tmp_path)])
    assert not cli.schedule_config(cli.config_from_args(a)).synchron


# exit codes

def test_usage_errors_exit_1(capsys, tmp_path, cfg_file):
    assert run(["bogus"], capsys)[0] == 1
    assert run(["pretrain", "--preset", "nope"], capsys)[0] == 1
    assert run(["pretrain", *args(cfg_file, tmp_path / "empty")], capsys)[0] == 1
    assert run(["hrl", *args(cfg_file, tmp_path / "empty")], capsys)[0] == 1
    assert run(["evaluate", *args(cfg_file, tmp_path / "empty")], capsys)[0] == 1
    assert run(["latents", *args(cfg_file, tmp_path / "empty")], capsys)[0] == 1
    assert run(["pretrain", "--config", str(tmp_path / "missing.json")], capsys)[0] == 1


def test_invalid_config_exits_2(capsys, tmp_path, cfg_file):
    code, _, err = run(["gen-corpus", *args(cfg_file, tmp_path), "--set", "rl.alpha=2"], capsys)
    assert code == 2 and "alpha" in err


# commands

def test_gen_corpus_deterministic_and_guarded(tmp_path, cfg_file, capsys):
    code, out, _ = run(["gen-corpus", *args(cfg_file, tmp_path / "a")], capsys)
    assert code == 0 and "train 12 valid 4 test 4" in out
    run(["gen-corpus", *args(cfg_file, tmp_path / "b")], capsys)
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt"):
        assert (tmp_path / "a/corpus" / name).read_bytes() == (tmp_path / "b/corpus" / name).read_bytes()
    code, _, err = run(["gen-corpus", *args(cfg_file, tmp_path / "a")], capsys)
    assert code == 1 and "--force" in err
    assert run(["gen-corpus", *args(cfg_file, tmp_path / "a"), "--force"], capsys)[0] == 0
    snap = json.loads((tmp_path / "a/config.json").read_text())
    assert snap["command"] == "gen-corpus" and snap["seed"] == 42 and snap["corpus"]["n_train"] == 12


def test_pipeline_outputs(pipeline, cfg_file, capsys):
    rd = pipeline
    for f in ("pretrain/model.ckpt", "pretrain/disc.ckpt", "pretrain/curve.csv", "hrl/model.ckpt", "hrl/trace.csv"):
        assert (rd / f).exists(), f
    trace = (rd / "hrl/trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,inform,success,bleu,total,mean_reward" and len(trace) == 3
    curve = [line.split(",") for line in (rd / "pretrain/curve.csv").read_text().splitlines()[1:]]
    assert min(float(r[2]) for r in curve) <= float(curve[0][2])
    code, out, _ = run(["hrl", *args(cfg_file, rd)], capsys)
    assert code == 1


def test_evaluate_width_one_matches_validation_trace(pipeline, cfg_file):
    cfg = cli.load_config("desk", cfg_file, [{"seed": 42, "run_dir": str(pipeline)}])
    rep = cli.cmd_evaluate(cfg, str(pipeline / "pretrain/model.ckpt"), 1, split="valid", out=lambda *a: None)
    row0 = (pipeline / "hrl/trace.csv").read_text().splitlines()[1].split(",")
    assert [float(x) for x in row0[1:4]] == [rep.inform, rep.success, rep.bleu]


def test_evaluate_report(pipeline, cfg_file, capsys):
    code, out, _ = run(["evaluate", *args(cfg_file, pipeline), "--beam", "2"], capsys)
    assert code == 0 and "beam 2" in out
    d = json.loads((pipeline / "eval/report.json").read_text())
    rep = EvalReport.from_json(d)
    assert rep.to_json() == d
    assert rep.total == total_score(rep.inform, rep.success, rep.bleu)
    assert run(["evaluate", *args(cfg_file, pipeline), "--beam", "3"], capsys)[0] == 1


def test_latents(pipeline, cfg_file, capsys):
    code, out, _ = run(["latents", *args(cfg_file, pipeline), "--k", "2"], capsys)
    assert code == 0 and "k 2" in out
    first = (pipeline / "latents/latents.csv").read_bytes()
    assert first.splitlines()[0] == b"turn_id,cluster,x,y,act_label"
    assert {int(line.split(b",")[1]) for line in first.splitlines()[1:]} <= {0, 1}
    run(["latents", *args(cfg_file, pipeline), "--k", "2"], capsys)
    assert (pipeline / "latents/latents.csv").read_bytes() == first
    assert "cluster" in (pipeline / "latents/samples.txt").read_text()


def test_pipeline_deterministic(tmp_path, cfg_file, capsys):
    outs = []
    for name in ("x", "y"):
        rd = tmp_path / name
        for cmd in ("gen-corpus", "pretrain", "hrl", "evaluate", "latents"):
            assert run([cmd, *args(cfg_file, rd)], capsys)[0] == 0
        outs.append([(rd / f).read_bytes() for f in
                     ("pretrain/curve.csv", "hrl/trace.csv", "eval/report.csv", "latents/latents.csv")])
    assert outs[0] == outs[1]


def test_verify_props(tmp_path, cfg_file, capsys):
    code, out, _ = run(["verify-props", *args(cfg_file, tmp_path)], capsys)
    assert code == 0 and "PASS" in out
    assert out.count("max violation") == 3
    obj = json.loads(cli.optionverify.WITNESS_PATH.read_text())
    obj["step"] = 0  # the recorded decrease is not at this step
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(obj))
    code, out, _ = run(["verify-props", *args(cfg_file, tmp_path), "--witness", str(bad)], capsys)
    assert code == 2 and "FAIL" in out and "step 0" in out
