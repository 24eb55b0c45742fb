import filecmp
import json

import numpy as np
import pytest

from hdno import dialoguesim as ds
from hdno.evalkit import dialogue_outcome

SCHEMAS = ds.default_schemas()


def test_schema_invariants():
    for s in SCHEMAS:
        assert not set(s.constraints) & set(s.requests)
        assert 8 <= len(s.entities) <= 12
    with pytest.raises(ValueError):
        ds.DomainSchema("x", "[x_name]", {"a": ("1",)}, ("a",), ({"a": "1"},))
    with pytest.raises(ValueError):
        ds.DomainSchema("x", "[x_name]", {"a": ("1",)}, ("b",), ())


def test_sample_goal_deterministic():
    a = ds.sample_goal(SCHEMAS, np.random.default_rng(0))
    b = ds.sample_goal(SCHEMAS, np.random.default_rng(0))
    assert a == b


def test_sample_goal_invariants_and_coverage():
    rng = np.random.default_rng(1)
    goals = [ds.sample_goal(SCHEMAS, rng) for _ in range(1000)]
    assert all(1 <= len(g.requests) <= 3 for g in goals)
    assert all(1 <= len(g.constraints) <= 2 for g in goals)
    assert {g.domain for g in goals} == {s.name for s in SCHEMAS}
    for g in goals:
        s = ds.schema_by_name(SCHEMAS, g.domain)
        assert set(g.requests) <= set(s.requests)
        assert ds.db_lookup(s, g.constraints)[0]


def test_sample_goal_empty_schema():
    with pytest.raises(ValueError):
        ds.sample_goal((), np.random.default_rng(0))


def test_db_lookup():
    s = SCHEMAS[0]
    matches, enc = ds.db_lookup(s, {})
    assert len(matches) == len(s.entities)
    assert enc == [0.0, 0.0, 0.0, 1.0]
    for value in s.constraints["area"]:
        matches, enc = ds.db_lookup(s, {"area": value})
        brute = [e for e in s.entities if e["area"] == value]
        assert matches == brute
        assert enc == ds.db_bucket(len(brute))
    _, enc = ds.db_lookup(s, {"area": "nowhere"})
    assert enc == [1.0, 0.0, 0.0, 0.0]
    with pytest.raises(KeyError):
        ds.db_lookup(s, {"colour": "red"})


def test_db_buckets():
    assert [ds.db_bucket(n).index(1.0) for n in (0, 1, 2, 3, 4, 9)] == [0, 1, 2, 2, 3, 3]


def goal():
    return ds.Goal("restaurant", {"area": "north", "food": "indian"}, ["phone", "postcode"])


def test_user_agenda():
    rng = np.random.default_rng(0)
    g = goal()
    first = ds.user_turn(g, [], rng)
    assert first.kind == "inform" and "[value_area]" in first.tokens and not first.done
    answered = [ds.Turn(["in", "the", "[value_area]"], [], [], [], "request"),
                ds.Turn(["[value_food]"], [], [], ["[value_phone]", "[value_postcode]"], "inform")]
    last = ds.user_turn(g, answered, rng)
    assert last.done and last.kind == "bye"
    with pytest.raises(ds.DialogueFinished):
        ds.user_turn(g, answered + [ds.Turn(last.tokens, [], [], ["bye"], "bye")], rng)


def test_user_turn_deterministic():
    a = ds.simulate_dialogue(goal(), SCHEMAS, 0.3, np.random.default_rng(9))
    b = ds.simulate_dialogue(goal(), SCHEMAS, 0.3, np.random.default_rng(9))
    assert [t.user for t in a.turns] == [t.user for t in b.turns]


def test_oracle_rules():
    rng = np.random.default_rng(0)
    g = goal()
    st = ds.DialogueState(dict(g.constraints), ("phone",))
    reply = ds.oracle_response(g, st, 1, 0.0, rng)
    assert "[value_phone]" in reply.tokens and reply.act == "inform" and reply.fault is None
    reply = ds.oracle_response(g, ds.DialogueState({"area": "north"}), 0, 0.0, rng)
    assert reply.act == "not found"
    reply = ds.oracle_response(g, ds.DialogueState({"area": "north"}), 3, 0.0, rng)
    assert reply.act == "request"
    reply = ds.oracle_response(g, ds.DialogueState(dict(g.constraints), (), True), 1, 0.0, rng)
    assert reply.act == "bye"
    with pytest.raises(ValueError):
        ds.oracle_response(g, st, 1, 1.0, rng)


def test_oracle_fault_fraction():
    rng = np.random.default_rng(5)
    g = goal()
    st = ds.DialogueState(dict(g.constraints), ("phone", "postcode"))
    faults = [ds.oracle_response(g, st, 1, 0.3, rng).fault for _ in range(10000)]
    frac = np.mean([f is not None for f in faults])
    assert abs(frac - 0.3) <= 0.02
    # replies carrying requested slots are corrupted by dropping one of them
    assert {f for f in faults if f} == {"drop"}


def test_noise_free_oracle_always_succeeds():
    corpus = ds.generate_corpus(ds.CorpusConfig(60, 10, 10, noise_rate=0.0), 3)
    for d in corpus.train + corpus.valid + corpus.test:
        out = dialogue_outcome(d.goal, [t.sys for t in d.turns])
        assert out.informed and out.success


def test_generate_corpus_files(tmp_path):
    cfg = ds.CorpusConfig(200, 50, 50, noise_rate=0.3)
    a, b = tmp_path / "a", tmp_path / "b"
    ds.generate_corpus(cfg, 42, str(a))
    ds.generate_corpus(cfg, 42, str(b))
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt"):
        assert filecmp.cmp(a / name, b / name, shallow=False)
    counts = [sum(1 for _ in open(a / f"{n}.jsonl")) for n in ds.SPLITS]
    assert counts == [200, 50, 50]
    vocab = (a / "vocab.txt").read_text().split("\n")[:-1]
    assert vocab[:4] == list(ds.RESERVED)
    assert len(vocab) <= 300
    for name in ds.SPLITS:
        for line in open(a / f"{name}.jsonl"):
            d = ds.Dialogue.from_json(json.loads(line))
            ds.validate_dialogue(d, vocab)
            assert d.turns[-1].act == "bye"
    loaded = ds.load_corpus(str(a))
    again = ds.generate_corpus(cfg, 42)
    assert [d.to_json() for d in loaded.train] == [d.to_json() for d in again.train]


def test_generate_corpus_errors(tmp_path):
    with pytest.raises(ValueError):
        ds.generate_corpus(ds.CorpusConfig(0, 1, 1), 0)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        ds.generate_corpus(ds.CorpusConfig(2, 1, 1), 0, str(blocker / "sub"))


def test_vocab_contains_slot_tokens():
    corpus = ds.generate_corpus(ds.CorpusConfig(30, 5, 5), 1)
    for tok in ("[restaurant_name]", "[hotel_name]", "[train_id]", "[value_phone]"):
        assert tok in corpus.vocab
