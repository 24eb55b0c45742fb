"""Synthetic delexicalized task-oriented dialogue world.

Three small domains with entity tables, a goal sampler, an agenda-based user
simulator and a rule-based system whose replies can be corrupted by injected
faults.  All text is produced already delexicalized, so slot values only ever
appear as placeholder tokens such as ``[value_phone]`` or ``[hotel_name]``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

ACT_LABELS = (
    "inform", "request", "select", "recommend", "not found", "request booking info",
    "offer booking", "inform booked", "decline booking", "welcome", "greet", "bye", "reqmore",
)
DB_BUCKETS = ("0", "1", "2-3", ">=4")
SPLITS = ("train", "valid", "test")
MAX_TURNS = 8


class DialogueFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class DomainSchema:
    name: str
    entity_token: str
    constraints: dict  # slot -> tuple of values
    requests: tuple
    entities: tuple  # of dicts slot -> value

    def __post_init__(self):
        if set(self.constraints) & set(self.requests):
            raise ValueError(f"{self.name}: request and constraint slots overlap")
        if not self.entities:
            raise ValueError(f"{self.name}: empty entity table")


@dataclass
class Goal:
    domain: str
    constraints: dict
    requests: list

    def to_json(self) -> dict:
        return {"domain": self.domain, "constraints": dict(self.constraints), "requests": list(self.requests)}

    @staticmethod
    def from_json(d: dict) -> "Goal":
        return Goal(d["domain"], dict(d["constraints"]), list(d["requests"]))


@dataclass
class Turn:
    user: list
    state: list
    db: list
    sys: list
    act: str

    def to_json(self) -> dict:
        return {"user": self.user, "state": self.state, "db": self.db, "sys": self.sys, "act": self.act}


@dataclass
class Dialogue:
    goal: Goal
    turns: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"goal": self.goal.to_json(), "turns": [t.to_json() for t in self.turns]}

    @staticmethod
    def from_json(d: dict) -> "Dialogue":
        turns = [Turn(list(t["user"]), [float(x) for x in t["state"]], [float(x) for x in t["db"]],
                      list(t["sys"]), t["act"]) for t in d["turns"]]
        return Dialogue(Goal.from_json(d["goal"]), turns)


@dataclass
class DialogueCorpus:
    train: list
    valid: list
    test: list
    vocab: list
    seed: int

    def split(self, name: str) -> list:
        return getattr(self, name)


@dataclass
class CorpusConfig:
    n_train: int = 400
    n_valid: int = 100
    n_test: int = 100
    noise_rate: float = 0.3
    max_turns: int = MAX_TURNS


# schemas ---------------------------------------------------------------------

_CONSTRAINT_VALUES = {
    "restaurant": {"area": ("north", "south", "east", "west", "centre"),
                   "pricerange": ("cheap", "moderate", "expensive"),
                   "food": ("italian", "chinese", "indian", "british")},
    "hotel": {"area": ("north", "south", "east", "west", "centre"),
              "pricerange": ("cheap", "moderate", "expensive"),
              "stars": ("2", "3", "4")},
    "train": {"departure": ("cambridge", "london", "ely", "norwich"),
              "destination": ("cambridge", "london", "ely", "norwich"),
              "day": ("monday", "friday", "sunday")},
}
_REQUESTS = {
    "restaurant": ("phone", "address", "postcode"),
    "hotel": ("phone", "address", "postcode", "parking"),
    "train": ("price", "duration", "leaveat", "arriveby"),
}
_ENTITY_TOKEN = {"restaurant": "[restaurant_name]", "hotel": "[hotel_name]", "train": "[train_id]"}
_N_ENTITIES = {"restaurant": 12, "hotel": 10, "train": 12}


def default_schemas() -> tuple:
    """The fixed three-domain world; entity tables come from a constant seed."""
    rng = np.random.default_rng(20200101)
    out = []
    for name, slots in _CONSTRAINT_VALUES.items():
        ents = []
        for _ in range(_N_ENTITIES[name]):
            ents.append({s: vals[rng.integers(len(vals))] for s, vals in slots.items()})
        out.append(DomainSchema(name, _ENTITY_TOKEN[name], dict(slots), _REQUESTS[name], tuple(ents)))
    return tuple(out)


def schema_by_name(schemas, name: str) -> DomainSchema:
    for s in schemas:
        if s.name == name:
            return s
    raise KeyError(name)


def slot_token(slot: str) -> str:
    return f"[value_{slot}]"


def state_layout(schemas) -> list:
    """Flattened (domain, slot, value) triples indexing the state vector."""
    return [(s.name, slot, v) for s in schemas for slot, vals in s.constraints.items() for v in vals]


def state_vector(schemas, domain: str, stated: dict) -> list:
    return [1.0 if d == domain and stated.get(slot) == v else 0.0 for d, slot, v in state_layout(schemas)]


# goals and database ----------------------------------------------------------


def sample_goal(schemas, rng: np.random.Generator) -> Goal:
    """Uniform domain, 1-2 constraints copied from a real entity, 1-3 requests."""
    if not schemas:
        raise ValueError("no domain schemas")
    schema = schemas[rng.integers(len(schemas))]
    ent = schema.entities[rng.integers(len(schema.entities))]
    slots = list(schema.constraints)
    n_con = int(rng.integers(1, 3))
    chosen = [slots[i] for i in rng.permutation(len(slots))[:n_con]]
    n_req = int(rng.integers(1, min(3, len(schema.requests)) + 1))
    picked = set(rng.permutation(len(schema.requests))[:n_req].tolist())
    requests = [r for i, r in enumerate(schema.requests) if i in picked]
    return Goal(schema.name, {s: ent[s] for s in chosen}, requests)


def db_bucket(count: int) -> list:
    idx = 0 if count == 0 else 1 if count == 1 else 2 if count <= 3 else 3
    return [1.0 if i == idx else 0.0 for i in range(len(DB_BUCKETS))]


def db_lookup(schema: DomainSchema, constraints: dict):
    for slot in constraints:
        if slot not in schema.constraints:
            raise KeyError(f"unknown slot {slot!r} for domain {schema.name}")
    matches = [e for e in schema.entities if all(e[s] == v for s, v in constraints.items())]
    return matches, db_bucket(len(matches))


# templates -------------------------------------------------------------------

_DOMAIN_WORD = {"restaurant": "restaurant", "hotel": "hotel", "train": "train"}
_CONSTRAINT_PHRASE = {
    "area": "in the [value_area]",
    "pricerange": "in the [value_pricerange] price range",
    "food": "serving [value_food] food",
    "stars": "with [value_stars] stars",
    "departure": "leaving from [value_departure]",
    "destination": "going to [value_destination]",
    "day": "on [value_day]",
}
_USER_OPEN = ("i am looking for a {dom} {phrase} .", "i need a {dom} {phrase} .",
              "can you find me a {dom} {phrase} ?")
_USER_FOLLOW = ("{phrase} please .", "i would like it {phrase} .", "{phrase} would be great .")
_REQUEST_WORDS = {"phone": "phone number", "address": "address", "postcode": "postcode",
                  "parking": "parking", "price": "price", "duration": "travel time",
                  "leaveat": "departure time", "arriveby": "arrival time"}
_USER_ASK = ("can i have the {slots} ?", "what is the {slots} ?", "please tell me the {slots} .")
_USER_BYE = ("thank you , goodbye .", "that is all i need , thanks .", "great , bye .")

_SYS_REQUEST = {
    "area": ("what area would you like ?", "which part of town do you prefer ?"),
    "pricerange": ("what price range are you looking for ?", "do you have a price range in mind ?"),
    "food": ("what type of food would you like ?", "which cuisine do you prefer ?"),
    "stars": ("how many stars would you like ?", "what star rating do you want ?"),
    "departure": ("where will you be leaving from ?", "what is your departure station ?"),
    "destination": ("where are you heading to ?", "what is your destination ?"),
    "day": ("what day will you travel ?", "which day would you like to leave ?"),
}
_SYS_OFFER = {
    "inform": ("i found {ent} for you .", "{ent} matches your request ."),
    "select": ("there are a few options . would you like {ent} ?", "i have several choices , how about {ent} ?"),
    "recommend": ("i recommend {ent} .", "how about {ent} ? it is a great choice ."),
}
_SYS_ANSWER = {
    "phone": ("the phone number is [value_phone]", "you can call them on [value_phone]"),
    "address": ("the address is [value_address]", "they are located at [value_address]"),
    "postcode": ("the postcode is [value_postcode]", "the post code is [value_postcode]"),
    "parking": ("parking is [value_parking]", "they offer [value_parking] parking"),
    "price": ("the ticket costs [value_price]", "the fare is [value_price]"),
    "duration": ("the journey takes [value_duration]", "travel time is [value_duration]"),
    "leaveat": ("it leaves at [value_leaveat]", "the departure time is [value_leaveat]"),
    "arriveby": ("it arrives by [value_arriveby]", "the arrival time is [value_arriveby]"),
}
_SYS_ANSWER_OPEN = ("for {ent} ,", "sure , for {ent} ,")
_SYS_NOT_FOUND = ("sorry , there is no {dom} matching your request .", "i am sorry , nothing matches that .")
_SYS_BYE = ("thank you for using our service , goodbye .", "you are welcome , have a nice day .")


def _pick(rng, options):
    return options[rng.integers(len(options))]


def _join(items: list) -> str:
    if len(items) == 1:
        return items[0]
    return " , ".join(items[:-1]) + " and " + items[-1]


# user simulator --------------------------------------------------------------


def stated_constraints(goal: Goal, history) -> dict:
    said = {tok for t in history for tok in t.user}
    return {s: v for s, v in goal.constraints.items() if slot_token(s) in said}


def answered_requests(goal: Goal, history) -> set:
    said = {tok for t in history for tok in t.sys}
    return {r for r in goal.requests if slot_token(r) in said}


@dataclass
class UserAct:
    tokens: list
    done: bool
    kind: str  # inform | request | bye
    slots: tuple


def user_turn(goal: Goal, history, rng: np.random.Generator, max_turns: int = MAX_TURNS) -> UserAct:
    """Agenda: reveal constraints one at a time, ask open requests, then leave."""
    if history and history[-1].act == "bye":
        raise DialogueFinished("dialogue already ended")
    stated = stated_constraints(goal, history)
    unstated = [s for s in goal.constraints if s not in stated]
    if unstated:
        slot = unstated[0]
        phrase = _CONSTRAINT_PHRASE[slot]
        if not history:
            text = _pick(rng, _USER_OPEN).format(dom=_DOMAIN_WORD[goal.domain], phrase=phrase)
        else:
            text = _pick(rng, _USER_FOLLOW).format(phrase=phrase)
        return UserAct(text.split(), False, "inform", (slot,))
    answered = answered_requests(goal, history)
    open_reqs = [r for r in goal.requests if r not in answered]
    if open_reqs and len(history) < max_turns - 1:
        order = [open_reqs[i] for i in rng.permutation(len(open_reqs))]
        text = _pick(rng, _USER_ASK).format(slots=_join([_REQUEST_WORDS[r] for r in order]))
        return UserAct(text.split(), False, "request", tuple(open_reqs))
    return UserAct(_pick(rng, _USER_BYE).split(), True, "bye", ())


# oracle system ---------------------------------------------------------------


@dataclass
class DialogueState:
    stated: dict
    pending: tuple = ()
    user_done: bool = False


@dataclass
class OracleReply:
    tokens: list
    act: str
    fault: str | None  # None, "drop" or "swap"


def _ideal_response(goal: Goal, schema: DomainSchema, state: DialogueState, count: int, rng):
    ent = schema.entity_token
    if state.user_done:
        return _pick(rng, _SYS_BYE), "bye"
    if count == 0:
        return _pick(rng, _SYS_NOT_FOUND).format(dom=_DOMAIN_WORD[goal.domain]), "not found"
    if state.pending:
        order = [state.pending[i] for i in rng.permutation(len(state.pending))]
        clauses = _join([_pick(rng, _SYS_ANSWER[r]) for r in order])
        return f"{_pick(rng, _SYS_ANSWER_OPEN).format(ent=ent)} {clauses} .", "inform"
    unstated = [s for s in goal.constraints if s not in state.stated]
    if unstated:
        return _pick(rng, _SYS_REQUEST[unstated[0]]), "request"
    act = "inform" if count == 1 else "select" if count <= 3 else "recommend"
    return _pick(rng, _SYS_OFFER[act]).format(ent=ent), act


def oracle_response(goal: Goal, state: DialogueState, db, noise_rate: float,
                    rng: np.random.Generator, schemas=None) -> OracleReply:
    """Rule-based reply; with probability ``noise_rate`` one fault is injected.

    ``db`` is the match count or a bucket one-hot.  The fault drops one
    requested slot token when the reply carries any, otherwise it swaps two
    adjacent tokens.
    """
    if not 0.0 <= noise_rate < 1.0:
        raise ValueError("noise_rate must lie in [0, 1)")
    schema = schema_by_name(schemas or default_schemas(), goal.domain)
    count = db if isinstance(db, (int, np.integer)) else _bucket_count(db)
    text, act = _ideal_response(goal, schema, state, count, rng)
    tokens = text.split()
    fault = None
    if rng.random() < noise_rate:
        targets = {slot_token(r) for r in state.pending}
        hits = [i for i, t in enumerate(tokens) if t in targets]
        if hits:
            del tokens[hits[rng.integers(len(hits))]]
            fault = "drop"
        elif len(tokens) >= 2:
            i = int(rng.integers(len(tokens) - 1))
            tokens[i], tokens[i + 1] = tokens[i + 1], tokens[i]
            fault = "swap"
    return OracleReply(tokens, act, fault)


def _bucket_count(onehot) -> int:
    # representative count of a bucket; only zero versus nonzero matters to the rules
    return (0, 1, 2, 4)[int(np.argmax(onehot))]


# dialogue and corpus generation ----------------------------------------------


def simulate_dialogue(goal: Goal, schemas, noise_rate: float, rng: np.random.Generator,
                      max_turns: int = MAX_TURNS) -> Dialogue:
    schema = schema_by_name(schemas, goal.domain)
    dlg = Dialogue(goal)
    while True:
        ua = user_turn(goal, dlg.turns, rng, max_turns)
        stated = stated_constraints(goal, dlg.turns + [Turn(ua.tokens, [], [], [], "")])
        matches, db = db_lookup(schema, stated)
        state = DialogueState(stated, ua.slots if ua.kind == "request" else (), ua.done)
        reply = oracle_response(goal, state, len(matches), noise_rate, rng, schemas)
        dlg.turns.append(Turn(ua.tokens, state_vector(schemas, goal.domain, stated), db, reply.tokens, reply.act))
        if ua.done:
            return dlg


def build_vocab(dialogues) -> list:
    toks = set()
    for d in dialogues:
        for t in d.turns:
            toks.update(t.user)
            toks.update(t.sys)
    schemas = default_schemas()
    toks.update(s.entity_token for s in schemas)
    toks.update(slot_token(r) for s in schemas for r in s.requests)
    return list(RESERVED) + sorted(toks - set(RESERVED))


def generate_corpus(config: CorpusConfig, seed: int, out_dir: str | None = None) -> DialogueCorpus:
    """Generate train/valid/test splits; each dialogue draws from its own sub-seed."""
    counts = {"train": config.n_train, "valid": config.n_valid, "test": config.n_test}
    if min(counts.values()) <= 0:
        raise ValueError("split sizes must be positive")
    schemas = default_schemas()
    splits = {}
    for k, name in enumerate(SPLITS):
        dlgs = []
        for i in range(counts[name]):
            rng = np.random.default_rng([seed, k, i])
            goal = sample_goal(schemas, rng)
            dlgs.append(simulate_dialogue(goal, schemas, config.noise_rate, rng, config.max_turns))
        splits[name] = dlgs
    vocab = build_vocab([d for v in splits.values() for d in v])
    corpus = DialogueCorpus(splits["train"], splits["valid"], splits["test"], vocab, seed)
    if out_dir is not None:
        save_corpus(corpus, out_dir)
    return corpus


def save_corpus(corpus: DialogueCorpus, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    for name in SPLITS:
        with open(os.path.join(out_dir, f"{name}.jsonl"), "w", encoding="utf-8") as f:
            for d in corpus.split(name):
                f.write(json.dumps(d.to_json(), separators=(",", ":")) + "\n")
    with open(os.path.join(out_dir, "vocab.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(corpus.vocab) + "\n")


def load_corpus(out_dir: str, seed: int = -1) -> DialogueCorpus:
    splits = {}
    for name in SPLITS:
        path = os.path.join(out_dir, f"{name}.jsonl")
        with open(path, encoding="utf-8") as f:
            splits[name] = [Dialogue.from_json(json.loads(line)) for line in f if line.strip()]
    with open(os.path.join(out_dir, "vocab.txt"), encoding="utf-8") as f:
        vocab = [line.rstrip("\n") for line in f if line.rstrip("\n")]
    return DialogueCorpus(splits["train"], splits["valid"], splits["test"], vocab, seed)


def validate_dialogue(d: Dialogue, vocab, schemas=None) -> None:
    """Raise ValueError if any corpus invariant is broken."""
    schemas = schemas or default_schemas()
    vs = set(vocab)
    if len(d.turns) < 2:
        raise ValueError("dialogue shorter than two turns")
    if d.turns[-1].act != "bye":
        raise ValueError("dialogue does not end with a goodbye")
    n_state = len(state_layout(schemas))
    for t in d.turns:
        if not set(t.user) <= vs or not set(t.sys) <= vs:
            raise ValueError("token outside the vocabulary")
        if t.act not in ACT_LABELS:
            raise ValueError(f"unknown act {t.act!r}")
        if len(t.state) != n_state or len(t.db) != len(DB_BUCKETS) or sum(t.db) != 1.0:
            raise ValueError("malformed state or db encoding")
    if not d.goal.requests:
        raise ValueError("goal without requests")
