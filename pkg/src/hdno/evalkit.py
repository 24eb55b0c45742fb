"""Automatic dialogue metrics and latent-act analysis."""
from __future__ import annotations

import csv
import json
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .dialoguesim import db_lookup, default_schemas, schema_by_name, slot_token


@dataclass
class DialogueOutcome:
    informed: bool
    success: bool


@dataclass
class EvalReport:
    inform: float
    success: float
    bleu: float
    total: float
    outcomes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"inform": self.inform, "success": self.success, "bleu": self.bleu, "total": self.total,
                "outcomes": [asdict(o) for o in self.outcomes]}

    @staticmethod
    def from_json(d: dict) -> "EvalReport":
        return EvalReport(d["inform"], d["success"], d["bleu"], d["total"],
                          [DialogueOutcome(**o) for o in d["outcomes"]])

    def write(self, json_path: str, csv_path: str | None = None):
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=1)
        if csv_path:
            with open(csv_path, "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f)
                w.writerow(["inform", "success", "bleu", "total"])
                w.writerow([repr(self.inform), repr(self.success), repr(self.bleu), repr(self.total)])


def dialogue_outcome(goal, sys_turns, schemas=None) -> DialogueOutcome:
    """Informed: the goal domain's entity token appears whenever the goal has
    DB matches.  Success: informed and every requested slot token appears."""
    schema = schema_by_name(schemas or default_schemas(), goal.domain)
    said = {tok for turn in sys_turns for tok in turn}
    matches, _ = db_lookup(schema, goal.constraints)
    informed = schema.entity_token in said if matches else True
    success = informed and all(slot_token(r) in said for r in goal.requests)
    return DialogueOutcome(informed, success)


def _outcomes(records, schemas=None):
    return [r if isinstance(r, DialogueOutcome) else dialogue_outcome(r[0], r[1], schemas) for r in records]


def inform_rate(records, schemas=None) -> float:
    """Percent informed over (goal, system turns) records."""
    out = _outcomes(records, schemas)
    return 100.0 * sum(o.informed for o in out) / len(out) if out else 0.0


def success_rate(records, schemas=None) -> float:
    out = _outcomes(records, schemas)
    return 100.0 * sum(o.success for o in out) / len(out) if out else 0.0


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n: int = 4) -> float:
    """Corpus BLEU-4 in percent against one reference per candidate.

    A zero match count at order n is replaced by 1 / (2 * candidate n-gram
    count) before the geometric mean.
    """
    if len(candidates) != len(references):
        raise ValueError("candidate and reference lists differ in length")
    if not candidates:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cn, rn = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(v, rn[g]) for g, v in cn.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        t = max(t, 1)
        logs.append(math.log(m / t) if m > 0 else math.log(1.0 / (2.0 * t)))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return 100.0 * bp * math.exp(sum(logs) / max_n)


def total_score(report_or_inform, success: float | None = None, bleu_score: float | None = None) -> float:
    if success is None:
        r = report_or_inform
        return 0.5 * (r.inform + r.success) + r.bleu
    return 0.5 * (report_or_inform + success) + bleu_score


def make_report(goals, generated, references, schemas=None) -> EvalReport:
    """``generated`` and ``references`` are per-dialogue lists of turn token lists."""
    outcomes = [dialogue_outcome(g, turns, schemas) for g, turns in zip(goals, generated)]
    inform = inform_rate(outcomes)
    success = success_rate(outcomes)
    cands = [t for turns in generated for t in turns]
    refs = [t for turns in references for t in turns]
    b = bleu(cands, refs)
    return EvalReport(inform, success, b, total_score(inform, success, b), outcomes)


# clustering and projection ---------------------------------------------------


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: list  # objective after every assignment step


def _inertia(X, centroids, assign):
    return float(((X - centroids[assign]) ** 2).sum())


def kmeans(X, k: int, seed: int, max_iter: int = 100) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations to an assignment fixpoint."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points {n}")
    rng = np.random.default_rng(seed)
    centroids = [X[rng.integers(n)]]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else int(rng.choice(n, p=d2 / total))
        centroids.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    C = np.array(centroids)
    assign = None
    history = []
    for _ in range(max_iter):
        dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        history.append(_inertia(X, C, new))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = X[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
    return KMeansResult(assign, C, history)


def pca_2d(X) -> np.ndarray:
    """Coordinates on the top two principal axes of the centered data.

    Each axis is signed so its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least two points")
    Xc = X - X.mean(axis=0)
    if np.allclose(Xc, 0.0):
        warnings.warn("zero-variance data, projecting to the origin")
        return np.zeros((X.shape[0], 2))
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = np.zeros((2, X.shape[1]))
    for j in range(min(2, vt.shape[0])):
        if s[j] <= 1e-12 * s[0]:
            continue
        v = vt[j]
        comps[j] = v if v[np.argmax(np.abs(v))] > 0 else -v
    return Xc @ comps.T


def purity(assign, labels) -> float:
    assign = np.asarray(assign)
    labels = np.asarray(labels)
    total = 0
    for c in np.unique(assign):
        total += Counter(labels[assign == c].tolist()).most_common(1)[0][1]
    return total / len(labels)


def _entropy(counts) -> float:
    p = np.asarray(list(counts), dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assign, labels) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    assign = np.asarray(assign).tolist()
    labels = np.asarray(labels).tolist()
    n = len(assign)
    joint = Counter(zip(assign, labels))
    ca, cl = Counter(assign), Counter(labels)
    mi = sum(v / n * math.log(v * n / (ca[a] * cl[b])) for (a, b), v in joint.items())
    ha, hl = _entropy(ca.values()), _entropy(cl.values())
    if ha == 0 and hl == 0:
        return 1.0
    denom = 0.5 * (ha + hl)
    return max(0.0, mi / denom) if denom > 0 else 0.0


@dataclass
class LatentReport:
    latents: np.ndarray
    assignments: np.ndarray
    coords: np.ndarray
    acts: list
    samples: dict  # cluster -> list of utterance strings
    purity: float
    nmi: float

    def write(self, csv_path: str, text_path: str):
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["turn_id", "cluster", "x", "y", "act_label"])
            for i, (c, xy, a) in enumerate(zip(self.assignments, self.coords, self.acts)):
                w.writerow([i, int(c), repr(float(xy[0])), repr(float(xy[1])), a])
        with open(text_path, "w", encoding="utf-8") as f:
            f.write(f"purity {self.purity:.6f} nmi {self.nmi:.6f}\n")
            for c in sorted(self.samples):
                f.write(f"\ncluster {c}\n")
                for u in self.samples[c]:
                    f.write(f"  {u}\n")


def latent_report(latents, acts, utterances, k: int = 8, seed: int = 0, n_samples: int = 3) -> LatentReport:
    """Cluster per-turn latent means and compare clusters with oracle acts."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape[0] < k:
        raise ValueError(f"fewer turns ({latents.shape[0]}) than clusters ({k})")
    km = kmeans(latents, k, seed)
    coords = pca_2d(latents)
    rng = np.random.default_rng(seed)
    samples = {}
    for c in range(k):
        idx = np.flatnonzero(km.assignments == c)
        if len(idx):
            pick = rng.choice(idx, size=min(n_samples, len(idx)), replace=False)
            samples[c] = [utterances[i] for i in sorted(pick.tolist())]
    return LatentReport(latents, km.assignments, coords, list(acts), samples,
                        purity(km.assignments, acts), nmi(km.assignments, acts))


def permutation_nmi(assign, labels, n_perm: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    return np.array([nmi(assign, rng.permutation(labels)) for _ in range(n_perm)])
