"""Poison generation, triplet classification metrics and filtered ranking.

Scorers are callables mapping an ``(n, 3)`` int array of triplets to ``n``
real scores, higher meaning more plausible.  A trained
:class:`~kgrefine.embedding.EmbeddingModel` is such a callable.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .graph import KnowledgeGraph, Triplet

Scorer = Callable[[np.ndarray], np.ndarray]


class EvalError(ValueError):
    pass


@dataclass
class EvalSplit:
    positives: list
    negatives: list
    name: str = "test"

    def __post_init__(self):
        self.positives = [Triplet(*map(int, t)) for t in self.positives]
        self.negatives = [Triplet(*map(int, t)) for t in self.negatives]
        if set(self.positives) & set(self.negatives):
            raise EvalError("positives and negatives overlap")

    def check_against(self, g: KnowledgeGraph):
        if any(t in g.observed for t in self.negatives):
            raise EvalError("a negative triplet is observed")

    def __len__(self):
        return len(self.positives) + len(self.negatives)


@dataclass
class EvalReport:
    task: str
    precision: float | None = None
    recall: float | None = None
    f_score: float | None = None
    threshold: float | None = None
    mr: float | None = None
    mrr: float | None = None
    hits_at: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        if self.task == "ptd":
            keys = ("precision", "recall", "f_score", "threshold")
            out = {k: getattr(self, k) for k in keys}
        else:
            out = {"mr": self.mr, "mrr": self.mrr,
                   **{f"hits@{k}": v for k, v in sorted(self.hits_at.items())}, "tie_rule": "mean"}
        out.update(self.counts)
        return out


def _score(scorer: Scorer, triplets) -> np.ndarray:
    arr = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    return np.asarray(scorer(arr), dtype=float).reshape(-1)


def f_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def evaluate_ptd(split: EvalSplit, scorer: Scorer, threshold: float) -> EvalReport:
    """Precision/recall/F with "true triplet" as the positive class (score >= threshold)."""
    if not len(split):
        raise EvalError("empty split")
    s_pos = _score(scorer, split.positives) if split.positives else np.zeros(0)
    s_neg = _score(scorer, split.negatives) if split.negatives else np.zeros(0)
    tp = int(np.sum(s_pos >= threshold))
    fn = len(s_pos) - tp
    fp = int(np.sum(s_neg >= threshold))
    tn = len(s_neg) - fp
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return EvalReport("ptd", precision=p, recall=r, f_score=f_score(p, r), threshold=float(threshold),
                      counts={"tp": tp, "fp": fp, "tn": tn, "fn": fn})


def tie_rank(target_score: float, other_scores: np.ndarray) -> float:
    """1 + #strictly better + #ties / 2 (``other_scores`` excludes the target)."""
    better = np.sum(other_scores > target_score)
    ties = np.sum(other_scores == target_score)
    return 1.0 + float(better) + float(ties) / 2.0


def _rank_chunk(queries, scorer, n_entities, known_tails, known_heads):
    ents = np.arange(n_entities)
    ranks = []
    for h, r, t in queries:
        for side in ("tail", "head"):
            rows = np.empty((n_entities, 3), dtype=np.int64)
            rows[:, 1] = r
            if side == "tail":
                rows[:, 0], rows[:, 2] = h, ents
                target, known = t, known_tails.get((h, r), ())
            else:
                rows[:, 0], rows[:, 2] = ents, t
                target, known = h, known_heads.get((t, r), ())
            s = _score(scorer, rows)
            keep = np.ones(n_entities, dtype=bool)
            keep[list(known)] = False
            keep[target] = False
            ranks.append(tie_rank(s[target], s[keep]))
    return ranks


def evaluate_mtp(g: KnowledgeGraph, test: Iterable, scorer: Scorer, ks=(1, 3, 10),
                 threads: int = 1) -> EvalReport:
    """Filtered head- and tail-replacement ranking for every test triplet.

    Corruptions present in observed or test (other than the target) are
    removed before ranking; ties count half.  Each triplet contributes two
    ranks. Results do not depend on ``threads``.
    """
    test = [Triplet(*map(int, t)) for t in test]
    if not test:
        raise EvalError("empty test set")
    for t in test:
        g._check(t)
    known_tails, known_heads = {}, {}
    for h, r, t in list(map(tuple, g.observed_array)) + test:
        known_tails.setdefault((int(h), int(r)), set()).add(int(t))
        known_heads.setdefault((int(t), int(r)), set()).add(int(h))
    threads = max(1, int(threads))
    n_chunks = min(len(test), threads * 4) if threads > 1 else 1
    chunks = [c.tolist() for c in np.array_split(np.array(test), n_chunks)]
    args = (scorer, g.entity_count, known_tails, known_heads)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda c: _rank_chunk(c, *args), chunks))
    else:
        parts = [_rank_chunk(c, *args) for c in chunks]
    ranks = np.array([x for part in parts for x in part], dtype=float)
    return EvalReport("mtp", mr=float(ranks.mean()), mrr=float(np.mean(1.0 / ranks)),
                      hits_at={int(k): float(np.mean(ranks <= k)) for k in ks},
                      counts={"queries": int(len(ranks)), "triplets": len(test)})


def generate_poisons(g: KnowledgeGraph, n: int, seed: int = 0, exclude: Iterable = ()) -> list[Triplet]:
    """``n`` distinct uniformly random triplets, none observed (nor in ``exclude``)."""
    if n < 1:
        raise EvalError("n must be >= 1")
    rng = np.random.default_rng(seed)
    taken = set(g.observed) | {Triplet(*t) for t in exclude}
    out: dict[Triplet, None] = {}
    E, R = g.entity_count, g.relation_count
    attempts = 0
    while len(out) < n:
        if attempts >= 100 * n:
            raise EvalError(f"could only generate {len(out)} of {n} poisons after {attempts} attempts")
        m = min(100 * n - attempts, max(64, 2 * (n - len(out))))
        hs, rs, ts = rng.integers(E, size=m), rng.integers(R, size=m), rng.integers(E, size=m)
        for h, r, t in zip(hs.tolist(), rs.tolist(), ts.tolist()):
            attempts += 1
            tr = Triplet(h, r, t)
            if tr not in taken and tr not in out:
                out[tr] = None
                if len(out) == n:
                    break
    return list(out)


def label_audit_sample(poisons, k: int, seed: int, g: KnowledgeGraph, path) -> list[Triplet]:
    """Write ``k`` sampled poisons as named TSV rows with an empty verdict column."""
    poisons = list(dict.fromkeys(Triplet(*t) for t in poisons))
    if k > len(poisons):
        raise EvalError(f"cannot sample {k} of {len(poisons)} poisons")
    rng = np.random.default_rng(seed)
    picked = [poisons[i] for i in sorted(rng.choice(len(poisons), size=k, replace=False))]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# head\trelation\ttail\tverdict (fill in: false / true / unsure)\n")
        for t in picked:
            fh.write("\t".join(g.to_names(t)) + "\t\n")
    return picked


def write_report(path, report: EvalReport, config: dict, seed, timestamp=None):
    payload = {"task": report.task, "metrics": report.metrics(), "config": config, "seed": seed,
               "timestamp": timestamp}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def append_csv(path, run: str, report: EvalReport):
    """Append ``run,task,metric,value`` rows; header written on first use."""
    import os

    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["run", "task", "metric", "value"])
        for k, v in report.metrics().items():
            w.writerow([run, report.task, k, v])


def report_dict(report: EvalReport) -> dict:
    return asdict(report)
