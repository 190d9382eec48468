import csv
import json

import numpy as np
import pytest

from kgrefine.embedding import init_model
from kgrefine.evaluation import (EvalError, EvalReport, EvalSplit, append_csv, evaluate_mtp, evaluate_ptd,
                                 f_score, generate_poisons, label_audit_sample, tie_rank, write_report)

from conftest import make_graph, random_graph


def table_scorer(table):
    return lambda arr: np.array([table.get(tuple(map(int, t)), 0.0) for t in arr])


def test_ptd_counts():
    split = EvalSplit(positives=[(0, 0, 1), (1, 0, 2), (2, 0, 3)], negatives=[(3, 0, 0), (0, 0, 2)])
    table = {(0, 0, 1): 0.9, (1, 0, 2): 0.5, (2, 0, 3): 0.1, (3, 0, 0): 0.7, (0, 0, 2): 0.2}
    rep = evaluate_ptd(split, table_scorer(table), 0.5)
    assert rep.counts == {"tp": 2, "fp": 1, "tn": 1, "fn": 1}
    assert rep.precision == pytest.approx(2 / 3) and rep.recall == pytest.approx(2 / 3)
    assert rep.f_score == pytest.approx(2 / 3)


def test_ptd_oracle_scores_give_perfect_f():
    split = EvalSplit(positives=[(0, 0, 1), (1, 0, 2)], negatives=[(2, 0, 0)])
    rep = evaluate_ptd(split, table_scorer({(0, 0, 1): 1.0, (1, 0, 2): 1.0}), 0.5)
    assert (rep.precision, rep.recall, rep.f_score) == (1.0, 1.0, 1.0)


def test_ptd_degenerate_cases():
    assert f_score(0.0, 0.0) == 0.0
    split = EvalSplit(positives=[(0, 0, 1)], negatives=[(1, 0, 0)])
    rep = evaluate_ptd(split, table_scorer({}), 0.5)
    assert rep.f_score == 0.0 and rep.counts["tn"] == 1
    with pytest.raises(EvalError):
        EvalSplit(positives=[(0, 0, 1)], negatives=[(0, 0, 1)])
    with pytest.raises(EvalError):
        evaluate_ptd(EvalSplit([], []), table_scorer({}), 0.5)


def test_split_rejects_observed_negatives():
    g = make_graph([(0, 0, 1)])
    with pytest.raises(EvalError):
        EvalSplit(positives=[], negatives=[(0, 0, 1)]).check_against(g)


def test_tie_rank():
    assert tie_rank(0.5, np.array([0.9, 0.5, 0.5, 0.1])) == 1 + 1 + 1.0
    assert tie_rank(1.0, np.array([0.3])) == 1.0
    assert tie_rank(0.0, np.array([])) == 1.0


def sort_all_oracle(g, test, scorer, ks):
    """Rank by sorting every unfiltered corruption; ties take the mean of their positions."""
    known = set(g.observed) | {tuple(t) for t in test}
    ranks = []
    for h, r, t in test:
        for side in ("tail", "head"):
            rows = [(h, r, e) if side == "tail" else (e, r, t) for e in range(g.entity_count)]
            target = (h, r, t)
            keep = [row for row in rows if row == target or row not in known]
            s = scorer(np.array(keep))
            order = np.argsort(-s, kind="stable")
            ts = s[keep.index(target)]
            positions = [i + 1 for i, j in enumerate(order) if s[j] == ts]
            ranks.append(float(np.mean(positions)))
    ranks = np.array(ranks)
    return ranks.mean(), np.mean(1 / ranks), {k: np.mean(ranks <= k) for k in ks}


@pytest.mark.parametrize("seed", range(8))
def test_mtp_matches_sort_all_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(4, 15)), 2, 0.1, candidate_share=0.2)
    test = [tuple(map(int, t)) for t in g.candidate_array] or [tuple(map(int, g.observed_array[0]))]
    levels = rng.integers(0, 4, size=(g.entity_count, 2, g.entity_count)) / 4.0  # plenty of ties
    scorer = lambda arr: levels[arr[:, 0], arr[:, 1], arr[:, 2]]
    rep = evaluate_mtp(g, test, scorer, ks=(1, 3, 10))
    mr, mrr, hits = sort_all_oracle(g, test, scorer, (1, 3, 10))
    assert rep.mr == pytest.approx(mr, abs=1e-12) and rep.mrr == pytest.approx(mrr, abs=1e-12)
    assert rep.hits_at == pytest.approx(hits)
    assert rep.counts["queries"] == 2 * len(test)


def test_mtp_independent_of_threads(rng):
    g = random_graph(rng, 25, 3, 0.02)
    model = init_model(g, "distmult", 4, 1.0, 0)
    test = g.candidate_array
    a = evaluate_mtp(g, test, model, threads=1)
    b = evaluate_mtp(g, test, model, threads=8)
    assert a.metrics() == b.metrics()


def test_mtp_filtering_ignores_known_triplets():
    # every corruption is known except the target: rank 1 whatever the scores
    g = make_graph([(0, 0, 0), (1, 0, 0), (0, 0, 1)], n_entities=2)
    rep = evaluate_mtp(g, [(1, 0, 1)], lambda a: np.zeros(len(a)))
    assert rep.mr == 1.0 and rep.hits_at[1] == 1.0


def test_mtp_empty_test():
    with pytest.raises(EvalError):
        evaluate_mtp(make_graph([(0, 0, 1)]), [], lambda a: np.zeros(len(a)))


# -- poisons and reports ---------------------------------------------------------------

def test_poisons_are_fresh_and_seeded(rng):
    g = random_graph(rng, 20, 3, 0.02)
    excl = [tuple(t) for t in g.candidate_array]
    p = generate_poisons(g, 50, seed=4, exclude=excl)
    assert len(p) == len(set(p)) == 50
    assert not set(p) & set(g.observed) and not set(p) & set(excl)
    assert p == generate_poisons(g, 50, seed=4, exclude=excl)
    assert p != generate_poisons(g, 50, seed=5, exclude=excl)


def test_poisons_impossible():
    g = make_graph([(0, 0, 0), (0, 0, 1), (1, 0, 0)], n_entities=2)
    with pytest.raises(EvalError):
        generate_poisons(g, 2)
    with pytest.raises(EvalError):
        generate_poisons(g, 0)


def test_audit_sample(tmp_path, rng):
    g = random_graph(rng, 20, 2, 0.02)
    p = generate_poisons(g, 30, seed=1)
    picked = label_audit_sample(p, 10, 2, g, tmp_path / "audit.tsv")
    lines = (tmp_path / "audit.tsv").read_text().splitlines()
    assert len(lines) == 11 and lines[0].startswith("#")
    assert all(line.endswith("\t") and line.count("\t") == 3 for line in lines[1:])
    assert set(picked) <= set(p)
    with pytest.raises(EvalError):
        label_audit_sample(p, 31, 2, g, tmp_path / "x.tsv")


def test_report_is_deterministic(tmp_path):
    rep = EvalReport("mtp", mr=2.5, mrr=0.5, hits_at={10: 1.0, 1: 0.25, 3: 0.5}, counts={"queries": 4})
    write_report(tmp_path / "a.json", rep, {"b": 1, "a": 2}, 0)
    write_report(tmp_path / "b.json", rep, {"a": 2, "b": 1}, 0)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    data = json.loads((tmp_path / "a.json").read_text())
    assert data["timestamp"] is None
    assert data["metrics"]["tie_rule"] == "mean" and data["metrics"]["hits@3"] == 0.5


def test_csv_appends(tmp_path):
    rep = EvalReport("ptd", precision=1.0, recall=0.5, f_score=2 / 3, threshold=0.5)
    append_csv(tmp_path / "r.csv", "a", rep)
    append_csv(tmp_path / "r.csv", "b", rep)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["run", "task", "metric", "value"]
    assert len(rows) == 1 + 2 * 4 and rows[-1][0] == "b"
