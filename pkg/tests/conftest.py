import numpy as np
import pytest
from hypothesis import strategies as st

from kgrefine.graph import KnowledgeGraph, Vocab


def make_graph(observed, candidates=(), n_entities=None, n_relations=None):
    """Graph over entities e0.. and relations r0.. sized to fit the triplets."""
    rows = list(observed) + list(candidates)
    n_e = n_entities or 1 + max(max(h, t) for h, _, t in rows)
    n_r = n_relations or 1 + max(r for _, r, _ in rows)
    ents = Vocab(f"e{i}" for i in range(n_e))
    rels = Vocab(f"r{i}" for i in range(n_r))
    return KnowledgeGraph(ents, rels, observed, candidates)


def random_graph(rng, n_entities, n_relations, density, candidate_share=0.3):
    """Random triplets split into observed and candidates; at least one observed."""
    n = max(2, int(density * n_entities * n_entities * n_relations))
    rows = {(int(rng.integers(n_entities)), int(rng.integers(n_relations)), int(rng.integers(n_entities)))
            for _ in range(n)}
    rows = sorted(rows)
    rng.shuffle(rows)
    cut = max(1, int(len(rows) * (1 - candidate_share)))
    return make_graph(rows[:cut], rows[cut:], n_entities, n_relations)


@st.composite
def small_graphs(draw, max_entities=8, max_relations=3):
    n_e = draw(st.integers(2, max_entities))
    n_r = draw(st.integers(1, max_relations))
    trip = st.tuples(st.integers(0, n_e - 1), st.integers(0, n_r - 1), st.integers(0, n_e - 1))
    obs = draw(st.lists(trip, min_size=1, max_size=30))
    cand = draw(st.lists(trip, max_size=10))
    cand = [t for t in cand if t not in set(obs)]
    return make_graph(obs, cand, n_e, n_r)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def chain_graph():
    # e0 -r0-> e1 -r1-> e2, e0 -r2-> e2, plus a symmetric pair on r3
    obs = [(0, 0, 1), (1, 1, 2), (0, 2, 2), (3, 3, 4), (4, 3, 3)]
    return make_graph(obs, [(2, 3, 3)], 5, 4)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
