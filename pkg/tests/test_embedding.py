import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgrefine import embedding as emb
from kgrefine.embedding import (EmbeddingModel, SamplingError, ScoreKind, TrainConfig, TrainingError, corrupt,
                                embedding_probability, init_model, load_model, nll, nll_gradient,
                                sample_negatives, score, train, triplet_keys)

from conftest import make_graph, random_graph

KINDS = list(ScoreKind)


def numeric_gradient(model, triplets, labels, eps=1e-6):
    ge = np.zeros_like(model.entity_vectors)
    gr = np.zeros_like(model.relation_vectors)
    for mat, out in ((model.entity_vectors, ge), (model.relation_vectors, gr)):
        for idx in np.ndindex(mat.shape):
            old = mat[idx]
            mat[idx] = old + eps
            up = nll(model, triplets, labels)
            mat[idx] = old - eps
            down = nll(model, triplets, labels)
            mat[idx] = old
            out[idx] = (up - down) / (2 * eps)
    return ge, gr


def relative_error(a, b):
    a, b = np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8)


def random_problem(rng, kind):
    g = random_graph(rng, int(rng.integers(3, 7)), int(rng.integers(1, 4)), 0.2)
    model = init_model(g, kind, int(rng.integers(1, 5)), float(rng.uniform(0.5, 3)), int(rng.integers(1 << 30)))
    n = int(rng.integers(1, 8))
    trip = np.column_stack([rng.integers(g.entity_count, size=n), rng.integers(g.relation_count, size=n),
                            rng.integers(g.entity_count, size=n)])
    return g, model, trip, rng.integers(0, 2, size=n).astype(float)


@pytest.mark.parametrize("kind", KINDS)
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(hash(kind.value) % 1000)
    for _ in range(25):
        _, model, trip, y = random_problem(rng, kind)
        assert relative_error(nll_gradient(model, trip, y), numeric_gradient(model, trip, y)) < 1e-4


def test_transe_zero_distance_score():
    ent = np.array([[0.1, 0.2], [0.4, -0.1]])
    rel = ent[[1]] - ent[[0]]
    m = EmbeddingModel(ent, rel, "transe", 1.0, 2)
    assert score(m, (0, 0, 1)) == pytest.approx(0.7310585786, abs=1e-9)


def test_distmult_is_symmetric(rng):
    g = random_graph(rng, 5, 2, 0.2)
    m = init_model(g, "distmult", 4, 1.0, 3)
    assert score(m, (1, 0, 3)) == pytest.approx(score(m, (3, 0, 1)), abs=1e-15)


def test_complex_matches_complex_arithmetic(rng):
    g = random_graph(rng, 5, 2, 0.2)
    m = init_model(g, "complex", 3, 1.0, 9)
    d = m.dim

    def c(v):
        return v[:d] + 1j * v[d:]

    h, r, t = c(m.entity_vectors[2]), c(m.relation_vectors[1]), c(m.entity_vectors[4])
    assert m.logits([(2, 1, 4)])[0] == pytest.approx(np.real(np.sum(h * r * np.conj(t))), abs=1e-12)
    assert m.entity_vectors.shape[1] == 2 * d


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_transe_translation_invariance(seed, shift):
    g = make_graph([(0, 0, 1), (2, 1, 3)])
    m = init_model(g, "transe", 4, 1.0, seed)
    shifted = m.copy()
    shifted.entity_vectors += shift
    trip = np.array([(0, 0, 1), (2, 1, 3), (3, 0, 0)])
    assert np.allclose(m.logits(trip), shifted.logits(trip), atol=1e-12, rtol=0)


def test_init_is_seeded_and_bounded():
    g = make_graph([(0, 0, 1)], n_entities=5, n_relations=2)
    a, b = init_model(g, "transe", 30, 1.0, 4), init_model(g, "transe", 30, 1.0, 4)
    assert np.array_equal(a.entity_vectors, b.entity_vectors)
    assert np.abs(a.entity_vectors).max() <= 6 / np.sqrt(30)
    assert a.entity_vectors.shape == (5, 30) and a.relation_vectors.shape == (2, 30)
    with pytest.raises(ValueError):
        init_model(g, "transe", 0)


def test_embedding_probability():
    g = make_graph([(0, 0, 1)])
    m = init_model(g, "distmult", 3, 1.0, 0)
    p = score(m, (0, 0, 1))
    assert embedding_probability(m, (0, 0, 1), 1) == p
    assert embedding_probability(m, (0, 0, 1), 0) == pytest.approx(1 - p)
    with pytest.raises(ValueError):
        embedding_probability(m, (0, 0, 1), 2)


# -- negative sampling ---------------------------------------------------------------

def test_corruptions_avoid_forbidden(rng):
    g = random_graph(rng, 12, 2, 0.15)
    pos = g.observed_array
    forbidden = np.unique(triplet_keys(pos, 12, 2))
    neg = corrupt(pos, 4, 12, 2, forbidden, np.random.default_rng(0))
    assert neg.shape == (4 * len(pos), 3)
    assert not np.isin(triplet_keys(neg, 12, 2), forbidden).any()
    src = np.repeat(pos, 4, axis=0)
    assert np.array_equal(neg[:, 1], src[:, 1])
    # exactly one side replaced (or a no-op draw of the same entity, which would be forbidden)
    assert ((neg[:, 0] == src[:, 0]) | (neg[:, 2] == src[:, 2])).all()


def test_sample_negatives_is_seeded():
    g = make_graph([(0, 0, 1), (1, 0, 2)], n_entities=6)
    a = sample_negatives(g, (0, 0, 1), 5, seed=3)
    assert a == sample_negatives(g, (0, 0, 1), 5, seed=3)
    assert not set(a) & set(g.observed)


def test_sampling_fails_when_everything_is_forbidden():
    g = make_graph([(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 0, 1)])
    with pytest.raises(SamplingError):
        sample_negatives(g, (0, 0, 1), 1)


# -- training -------------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_training_separates_positives_from_negatives(kind, rng):
    g = random_graph(rng, 20, 2, 0.02, candidate_share=0.0)
    m0 = init_model(g, kind, 8, 1.0, 0)
    m = train(m0, g, g.observed_array, (), TrainConfig(0.05, 150, 3, 64, 0))
    neg = np.array(sample_negatives(g, tuple(g.observed_array[0]), 30, seed=1))
    assert nll(m, g.observed_array, np.ones(len(g.observed_array))) < \
        nll(m0, g.observed_array, np.ones(len(g.observed_array)))
    assert m(g.observed_array).mean() > m(neg).mean()
    assert not np.shares_memory(m.entity_vectors, m0.entity_vectors)


def test_explicit_negatives_are_pushed_down(rng):
    g = random_graph(rng, 15, 2, 0.03, candidate_share=0.0)
    bad = np.array([(0, 0, 5), (3, 1, 7)])
    bad = bad[~np.isin(triplet_keys(bad, 15, 2), triplet_keys(g.observed_array, 15, 2))]
    m0 = init_model(g, "distmult", 8, 1.0, 0)
    with_neg = train(m0, g, g.observed_array, bad, TrainConfig(0.05, 100, 2, 32, 0))
    without = train(m0, g, g.observed_array, (), TrainConfig(0.05, 100, 2, 32, 0))
    assert with_neg(bad).mean() < without(bad).mean()


def test_training_is_deterministic(rng):
    g = random_graph(rng, 15, 2, 0.05)
    cfg = TrainConfig(0.05, 5, 2, 16, 7)
    a = train(init_model(g, "transe", 5, 1.0, 0), g, g.observed_array, g.candidate_array, cfg)
    b = train(init_model(g, "transe", 5, 1.0, 0), g, g.observed_array, g.candidate_array, cfg)
    assert np.array_equal(a.entity_vectors, b.entity_vectors)


def test_divergence_is_reported():
    g = make_graph([(0, 0, 1), (1, 0, 2)], n_entities=4)
    m = init_model(g, "distmult", 2, 1.0, 0)
    with pytest.raises(TrainingError, match="epoch"):
        train(m, g, g.observed_array, (), TrainConfig(1e200, 3, 1, 2, 0))


@pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(epochs=0), dict(batch_size=0),
                                 dict(negatives_per_positive=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_round_trip(tmp_path, kind):
    g = make_graph([(0, 0, 1), (1, 1, 2)])
    m = init_model(g, kind, 3, 1.5, 2)
    emb.save_model(tmp_path / "m.bin", m, g.entities, g.relations)
    m2, ents, rels = load_model(tmp_path / "m.bin")
    assert np.array_equal(m2.entity_vectors, m.entity_vectors)
    assert np.array_equal(m2.relation_vectors, m.relation_vectors)
    assert (m2.score_kind, m2.gamma, m2.dim) == (m.score_kind, m.gamma, m.dim)
    assert ents == g.entities and rels == g.relations


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x").write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        load_model(tmp_path / "x")
