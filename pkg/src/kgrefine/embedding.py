"""Triplet embeddings with a Bernoulli likelihood.

Each score function maps ``(x_h, x_r, x_t)`` to a logit ``z``; the
probability that the triplet holds is ``sigmoid(z)``.  Training minimises
the negative log-likelihood over positives, explicit negatives and uniformly
corrupted triplets with plain mini-batch SGD.

ComplEx rows store ``d`` real parts followed by ``d`` imaginary parts, so the
matrices are ``2d`` wide while ``dim`` still counts complex coordinates.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .graph import KnowledgeGraph, Vocab

log = logging.getLogger(__name__)

MAGIC = b"KGREFINE-MODEL 1\n"


class ScoreKind(str, enum.Enum):
    TRANSE = "transe"
    DISTMULT = "distmult"
    COMPLEX = "complex"


class SamplingError(RuntimeError):
    pass


class TrainingError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 100
    negatives_per_positive: int = 5
    batch_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("epochs", "negatives_per_positive", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")


@dataclass
class EmbeddingModel:
    entity_vectors: np.ndarray
    relation_vectors: np.ndarray
    score_kind: ScoreKind = ScoreKind.TRANSE
    gamma: float = 1.0
    dim: int = 30
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.score_kind = ScoreKind(self.score_kind)

    @property
    def width(self) -> int:
        return 2 * self.dim if self.score_kind is ScoreKind.COMPLEX else self.dim

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.entity_vectors.copy(), self.relation_vectors.copy(),
                              self.score_kind, self.gamma, self.dim, dict(self.meta))

    # -- scoring --------------------------------------------------------------
    def logits(self, triplets) -> np.ndarray:
        tr = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        h = self.entity_vectors[tr[:, 0]]
        r = self.relation_vectors[tr[:, 1]]
        t = self.entity_vectors[tr[:, 2]]
        return _logit_and_grad(self.score_kind, self.gamma, self.dim, h, r, t, grad=False)

    def probabilities(self, triplets) -> np.ndarray:
        return expit(self.logits(triplets))

    def __call__(self, triplets) -> np.ndarray:
        return self.probabilities(triplets)


def init_model(g: KnowledgeGraph, score_kind=ScoreKind.TRANSE, dim: int = 30,
               gamma: float = 1.0, seed: int = 0) -> EmbeddingModel:
    """Uniform(-6/sqrt(d), 6/sqrt(d)) initialisation of every coordinate."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    kind = ScoreKind(score_kind)
    width = 2 * dim if kind is ScoreKind.COMPLEX else dim
    bound = 6.0 / np.sqrt(dim)
    rng = np.random.default_rng(seed)
    ent = rng.uniform(-bound, bound, size=(g.entity_count, width))
    rel = rng.uniform(-bound, bound, size=(g.relation_count, width))
    return EmbeddingModel(ent, rel, kind, float(gamma), int(dim))


def _logit_and_grad(kind, gamma, dim, h, r, t, grad=True):
    """Logits for row-aligned vectors and, optionally, d logit / d (h, r, t)."""
    if kind is ScoreKind.TRANSE:
        diff = h + r - t
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        z = gamma - dist
        if not grad:
            return z
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)
        return z, -unit, -unit, unit
    if kind is ScoreKind.DISTMULT:
        z = np.einsum("ij,ij,ij->i", h, r, t)
        if not grad:
            return z
        return z, r * t, h * t, h * r
    hr, hi = h[:, :dim], h[:, dim:]
    rr, ri = r[:, :dim], r[:, dim:]
    tr, ti = t[:, :dim], t[:, dim:]
    z = (np.einsum("ij,ij,ij->i", hr, rr, tr) + np.einsum("ij,ij,ij->i", hi, rr, ti)
         + np.einsum("ij,ij,ij->i", hr, ri, ti) - np.einsum("ij,ij,ij->i", hi, ri, tr))
    if not grad:
        return z
    gh = np.hstack([rr * tr + ri * ti, rr * ti - ri * tr])
    gr = np.hstack([hr * tr + hi * ti, hr * ti - hi * tr])
    gt = np.hstack([hr * rr - hi * ri, hi * rr + hr * ri])
    return z, gh, gr, gt


def score(model: EmbeddingModel, tau) -> float:
    """Probability in (0, 1) that ``tau`` holds under ``model``."""
    return float(model.probabilities([tuple(tau)])[0])


def embedding_probability(model: EmbeddingModel, tau, truth: int) -> float:
    """Bernoulli likelihood of ``truth`` given the model's score for ``tau``."""
    if truth not in (0, 1):
        raise ValueError("truth must be 0 or 1")
    p = score(model, tau)
    return p if truth == 1 else 1.0 - p


def nll(model: EmbeddingModel, triplets, labels) -> float:
    """Summed negative log-likelihood of 0/1 ``labels``."""
    z = model.logits(triplets)
    y = np.asarray(labels, dtype=float)
    return float(np.sum(np.logaddexp(0.0, -z) * y + np.logaddexp(0.0, z) * (1.0 - y)))


def nll_gradient(model: EmbeddingModel, triplets, labels):
    """Dense gradients of :func:`nll` w.r.t. entity and relation matrices."""
    tr = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    y = np.asarray(labels, dtype=float)
    ge = np.zeros_like(model.entity_vectors)
    gr = np.zeros_like(model.relation_vectors)
    _accumulate(model, tr, y, ge, gr)
    return ge, gr


def _accumulate(model, tr, y, ge, gr):
    h = model.entity_vectors[tr[:, 0]]
    r = model.relation_vectors[tr[:, 1]]
    t = model.entity_vectors[tr[:, 2]]
    z, dh, dr, dt = _logit_and_grad(model.score_kind, model.gamma, model.dim, h, r, t)
    coef = (expit(z) - y)[:, None]  # d nll / d z
    ge += _scatter(np.concatenate([tr[:, 0], tr[:, 2]]), np.vstack([coef * dh, coef * dt]), len(ge))
    gr += _scatter(tr[:, 1], coef * dr, len(gr))
    return z


def _scatter(index, rows, n):
    """Sum ``rows`` into ``n`` buckets by ``index`` (a sparse 0/1 matrix product)."""
    m = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index)))
    return m @ rows


# -- negative sampling -----------------------------------------------------------

def triplet_keys(triplets, n_entities: int, n_relations: int) -> np.ndarray:
    tr = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    return (tr[:, 0] * n_relations + tr[:, 1]) * n_entities + tr[:, 2]


def _member(keys, sorted_keys):
    if not len(sorted_keys):
        return np.zeros(len(keys), dtype=bool)
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return sorted_keys[pos] == keys


def corrupt(triplets, k: int, n_entities: int, n_relations: int, forbidden_keys: np.ndarray,
            rng: np.random.Generator, max_attempts: int = 100_000) -> np.ndarray:
    """``k`` corruptions per row, head or tail replaced (fair coin) by a uniform entity.

    Corruptions whose key is in ``forbidden_keys`` (sorted) are redrawn.
    Returns an array of shape ``(len(triplets) * k, 3)``, rows grouped by source.
    """
    base = np.repeat(np.asarray(triplets, dtype=np.int64).reshape(-1, 3), k, axis=0)
    out = base.copy()
    pending = np.arange(len(base))
    attempts = 0
    while len(pending):
        if attempts >= max_attempts:
            raise SamplingError(f"could not find {k} unseen corruptions for "
                                f"{len(pending)} slot(s) after {max_attempts} attempts")
        attempts += 1
        cand = base[pending].copy()
        side = rng.random(len(pending)) < 0.5
        ent = rng.integers(0, n_entities, size=len(pending))
        cand[side, 0] = ent[side]
        cand[~side, 2] = ent[~side]
        bad = _member(triplet_keys(cand, n_entities, n_relations), forbidden_keys)
        out[pending[~bad]] = cand[~bad]
        pending = pending[bad]
    return out


def sample_negatives(g: KnowledgeGraph, tau, k: int, seed: int = 0, positives=()) -> list[tuple]:
    """``k`` corruptions of ``tau`` absent from observed and ``positives``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    known = np.vstack([g.observed_array, np.asarray(list(positives), dtype=np.int64).reshape(-1, 3)])
    forbidden = np.unique(triplet_keys(known, g.entity_count, g.relation_count))
    rng = np.random.default_rng(seed)
    neg = corrupt([tuple(tau)], k, g.entity_count, g.relation_count, forbidden, rng)
    return [tuple(int(v) for v in row) for row in neg]


# -- training --------------------------------------------------------------------

def train(model: EmbeddingModel, g: KnowledgeGraph, positives, explicit_negatives=(),
          cfg: TrainConfig | None = None) -> EmbeddingModel:
    """Mini-batch SGD on the summed Bernoulli NLL; returns a new model.

    Each epoch shuffles positives and explicit negatives together. Every
    positive in a batch contributes ``negatives_per_positive`` fresh
    corruptions, none of which is observed or a positive.
    """
    cfg = cfg or TrainConfig()
    model = model.copy()
    pos = np.asarray(list(positives) if not isinstance(positives, np.ndarray) else positives,
                     dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(list(explicit_negatives) if not isinstance(explicit_negatives, np.ndarray)
                     else explicit_negatives, dtype=np.int64).reshape(-1, 3)
    data = np.vstack([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    if not len(data):
        return model
    E, R = g.entity_count, g.relation_count
    forbidden = np.unique(triplet_keys(np.vstack([g.observed_array, pos]), E, R))
    rng = np.random.default_rng(cfg.seed)
    k = cfg.negatives_per_positive
    lr = cfg.learning_rate
    ent, rel = model.entity_vectors, model.relation_vectors
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch, y = data[idx], labels[idx]
            bpos = batch[y == 1]
            if len(bpos):
                sampled = corrupt(bpos, k, E, R, forbidden, rng)
                batch = np.vstack([batch, sampled])
                y = np.concatenate([y, np.zeros(len(sampled))])
            ge = np.zeros_like(ent)
            gr = np.zeros_like(rel)
            with np.errstate(over="ignore", invalid="ignore"):  # checked just below
                _accumulate(model, batch, y, ge, gr)
            if not (np.isfinite(ge).all() and np.isfinite(gr).all()):
                bad = batch[~np.isfinite(model.logits(batch))]
                raise TrainingError(f"non-finite gradient in epoch {epoch}; "
                                    f"first offending triplet {bad[0].tolist() if len(bad) else batch[0].tolist()}")
            ent -= lr * ge
            rel -= lr * gr
    return model


# -- checkpoint ------------------------------------------------------------------

def save_model(path, model: EmbeddingModel, entities: Vocab, relations: Vocab):
    """JSON header line followed by little-endian float64 entity then relation matrices."""
    header = {
        "score_kind": model.score_kind.value,
        "dim": model.dim,
        "gamma": model.gamma,
        "entity_count": int(model.entity_vectors.shape[0]),
        "relation_count": int(model.relation_vectors.shape[0]),
        "width": model.width,
        "entities": entities.names,
        "relations": relations.names,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(model.entity_vectors, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.relation_vectors, dtype="<f8").tobytes())


def load_model(path) -> tuple[EmbeddingModel, Vocab, Vocab]:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        header = json.loads(fh.readline())
        n_e, n_r, w = header["entity_count"], header["relation_count"], header["width"]
        ent = np.frombuffer(fh.read(n_e * w * 8), dtype="<f8").reshape(n_e, w).astype(float)
        rel = np.frombuffer(fh.read(n_r * w * 8), dtype="<f8").reshape(n_r, w).astype(float)
    model = EmbeddingModel(ent, rel, header["score_kind"], header["gamma"], header["dim"])
    return model, Vocab(header["entities"]), Vocab(header["relations"])
