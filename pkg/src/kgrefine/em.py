"""Variational EM between the embedding model and the rule model.

E-step: rule conditionals label every candidate (``>= delta`` true, else
false) and the embedding model is retrained on those labels; the candidate
posterior ``q`` is then read off the retrained embedding.

M-step: rule weights take gradient-ascent steps on the pseudo-likelihood
with target 1 for observed triplets and ``q`` for candidates.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import embedding as emb
from .graph import KnowledgeGraph, Triplet
from .rules import RuleInstance, sigmoid, signed_features, with_weights

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    pass


class ScoreMode(str, enum.Enum):
    Q_ONLY = "q"
    Q_PLUS_LAMBDA_P = "q+p"

    @classmethod
    def parse(cls, value) -> "ScoreMode":
        aliases = {"biogrer": cls.Q_ONLY, "q_only": cls.Q_ONLY,
                   "biogrer-star": cls.Q_PLUS_LAMBDA_P, "q_plus_lambda_p": cls.Q_PLUS_LAMBDA_P}
        if isinstance(value, cls):
            return value
        return aliases.get(str(value).lower()) or cls(str(value).lower())


@dataclass
class EmConfig:
    delta: float = 0.5
    rounds: int = 3
    mix_lambda: float = 1.0
    learning_rate_w: float = 1e-3
    epochs_w: int = 50
    retrain_epochs: int = 20
    weight_init: str = "precision"
    max_abs_weight: float = 1e3
    negative_repeats: int | None = None

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.rounds < 0 or self.epochs_w < 0 or self.retrain_epochs < 0:
            raise ValueError("rounds and epoch counts must be non-negative")
        if self.negative_repeats is not None and self.negative_repeats < 1:
            raise ValueError("negative_repeats must be >= 1")
        if self.mix_lambda < 0:
            raise ValueError("mix_lambda must be >= 0")
        if self.weight_init not in ("precision", "given"):
            raise ValueError("weight_init must be 'precision' or 'given'")


@dataclass
class RefinementState:
    q: dict
    distilled_true: set = field(default_factory=set)
    distilled_false: set = field(default_factory=set)
    round: int = 0
    history: list = field(default_factory=list)

    def q_array(self, triplets) -> np.ndarray:
        return np.array([self.q[Triplet(*map(int, t))] for t in triplets], dtype=float)


def _as_triplets(arr):
    return [Triplet(int(h), int(r), int(t)) for h, r, t in arr]


def _rows(triplets) -> np.ndarray:
    return np.asarray(list(triplets), dtype=np.int64).reshape(-1, 3)


def initial_state(model, g: KnowledgeGraph) -> RefinementState:
    cands = g.candidate_array
    q = dict(zip(_as_triplets(cands), model.probabilities(cands).tolist())) if len(cands) else {}
    return RefinementState(q=q)


def candidate_truth(state: RefinementState, model, g: KnowledgeGraph) -> np.ndarray:
    """0/1 belief per candidate used to fill Markov blankets.

    Candidates distilled in an earlier E-step keep that label; unverified
    ones count as true when the embedding scores them above 0.5.
    """
    cands = g.candidate_array
    if not len(cands):
        return np.zeros(0, dtype=bool)
    truth = model.probabilities(cands) > 0.5
    for i, t in enumerate(_as_triplets(cands)):
        if t in state.distilled_true:
            truth[i] = True
        elif t in state.distilled_false:
            truth[i] = False
    return truth


def conditional_probabilities(rules, g: KnowledgeGraph, triplets, believed_true) -> np.ndarray:
    """P_rule(V=1 | blanket) for each row of ``triplets`` with observed plus ``believed_true`` as truth."""
    if not len(rules):
        return np.full(len(triplets), 0.5)
    adj = g.adjacency(believed_true)
    x = signed_features(rules, triplets, adj)
    w = np.array([l.weight for l in rules], dtype=float)
    return sigmoid(x @ w)


def e_step(state: RefinementState, model, rules, g: KnowledgeGraph, cfg: EmConfig,
           train_cfg: emb.TrainConfig):
    """Distil rule conditionals into the embedding; returns ``(state', model')``."""
    cands = g.candidate_array
    if not len(cands):
        log.warning("e_step: empty candidate set, nothing to do")
        return state, model
    truth = candidate_truth(state, model, g)
    cond = conditional_probabilities(rules, g, cands, cands[truth])
    accept = cond >= cfg.delta
    dt = set(_as_triplets(cands[accept]))
    df = set(_as_triplets(cands[~accept]))
    rnd = state.round + 1
    tc = emb.TrainConfig(train_cfg.learning_rate, max(cfg.retrain_epochs, 1), train_cfg.negatives_per_positive,
                         train_cfg.batch_size, train_cfg.seed + 1000 * rnd)
    if cfg.retrain_epochs:
        # Each positive meets k sampled corruptions per epoch; repeating the
        # distilled negatives k times gives them matching weight.
        reps = cfg.negative_repeats or train_cfg.negatives_per_positive
        negs = np.repeat(cands[~accept], reps, axis=0)
        model = emb.train(model, g, np.vstack([g.observed_array, cands[accept]]), negs, tc)
    q_vals = model.probabilities(cands)
    new = RefinementState(q=dict(zip(_as_triplets(cands), q_vals.tolist())), distilled_true=dt,
                          distilled_false=df, round=rnd, history=list(state.history))
    new.last_conditional = cond
    return new, model


def pseudo_likelihood_terms(rules, g: KnowledgeGraph, state: RefinementState):
    """Signed feature matrix and soft targets over observed + candidates.

    Blankets are filled with observed triplets and the E-step's distilled
    true candidates. Rows without any grounding are dropped; they add a
    weight-independent constant to the objective.
    """
    cands = g.candidate_array
    triplets = np.vstack([g.observed_array, cands])
    targets = np.concatenate([np.ones(len(g.observed_array)), state.q_array(cands)])
    adj = g.adjacency(_rows(sorted(state.distilled_true)))
    x = signed_features(rules, triplets, adj)
    keep = np.flatnonzero(x.getnnz(axis=1))
    return x[keep], targets[keep]


def pseudo_log_likelihood(w, x: sp.spmatrix, targets) -> float:
    """sum_tau target*log sigmoid(f) + (1-target)*log(1-sigmoid(f)), f = x @ w."""
    f = x @ np.asarray(w, dtype=float)
    return float(-np.sum(targets * np.logaddexp(0.0, -f) + (1.0 - targets) * np.logaddexp(0.0, f)))


def pseudo_likelihood_gradient(w, x: sp.spmatrix, targets) -> np.ndarray:
    """d/dw_l = sum_tau (target - sigmoid(f)) * I_l * N(l, tau)."""
    f = x @ np.asarray(w, dtype=float)
    return np.asarray(x.T @ (targets - sigmoid(f))).ravel()


def m_step(state: RefinementState, model, rules, g: KnowledgeGraph, cfg: EmConfig) -> list[RuleInstance]:
    """Gradient ascent on the rule weights; returns reweighted copies of ``rules``."""
    if not rules:
        return []
    x, y = pseudo_likelihood_terms(rules, g, state)
    w = np.array([l.weight for l in rules], dtype=float)
    for _ in range(cfg.epochs_w):
        w = w + cfg.learning_rate_w * pseudo_likelihood_gradient(w, x, y)
        big = np.flatnonzero(~np.isfinite(w) | (np.abs(w) > cfg.max_abs_weight))
        if len(big):
            l = rules[big[0]]
            raise DivergenceError(f"rule weight diverged: {l.kind.value}{l.pattern.relations} "
                                  f"w={w[big[0]]:.4g}")
    return with_weights(rules, w)


def initial_weights(rules, cfg: EmConfig) -> list[RuleInstance]:
    if cfg.weight_init == "precision":
        return with_weights(rules, [l.precision for l in rules])
    return list(rules)


def run_refinement(g: KnowledgeGraph, rules, em_cfg: EmConfig | None = None,
                   train_cfg: emb.TrainConfig | None = None, score_kind=emb.ScoreKind.TRANSE,
                   dim: int = 30, gamma: float = 1.0, model=None):
    """Warm-start the embedding on observed triplets, then alternate E and M steps.

    Returns ``(state, model, rules)``. With ``rounds == 0`` this is the
    embedding-only baseline.
    """
    em_cfg = em_cfg or EmConfig()
    train_cfg = train_cfg or emb.TrainConfig()
    if model is None:
        model = emb.init_model(g, score_kind, dim, gamma, train_cfg.seed)
        model = emb.train(model, g, g.observed_array, (), train_cfg)
    rules = initial_weights(rules, em_cfg)
    state = initial_state(model, g)
    for _ in range(em_cfg.rounds):
        state, model = e_step(state, model, rules, g, em_cfg, train_cfg)
        rules = m_step(state, model, rules, g, em_cfg)
        state.history.append(round_summary(state, rules, g))
    return state, model, rules


def round_summary(state: RefinementState, rules, g: KnowledgeGraph) -> dict:
    q = np.array(list(state.q.values())) if state.q else np.zeros(0)
    cond = getattr(state, "last_conditional", np.zeros(0))
    summary = {
        "round": state.round,
        "distilled_true": len(state.distilled_true),
        "distilled_false": len(state.distilled_false),
        "mean_q": float(q.mean()) if len(q) else 0.0,
        "kl_surrogate": float(np.mean(np.abs(state.q_array(g.candidate_array) - cond))) if len(cond) else 0.0,
    }
    if rules:
        x, y = pseudo_likelihood_terms(rules, g, state)
        summary["pseudo_log_likelihood"] = pseudo_log_likelihood([l.weight for l in rules], x, y)
    return summary


# -- final scoring --------------------------------------------------------------

def rule_probabilities(state: RefinementState, rules, g: KnowledgeGraph, triplets) -> np.ndarray:
    """P_rule for each row with observed plus distilled-true candidates as truth."""
    return conditional_probabilities(rules, g, _rows(triplets) if not isinstance(triplets, np.ndarray)
                                     else triplets, _rows(sorted(state.distilled_true)))


def final_scores(state: RefinementState, model, rules, g: KnowledgeGraph, triplets,
                 mode=ScoreMode.Q_ONLY, mix_lambda: float = 1.0) -> np.ndarray:
    """Q alone, or Q + lambda * P_rule."""
    mode = ScoreMode.parse(mode)
    tr = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    q = model.probabilities(tr)
    if mode is ScoreMode.Q_ONLY:
        return q
    return q + mix_lambda * rule_probabilities(state, rules, g, tr)


def final_score(state, model, rules, tau, mode=ScoreMode.Q_ONLY, mix_lambda: float = 1.0, g=None) -> float:
    if ScoreMode.parse(mode) is ScoreMode.Q_PLUS_LAMBDA_P and g is None:
        raise ValueError("the mixed score needs the graph")
    return float(final_scores(state, model, rules, g, [tuple(tau)], mode, mix_lambda)[0])


def decision_threshold(mode=ScoreMode.Q_ONLY, mix_lambda: float = 1.0) -> float:
    """Midpoint of the score range: 0.5, or (1 + lambda) / 2 for the mixed score."""
    return 0.5 if ScoreMode.parse(mode) is ScoreMode.Q_ONLY else (1.0 + mix_lambda) / 2.0


def config_dict(cfg) -> dict:
    return asdict(cfg)
