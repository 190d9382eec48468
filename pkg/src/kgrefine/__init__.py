"""Knowledge graph refinement with embeddings and signed logic rules.

An embedding model (TransE, DistMult or ComplEx) and a logistic model over
rule groundings are trained in alternation: rule conditionals label the
candidate triplets the embedding is retrained on, and the embedding's
beliefs are the targets the rule weights are fitted to.  Rules either
support a triplet (transitive, symmetric) or argue against it (block,
conflict).
"""
from .em import EmConfig, RefinementState, ScoreMode, final_scores, run_refinement
from .embedding import EmbeddingModel, ScoreKind, TrainConfig, init_model, train
from .evaluation import EvalReport, EvalSplit, evaluate_mtp, evaluate_ptd, generate_poisons
from .graph import KnowledgeGraph, Triplet, Vocab, load_graph
from .rules import RuleInstance, RuleKind, RulePattern, count_groundings, mine_rules
from .synth import SynthSpec, default_acceptance_spec, generate, ptd_split

__version__ = "0.1.0"
