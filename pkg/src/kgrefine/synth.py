"""Synthetic knowledge graphs with planted rule structure and labelled noise.

Entities carry a latent type and a latent community. A relation links one
type to another and only ever connects entities of the same community, so
an embedding model can learn which pairs are plausible in general. The
planted negating rules then forbid specific pairs inside otherwise
plausible blocks, which only the rules can see.

Relations that take part in planted rules get their roles first; the
remaining relations are filled with random in-community edges. Noise is a
set of non-existent triplets: a share of it is drawn from the triplets the
planted negating rules deny, the rest uniformly at random.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import KnowledgeGraph, Triplet, Vocab, write_triple_file
from .rules import RuleInstance, RuleKind, RulePattern, write_rules


class GenerationError(ValueError):
    def __init__(self, constraint: str, message: str):
        self.constraint = constraint
        super().__init__(f"{constraint}: {message}")


@dataclass(frozen=True)
class PlantedRule:
    pattern: RulePattern
    rate: float = 1.0


@dataclass
class SynthSpec:
    entity_count: int = 1000
    relation_count: int = 20
    planted_rules: list = field(default_factory=list)
    base_density: float = 1.0
    noise_rate: float = 0.1
    seed: int = 0
    type_count: int = 5
    community_size: int = 20
    violation_share: float = 0.7

    def validate(self):
        if self.entity_count < 2 or self.relation_count < 1 or self.type_count < 1:
            raise GenerationError("counts", "entity_count >= 2, relation_count >= 1, type_count >= 1 required")
        if self.type_count * self.community_size > self.entity_count:
            raise GenerationError("counts", "type_count * community_size exceeds entity_count")
        if self.community_size < 1:
            raise GenerationError("community_size", "must be positive")
        if not 0 <= self.noise_rate < 1:
            raise GenerationError("noise_rate", "must lie in [0, 1)")
        if not 0 <= self.violation_share <= 1:
            raise GenerationError("violation_share", "must lie in [0, 1]")
        if self.base_density <= 0:
            raise GenerationError("base_density", "must be positive")
        used = set()
        for pr in self.planted_rules:
            p = pr.pattern
            if not 0 < pr.rate <= 1:
                raise GenerationError(_name(p), "rate must lie in (0, 1]")
            if p.kind.polarity < 0 and pr.rate != 1:
                raise GenerationError(_name(p), "negating rules must be planted at rate 1")
            rels = set(p.relations)
            if len(rels) != len(p.relations) or any(not 0 <= r < self.relation_count for r in rels):
                raise GenerationError(_name(p), "relations must be distinct and in range")
            if rels & used:
                raise GenerationError(_name(p), "relation already used by another planted rule")
            used |= rels


def _name(p: RulePattern) -> str:
    return f"{p.kind.value}({','.join(f'r{r}' for r in p.relations)})"


def default_acceptance_spec(seed: int = 20200731) -> SynthSpec:
    """1,000 entities, 20 relations, two planted rules of each kind, 10% noise."""
    K = RuleKind
    planted = [
        PlantedRule(RulePattern(K.SYMMETRIC, (0,)), 0.9),
        PlantedRule(RulePattern(K.SYMMETRIC, (1,)), 0.9),
        PlantedRule(RulePattern(K.TRANSITIVE, (2, 3, 4)), 0.9),
        PlantedRule(RulePattern(K.TRANSITIVE, (5, 6, 7)), 0.9),
        PlantedRule(RulePattern(K.BLOCK, (8, 9, 10))),
        PlantedRule(RulePattern(K.BLOCK, (11, 12, 13))),
        PlantedRule(RulePattern(K.CONFLICT, (14, 15))),
        PlantedRule(RulePattern(K.CONFLICT, (16, 17))),
    ]
    return SynthSpec(entity_count=1000, relation_count=20, planted_rules=planted,
                     base_density=4.0, noise_rate=0.10, seed=seed, type_count=5,
                     community_size=20, violation_share=0.7)


def small_spec(seed: int = 7) -> SynthSpec:
    """A few hundred triplets; enough for quick pipeline runs."""
    K = RuleKind
    planted = [
        PlantedRule(RulePattern(K.SYMMETRIC, (0,)), 1.0),
        PlantedRule(RulePattern(K.TRANSITIVE, (1, 2, 3)), 1.0),
        PlantedRule(RulePattern(K.BLOCK, (4, 5, 6))),
        PlantedRule(RulePattern(K.CONFLICT, (7, 8))),
    ]
    return SynthSpec(entity_count=60, relation_count=10, planted_rules=planted,
                     base_density=2.0, noise_rate=0.1, seed=seed, type_count=3, community_size=10)


@dataclass
class SynthGraph:
    graph: KnowledgeGraph
    labels: dict
    planted: list
    entity_types: np.ndarray
    communities: np.ndarray
    signatures: dict


def _sample_pairs(rng, dom, cod, community, n, exclude=frozenset(), no_loops=False, what=""):
    """``n`` distinct same-community pairs (x in ``dom``, y in ``cod``) avoiding ``exclude``."""
    by_comm = {}
    for y in cod:
        by_comm.setdefault(int(community[y]), []).append(int(y))
    admissible = sum(len(by_comm.get(int(community[x]), ())) for x in dom)
    if no_loops:
        admissible -= len(set(dom.tolist()) & set(cod.tolist()))
    admissible -= sum(1 for x, y in exclude if community[x] == community[y])
    if n > admissible:
        raise GenerationError(what, f"needs {n} edges but only {max(admissible, 0)} admissible pairs")
    out = set()
    while len(out) < n:
        m = 2 * (n - len(out)) + 8
        xs = rng.choice(dom, size=m)
        us = rng.random(m)
        for x, u in zip(xs.tolist(), us.tolist()):
            pool = by_comm.get(int(community[x]))
            if not pool:
                continue
            y = pool[int(u * len(pool))]
            if (no_loops and x == y) or (x, y) in exclude or (x, y) in out:
                continue
            out.add((x, y))
            if len(out) == n:
                break
    return sorted(out)


def _paths(first, second):
    """Distinct (x, z) with x-first->y-second->z."""
    by_head = {}
    for y, z in second:
        by_head.setdefault(y, []).append(z)
    return {(x, z) for x, y in first for z in by_head.get(y, ())}


def generate(spec: SynthSpec) -> SynthGraph:
    """Build the graph, exact labels for every triplet, and the planted rules.

    The returned graph holds every generated triplet (true and noise) as
    observed; :func:`ptd_split` turns it into a refinement problem.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    E, R, K = spec.entity_count, spec.relation_count, spec.type_count
    types = rng.permutation(np.arange(E) % K)
    members = [np.flatnonzero(types == k) for k in range(K)]
    communities = np.zeros(E, dtype=np.int64)
    for m in members:
        communities[m] = np.arange(len(m)) // spec.community_size

    def pick():
        return int(rng.integers(K))

    # relation roles first
    sig: dict[int, tuple[int, int]] = {}
    for pr in spec.planted_rules:
        p = pr.pattern
        if p.kind is RuleKind.SYMMETRIC:
            a = pick()
            sig[p.relations[0]] = (a, a)
        elif p.kind.is_path:
            a, b, c = pick(), pick(), pick()
            ri, rj, rk = p.relations
            sig[ri], sig[rj], sig[rk] = (a, b), (b, c), (a, c)
        else:
            a, b = pick(), pick()
            sig[p.relations[0]] = sig[p.relations[1]] = (a, b)
    for r in range(R):
        if r not in sig:
            sig[r] = (pick(), pick())

    def n_edges(r):
        return max(1, int(round(spec.base_density * len(members[sig[r][0]]))))

    edges: dict[int, set] = {}

    def base(r, what, exclude=frozenset(), no_loops=False):
        a, b = sig[r]
        return set(_sample_pairs(rng, members[a], members[b], communities, n_edges(r), exclude, no_loops, what))

    planted_rels = set()
    for pr in spec.planted_rules:
        p = pr.pattern
        name = _name(p)
        planted_rels |= set(p.relations)
        if p.kind is RuleKind.SYMMETRIC:
            r = p.relations[0]
            pairs = base(r, name, no_loops=True)
            closed = set(pairs)
            for x, y in sorted(pairs):
                if (y, x) not in pairs and rng.random() < pr.rate:
                    closed.add((y, x))
            edges[r] = closed
        elif p.kind is RuleKind.TRANSITIVE:
            ri, rj, rk = p.relations
            edges[ri] = base(ri, name)
            edges[rj] = base(rj, name)
            path = sorted(_paths(edges[ri], edges[rj]))
            keep = rng.random(len(path)) < pr.rate
            edges[rk] = {pz for pz, k in zip(path, keep) if k}
            if len(edges[rk]) < 1:
                raise GenerationError(name, "no path to close; raise base_density")
        elif p.kind is RuleKind.BLOCK:
            ri, rj, rk = p.relations
            edges[ri] = base(ri, name)
            edges[rj] = base(rj, name)
            edges[rk] = base(rk, name, exclude=_paths(edges[ri], edges[rj]))
        else:
            ri, rj = p.relations
            edges[ri] = base(ri, name)
            edges[rj] = base(rj, name, exclude=frozenset(edges[ri]))
    for r in range(R):
        if r not in edges:
            edges[r] = base(r, f"filler(r{r})")

    true = sorted(Triplet(x, r, y) for r in range(R) for x, y in edges[r])
    true_set = set(true)

    # noise
    n_noise = int(round(spec.noise_rate * len(true)))
    pool = set()
    for pr in spec.planted_rules:
        p = pr.pattern
        if p.kind is RuleKind.BLOCK:
            ri, rj, rk = p.relations
            pool |= {Triplet(x, rk, z) for x, z in _paths(edges[ri], edges[rj])}
        elif p.kind is RuleKind.CONFLICT:
            ri, rj = p.relations
            pool |= {Triplet(x, rj, y) for x, y in edges[ri]}
    pool = sorted(pool - true_set)
    n_hard = min(len(pool), int(round(spec.violation_share * n_noise)))
    noise = set()
    if n_hard:
        noise |= {pool[i] for i in rng.choice(len(pool), size=n_hard, replace=False)}
    attempts = 0
    while len(noise) < n_noise:
        attempts += 1
        if attempts > 100 * max(n_noise, 1):
            raise GenerationError("noise", "graph too dense to inject the requested noise")
        t = Triplet(int(rng.integers(E)), int(rng.integers(R)), int(rng.integers(E)))
        if t not in true_set:
            noise.add(t)
    noise = sorted(noise)

    labels = {t: 1 for t in true}
    labels.update({t: 0 for t in noise})
    ents = Vocab(f"e{i}" for i in range(E))
    rels = Vocab(f"r{r}" for r in range(R))
    graph = KnowledgeGraph(ents, rels, true + noise)
    planted = [RuleInstance(pr.pattern, 0.0, float(pr.rate), 0) for pr in spec.planted_rules]
    return SynthGraph(graph, labels, planted, types, communities, sig)


@dataclass
class PTDProblem:
    """Refinement graph plus the labelled candidate split."""
    graph: KnowledgeGraph
    positives: list
    negatives: list


def ptd_split(sg: SynthGraph, holdout: int | None = None, seed: int = 0) -> PTDProblem:
    """Observed = true triplets minus a held-out sample; candidates = held-out + noise.

    ``holdout`` defaults to the number of noise triplets (a balanced split).
    """
    true = [t for t, v in sg.labels.items() if v == 1]
    noise = sorted(t for t, v in sg.labels.items() if v == 0)
    true.sort()
    n = len(noise) if holdout is None else holdout
    if n > len(true) - 1:
        raise GenerationError("holdout", "would leave the observed set empty")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(true), size=n, replace=False))
    held = [true[i] for i in pick]
    held_set = set(held)
    observed = [t for t in true if t not in held_set]
    g = KnowledgeGraph(sg.graph.entities, sg.graph.relations, observed, held + noise)
    return PTDProblem(g, held, noise)


def write_synth(outdir, sg: SynthGraph, problem: PTDProblem | None = None):
    """graph.tsv, labels.tsv, planted_rules.tsv, plus the split files when a split is given.

    The split files are observed.tsv, candidates.tsv and the evaluation
    halves positives.tsv (held-out true) and negatives.tsv (noise).
    """
    from pathlib import Path

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    g = sg.graph
    write_triple_file(out / "graph.tsv", (g.to_names(t) for t in g.observed_array))
    with open(out / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for t in sorted(sg.labels):
            fh.write("\t".join(g.to_names(t)) + f"\t{sg.labels[t]}\n")
    write_rules(out / "planted_rules.tsv", sg.planted, g.relations)
    if problem is not None:
        write_triple_file(out / "observed.tsv", (g.to_names(t) for t in problem.graph.observed_array))
        write_triple_file(out / "candidates.tsv", (g.to_names(t) for t in problem.graph.candidate_array))
        write_triple_file(out / "positives.tsv", (g.to_names(t) for t in problem.positives))
        write_triple_file(out / "negatives.tsv", (g.to_names(t) for t in problem.negatives))
