"""Rule patterns, mining, grounding counts and the signed logistic rule model.

Four fixed patterns are supported::

    transitive  r_i(x, y) & r_j(y, z) =>  r_k(x, z)     polarity +1
    symmetric   r(x, y)               =>  r(y, x)       polarity +1
    block       r_i(x, y) & r_j(y, z) => ~r_k(x, z)     polarity -1
    conflict    r_i(x, y)             => ~r_j(x, y)     polarity -1

The rule model scores a triplet ``tau`` as ``sigmoid(sum_l I_l * w_l * N(l, tau))``
where ``N`` counts true groundings whose head is ``tau``.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import KnowledgeGraph, Triplet, TripletIndex, Vocab

EXP_CLAMP = 30.0


class RuleError(ValueError):
    pass


class ContractError(RuleError):
    """A caller-supplied mapping is missing a required entry."""


class RuleKind(str, enum.Enum):
    TRANSITIVE = "transitive"
    SYMMETRIC = "symmetric"
    BLOCK = "block"
    CONFLICT = "conflict"

    @property
    def arity(self) -> int:
        return {"transitive": 3, "block": 3, "symmetric": 1, "conflict": 2}[self.value]

    @property
    def polarity(self) -> int:
        return 1 if self in (RuleKind.TRANSITIVE, RuleKind.SYMMETRIC) else -1

    @property
    def is_path(self) -> bool:
        return self in (RuleKind.TRANSITIVE, RuleKind.BLOCK)


KIND_ORDER = {k: i for i, k in enumerate(RuleKind)}


@dataclass(frozen=True, order=True)
class RulePattern:
    kind: RuleKind
    relations: tuple[int, ...]

    def __post_init__(self):
        kind = RuleKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "relations", tuple(int(r) for r in self.relations))
        if len(self.relations) != kind.arity:
            raise RuleError(f"{kind.value} rule needs {kind.arity} relation(s), got {self.relations}")
        if kind is RuleKind.CONFLICT and self.relations[0] == self.relations[1]:
            raise RuleError("conflict rule needs two distinct relations")

    @property
    def head_relation(self) -> int:
        """Relation of the triplet the rule supports or negates."""
        return self.relations[-1]


@dataclass
class RuleInstance:
    pattern: RulePattern
    weight: float = 0.0
    precision: float = 0.0
    support: int = 0

    @property
    def kind(self) -> RuleKind:
        return self.pattern.kind

    @property
    def polarity(self) -> int:
        return self.pattern.kind.polarity

    def sort_key(self):
        return KIND_ORDER[self.kind], self.pattern.relations


def sigmoid(x):
    """Logistic function with the exponent clamped to +-30."""
    return 1.0 / (np.exp(-np.clip(x, -EXP_CLAMP, EXP_CLAMP)) + 1.0)


# -- truth views -------------------------------------------------------------

def _truth_index(g: KnowledgeGraph, extra_true) -> TripletIndex:
    if isinstance(extra_true, TripletIndex):
        return extra_true
    idx = TripletIndex(g.observed_array)
    idx.update(extra_true or ())
    return idx


def truth_index(g: KnowledgeGraph, extra_true: Iterable = ()) -> TripletIndex:
    """Index over observed plus ``extra_true``; reuse it across many counting calls."""
    return _truth_index(g, list(extra_true))


class _WithOne:
    """Read-only view of an index plus one extra triplet."""

    def __init__(self, index, extra: Triplet):
        self.index, self.extra = index, extra

    def __contains__(self, a):
        return tuple(a) == self.extra or a in self.index

    def tails(self, head, relation):
        out = list(self.index.tails(head, relation))
        if (self.extra.head, self.extra.relation) == (head, relation):
            out.append(self.extra.tail)
        return out


def _head_groundings(pattern: RulePattern, tau, index: TripletIndex, assume=None):
    """Yield body-atom tuples of groundings with head ``tau`` whose atoms are all in ``index``.

    ``assume`` is one extra triplet treated as present.
    """
    h, r, t = tau
    kind, rels = pattern.kind, pattern.relations
    if assume is not None and assume not in index:
        index = _WithOne(index, Triplet(*assume))
    if kind.is_path:
        ri, rj, _ = rels
        for y in sorted(index.tails(h, ri)):
            if (y, rj, t) in index:
                yield (Triplet(h, ri, y), Triplet(y, rj, t))
    elif kind is RuleKind.SYMMETRIC:
        if (t, r, h) in index:
            yield (Triplet(t, r, h),)
    else:
        if (h, rels[0], t) in index:
            yield (Triplet(h, rels[0], t),)


def count_groundings(g: KnowledgeGraph, rule, tau, extra_true=()) -> int:
    """Number of true groundings of ``rule`` whose head is ``tau``.

    Body atoms are true when observed or in ``extra_true`` (a collection of
    triplets or a prebuilt :class:`TripletIndex` from :func:`truth_index`).
    """
    pattern = rule.pattern if isinstance(rule, RuleInstance) else rule
    tau = Triplet(*tau)
    if tau.relation != pattern.head_relation:
        raise RuleError(f"triplet relation {tau.relation} does not match rule head relation "
                        f"{pattern.head_relation}")
    index = _truth_index(g, extra_true)
    return sum(1 for _ in _head_groundings(pattern, tau, index))


def rule_score(rules: Sequence[RuleInstance], tau, g: KnowledgeGraph, extra_true=()) -> float:
    """f(tau) = sum over applicable rules of polarity * weight * groundings."""
    tau = Triplet(*tau)
    applicable = [l for l in rules if l.pattern.head_relation == tau.relation]
    if not applicable:
        return 0.0
    index = _truth_index(g, extra_true)
    total = 0.0
    for l in applicable:
        n = sum(1 for _ in _head_groundings(l.pattern, tau, index))
        total += l.polarity * l.weight * n
    return total


def rule_probability(rules, tau, g, extra_true=()) -> float:
    return float(sigmoid(rule_score(rules, tau, g, extra_true)))


@dataclass
class MarkovBlanket:
    target: Triplet
    blanket: frozenset = field(default_factory=frozenset)

    def __len__(self):
        return len(self.blanket)

    def __contains__(self, t):
        return tuple(t) in self.blanket


def markov_blanket(rules, tau, g: KnowledgeGraph) -> MarkovBlanket:
    """Triplets of observed+candidates that share a grounding with ``tau``.

    Covers groundings where ``tau`` is the head as well as groundings where it
    is a body atom; body atoms other than ``tau`` must be present for the
    grounding to exist, while a head atom joins the blanket only if present.
    """
    tau = Triplet(*tau)
    u = g.union_index()
    out = set()
    h, r, t = tau

    def add(*atoms):
        out.update(a for a in atoms if a in u)

    for l in rules:
        p = l.pattern if isinstance(l, RuleInstance) else l
        rels = p.relations
        if p.kind is RuleKind.SYMMETRIC:
            if r == rels[0]:
                add(Triplet(t, r, h))
        elif p.kind is RuleKind.CONFLICT:
            ri, rj = rels
            if r == rj:
                add(Triplet(h, ri, t))
            if r == ri:
                add(Triplet(h, rj, t))
        else:
            ri, rj, rk = rels
            if r == rk:
                for body in _head_groundings(p, tau, u, assume=tau):
                    add(*body)
            if r == ri:
                # tau = (x, r_i, y); need (y, r_j, z)
                for z in u.tails(t, rj):
                    add(Triplet(t, rj, z), Triplet(h, rk, z))
            if r == rj:
                # tau = (y, r_j, z); need (x, r_i, y)
                for x in u.heads(h, ri):
                    add(Triplet(x, ri, h), Triplet(x, rk, t))
    out.discard(tau)
    return MarkovBlanket(tau, frozenset(out))


def conditional_rule_probability(rules, tau, blanket_truth: Mapping, g: KnowledgeGraph) -> float:
    """P_rule(V_tau = 1 | blanket) with body atoms true only where ``blanket_truth`` says 1.

    ``blanket_truth`` must assign every blanket member that appears as a body
    atom of a grounding headed by ``tau``; a missing entry raises
    :class:`ContractError`.
    """
    tau = Triplet(*tau)
    u = g.union_index()
    f = 0.0
    for l in rules:
        if l.pattern.head_relation != tau.relation:
            continue
        n = 0
        for body in _head_groundings(l.pattern, tau, u):
            ok = True
            for atom in body:
                if atom == tau:
                    ok = ok and bool(blanket_truth.get(atom, tau in g.observed))
                    continue
                try:
                    v = blanket_truth[atom]
                except KeyError:
                    raise ContractError(f"no truth assignment for blanket member {tuple(atom)}") from None
                ok = ok and bool(v)
            n += ok
        f += l.polarity * l.weight * n
    return float(sigmoid(f))


# -- vectorised grounding counts ------------------------------------------------

def grounding_matrix(rules: Sequence[RuleInstance], triplets, adjacency: Sequence[sp.spmatrix]) -> sp.csr_matrix:
    """Sparse ``(n_triplets, n_rules)`` matrix of raw grounding counts.

    ``adjacency`` holds one 0/1 matrix per relation describing the truth set
    (see :meth:`KnowledgeGraph.adjacency`). Entry ``[i, l]`` equals
    ``count_groundings`` of rule ``l`` at ``triplets[i]`` (zero when the
    relation does not match).
    """
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    rows, cols, vals = [], [], []
    products = {}
    for j, l in enumerate(rules):
        p = l.pattern if isinstance(l, RuleInstance) else l
        sel = np.flatnonzero(triplets[:, 1] == p.head_relation)
        if not len(sel):
            continue
        hs, ts = triplets[sel, 0], triplets[sel, 2]
        if p.kind.is_path:
            key = p.relations[:2]
            if key not in products:
                products[key] = (adjacency[key[0]] @ adjacency[key[1]]).tocsr()
            n = np.asarray(products[key][hs, ts]).ravel()
        elif p.kind is RuleKind.SYMMETRIC:
            n = np.asarray(adjacency[p.relations[0]][ts, hs]).ravel()
        else:
            n = np.asarray(adjacency[p.relations[0]][hs, ts]).ravel()
        nz = n != 0
        rows.append(sel[nz])
        cols.append(np.full(nz.sum(), j))
        vals.append(n[nz])
    if rows:
        data = (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols)))
    else:
        data = (np.zeros(0), (np.zeros(0, dtype=int), np.zeros(0, dtype=int)))
    return sp.csr_matrix(data, shape=(len(triplets), len(rules)))


def signed_features(rules, triplets, adjacency) -> sp.csr_matrix:
    """Grounding counts multiplied column-wise by rule polarity."""
    counts = grounding_matrix(rules, triplets, adjacency)
    pol = np.array([l.polarity for l in rules], dtype=float)
    return (counts @ sp.diags(pol)).tocsr() if len(rules) else counts


def weights(rules) -> np.ndarray:
    return np.array([l.weight for l in rules], dtype=float)


def with_weights(rules, w) -> list[RuleInstance]:
    return [replace(l, weight=float(x)) for l, x in zip(rules, w)]


# -- mining --------------------------------------------------------------------

def _nnz(m) -> int:
    m = m.tocsr()
    m.eliminate_zeros()
    return int(m.nnz)


def mine_rules(g: KnowledgeGraph, beta: float = 0.3, min_support: int = 3,
               kinds: Iterable[RuleKind] = tuple(RuleKind)) -> list[RuleInstance]:
    """Enumerate the four patterns over the observed set and keep confident ones.

    Supporting rules (transitive, symmetric) are kept when the fraction of
    the triplets they generate that are observed is at least ``beta``.
    Negating rules (block, conflict) are kept only when none of the triplets
    they deny is observed. Support is the number of observed triplets a
    supporting rule generates, or the number of triplets a negating rule
    denies. All weights start at 0. Output is sorted by kind then relation ids.
    """
    kinds = {RuleKind(k) for k in kinds}
    adj = g.adjacency()
    R = g.relation_count
    present = [r for r in range(R) if adj[r].nnz]
    heads = {r: set(np.flatnonzero(adj[r].getnnz(axis=1))) for r in present}
    tails = {r: set(np.flatnonzero(adj[r].getnnz(axis=0))) for r in present}
    out: list[RuleInstance] = []

    def keep(kind, rels, precision, support):
        out.append(RuleInstance(RulePattern(kind, rels), 0.0, float(precision), int(support)))

    if RuleKind.SYMMETRIC in kinds:
        for r in present:
            a = adj[r]
            generated = a.nnz
            hit = _nnz(a.T.multiply(a))
            p = hit / generated
            if p >= beta and hit >= min_support:
                keep(RuleKind.SYMMETRIC, (r,), p, hit)

    if kinds & {RuleKind.TRANSITIVE, RuleKind.BLOCK}:
        for ri, rj in itertools.product(present, repeat=2):
            path = (adj[ri] @ adj[rj]).tocsr()
            path.eliminate_zeros()
            if not path.nnz:
                continue
            generated = path.nnz
            starts = set(np.flatnonzero(path.getnnz(axis=1)))
            ends = set(np.flatnonzero(path.getnnz(axis=0)))
            for rk in present:
                hit = _nnz(path.multiply(adj[rk]))
                if RuleKind.TRANSITIVE in kinds and hit:
                    p = hit / generated
                    if p >= beta and hit >= min_support:
                        keep(RuleKind.TRANSITIVE, (ri, rj, rk), p, hit)
                if (RuleKind.BLOCK in kinds and hit == 0 and generated >= min_support
                        and heads[rk] & starts and tails[rk] & ends):
                    keep(RuleKind.BLOCK, (ri, rj, rk), 1.0, generated)

    if RuleKind.CONFLICT in kinds:
        for ri, rj in itertools.permutations(present, 2):
            if not (heads[ri] & heads[rj] and tails[ri] & tails[rj]):
                continue
            denied = adj[ri].nnz
            if denied >= min_support and _nnz(adj[ri].multiply(adj[rj])) == 0:
                keep(RuleKind.CONFLICT, (ri, rj), 1.0, denied)

    out.sort(key=RuleInstance.sort_key)
    return out


def split_by_polarity(rules):
    sup = [l for l in rules if l.polarity > 0]
    neg = [l for l in rules if l.polarity < 0]
    return sup, neg


# -- rules file ----------------------------------------------------------------

def write_rules(path, rules: Sequence[RuleInstance], relations: Vocab):
    """One rule per line: kind, comma-joined relation names, polarity, weight, precision, support."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for l in rules:
            names = [relations.name(r) for r in l.pattern.relations]
            if any("," in n or "\t" in n for n in names):
                raise RuleError(f"relation name not representable in rules file: {names}")
            fh.write(f"{l.kind.value}\t{','.join(names)}\t{l.polarity:+d}\t{l.weight!r}\t"
                     f"{l.precision!r}\t{l.support}\n")


def read_rules(path, relations: Vocab) -> list[RuleInstance]:
    rules = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise RuleError(f"{path}:{lineno}: expected 6 fields")
            try:
                kind = RuleKind(parts[0])
                rels = tuple(relations.id(n) for n in parts[1].split(","))
                polarity, w, precision, support = int(parts[2]), float(parts[3]), float(parts[4]), int(parts[5])
            except KeyError as e:
                raise RuleError(f"{path}:{lineno}: unknown relation {e.args[0]!r}") from None
            except ValueError as e:
                raise RuleError(f"{path}:{lineno}: {e}") from None
            if polarity != kind.polarity:
                raise RuleError(f"{path}:{lineno}: polarity {parts[2]} inconsistent with {kind.value}")
            if not np.isfinite(w):
                raise RuleError(f"{path}:{lineno}: non-finite weight")
            rules.append(RuleInstance(RulePattern(kind, rels), w, precision, support))
    return rules
