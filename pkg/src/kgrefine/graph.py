"""In-memory triple store with dense integer IDs.

A :class:`KnowledgeGraph` holds an observed (trusted) triplet set and a
disjoint candidate (uncertain) set over shared entity/relation
vocabularies.  Only observed triplets are indexed; candidate lookups go
through :meth:`KnowledgeGraph.contains`.
"""
from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class GraphError(ValueError):
    """Base class for graph construction and query errors."""


class ParseError(GraphError):
    def __init__(self, path, lineno, line, expected: int = 3):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: expected {expected} tab-separated fields, got {line!r}")


class ValidationError(GraphError):
    pass


class Triplet(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocab:
    """Bijective string <-> dense id map; first occurrence wins."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._ids[name] = idx
            self._names.append(name)
        return idx

    def id(self, name: str) -> int:
        return self._ids[name]

    def name(self, idx: int) -> str:
        return self._names[idx]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def __len__(self):
        return len(self._names)

    def __contains__(self, name):
        return name in self._ids

    def __eq__(self, other):
        return isinstance(other, Vocab) and self._names == other._names


def _unique(triplets: Iterable[Sequence[int]]) -> list[Triplet]:
    # dict keeps first-seen order
    return list(dict.fromkeys(Triplet(int(h), int(r), int(t)) for h, r, t in triplets))


class KnowledgeGraph:
    """Observed set T and candidate set M over shared vocabularies.

    Parameters
    ----------
    entities, relations : Vocab
        Name maps. Every id used by a triplet must be in range.
    observed : iterable of (head, relation, tail)
        Trusted triplets. Must be non-empty.
    candidates : iterable of (head, relation, tail), optional
        Uncertain triplets. Anything also present in ``observed`` is dropped
        and counted in :attr:`overlap_count`.
    """

    def __init__(self, entities: Vocab, relations: Vocab, observed, candidates=()):
        self.entities = entities
        self.relations = relations
        obs = _unique(observed)
        if not obs:
            raise ValidationError("observed triplet set is empty")
        self._observed = frozenset(obs)
        cand = _unique(candidates)
        kept = [t for t in cand if t not in self._observed]
        self.overlap_count = len(cand) - len(kept)
        if self.overlap_count:
            warnings.warn(f"{self.overlap_count} candidate triplet(s) also observed; kept as observed",
                          stacklevel=2)
        self._candidates = frozenset(kept)
        for t in obs + kept:
            self._check(t)
        self.observed_array = np.array(obs, dtype=np.int64).reshape(-1, 3)
        self.candidate_array = np.array(kept, dtype=np.int64).reshape(-1, 3)

        index_ho = defaultdict(list)
        index_to = defaultdict(list)
        index_pair = defaultdict(list)
        for h, r, t in obs:
            index_ho[h, r].append(t)
            index_to[t, r].append(h)
            index_pair[h, t].append(r)
        for d in (index_ho, index_to, index_pair):
            for v in d.values():
                v.sort()
        self.index_ho = dict(index_ho)
        self.index_to = dict(index_to)
        self.index_pair = dict(index_pair)
        self._adjacency = None
        self._union_index = None

    # -- basic properties -------------------------------------------------
    @property
    def entity_count(self) -> int:
        return len(self.entities)

    @property
    def relation_count(self) -> int:
        return len(self.relations)

    @property
    def observed(self) -> frozenset:
        return self._observed

    @property
    def candidates(self) -> frozenset:
        return self._candidates

    def _check(self, t):
        h, r, tl = t
        if not (0 <= h < self.entity_count and 0 <= tl < self.entity_count):
            raise GraphError(f"entity id out of range in {tuple(t)}")
        if not 0 <= r < self.relation_count:
            raise GraphError(f"relation id out of range in {tuple(t)}")

    # -- queries ------------------------------------------------------------
    def neighbors_out(self, head: int, relation: int) -> list[int]:
        """Tails ``t`` with ``(head, relation, t)`` observed, ascending."""
        self._check((head, relation, 0))
        return list(self.index_ho.get((head, relation), ()))

    def neighbors_in(self, tail: int, relation: int) -> list[int]:
        """Heads ``h`` with ``(h, relation, tail)`` observed, ascending."""
        self._check((0, relation, tail))
        return list(self.index_to.get((tail, relation), ()))

    def relations_between(self, head: int, tail: int) -> list[int]:
        self._check((head, 0, tail))
        return list(self.index_pair.get((head, tail), ()))

    def contains(self, t, scope: str = "observed") -> bool:
        t = Triplet(*t)
        self._check(t)
        if scope == "observed":
            return t in self._observed
        if scope == "candidates":
            return t in self._candidates
        if scope == "either":
            return t in self._observed or t in self._candidates
        raise ValueError(f"unknown scope {scope!r}")

    def adjacency(self, extra: Iterable = ()) -> list[sp.csr_matrix]:
        """Per-relation boolean adjacency (entity x entity) over observed plus ``extra``.

        The observed-only matrices are cached.
        """
        extra = list(extra)
        if not extra and self._adjacency is not None:
            return self._adjacency
        mats = adjacency_matrices(self.observed_array if not extra else
                                  np.vstack([self.observed_array, np.asarray(extra, dtype=np.int64).reshape(-1, 3)]),
                                  self.entity_count, self.relation_count)
        if not extra:
            self._adjacency = mats
        return mats

    def union_index(self) -> "TripletIndex":
        """Index over observed plus candidates (cached)."""
        if self._union_index is None:
            self._union_index = TripletIndex(np.vstack([self.observed_array, self.candidate_array]))
        return self._union_index

    # -- names ---------------------------------------------------------------
    def to_names(self, t) -> tuple[str, str, str]:
        h, r, tl = t
        return self.entities.name(h), self.relations.name(r), self.entities.name(tl)

    def from_names(self, h: str, r: str, t: str) -> Triplet:
        return Triplet(self.entities.id(h), self.relations.id(r), self.entities.id(t))

    def with_candidates(self, candidates) -> "KnowledgeGraph":
        """Same vocabularies and observed set, new candidate set."""
        return KnowledgeGraph(self.entities, self.relations, self.observed_array, candidates)

    def __repr__(self):
        return (f"KnowledgeGraph(entities={self.entity_count}, relations={self.relation_count}, "
                f"observed={len(self._observed)}, candidates={len(self._candidates)})")


class TripletIndex:
    """Membership set plus (head, relation) and (tail, relation) lookups."""

    def __init__(self, triplets=()):
        self.members = set()
        self.out = defaultdict(list)
        self.into = defaultdict(list)
        self.update(triplets)

    def update(self, triplets):
        for h, r, t in triplets:
            key = Triplet(int(h), int(r), int(t))
            if key in self.members:
                continue
            self.members.add(key)
            self.out[key.head, key.relation].append(key.tail)
            self.into[key.tail, key.relation].append(key.head)

    def __contains__(self, t):
        return tuple(t) in self.members

    def __len__(self):
        return len(self.members)

    def tails(self, head, relation):
        return self.out.get((head, relation), ())

    def heads(self, tail, relation):
        return self.into.get((tail, relation), ())


def adjacency_matrices(triplets: np.ndarray, n_entities: int, n_relations: int) -> list[sp.csr_matrix]:
    """Boolean-valued (0/1 float) CSR matrix per relation; duplicate rows collapse."""
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    mats = []
    for r in range(n_relations):
        sel = triplets[triplets[:, 1] == r]
        m = sp.csr_matrix((np.ones(len(sel)), (sel[:, 0], sel[:, 2])), shape=(n_entities, n_entities))
        m.sum_duplicates()
        m.data[:] = 1.0
        mats.append(m)
    return mats


# -- file io ---------------------------------------------------------------

def read_triple_file(path) -> list[tuple[str, str, str]]:
    """Read ``head<TAB>relation<TAB>tail`` lines; ``#`` lines and blank lines are skipped."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, line)
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def build_graph(observed_rows, candidate_rows=(), entities: Vocab | None = None,
                relations: Vocab | None = None) -> KnowledgeGraph:
    """Intern string triplets (observed first, then candidates) into a graph."""
    ents = entities if entities is not None else Vocab()
    rels = relations if relations is not None else Vocab()

    def intern(rows):
        return [(ents.add(h), rels.add(r), ents.add(t)) for h, r, t in rows]

    obs = intern(observed_rows)
    cand = intern(candidate_rows)
    return KnowledgeGraph(ents, rels, obs, cand)


def load_graph(observed_path, candidates_path=None) -> KnowledgeGraph:
    """Load a graph from triple files.

    IDs are assigned in order of first appearance, observed file first.
    Duplicate lines collapse; a triplet present in both files stays observed.
    """
    obs = read_triple_file(observed_path)
    if not obs:
        raise ValidationError(f"{observed_path}: no triplets")
    cand = read_triple_file(candidates_path) if candidates_path is not None else []
    return build_graph(obs, cand)


def write_triple_file(path, rows: Iterable[tuple[str, str, str]]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in rows:
            fh.write(f"{h}\t{r}\t{t}\n")


def save_graph(g: KnowledgeGraph, observed_path, candidates_path=None):
    """Write observed (and candidates) in load order, so reloading reproduces the ids."""
    write_triple_file(observed_path, (g.to_names(t) for t in g.observed_array))
    if candidates_path is not None:
        write_triple_file(candidates_path, (g.to_names(t) for t in g.candidate_array))


def write_id_map(path, vocab: Vocab):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, name in enumerate(vocab.names):
            fh.write(f"{i}\t{name}\n")


def read_id_map(path) -> Vocab:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            idx, _, name = line.partition("\t")
            pairs.append((int(idx), name))
    pairs.sort()
    if [i for i, _ in pairs] != list(range(len(pairs))):
        raise ValidationError(f"{path}: ids are not contiguous from 0")
    return Vocab(n for _, n in pairs)
