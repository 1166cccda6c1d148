"""Heterogeneous knowledge graph: KG entities plus user and keyword nodes.

The graph stores three families of triples: KG facts between entities,
user-item interactions and entity-word co-occurrence links.  Every triple is
indexed from both endpoints so message passing and subgraph expansion can
walk edges in either direction; the original direction survives in
``HKG.triples``.

Node ids are namespaced by kind (``u/``, ``e/``, ``w/``) so that a user called
``42`` and an entity called ``42`` never collide.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .errors import InputFileError, KindViolation, SelfLoop, UnalignedItem, UnknownNode

FORMAT_VERSION = 1
DEFAULT_NODE_CAP = 512


class NodeKind(str, Enum):
    USER = "user"
    ITEM = "item_entity"
    ENTITY = "entity"
    WORD = "word"


class RelationKind(str, Enum):
    KG = "kg"
    INTERACTION = "interaction"
    COOCCURRENCE = "cooccurrence"


ENTITY_KINDS = frozenset({NodeKind.ENTITY, NodeKind.ITEM})
COPYABLE_KINDS = frozenset({NodeKind.ENTITY, NodeKind.WORD})


@dataclass(frozen=True, order=True)
class NodeRef:
    id: str
    kind: NodeKind = field(compare=False)

    def __repr__(self):
        return f"NodeRef({self.id!r}, {self.kind.value})"


@dataclass(frozen=True, order=True)
class RelationRef:
    id: str
    kind: RelationKind = field(compare=False)


INTERACTION = RelationRef("interact", RelationKind.INTERACTION)
COOCCURRENCE = RelationRef("cooccur", RelationKind.COOCCURRENCE)


def user_id(raw: str) -> str:
    return f"u/{raw}"


def entity_id(raw: str) -> str:
    return f"e/{raw}"


def word_id(raw: str) -> str:
    return f"w/{raw}"


def kg_relation(name: str) -> RelationRef:
    return RelationRef(f"kg/{name}", RelationKind.KG)


def raw_id(node_id: str) -> str:
    return node_id.split("/", 1)[1]


@dataclass(frozen=True)
class Triple:
    head: NodeRef
    relation: RelationRef
    tail: NodeRef

    def key(self):
        return (self.head.id, self.relation.id, self.tail.id)


def _check_kinds(t: Triple):
    kinds = {t.head.kind, t.tail.kind}
    if t.relation.kind is RelationKind.KG:
        ok = kinds <= ENTITY_KINDS
    elif t.relation.kind is RelationKind.INTERACTION:
        ok = {t.head.kind, t.tail.kind} == {NodeKind.USER, NodeKind.ITEM}
    else:
        ok = len(kinds & ENTITY_KINDS) == 1 and NodeKind.WORD in kinds
    if not ok:
        raise KindViolation(
            f"{t.relation.kind.value} triple cannot connect "
            f"{t.head.kind.value} {t.head.id!r} and {t.tail.kind.value} {t.tail.id!r}"
        )
    if t.head.id == t.tail.id:
        raise SelfLoop(f"self-loop on {t.head.id!r} under {t.relation.id!r}")


class HKG:
    """Immutable typed multigraph.  Build it with :func:`build_hkg`."""

    def __init__(self, nodes, relations, triples, alignment, surfaces):
        self._nodes = MappingProxyType({n.id: n for n in sorted(nodes)})
        self._relations = MappingProxyType({r.id: r for r in sorted(relations)})
        self.triples: tuple[Triple, ...] = tuple(sorted(triples, key=Triple.key))
        self.alignment = MappingProxyType(dict(sorted(alignment.items())))
        self._surfaces = MappingProxyType(dict(sorted(surfaces.items())))

        adj = defaultdict(set)
        for t in self.triples:
            adj[(t.head.id, t.relation.id)].add(t.tail.id)
            adj[(t.tail.id, t.relation.id)].add(t.head.id)
        self._adj = MappingProxyType({k: tuple(sorted(v)) for k, v in sorted(adj.items())})

        rels_of = defaultdict(list)
        for node, rel in self._adj:
            rels_of[node].append(rel)
        self._rels_of = MappingProxyType({k: tuple(v) for k, v in rels_of.items()})

        by_surface = defaultdict(list)
        for nid, surface in self._surfaces.items():
            if self._nodes[nid].kind is not NodeKind.USER:
                by_surface[surface].append(nid)
        self._by_surface = MappingProxyType({k: tuple(sorted(v)) for k, v in by_surface.items()})

    # -- lookup -----------------------------------------------------------
    @property
    def nodes(self) -> Mapping[str, NodeRef]:
        return self._nodes

    @property
    def relations(self) -> Mapping[str, RelationRef]:
        return self._relations

    def __contains__(self, node_id) -> bool:
        return _as_id(node_id) in self._nodes

    def node(self, node_id) -> NodeRef:
        try:
            return self._nodes[_as_id(node_id)]
        except KeyError:
            raise UnknownNode(f"no node {node_id!r} in graph") from None

    def surface(self, node_id) -> str:
        return self._surfaces[_as_id(node_id)]

    def nodes_for_token(self, token: str) -> tuple[str, ...]:
        return self._by_surface.get(token, ())

    def neighbors(self, node_id, relation=None) -> tuple[str, ...]:
        nid = _as_id(node_id)
        if relation is not None:
            rid = relation.id if isinstance(relation, RelationRef) else relation
            return self._adj.get((nid, rid), ())
        out = set()
        for rid in self._rels_of.get(nid, ()):
            out.update(self._adj[(nid, rid)])
        return tuple(sorted(out))

    def relations_of(self, node_id) -> tuple[str, ...]:
        return self._rels_of.get(_as_id(node_id), ())

    def item_node(self, item: str) -> NodeRef:
        try:
            return self._nodes[self.alignment[item]]
        except KeyError:
            raise UnalignedItem(f"item {item!r} has no aligned entity") from None

    def nodes_of_kind(self, kind: NodeKind) -> list[NodeRef]:
        return [n for n in self._nodes.values() if n.kind is kind]

    def stats(self) -> dict:
        nodes = Counter(n.kind.value for n in self._nodes.values())
        edges = Counter(t.relation.kind.value for t in self.triples)
        return {
            "nodes": len(self._nodes),
            "relations": len(self._relations),
            "edges": len(self.triples),
            "nodes_by_kind": dict(sorted(nodes.items())),
            "edges_by_kind": dict(sorted(edges.items())),
        }

    def __eq__(self, other):
        if not isinstance(other, HKG):
            return NotImplemented
        return self.to_json() == other.to_json()

    def __hash__(self):
        return hash(self.digest())

    # -- persistence ------------------------------------------------------
    def to_json(self) -> str:
        payload = {
            "manifest": {
                "format_version": FORMAT_VERSION,
                "node_count": len(self._nodes),
                "relation_count": len(self._relations),
                "edge_count": len(self.triples),
            },
            "nodes": [[n.id, n.kind.value, self._surfaces[n.id]] for n in self._nodes.values()],
            "relations": [[r.id, r.kind.value] for r in self._relations.values()],
            "edges": [list(t.key()) for t in self.triples],
            "alignment": [[k, v] for k, v in self.alignment.items()],
        }
        return json.dumps(payload, ensure_ascii=False, separators=(",", ":")) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "HKG":
        payload = json.loads(text)
        manifest = payload["manifest"]
        if manifest["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported HKG format version {manifest['format_version']}")
        nodes = {nid: NodeRef(nid, NodeKind(kind)) for nid, kind, _ in payload["nodes"]}
        surfaces = {nid: surface for nid, _, surface in payload["nodes"]}
        relations = {rid: RelationRef(rid, RelationKind(kind)) for rid, kind in payload["relations"]}
        triples = [Triple(nodes[h], relations[r], nodes[t]) for h, r, t in payload["edges"]]
        g = cls(nodes.values(), relations.values(), triples, dict(payload["alignment"]), surfaces)
        if len(g.nodes) != manifest["node_count"] or len(g.triples) != manifest["edge_count"]:
            raise ValueError("HKG manifest counts do not match tables")
        return g

    @classmethod
    def load(cls, path) -> "HKG":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _as_id(node) -> str:
    return node.id if isinstance(node, NodeRef) else node


def build_hkg(
    kg_triples: Iterable,
    interactions: Iterable[Sequence[str]],
    cooccurrence_links: Iterable[Sequence[str]],
    alignment: Mapping[str, str],
    entity_names: Mapping[str, str] | None = None,
) -> HKG:
    """Assemble the HKG from raw inputs.

    ``kg_triples`` holds ``(head_entity, relation, tail_entity)`` tuples of raw
    ids or prebuilt :class:`Triple` objects.  ``interactions`` holds
    ``(user, item)`` pairs (extra columns are ignored) and ``alignment`` maps
    item ids to entity ids.  ``entity_names`` optionally gives the surface
    token used when matching entities against text; defaults to the raw id.
    """
    entity_names = entity_names or {}
    item_entities = {entity_id(e) for e in alignment.values()}

    def entity(raw):
        eid = entity_id(raw)
        kind = NodeKind.ITEM if eid in item_entities else NodeKind.ENTITY
        return NodeRef(eid, kind)

    triples: dict[tuple, Triple] = {}
    surfaces: dict[str, str] = {}

    def add(t: Triple):
        _check_kinds(t)
        triples.setdefault(t.key(), t)
        for n in (t.head, t.tail):
            if n.kind is NodeKind.WORD or n.kind is NodeKind.USER:
                surfaces[n.id] = raw_id(n.id)
            else:
                raw = raw_id(n.id)
                surfaces[n.id] = entity_names.get(raw, raw)

    for t in kg_triples:
        if not isinstance(t, Triple):
            h, r, tail = t
            t = Triple(entity(h), kg_relation(r), entity(tail))
        add(t)

    for row in interactions:
        user, item = row[0], row[1]
        if item not in alignment:
            raise UnalignedItem(f"item {item!r} has no aligned entity")
        add(Triple(NodeRef(user_id(user), NodeKind.USER), INTERACTION, entity(alignment[item])))

    for ent, word in cooccurrence_links:
        add(Triple(entity(ent), COOCCURRENCE, NodeRef(word_id(word), NodeKind.WORD)))

    nodes = {}
    relations = {INTERACTION.id: INTERACTION, COOCCURRENCE.id: COOCCURRENCE}
    for t in triples.values():
        nodes[t.head.id] = t.head
        nodes[t.tail.id] = t.tail
        relations[t.relation.id] = t.relation
    # aligned items with no edges still exist as nodes
    for e in sorted(item_entities):
        if e not in nodes:
            nodes[e] = NodeRef(e, NodeKind.ITEM)
            raw = raw_id(e)
            surfaces[e] = entity_names.get(raw, raw)
    align = {item: entity_id(e) for item, e in alignment.items()}
    return HKG(nodes.values(), relations.values(), triples.values(), align, surfaces)


def restrict(g: HKG, keep_kinds: Iterable[NodeKind], keep_relation_kinds: Iterable[RelationKind]) -> HKG:
    """Subgraph of ``g`` keeping only the given node and relation kinds."""
    keep_kinds = set(keep_kinds)
    keep_rel = set(keep_relation_kinds)
    nodes = [n for n in g.nodes.values() if n.kind in keep_kinds]
    ids = {n.id for n in nodes}
    triples = [
        t for t in g.triples
        if t.relation.kind in keep_rel and t.head.id in ids and t.tail.id in ids
    ]
    relations = {INTERACTION.id: INTERACTION, COOCCURRENCE.id: COOCCURRENCE}
    for t in triples:
        relations[t.relation.id] = t.relation
    surfaces = {n.id: g.surface(n.id) for n in nodes}
    align = {k: v for k, v in g.alignment.items() if v in ids}
    return HKG(nodes, relations.values(), triples, align, surfaces)


def without_kg(g: HKG) -> HKG:
    """Drop non-item KG entities and every KG triple; users, items and words stay."""
    return restrict(
        g,
        [NodeKind.USER, NodeKind.ITEM, NodeKind.WORD],
        [RelationKind.INTERACTION, RelationKind.COOCCURRENCE],
    )


def without_users_and_words(g: HKG) -> HKG:
    """Keep only the KG entities (items included) and their KG triples."""
    return restrict(g, [NodeKind.ITEM, NodeKind.ENTITY], [RelationKind.KG])


# ---------------------------------------------------------------------------
# user subgraphs


@dataclass(frozen=True)
class UserSubgraph:
    """Nodes reachable from a seed under the user hop schedule.

    ``nodes`` is ordered by hop tier, then by id; that order defines the local
    row index used by the graph encoder.
    """

    root: NodeRef
    nodes: tuple[NodeRef, ...]
    tiers: tuple[tuple[str, ...], ...]
    triples: tuple[Triple, ...]
    surfaces: Mapping[str, str]

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes)

    def index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    def adjacency(self) -> dict[str, set[str]]:
        adj = {n.id: set() for n in self.nodes}
        for t in self.triples:
            adj[t.head.id].add(t.tail.id)
            adj[t.tail.id].add(t.head.id)
        return adj

    def __contains__(self, node) -> bool:
        return _as_id(node) in self.surfaces


def _induced(g: HKG, root: NodeRef, tiers: list[list[str]]) -> UserSubgraph:
    ids = [nid for tier in tiers for nid in tier]
    idset = set(ids)
    triples = tuple(t for t in g.triples if t.head.id in idset and t.tail.id in idset)
    return UserSubgraph(
        root=root,
        nodes=tuple(g.node(n) for n in ids),
        tiers=tuple(tuple(t) for t in tiers),
        triples=triples,
        surfaces=MappingProxyType({n: g.surface(n) for n in ids}),
    )


def _fill(tiers: list[list[str]], candidates: Iterable[str], seen: set, cap: int) -> list[str]:
    budget = cap - sum(len(t) for t in tiers)
    tier = sorted(set(candidates) - seen)[: max(budget, 0)]
    seen.update(tier)
    tiers.append(tier)
    return tier


def user_subgraph(g: HKG, u, cap: int = DEFAULT_NODE_CAP) -> UserSubgraph:
    """User, then interacted items, then their KG entities, then linked keywords.

    When the tiers exceed ``cap`` nodes, each tier is truncated to its
    lowest ids in order, so earlier tiers are never displaced by later ones.
    """
    root = g.node(u)
    if root.kind is not NodeKind.USER:
        raise UnknownNode(f"{root.id!r} is not a user node")
    seen = {root.id}
    tiers = [[root.id]]
    items = _fill(
        tiers,
        (n for n in g.neighbors(root, INTERACTION) if g.node(n).kind is NodeKind.ITEM),
        seen,
        cap,
    )
    _expand_entities_and_words(g, tiers, items, seen, cap)
    return _induced(g, root, tiers)


def item_subgraph(g: HKG, item_node, cap: int = DEFAULT_NODE_CAP) -> UserSubgraph:
    """Same schedule seeded at an item; used when the graph has no user nodes."""
    root = g.node(item_node)
    seen = {root.id}
    tiers = [[root.id]]
    _expand_entities_and_words(g, tiers, [root.id], seen, cap)
    return _induced(g, root, tiers)


def _expand_entities_and_words(g, tiers, items, seen, cap):
    ents = set()
    for it in items:
        for rid in g.relations_of(it):
            if g.relations[rid].kind is RelationKind.KG:
                ents.update(g.neighbors(it, rid))
    ents = _fill(tiers, ents, seen, cap)
    words = set()
    for e in list(items) + ents:
        words.update(n for n in g.neighbors(e, COOCCURRENCE) if g.node(n).kind is NodeKind.WORD)
    _fill(tiers, words, seen, cap)


def context_subgraph(g: HKG, user: str, item: str | None = None, cap: int = DEFAULT_NODE_CAP) -> UserSubgraph:
    """Subgraph for a generation context given raw user/item ids."""
    uid = user_id(user)
    if uid in g:
        return user_subgraph(g, uid, cap)
    if item is not None and item in g.alignment and g.alignment[item] in g:
        return item_subgraph(g, g.alignment[item], cap)
    raise UnknownNode(f"neither user {user!r} nor item {item!r} is in the graph")


def copy_candidates(sub: UserSubgraph, generated_tokens: Iterable[str]) -> set[NodeRef]:
    """Entity and word nodes of ``sub`` adjacent to any node matching a previous token."""
    tokens = set(generated_tokens)
    if not tokens:
        return set()
    kinds = {n.id: n for n in sub.nodes}
    matched = {nid for nid, s in sub.surfaces.items() if s in tokens and kinds[nid].kind is not NodeKind.USER}
    if not matched:
        return set()
    out = set()
    for t in sub.triples:
        if t.head.id in matched and t.tail.kind in COPYABLE_KINDS:
            out.add(kinds[t.tail.id])
        if t.tail.id in matched and t.head.kind in COPYABLE_KINDS:
            out.add(kinds[t.head.id])
    return out


class CopyIndex:
    """Precomputed token -> copyable-neighbor lookup for one subgraph.

    Equivalent to :func:`copy_candidates` but amortised over many decoding
    steps; candidates are returned as local row indices of the subgraph.
    """

    def __init__(self, sub: UserSubgraph):
        self.sub = sub
        local = sub.index()
        adj = sub.adjacency()
        self.copyable = [n.kind in COPYABLE_KINDS for n in sub.nodes]
        self._by_token: dict[str, set[int]] = defaultdict(set)
        for n in sub.nodes:
            if n.kind is NodeKind.USER:
                continue
            nbrs = {local[m] for m in adj[n.id] if self.copyable[local[m]]}
            self._by_token[sub.surfaces[n.id]] |= nbrs
        self.surfaces = [sub.surfaces[n.id] for n in sub.nodes]

    def candidates(self, tokens: Iterable[str]) -> set[int]:
        out = set()
        for tok in tokens:
            out |= self._by_token.get(tok, set())
        return out

    def for_token(self, token: str) -> set[int]:
        return self._by_token.get(token, set())


# ---------------------------------------------------------------------------
# entity-word links


def find_entity_mentions(sentences: Iterable[Sequence[str]], surface_to_entity: Mapping[str, str]) -> list[set[str]]:
    """Exact token match of entity surfaces; one entity set per sentence."""
    return [{surface_to_entity[t] for t in toks if t in surface_to_entity} for toks in sentences]


def make_entity_word_links(
    sentences: Sequence[Sequence[str]],
    entity_mentions: Sequence[Iterable[str]],
    keywords: Iterable[str],
    keep_fraction: float = 0.5,
) -> list[tuple[str, str]]:
    """Link each entity to the most frequent keywords it shares a sentence with.

    Co-occurrence is counted once per sentence.  For an entity with ``n``
    distinct co-occurring keywords the top ``ceil(keep_fraction * n)`` are
    kept, ties broken lexicographically.
    """
    keywords = set(keywords)
    counts: dict[str, Counter] = defaultdict(Counter)
    for toks, ents in zip(sentences, entity_mentions):
        present = keywords.intersection(toks)
        for e in set(ents):
            for w in present:
                counts[e][w] += 1
    links = []
    for e in sorted(counts):
        ranked = sorted(counts[e].items(), key=lambda kv: (-kv[1], kv[0]))
        keep = math.ceil(keep_fraction * len(ranked))
        links.extend((e, w) for w, _ in ranked[:keep])
    return links


# ---------------------------------------------------------------------------
# TSV inputs


def _read_tsv(path, ncols: int, name: str) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise InputFileError(path, f"{name} file not found")
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE), 1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < ncols:
                raise InputFileError(path, f"expected {ncols} tab-separated columns, got {len(row)}", lineno)
            rows.append([c.strip() for c in row])
    return rows


def read_triples(path) -> list[tuple[str, str, str]]:
    return [(h, r, t) for h, r, t, *_ in _read_tsv(path, 3, "triples")]


def read_interactions(path) -> list[tuple[str, str, int]]:
    out = []
    for lineno, row in enumerate(_read_tsv(path, 3, "interactions"), 1):
        try:
            out.append((row[0], row[1], int(float(row[2]))))
        except ValueError:
            raise InputFileError(path, f"bad rating {row[2]!r}", lineno) from None
    return out


def read_alignment(path) -> dict[str, str]:
    return {item: ent for item, ent, *_ in _read_tsv(path, 2, "alignment")}


def read_entity_names(path) -> dict[str, str]:
    """Entity surfaces; multi-word names are joined with underscores."""
    return {ent: "_".join(name.split()) for ent, name, *_ in _read_tsv(path, 2, "entity names")}
