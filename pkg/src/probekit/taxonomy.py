"""Entity type graphs over instance-of / subclass-of edges.

Given the answer entities of a relation, the type graph collects every
ancestor type those entities reach, counts how many of them each type
covers, and the induction step picks the finest type whose coverage clears
a threshold. Cycles in the source taxonomy are condensed, never deleted,
so the fine-to-coarse order is always defined.
"""

from __future__ import annotations

import heapq
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

INSTANCE_OF = "instance_of"
SUBCLASS_OF = "subclass_of"
EDGE_KINDS = (INSTANCE_OF, SUBCLASS_OF)


class TaxonomyError(ValueError):
    """A taxonomy file or edge set violates its format."""


class CycleError(RuntimeError):
    """A supposedly acyclic graph still contains a cycle."""


class UnknownTypeError(KeyError):
    """A type id is not present in the graph or store."""


class TypeInductionError(RuntimeError):
    """No type cleared the coverage threshold."""

    def __init__(self, message: str, best_type_id: str | None, best_fraction: float):
        super().__init__(message)
        self.best_type_id = best_type_id
        self.best_fraction = best_fraction


@dataclass(frozen=True)
class TaxonomyStore:
    """Immutable view of the taxonomy edges plus entity labels."""

    parents: Mapping[str, tuple[str, ...]]
    edges: frozenset[tuple[str, str, str]]
    labels: Mapping[str, str]
    label_index: Mapping[str, tuple[str, ...]]
    degree: Mapping[str, int]

    @classmethod
    def build(
        cls,
        edge_triples: Iterable[tuple[str, str, str]],
        labels: Mapping[str, str] | None = None,
    ) -> "TaxonomyStore":
        edges = set()
        self_edges = 0
        for child, parent, kind in edge_triples:
            if not child or not parent:
                raise TaxonomyError("edge endpoints must be non-empty")
            if kind not in EDGE_KINDS:
                raise TaxonomyError(f"unknown edge kind {kind!r}")
            if child == parent:
                self_edges += 1
                continue
            edges.add((child, parent, kind))
        if self_edges:
            log.warning("dropped %d self-edges from taxonomy", self_edges)

        parent_sets: dict[str, set[str]] = {}
        degree: dict[str, int] = {}
        for child, parent, _ in edges:
            parent_sets.setdefault(child, set()).add(parent)
            degree[child] = degree.get(child, 0) + 1
            degree[parent] = degree.get(parent, 0) + 1
        parents = {child: tuple(sorted(ps)) for child, ps in parent_sets.items()}

        label_map = dict(labels or {})
        index: dict[str, list[str]] = {}
        for entity_id, label in label_map.items():
            index.setdefault(label, []).append(entity_id)
        label_index = {label: tuple(sorted(ids)) for label, ids in index.items()}
        return cls(parents, frozenset(edges), label_map, label_index, degree)

    def label(self, entity_id: str) -> str:
        """Display label, falling back to the id itself."""
        return self.labels.get(entity_id, entity_id)

    def known(self, entity_id: str) -> bool:
        return entity_id in self.degree or entity_id in self.labels


def load_taxonomy(edges_path: str | Path, labels_path: str | Path | None = None) -> TaxonomyStore:
    """Load edge and label files into a store; malformed lines are errors."""
    triples = []
    with open(edges_path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise TaxonomyError(
                    f"{edges_path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            if fields[2] not in EDGE_KINDS:
                raise TaxonomyError(f"{edges_path}:{lineno}: unknown edge kind {fields[2]!r}")
            triples.append((fields[0], fields[1], fields[2]))

    labels: dict[str, str] = {}
    if labels_path is not None:
        with open(labels_path, encoding="utf-8") as handle:
            for lineno, raw in enumerate(handle, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                fields = line.split("\t")
                if len(fields) != 2:
                    raise TaxonomyError(
                        f"{labels_path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}"
                    )
                entity_id, label = fields
                if labels.get(entity_id, label) != label:
                    raise TaxonomyError(
                        f"{labels_path}:{lineno}: conflicting label for {entity_id}"
                    )
                labels[entity_id] = label
    return TaxonomyStore.build(triples, labels)


def ancestor_closure(
    entity_id: str, store: TaxonomyStore, max_depth: int | None = None
) -> frozenset[str]:
    """The entity together with every ancestor reachable within max_depth."""
    seen = {entity_id}
    frontier = [entity_id]
    depth = 0
    while frontier and (max_depth is None or depth < max_depth):
        depth += 1
        nxt = []
        for node in frontier:
            for parent in store.parents.get(node, ()):
                if parent not in seen:
                    seen.add(parent)
                    nxt.append(parent)
        frontier = nxt
    return frozenset(seen)


@dataclass(frozen=True)
class EntityTypeGraph:
    """Ancestor graph of a seed entity set, annotated with seed coverage.

    cover_sets[t] holds the seeds whose closure contains t; a seed always
    covers itself, so seeds appear as (finest) nodes of the graph. members
    maps each node to the original entity ids it stands for, which is only
    interesting after cycle condensation.
    """

    seed_size: int
    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    cover_sets: Mapping[str, frozenset[str]]
    members: Mapping[str, frozenset[str]]
    labels: Mapping[str, str]
    uncovered: tuple[str, ...] = ()
    collapsed: tuple[tuple[str, ...], ...] = ()

    def coverage(self, node: str) -> int:
        return len(self.cover_sets[node])


def build_etg(
    entity_set: Iterable[str], store: TaxonomyStore, max_depth: int | None = None
) -> EntityTypeGraph:
    """Expand the seeds through the taxonomy and count per-type coverage.

    Seeds without any outgoing edge stay in the graph as isolated nodes but
    are reported in ``uncovered`` since no type accounts for them.
    """
    seeds = sorted(set(entity_set))
    if not seeds:
        raise ValueError("entity set must be non-empty")
    closures: dict[str, frozenset[str]] = {}
    uncovered = []
    for seed in seeds:
        if not store.parents.get(seed):
            uncovered.append(seed)
        closures[seed] = ancestor_closure(seed, store, max_depth)
    if uncovered:
        log.warning("%d of %d seeds have no taxonomy edges", len(uncovered), len(seeds))

    node_set: set[str] = set()
    for closure in closures.values():
        node_set.update(closure)
    cover: dict[str, set[str]] = {node: set() for node in node_set}
    for seed, closure in closures.items():
        for node in closure:
            cover[node].add(seed)

    nodes = tuple(sorted(node_set))
    edges = tuple(
        sorted(
            (child, parent)
            for child in nodes
            for parent in store.parents.get(child, ())
            if parent in node_set
        )
    )
    return EntityTypeGraph(
        seed_size=len(seeds),
        nodes=nodes,
        edges=edges,
        cover_sets={node: frozenset(seeds_in) for node, seeds_in in cover.items()},
        members={node: frozenset({node}) for node in nodes},
        labels={node: store.label(node) for node in nodes},
        uncovered=tuple(uncovered),
    )


def _strongly_connected_components(
    nodes: Sequence[str], successors: Mapping[str, Sequence[str]]
) -> list[frozenset[str]]:
    """Tarjan's algorithm, iterative to survive deep chains."""
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    components: list[frozenset[str]] = []
    counter = 0

    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(successors.get(root, ())))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, edge_iter = work[-1]
            succ = next(edge_iter, None)
            if succ is not None:
                if succ not in index:
                    index[succ] = low[succ] = counter
                    counter += 1
                    stack.append(succ)
                    on_stack.add(succ)
                    work.append((succ, iter(successors.get(succ, ()))))
                elif succ in on_stack:
                    low[node] = min(low[node], index[succ])
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                component = []
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    component.append(member)
                    if member == node:
                        break
                components.append(frozenset(component))
    return components


def condense_cycles(etg: EntityTypeGraph) -> EntityTypeGraph:
    """Collapse every strongly connected component into one node.

    The condensed node keeps the lexicographically smallest member id, and
    covers the union of the seeds its members covered. Acyclic graphs come
    back unchanged.
    """
    successors: dict[str, list[str]] = {}
    for child, parent in etg.edges:
        successors.setdefault(child, []).append(parent)
    components = _strongly_connected_components(etg.nodes, successors)
    if all(len(c) == 1 for c in components):
        return etg

    node_map: dict[str, str] = {}
    collapsed = list(etg.collapsed)
    for component in components:
        representative = min(component)
        for member in component:
            node_map[member] = representative
        if len(component) > 1:
            collapsed.append(tuple(sorted(component)))
            log.warning("condensed taxonomy cycle: %s", ", ".join(sorted(component)))

    nodes = tuple(sorted({node_map[n] for n in etg.nodes}))
    edges = tuple(
        sorted(
            {
                (node_map[child], node_map[parent])
                for child, parent in etg.edges
                if node_map[child] != node_map[parent]
            }
        )
    )
    cover_sets: dict[str, frozenset[str]] = {}
    members: dict[str, frozenset[str]] = {}
    for component in components:
        representative = min(component)
        covered: set[str] = set()
        original: set[str] = set()
        for member in component:
            covered.update(etg.cover_sets[member])
            original.update(etg.members[member])
        cover_sets[representative] = frozenset(covered)
        members[representative] = frozenset(original)
    labels = {node: etg.labels[node] for node in nodes}
    return EntityTypeGraph(
        seed_size=etg.seed_size,
        nodes=nodes,
        edges=edges,
        cover_sets=cover_sets,
        members=members,
        labels=labels,
        uncovered=etg.uncovered,
        collapsed=tuple(sorted(collapsed)),
    )


def fine_to_coarse_order(etg: EntityTypeGraph) -> list[str]:
    """Topological order with children before parents.

    Nodes that become ready together are emitted by ascending coverage and
    then by id, so the finest types come first deterministically.
    """
    indegree = {node: 0 for node in etg.nodes}
    parents_of: dict[str, list[str]] = {node: [] for node in etg.nodes}
    for child, parent in etg.edges:
        indegree[parent] += 1
        parents_of[child].append(parent)

    ready = [
        (len(etg.cover_sets[node]), node)
        for node in etg.nodes
        if indegree[node] == 0
    ]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        _, node = heapq.heappop(ready)
        order.append(node)
        for parent in parents_of[node]:
            indegree[parent] -= 1
            if indegree[parent] == 0:
                heapq.heappush(ready, (len(etg.cover_sets[parent]), parent))
    if len(order) != len(etg.nodes):
        raise CycleError("graph still contains a cycle; condense it first")
    return order


@dataclass(frozen=True)
class TypeAssignment:
    """The induced answer type of one relation."""

    relation_id: str
    type_id: str
    type_label: str
    coverage_fraction: float

    def __post_init__(self):
        if not 0.0 <= self.coverage_fraction <= 1.0:
            raise ValueError(f"coverage fraction out of range: {self.coverage_fraction}")


def induce_type(
    order: Sequence[str],
    etg: EntityTypeGraph,
    threshold: float = 0.8,
    relation_id: str = "",
) -> TypeAssignment:
    """First node in fine-to-coarse order covering strictly more than threshold."""
    if etg.seed_size < 1:
        raise ValueError("seed size must be >= 1")
    best_node: str | None = None
    best_fraction = -1.0
    for node in order:
        fraction = len(etg.cover_sets[node]) / etg.seed_size
        if fraction > threshold:
            return TypeAssignment(relation_id, node, etg.labels[node], fraction)
        if fraction > best_fraction:
            best_node = node
            best_fraction = fraction
    raise TypeInductionError(
        f"no type covers more than {threshold:.2f} of the seeds "
        f"(best: {best_node} at {max(best_fraction, 0.0):.4f})",
        best_node,
        max(best_fraction, 0.0),
    )


def resolve_label(label: str, store: TaxonomyStore) -> str | None:
    """Exact label lookup; ambiguity resolves to the best-connected entity."""
    ids = store.label_index.get(label)
    if not ids:
        return None
    if len(ids) == 1:
        return ids[0]
    # highest edge degree wins, ties broken toward the smallest id
    chosen = sorted(ids, key=lambda i: (-store.degree.get(i, 0), i))[0]
    log.info("label %r is ambiguous (%d entities), using %s", label, len(ids), chosen)
    return chosen


def type_members(
    type_id: str,
    candidate_labels: Iterable[str],
    store: TaxonomyStore,
    etg: EntityTypeGraph | None = None,
    max_depth: int | None = None,
) -> set[str]:
    """Candidate labels whose entity reaches the given type.

    When the type graph is supplied the target honors condensation, i.e. a
    candidate matches if its closure hits any original member of the node.
    An entity that is itself the type counts as a member.
    """
    if etg is not None:
        if type_id not in etg.members:
            raise UnknownTypeError(type_id)
        targets = etg.members[type_id]
    else:
        if not store.known(type_id):
            raise UnknownTypeError(type_id)
        targets = frozenset({type_id})

    members: set[str] = set()
    unresolved = 0
    for label in sorted(set(candidate_labels)):
        entity = resolve_label(label, store)
        if entity is None:
            unresolved += 1
            continue
        if ancestor_closure(entity, store, max_depth) & targets:
            members.add(label)
    if unresolved:
        log.info("%d candidate labels had no entity in the taxonomy", unresolved)
    return members


def write_type_assignments(assignments: Iterable[TypeAssignment], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for a in sorted(assignments, key=lambda a: a.relation_id):
            handle.write(
                f"{a.relation_id}\t{a.type_id}\t{a.type_label}\t{a.coverage_fraction:.6f}\n"
            )
