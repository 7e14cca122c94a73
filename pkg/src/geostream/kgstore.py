"""Dynamic geo-human knowledge graph.

The graph starts from a static spatial skeleton (POI -> category, POI ->
zone) and evolves as timestamped visit events stream in. Each user owns a
fixed-capacity sliding window of visit events; when the window overflows,
the oldest event and the triples it induced leave the graph. Lifetime
visit counts per POI survive eviction. Every object also keeps its RPOI
duplicate so visit-cascade edges never collide with the static relations.

All mutation goes through ``apply_visit``, which returns a ``DeltaReport``
listing added/removed triples and the set of objects whose context changed
(the embedding module retrains exactly this set).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from .errors import (
    IngestionError,
    StreamOrderError,
    UnknownObjectError,
)


class EntityKind(IntEnum):
    USER = 0
    POI = 1
    RPOI = 2
    CATEGORY = 3
    ZONE = 4


class RelType(IntEnum):
    BELONG_TO = 0
    LOCATE_AT = 1
    VISIT = 2
    ALSO_VISIT = 3


# Object keys unify entities and relation kinds for the embedding table:
# entity keys are (EntityKind value, index); relation kinds get code 5 + rel.
REL_KEY_BASE = 5

_KIND_NAMES = {
    0: "User",
    1: "Poi",
    2: "RPoi",
    3: "Category",
    4: "Zone",
}
_REL_NAMES = {
    RelType.BELONG_TO: "BelongTo",
    RelType.LOCATE_AT: "LocateAt",
    RelType.VISIT: "Visit",
    RelType.ALSO_VISIT: "AlsoVisit",
}
_REL_BY_NAME = {v: k for k, v in _REL_NAMES.items()}


class EntityId(NamedTuple):
    kind: int
    index: int


class Triple(NamedTuple):
    head: EntityId
    rel: int
    tail: EntityId
    time: float | None = None


def user(i: int) -> EntityId:
    return EntityId(EntityKind.USER, i)


def poi(i: int) -> EntityId:
    return EntityId(EntityKind.POI, i)


def rpoi(i: int) -> EntityId:
    return EntityId(EntityKind.RPOI, i)


def category(i: int) -> EntityId:
    return EntityId(EntityKind.CATEGORY, i)


def zone(i: int) -> EntityId:
    return EntityId(EntityKind.ZONE, i)


def ent_key(e: EntityId) -> tuple[int, int]:
    return (int(e.kind), int(e.index))


def rel_key(rel: int) -> tuple[int, int]:
    return (REL_KEY_BASE + int(rel), 0)


def key_is_relation(key: tuple[int, int]) -> bool:
    return key[0] >= REL_KEY_BASE


@dataclass(frozen=True)
class ContextSubgraph:
    """One object's context: node keys (object first) and 0/1 adjacency."""

    nodes: tuple[tuple[int, int], ...]
    adjacency: np.ndarray

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class DeltaReport:
    added: tuple[Triple, ...]
    removed: tuple[Triple, ...]
    affected: frozenset[tuple[int, int]]
    version: int


@dataclass
class _VisitEvent:
    user: int
    poi: int
    time: float
    visit_triple: Triple
    cascade: Triple | None = None


@dataclass
class DynamicKg:
    window_capacity: int = 50
    pois: set[int] = field(default_factory=set)
    users: set[int] = field(default_factory=set)
    categories: set[int] = field(default_factory=set)
    zones: set[int] = field(default_factory=set)
    visit_counts: dict[int, int] = field(default_factory=dict)
    version: int = 0

    def __post_init__(self):
        if self.window_capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self._entities: set[EntityId] = set()
        self._triples: set[Triple] = set()
        # refcounted undirected adjacency: entity -> {neighbor: edge count}
        self._adj: dict[EntityId, dict[EntityId, int]] = {}
        # directed pair -> {rel kind: triple count}
        self._pair_rels: dict[tuple[EntityId, EntityId], dict[int, int]] = {}
        self._incident: dict[EntityId, set[Triple]] = {}
        self._rel_counts: dict[int, int] = {}
        self._windows: dict[int, deque[_VisitEvent]] = {}
        self._visit_refs: dict[Triple, int] = {}
        self._cascade_refs: dict[Triple, int] = {}

    # -- entity / triple bookkeeping ------------------------------------

    def _add_entity(self, e: EntityId) -> None:
        if e not in self._entities:
            self._entities.add(e)
            self._adj[e] = {}
            self._incident[e] = set()

    def has_entity(self, e: EntityId) -> bool:
        return e in self._entities

    def _attach(self, t: Triple) -> None:
        self._triples.add(t)
        self._adj[t.head][t.tail] = self._adj[t.head].get(t.tail, 0) + 1
        self._adj[t.tail][t.head] = self._adj[t.tail].get(t.head, 0) + 1
        kinds = self._pair_rels.setdefault((t.head, t.tail), {})
        kinds[t.rel] = kinds.get(t.rel, 0) + 1
        self._incident[t.head].add(t)
        self._incident[t.tail].add(t)
        self._rel_counts[t.rel] = self._rel_counts.get(t.rel, 0) + 1

    def _detach(self, t: Triple) -> None:
        self._triples.discard(t)
        for a, b in ((t.head, t.tail), (t.tail, t.head)):
            self._adj[a][b] -= 1
            if self._adj[a][b] == 0:
                del self._adj[a][b]
        kinds = self._pair_rels[(t.head, t.tail)]
        kinds[t.rel] -= 1
        if kinds[t.rel] == 0:
            del kinds[t.rel]
        if not kinds:
            del self._pair_rels[(t.head, t.tail)]
        self._incident[t.head].discard(t)
        self._incident[t.tail].discard(t)
        self._rel_counts[t.rel] -= 1

    # -- mutation --------------------------------------------------------

    def add_poi(self, poi_id: int, category_id: int, zone_id: int) -> None:
        if poi_id in self.pois:
            raise IngestionError(f"duplicate POI id {poi_id}")
        self.pois.add(poi_id)
        self.categories.add(category_id)
        self.zones.add(zone_id)
        self.visit_counts.setdefault(poi_id, 0)
        for e in (poi(poi_id), rpoi(poi_id), category(category_id), zone(zone_id)):
            self._add_entity(e)
        self._attach(Triple(poi(poi_id), RelType.BELONG_TO, category(category_id)))
        self._attach(Triple(poi(poi_id), RelType.LOCATE_AT, zone(zone_id)))

    def apply_visit(self, user_id: int, poi_id: int, time: float) -> DeltaReport:
        """Insert one visit event, evicting the user's oldest if needed."""
        if poi_id not in self.pois:
            raise UnknownObjectError(f"unknown POI {poi_id}")
        time = float(time)
        window = self._windows.get(user_id)
        if window and time < window[-1].time:
            raise StreamOrderError(
                f"visit at {time} precedes user {user_id}'s last event "
                f"at {window[-1].time}"
            )
        if user_id not in self.users:
            self.users.add(user_id)
            self._add_entity(user(user_id))
            window = self._windows[user_id] = deque()
        elif window is None:
            window = self._windows[user_id] = deque()

        added: list[Triple] = []
        removed: list[Triple] = []
        affected: set[tuple[int, int]] = set()

        def touch(t: Triple) -> None:
            # endpoints, their current one-hop neighbors, and every relation
            # kind sharing the triple's pair
            for e in (t.head, t.tail):
                affected.add(ent_key(e))
                for nbr in self._adj.get(e, ()):
                    affected.add(ent_key(nbr))
            affected.add(rel_key(t.rel))
            for pair in ((t.head, t.tail), (t.tail, t.head)):
                for kind in self._pair_rels.get(pair, ()):
                    affected.add(rel_key(kind))

        if len(window) == self.window_capacity:
            old = window.popleft()
            for tri, refs in (
                (old.visit_triple, self._visit_refs),
                (old.cascade, self._cascade_refs),
            ):
                if tri is None:
                    continue
                refs[tri] -= 1
                if refs[tri] == 0:
                    del refs[tri]
                    touch(tri)  # neighborhood snapshot before detaching
                    self._detach(tri)
                    removed.append(tri)

        prev_poi = window[-1].poi if window else None

        visit_triple = Triple(user(user_id), RelType.VISIT, poi(poi_id), time)
        if self._visit_refs.get(visit_triple, 0) == 0:
            self._attach(visit_triple)
            added.append(visit_triple)
        self._visit_refs[visit_triple] = self._visit_refs.get(visit_triple, 0) + 1

        cascade = None
        if prev_poi is not None:
            cascade = Triple(poi(prev_poi), RelType.ALSO_VISIT, rpoi(poi_id))
            if self._cascade_refs.get(cascade, 0) == 0:
                self._attach(cascade)
                added.append(cascade)
            self._cascade_refs[cascade] = self._cascade_refs.get(cascade, 0) + 1

        window.append(_VisitEvent(user_id, poi_id, time, visit_triple, cascade))
        self.visit_counts[poi_id] += 1
        for t in added:
            touch(t)
        self.version += 1
        return DeltaReport(tuple(added), tuple(removed), frozenset(affected), self.version)

    # -- queries ---------------------------------------------------------

    def context_of(self, obj) -> ContextSubgraph:
        """Context of an entity (one-hop induced subgraph) or of a relation
        occurrence (star over the relation kinds sharing its pair).

        ``obj`` is an :class:`EntityId` or a :class:`Triple`. Triples need
        not exist in the graph; an unseen pair yields the singleton context.
        """
        if isinstance(obj, Triple):
            kinds = set(self._pair_rels.get((obj.head, obj.tail), ()))
            kinds.discard(obj.rel)
            nodes = [rel_key(obj.rel)] + [rel_key(k) for k in sorted(kinds)]
            n = len(nodes)
            adj = np.zeros((n, n))
            adj[0, 1:] = 1.0
            adj[1:, 0] = 1.0
            return ContextSubgraph(tuple(nodes), adj)
        if obj not in self._entities:
            raise UnknownObjectError(f"unknown entity {obj}")
        members = [obj] + sorted(self._adj[obj])
        n = len(members)
        adj = np.zeros((n, n))
        for i in range(n):
            row = self._adj[members[i]]
            for j in range(i + 1, n):
                if members[j] in row:
                    adj[i, j] = adj[j, i] = 1.0
        return ContextSubgraph(tuple(ent_key(e) for e in members), adj)

    def popularity(self, pois) -> list[int]:
        """POIs by descending lifetime visits; ties by ascending index."""
        return sorted(pois, key=lambda p: (-self.visit_counts.get(p, 0), p))

    def window_events(self, user_id: int) -> list[tuple[int, float]]:
        """(poi, time) pairs currently in a user's window, oldest first."""
        return [(e.poi, e.time) for e in self._windows.get(user_id, ())]

    def visited_pois(self, user_id: int) -> list[int]:
        """Distinct in-window POIs of a user, in first-visit order."""
        seen: dict[int, None] = {}
        for e in self._windows.get(user_id, ()):
            seen.setdefault(e.poi, None)
        return list(seen)

    def cascade_successors(self, poi_id: int) -> list[int]:
        """POIs visited next after ``poi_id`` per live also-visit edges."""
        out = []
        for nbr in self._adj.get(poi(poi_id), ()):
            if nbr.kind != EntityKind.RPOI:
                continue
            if RelType.ALSO_VISIT in self._pair_rels.get((poi(poi_id), nbr), ()):
                out.append(nbr.index)
        return sorted(out)

    def category_members(self, category_id: int) -> list[int]:
        e = category(category_id)
        return sorted(n.index for n in self._adj.get(e, ()) if n.kind == EntityKind.POI)

    def zone_members(self, zone_id: int) -> list[int]:
        e = zone(zone_id)
        return sorted(n.index for n in self._adj.get(e, ()) if n.kind == EntityKind.POI)

    def poi_static(self, poi_id: int) -> tuple[int, int]:
        """(category, zone) of a POI from the static skeleton."""
        cat = zn = None
        for nbr in self._adj.get(poi(poi_id), ()):
            if nbr.kind == EntityKind.CATEGORY:
                cat = nbr.index
            elif nbr.kind == EntityKind.ZONE:
                zn = nbr.index
        if cat is None or zn is None:
            raise UnknownObjectError(f"POI {poi_id} has no static skeleton")
        return cat, zn

    def triples(self) -> set[Triple]:
        return set(self._triples)

    def n_triples(self) -> int:
        return len(self._triples)

    def triples_incident_to(self, keys) -> list[Triple]:
        """Triples touching any affected entity, in a deterministic order."""
        found: set[Triple] = set()
        for key in keys:
            if key_is_relation(key):
                continue
            e = EntityId(*key)
            found.update(self._incident.get(e, ()))
        return sorted(found, key=_triple_sort_key)

    def object_keys(self) -> list[tuple[int, int]]:
        """All embeddable objects: entities plus relation kinds in use."""
        keys = [ent_key(e) for e in self._entities]
        keys += [rel_key(r) for r, c in self._rel_counts.items() if c > 0]
        return sorted(keys)

    # -- snapshot text format ---------------------------------------------

    def export_snapshot(self) -> str:
        lines = ["# geostream-kg 1", f"window {self.window_capacity}"]
        for p in sorted(self.pois):
            if self.visit_counts.get(p, 0):
                lines.append(f"visits {p} {self.visit_counts[p]}")
        for t in sorted(self._triples, key=_triple_sort_key):
            rel = _REL_NAMES[RelType(t.rel)]
            if t.time is not None:
                rel = f"{rel}:{t.time!r}"
            lines.append(
                f"{_KIND_NAMES[t.head.kind]}:{t.head.index}\t{rel}\t"
                f"{_KIND_NAMES[t.tail.kind]}:{t.tail.index}"
            )
        return "\n".join(lines) + "\n"


def _triple_sort_key(t: Triple):
    return (t.rel, t.time if t.time is not None else -1.0, ent_key(t.head), ent_key(t.tail))


def build_static(pois, window: int = 50) -> DynamicKg:
    """Build the static skeleton from (poi, category, zone) index triples."""
    kg = DynamicKg(window_capacity=window)
    for poi_id, category_id, zone_id in pois:
        kg.add_poi(poi_id, category_id, zone_id)
    return kg


def apply_visit(kg: DynamicKg, user_id: int, poi_id: int, time: float) -> DeltaReport:
    return kg.apply_visit(user_id, poi_id, time)


def context_of(kg: DynamicKg, obj) -> ContextSubgraph:
    return kg.context_of(obj)


def popularity(kg: DynamicKg, pois) -> list[int]:
    return kg.popularity(pois)


_NAME_TO_KIND = {v: k for k, v in _KIND_NAMES.items()}


def _parse_endpoint(text: str) -> EntityId:
    name, _, idx = text.partition(":")
    if name not in _NAME_TO_KIND or not idx:
        raise IngestionError(f"bad snapshot endpoint {text!r}")
    return EntityId(_NAME_TO_KIND[name], int(idx))


def import_snapshot(text: str) -> DynamicKg:
    """Rebuild a graph from its exported text form.

    Windows and eviction bookkeeping are reconstructed from the visit
    triples (each user's in-window events are their visit edges sorted by
    time). Cascade edges whose creating pair was partly evicted are
    re-anchored to the matching window-head event.
    """
    window_cap = 50
    visit_lines: list[tuple[str, ...]] = []
    statics: list[Triple] = []
    visits: list[Triple] = []
    cascades: list[Triple] = []
    counts: dict[int, int] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("window "):
            window_cap = int(line.split()[1])
            continue
        if line.startswith("visits "):
            _, p, c = line.split()
            counts[int(p)] = int(c)
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise IngestionError(f"bad snapshot line {line!r}")
        visit_lines.append(tuple(parts))
    kg = DynamicKg(window_capacity=window_cap)
    pending_pois: dict[int, dict[int, int]] = {}
    for head_s, rel_s, tail_s in visit_lines:
        rel_name, _, time_s = rel_s.partition(":")
        if rel_name not in _REL_BY_NAME:
            raise IngestionError(f"bad snapshot relation {rel_s!r}")
        rel = _REL_BY_NAME[rel_name]
        head = _parse_endpoint(head_s)
        tail = _parse_endpoint(tail_s)
        t = Triple(head, rel, tail, float(time_s) if time_s else None)
        if rel == RelType.BELONG_TO:
            pending_pois.setdefault(head.index, {})[0] = tail.index
            statics.append(t)
        elif rel == RelType.LOCATE_AT:
            pending_pois.setdefault(head.index, {})[1] = tail.index
            statics.append(t)
        elif rel == RelType.VISIT:
            visits.append(t)
        else:
            cascades.append(t)
    for poi_id in sorted(pending_pois):
        links = pending_pois[poi_id]
        if 0 not in links or 1 not in links:
            raise IngestionError(f"POI {poi_id} missing static triples")
        kg.add_poi(poi_id, links[0], links[1])

    by_user: dict[int, list[Triple]] = {}
    for t in visits:
        by_user.setdefault(t.head.index, []).append(t)
    heads: list[_VisitEvent] = []
    for user_id in sorted(by_user):
        events = sorted(by_user[user_id], key=lambda t: (t.time, t.tail.index))
        if len(events) > window_cap:
            raise IngestionError(
                f"user {user_id} has {len(events)} in-window visits, capacity {window_cap}"
            )
        kg.users.add(user_id)
        kg._add_entity(user(user_id))
        window = kg._windows[user_id] = deque()
        prev = None
        for t in events:
            if kg._visit_refs.get(t, 0) == 0:
                kg._attach(t)
            kg._visit_refs[t] = kg._visit_refs.get(t, 0) + 1
            ev = _VisitEvent(user_id, t.tail.index, t.time, t)
            if prev is not None:
                ct = Triple(poi(prev), RelType.ALSO_VISIT, rpoi(t.tail.index))
                if kg._cascade_refs.get(ct, 0) == 0:
                    kg._attach(ct)
                kg._cascade_refs[ct] = kg._cascade_refs.get(ct, 0) + 1
                ev.cascade = ct
            else:
                heads.append(ev)
            window.append(ev)
            prev = t.tail.index
    heads.sort(key=lambda e: (e.user, e.time))
    for ct in sorted(set(cascades), key=_triple_sort_key):
        if kg._cascade_refs.get(ct, 0) > 0:
            continue
        target = ct.tail.index
        owner = next((e for e in heads if e.poi == target and e.cascade is None), None)
        if owner is not None:
            owner.cascade = ct
        kg._attach(ct)
        kg._cascade_refs[ct] = 1
    for p, c in counts.items():
        if p not in kg.pois:
            raise IngestionError(f"visit count for unknown POI {p}")
        kg.visit_counts[p] = c
    return kg
