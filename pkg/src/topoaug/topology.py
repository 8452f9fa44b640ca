"""Data-center topologies with a reconfigurable optical overlay.

Builds fat-tree and VL2 fabrics, toggles optical ToR-ToR links under a
port budget, and enumerates equal-cost shortest paths between racks.
Node indexing is stable (hosts, then edge, aggregation, core, optical)
so adjacency matrices are comparable across runs.
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .errors import BudgetError, ParameterError, RoutingError

DEFAULT_ETHERNET_BPS = 1e9
DEFAULT_OPTICAL_BPS = 10e9


class NodeKind(str, Enum):
    HOST = "host"
    EDGE = "edge"
    AGGREGATION = "aggregation"
    CORE = "core"
    OPTICAL = "optical"


class LinkKind(str, Enum):
    ETHERNET = "ethernet"
    OPTICAL = "optical"


@dataclass(frozen=True)
class Node:
    index: int
    kind: NodeKind


@dataclass(frozen=True)
class Link:
    a: int
    b: int
    capacity: float
    kind: LinkKind
    active: bool = True

    def __post_init__(self):
        if self.a == self.b:
            raise ParameterError(f"self-loop link at node {self.a}")
        if self.capacity <= 0:
            raise ParameterError(f"link capacity must be positive, got {self.capacity}")
        if self.a > self.b:
            # endpoints are an unordered pair; store them sorted
            lo, hi = self.b, self.a
            object.__setattr__(self, "a", lo)
            object.__setattr__(self, "b", hi)

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.a, self.b)


RackPair = tuple[int, int]


def _norm_pair(pair: Sequence[int]) -> RackPair:
    i, j = pair
    return (i, j) if i <= j else (j, i)


@dataclass(frozen=True)
class Topology:
    """Immutable node/link graph with an optical overlay among ToR switches.

    `racks` holds the edge-switch node ids in rack-index order;
    `candidate_optical` holds every unordered rack-index pair. Only
    `set_active_optical` produces a new topology with a different active set.
    """

    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    racks: tuple[int, ...]
    candidate_optical: tuple[RackPair, ...]
    budget_k: int
    optical_capacity: float = DEFAULT_OPTICAL_BPS
    optical_matching: bool = False
    name: str = "topology"

    def __post_init__(self):
        indices = [n.index for n in self.nodes]
        if sorted(indices) != list(range(len(self.nodes))):
            raise ParameterError("node indices must be dense 0..N-1")
        if self.budget_k <= 0:
            raise ParameterError("budget_k must be positive")
        seen: set[tuple[int, int, LinkKind]] = set()
        for link in self.links:
            key = (link.a, link.b, link.kind)
            if key in seen:
                raise ParameterError(f"duplicate {link.kind.value} link {link.endpoints}")
            seen.add(key)
            if link.kind is LinkKind.ETHERNET and not link.active:
                raise ParameterError("ethernet links are always active")
        active = tuple(
            sorted(
                _norm_pair((self.rack_index(l.a), self.rack_index(l.b)))
                for l in self.links
                if l.kind is LinkKind.OPTICAL and l.active
            )
        )
        if len(active) > self.budget_k:
            raise BudgetError(f"{len(active)} active optical links exceed budget {self.budget_k}")
        object.__setattr__(self, "_active_optical", active)
        rack_of = {nid: i for i, nid in enumerate(self.racks)}
        object.__setattr__(self, "_rack_of_node", rack_of)
        # prebuilt link list template and per-pair active/inactive variants so
        # reconfiguration does not re-construct Link objects (oracle hot path)
        slots: list = []
        variants: dict[RackPair, tuple[Link, Link]] = {}
        for link in self.links:
            if link.kind is LinkKind.OPTICAL:
                pair = _norm_pair((rack_of[link.a], rack_of[link.b]))
                off = link if not link.active else Link(link.a, link.b, link.capacity, link.kind, False)
                on = link if link.active else Link(link.a, link.b, link.capacity, link.kind, True)
                variants[pair] = (off, on)
                slots.append(pair)
            else:
                slots.append(link)
        object.__setattr__(self, "_link_slots", slots)
        object.__setattr__(self, "_optical_variants", variants)

    # -- accessors ---------------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_racks(self) -> int:
        return len(self.racks)

    @property
    def active_optical(self) -> tuple[RackPair, ...]:
        """Active optical links as sorted rack-index pairs."""
        return self._active_optical  # type: ignore[attr-defined]

    def rack_index(self, node_id: int) -> int:
        try:
            return self._rack_of_node[node_id]  # type: ignore[attr-defined]
        except (AttributeError, KeyError):
            # during __post_init__ the map is not built yet; fall back to scan
            return self.racks.index(node_id)

    def rack_node(self, rack: int) -> int:
        return self.racks[rack]

    def active_links(self) -> list[Link]:
        return [l for l in self.links if l.active]

    def ethernet_links(self) -> list[Link]:
        return [l for l in self.links if l.kind is LinkKind.ETHERNET]


# -- constructors ------------------------------------------------------------


def _with_overlay(
    nodes: list[Node],
    links: list[Link],
    racks: list[int],
    *,
    budget_k: int,
    optical_bps: float,
    optical_matching: bool,
    name: str,
) -> Topology:
    """Attach the optical switch node and one inactive link per ToR pair."""
    nodes = nodes + [Node(len(nodes), NodeKind.OPTICAL)]
    candidates = [(i, j) for i, j in combinations(range(len(racks)), 2)]
    for i, j in candidates:
        links.append(Link(racks[i], racks[j], optical_bps, LinkKind.OPTICAL, active=False))
    return Topology(
        nodes=tuple(nodes),
        links=tuple(links),
        racks=tuple(racks),
        candidate_optical=tuple(candidates),
        budget_k=budget_k,
        optical_capacity=optical_bps,
        optical_matching=optical_matching,
        name=name,
    )


def build_fattree(
    k: int,
    *,
    ethernet_bps: float = DEFAULT_ETHERNET_BPS,
    optical_bps: float = DEFAULT_OPTICAL_BPS,
    budget_k: int = 4,
    optical_matching: bool = False,
) -> Topology:
    """Standard k-ary fat-tree with the optical overlay attached to every ToR.

    k pods, each with k/2 edge and k/2 aggregation switches; (k/2)^2 cores;
    k/2 hosts per edge switch. Aggregation switch j of every pod connects to
    cores j*(k/2) .. j*(k/2)+k/2-1.
    """
    if k < 2 or k % 2 != 0:
        raise ParameterError(f"fat-tree k must be even and >= 2, got {k}")
    half = k // 2
    num_hosts = k * half * half
    num_edge = k * half
    num_agg = k * half
    num_core = half * half

    host0 = 0
    edge0 = num_hosts
    agg0 = edge0 + num_edge
    core0 = agg0 + num_agg

    nodes = [Node(host0 + i, NodeKind.HOST) for i in range(num_hosts)]
    nodes += [Node(edge0 + i, NodeKind.EDGE) for i in range(num_edge)]
    nodes += [Node(agg0 + i, NodeKind.AGGREGATION) for i in range(num_agg)]
    nodes += [Node(core0 + i, NodeKind.CORE) for i in range(num_core)]

    links: list[Link] = []
    for pod in range(k):
        for e in range(half):
            edge = edge0 + pod * half + e
            for h in range(half):
                host = host0 + (pod * half + e) * half + h
                links.append(Link(host, edge, ethernet_bps, LinkKind.ETHERNET))
            for a in range(half):
                links.append(Link(edge, agg0 + pod * half + a, ethernet_bps, LinkKind.ETHERNET))
        for a in range(half):
            agg = agg0 + pod * half + a
            for c in range(half):
                links.append(Link(agg, core0 + a * half + c, ethernet_bps, LinkKind.ETHERNET))

    racks = [edge0 + i for i in range(num_edge)]
    return _with_overlay(
        nodes,
        links,
        racks,
        budget_k=budget_k,
        optical_bps=optical_bps,
        optical_matching=optical_matching,
        name=f"fattree_k{k}",
    )


def build_vl2(
    num_tor: int,
    num_agg: int,
    num_int: int,
    hosts_per_tor: int,
    *,
    ethernet_bps: float = DEFAULT_ETHERNET_BPS,
    optical_bps: float = DEFAULT_OPTICAL_BPS,
    budget_k: int = 4,
    optical_matching: bool = False,
) -> Topology:
    """VL2-style Clos: each ToR dual-homes to aggregation switches 2t and
    2t+1 (mod num_agg); every aggregation switch connects to every
    intermediate switch."""
    if num_tor < 1 or num_int < 1 or hosts_per_tor < 1:
        raise ParameterError("vl2 sizes must be positive")
    if num_agg < 2 or num_agg % 2 != 0:
        raise ParameterError(f"num_agg must be even and >= 2, got {num_agg}")

    num_hosts = num_tor * hosts_per_tor
    host0 = 0
    tor0 = num_hosts
    agg0 = tor0 + num_tor
    int0 = agg0 + num_agg

    nodes = [Node(host0 + i, NodeKind.HOST) for i in range(num_hosts)]
    nodes += [Node(tor0 + i, NodeKind.EDGE) for i in range(num_tor)]
    nodes += [Node(agg0 + i, NodeKind.AGGREGATION) for i in range(num_agg)]
    nodes += [Node(int0 + i, NodeKind.CORE) for i in range(num_int)]

    links: list[Link] = []
    for t in range(num_tor):
        tor = tor0 + t
        for h in range(hosts_per_tor):
            links.append(Link(host0 + t * hosts_per_tor + h, tor, ethernet_bps, LinkKind.ETHERNET))
        up = {(2 * t) % num_agg, (2 * t + 1) % num_agg}
        for a in sorted(up):
            links.append(Link(tor, agg0 + a, ethernet_bps, LinkKind.ETHERNET))
    for a in range(num_agg):
        for i in range(num_int):
            links.append(Link(agg0 + a, int0 + i, ethernet_bps, LinkKind.ETHERNET))

    racks = [tor0 + i for i in range(num_tor)]
    return _with_overlay(
        nodes,
        links,
        racks,
        budget_k=budget_k,
        optical_bps=optical_bps,
        optical_matching=optical_matching,
        name=f"vl2_t{num_tor}a{num_agg}i{num_int}",
    )


# -- reconfiguration ---------------------------------------------------------


def set_active_optical(topo: Topology, chosen: Iterable[RackPair]) -> tuple[Topology, bool]:
    """Return a topology where exactly `chosen` optical links are active,
    plus a flag telling whether the active set actually changed."""
    want = {_norm_pair(p) for p in chosen}
    candidates = set(topo.candidate_optical)
    bad = want - candidates
    if bad:
        raise ParameterError(f"pairs not in candidate set: {sorted(bad)}")
    if len(want) > topo.budget_k:
        raise BudgetError(f"{len(want)} links exceed budget {topo.budget_k}")
    if topo.optical_matching:
        used: set[int] = set()
        for i, j in want:
            if i in used or j in used:
                raise ParameterError(f"matching constraint violated at rack pair ({i},{j})")
            used.update((i, j))

    if want == set(topo.active_optical):
        return topo, False

    slots = topo._link_slots  # type: ignore[attr-defined]
    variants = topo._optical_variants  # type: ignore[attr-defined]
    new_links = tuple(
        slot if isinstance(slot, Link) else variants[slot][slot in want] for slot in slots
    )
    # inputs were validated above and everything else is shared with `topo`,
    # so skip the dataclass re-validation (this sits on the oracle's hot path)
    new_topo = object.__new__(Topology)
    for field_name in (
        "nodes",
        "racks",
        "candidate_optical",
        "budget_k",
        "optical_capacity",
        "optical_matching",
        "name",
    ):
        object.__setattr__(new_topo, field_name, getattr(topo, field_name))
    object.__setattr__(new_topo, "links", new_links)
    object.__setattr__(new_topo, "_active_optical", tuple(sorted(want)))
    for derived in ("_rack_of_node", "_link_slots", "_optical_variants"):
        object.__setattr__(new_topo, derived, getattr(topo, derived))
    return new_topo, True


# -- path enumeration --------------------------------------------------------


def _switch_adjacency(topo: Topology) -> dict[int, list[int]]:
    """Adjacency over active links restricted to switches (hosts have degree
    one and can never transit rack-to-rack traffic)."""
    hosts = {n.index for n in topo.nodes if n.kind is NodeKind.HOST}
    adj: dict[int, list[int]] = {}
    for link in topo.links:
        if not link.active or link.a in hosts or link.b in hosts:
            continue
        adj.setdefault(link.a, []).append(link.b)
        adj.setdefault(link.b, []).append(link.a)
    for neighbors in adj.values():
        neighbors.sort()
    return adj


def _all_shortest_paths(adj: dict[int, list[int]], src: int, dst: int) -> list[tuple[int, ...]]:
    """Every minimum-hop path from src to dst, lexicographically sorted."""
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if u == dst:
            continue
        for v in adj.get(u, ()):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    if dst not in dist:
        raise RoutingError(f"no path from node {src} to node {dst}")

    paths: list[tuple[int, ...]] = []
    stack: list[int] = [src]

    def extend(u: int):
        if u == dst:
            paths.append(tuple(stack))
            return
        for v in adj.get(u, ()):
            if dist.get(v) == dist[u] + 1:
                stack.append(v)
                extend(v)
                stack.pop()

    extend(src)
    paths.sort()
    return paths


def ecmp_paths(topo: Topology, src_rack: int, dst_rack: int) -> list[tuple[int, ...]]:
    """All minimum-hop paths between two ToR node ids over active links.

    Paths are node-id sequences in deterministic lexicographic order.
    """
    kinds = {n.index: n.kind for n in topo.nodes}
    for node in (src_rack, dst_rack):
        if kinds.get(node) is not NodeKind.EDGE:
            raise ParameterError(f"node {node} is not an edge switch")
    if src_rack == dst_rack:
        raise ParameterError("src and dst rack must differ")
    return _all_shortest_paths(_switch_adjacency(topo), src_rack, dst_rack)


class RackPathEnumerator:
    """Fast equal-cost path enumeration keyed by the active optical set.

    Rack-to-rack minimum-hop paths decompose into segments between
    consecutive rack visits: either one active optical hop or an
    ethernet-only minimum-hop segment. Ethernet segment variants are
    enumerated once per topology, so changing the optical set only requires
    a tiny shortest-walk search on the rack graph. Results are identical to
    `ecmp_paths` (checked property in the test suite) but far cheaper when
    scanning many candidate sets.
    """

    def __init__(self, topo: Topology):
        base, _ = set_active_optical(topo, ())
        self._racks = base.racks
        adj = _switch_adjacency(base)
        self._eth_paths: dict[RackPair, tuple[tuple[int, ...], ...]] = {}
        self._eth_dist: dict[RackPair, int] = {}
        for i, j in combinations(range(len(base.racks)), 2):
            paths = _all_shortest_paths(adj, base.racks[i], base.racks[j])
            self._eth_paths[(i, j)] = tuple(paths)
            self._eth_dist[(i, j)] = len(paths[0]) - 1
        self._cache: dict[tuple[frozenset, RackPair], tuple[tuple[int, ...], ...]] = {}
        # equal path sets share one tuple object, so callers may key memo
        # tables on identity (objects live as long as the cache does)
        self._intern: dict[tuple, tuple] = {}

    def _eth_segment(self, u: int, v: int) -> tuple[tuple[int, ...], ...]:
        if u < v:
            return self._eth_paths[(u, v)]
        return tuple(tuple(reversed(p)) for p in self._eth_paths[(v, u)])

    def paths(
        self, active: frozenset[RackPair], src_rack: int, dst_rack: int
    ) -> tuple[tuple[int, ...], ...]:
        """Sorted min-hop node paths between rack indices under `active`."""
        key = (active, (src_rack, dst_rack))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        pair = _norm_pair((src_rack, dst_rack))
        fwd = self._cache.get((active, pair))
        if fwd is None:
            fwd = self._enumerate(active, pair)
            fwd = self._intern.setdefault(fwd, fwd)
            self._cache[(active, pair)] = fwd
        if (src_rack, dst_rack) == pair:
            return fwd
        back = tuple(sorted(tuple(reversed(p)) for p in fwd))
        back = self._intern.setdefault(back, back)
        self._cache[key] = back
        return back

    def _enumerate(
        self, active: frozenset[RackPair], pair: RackPair
    ) -> tuple[tuple[int, ...], ...]:
        r = len(self._racks)
        # edges: (neighbor, weight, is_optical); parallel optical/ethernet allowed
        edges: dict[int, list[tuple[int, int, bool]]] = {u: [] for u in range(r)}
        for u in range(r):
            for v in range(r):
                if u != v:
                    edges[u].append((v, self._eth_dist[_norm_pair((u, v))], False))
        for i, j in active:
            edges[i].append((j, 1, True))
            edges[j].append((i, 1, True))

        src, dst = pair
        # distance of every rack to dst (graph is undirected)
        ddist = {dst: 0}
        frontier = [(0, dst)]
        while frontier:
            d, u = heapq.heappop(frontier)
            if d > ddist.get(u, 1 << 30):
                continue
            for v, w, _ in edges[u]:
                nd = d + w
                if nd < ddist.get(v, 1 << 30):
                    ddist[v] = nd
                    heapq.heappush(frontier, (nd, v))

        # enumerate all shortest rack-level walks, expanding each segment
        # into its node-level variants
        node_paths: list[tuple[int, ...]] = []
        walk: list[tuple[int, bool]] = []  # (next rack, via optical)

        def expand():
            prefixes = [(self._racks[src],)]
            u = src
            for v, optical in walk:
                if optical:
                    segs = ((self._racks[u], self._racks[v]),)
                else:
                    segs = self._eth_segment(u, v)
                prefixes = [p + s[1:] for p in prefixes for s in segs]
                u = v
            node_paths.extend(prefixes)

        def search(u: int, remaining: int):
            if u == dst:
                if remaining == 0:
                    expand()
                return
            for v, w, optical in edges[u]:
                if w <= remaining and ddist.get(v, 1 << 30) == remaining - w:
                    walk.append((v, optical))
                    search(v, remaining - w)
                    walk.pop()

        search(src, ddist[src])
        return tuple(sorted(set(node_paths)))


# -- matrices and dumps -------------------------------------------------------


def adjacency_state(topo: Topology) -> np.ndarray:
    """N x N symmetric matrix of active links, each entry the link capacity
    normalized by the largest active capacity (zero diagonal)."""
    n = topo.num_nodes
    matrix = np.zeros((n, n), dtype=np.float64)
    active = topo.active_links()
    if not active:
        return matrix
    cap_max = max(l.capacity for l in active)
    for link in active:
        value = link.capacity / cap_max
        matrix[link.a, link.b] = value
        matrix[link.b, link.a] = value
    return matrix


def ethernet_connected(topo: Topology) -> bool:
    """True when every host reaches every host over ethernet links alone."""
    adj: dict[int, list[int]] = {n.index: [] for n in topo.nodes}
    for link in topo.links:
        if link.kind is LinkKind.ETHERNET:
            adj[link.a].append(link.b)
            adj[link.b].append(link.a)
    hosts = [n.index for n in topo.nodes if n.kind is NodeKind.HOST]
    if not hosts:
        return True
    seen = {hosts[0]}
    queue = deque([hosts[0]])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return all(h in seen for h in hosts)


def topology_dump(topo: Topology) -> str:
    """JSON text with the node and link lists, for debugging."""
    payload = {
        "name": topo.name,
        "budget_k": topo.budget_k,
        "racks": list(topo.racks),
        "nodes": [{"index": n.index, "kind": n.kind.value} for n in topo.nodes],
        "links": [
            {
                "a": l.a,
                "b": l.b,
                "capacity_bps": l.capacity,
                "kind": l.kind.value,
                "active": l.active,
            }
            for l in topo.links
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True)
