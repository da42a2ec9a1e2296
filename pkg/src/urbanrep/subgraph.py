"""Region-induced subgraph extraction, featurization and subsampling.

Extraction walks outward from a region node through edges in either
direction, keeping nodes/edges whose types the pattern allows, stopping at
termination-type nodes (included, never expanded) and never going past two
hops from the root. Symmetric edge types are stored once in canonical
direction, so the NearBy pair counts as a single subgraph edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, PatternError, SchemaError, UnknownNodeError
from .graph import Edge, UrbanGraph
from .patterns import GraphPattern
from .schema import EdgeType, NODE_TYPES, NodeType, SYMMETRIC_EDGE_TYPES


def canonical_edge(src: str, dst: str, et: EdgeType) -> Edge:
    if et in SYMMETRIC_EDGE_TYPES and dst < src:
        return (dst, src, et)
    return (src, dst, et)


@dataclass(frozen=True)
class RegionSubgraph:
    root: str
    nodes: dict[str, NodeType]  # id -> type
    edges: frozenset[Edge]
    features: Optional[dict[str, np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        assert self.root in self.nodes

    @property
    def size(self) -> int:
        return len(self.nodes)

    def node_list(self) -> list[str]:
        return sorted(self.nodes)

    def nodes_of_type(self, t: NodeType) -> list[str]:
        return sorted(nid for nid, nt in self.nodes.items() if nt == t)

    def with_features(self, lookup: Mapping[str, np.ndarray]) -> "RegionSubgraph":
        feats = {nid: np.asarray(lookup[nid], dtype=np.float64) for nid in self.nodes}
        return replace(self, features=feats)

    def adjacency_matrix(self) -> np.ndarray:
        """Symmetric binary adjacency over node_list() order (direction ignored)."""
        order = {nid: i for i, nid in enumerate(self.node_list())}
        a = np.zeros((len(order), len(order)), dtype=np.float64)
        for src, dst, _ in self.edges:
            i, j = order[src], order[dst]
            if i != j:
                a[i, j] = 1.0
                a[j, i] = 1.0
        return a

    def feature_matrix(self) -> np.ndarray:
        if self.features is None:
            raise ValueError("subgraph has no features attached")
        return np.stack([self.features[nid] for nid in self.node_list()])


def extract(graph: UrbanGraph, region: str, pattern: GraphPattern) -> RegionSubgraph:
    """Two-hop, pattern-filtered subgraph rooted at a region node."""
    if region not in graph.nodes:
        raise UnknownNodeError(f"unknown region id {region!r}")
    if graph.nodes[region].type != NodeType.REGION:
        raise SchemaError(f"node {region!r} is not a region")
    if not pattern.allows_node(NodeType.REGION):
        raise PatternError("pattern excludes the region node type")

    nodes: dict[str, NodeType] = {region: NodeType.REGION}
    edges: set[Edge] = set()
    frontier = [region]
    for _hop in (1, 2):
        discovered: list[str] = []
        for u in sorted(frontier):
            if nodes[u] in pattern.terminals:
                continue  # terminals are included but never expanded
            for v, et, outgoing in graph.incident(u):
                if not pattern.allows_edge(et):
                    continue
                vt = graph.nodes[v].type
                if not pattern.allows_node(vt):
                    continue
                if v not in nodes:
                    nodes[v] = vt
                    discovered.append(v)
                edges.add(canonical_edge(u, v, et) if outgoing else canonical_edge(v, u, et))
        frontier = discovered
    return RegionSubgraph(root=region, nodes=nodes, edges=frozenset(edges))


def _connected_to_root(
    root: str, nodes: set[str], edges: set[Edge]
) -> tuple[set[str], set[Edge]]:
    adj: dict[str, set[str]] = {n: set() for n in nodes}
    for src, dst, _ in edges:
        if src in adj and dst in adj:
            adj[src].add(dst)
            adj[dst].add(src)
    seen = {root}
    stack = [root]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    kept_edges = {e for e in edges if e[0] in seen and e[1] in seen}
    return seen, kept_edges


def subsample(sub: RegionSubgraph, cap: int, seed: int) -> RegionSubgraph:
    """Cap subgraph size with a type-stratified uniform sample around the root.

    The cap is split across node types proportionally to their frequencies
    (remainder slots go to the largest types); the root always survives.
    Dangling edges and nodes cut off from the root are removed afterwards,
    so the result may be smaller than the cap.
    """
    if cap < 1:
        raise ConfigError(f"subsample cap must be >= 1, got {cap}")
    if sub.size <= cap:
        return sub

    rng = np.random.default_rng(seed)
    groups = {t: sub.nodes_of_type(t) for t in NODE_TYPES if sub.nodes_of_type(t)}
    total = sub.size
    quota = {t: (cap * len(g)) // total for t, g in groups.items()}
    if NodeType.REGION in groups:
        quota[NodeType.REGION] = max(quota[NodeType.REGION], 1)
    while sum(quota.values()) > cap:
        # trim overshoot (can only come from forcing the region slot)
        donor = max(
            (t for t in groups if quota[t] > (1 if t == NodeType.REGION else 0)),
            key=lambda t: (quota[t], len(groups[t])),
        )
        quota[donor] -= 1
    remainder = cap - sum(quota.values())
    by_size = sorted(groups, key=lambda t: (-len(groups[t]), t.value))
    while remainder > 0:
        progressed = False
        for t in by_size:
            if remainder == 0:
                break
            if quota[t] < len(groups[t]):
                quota[t] += 1
                remainder -= 1
                progressed = True
        if not progressed:
            break

    keep: set[str] = set()
    for t in NODE_TYPES:
        if t not in groups:
            continue
        pool = groups[t]
        k = min(quota[t], len(pool))
        if t == NodeType.REGION:
            others = [n for n in pool if n != sub.root]
            chosen = list(rng.choice(others, size=k - 1, replace=False)) if k > 1 else []
            keep.update([sub.root, *chosen])
        elif k > 0:
            keep.update(rng.choice(pool, size=k, replace=False))

    kept_edges = {e for e in sub.edges if e[0] in keep and e[1] in keep}
    connected, kept_edges = _connected_to_root(sub.root, keep, kept_edges)
    nodes = {nid: sub.nodes[nid] for nid in connected}
    feats = None
    if sub.features is not None:
        feats = {nid: sub.features[nid] for nid in connected}
    return RegionSubgraph(root=sub.root, nodes=nodes, edges=frozenset(kept_edges), features=feats)
