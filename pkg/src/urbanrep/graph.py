"""The heterogeneous urban region graph: construction, I/O, validation, queries.

Graphs are immutable after construction. NearBy adjacency is kept as a pair
of directed edges; loaders symmetrize a single direction automatically.
The region list is the lexicographically sorted list of region node ids,
which fixes a deterministic region order for everything downstream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .errors import ParseError, ReferentialError, SchemaError, UnknownNodeError
from .schema import (
    CATEGORY_EDGE_OF,
    CONTAINED_TYPES,
    EDGE_SIGNATURES,
    EdgeType,
    NodeType,
    SYMMETRIC_EDGE_TYPES,
    edge_signature_ok,
    edge_type,
    node_type,
)

Edge = tuple[str, str, EdgeType]


@dataclass(frozen=True)
class Node:
    id: str
    type: NodeType
    label: str = ""
    position: Optional[tuple[float, float]] = None  # (lon, lat) degrees


@dataclass(frozen=True, order=True)
class FlowRecord:
    origin: str
    destination: str
    interval: int
    trips: int


@dataclass(frozen=True)
class GraphConfig:
    intervals: int = 24


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    subjects: tuple[str, ...] = ()


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, message: str, *subjects: str) -> None:
        self.violations.append(Violation(code, message, tuple(subjects)))

    def __str__(self) -> str:
        if self.ok:
            return "valid: no violations"
        lines = [f"{len(self.violations)} violation(s):"]
        lines += [f"  [{v.code}] {v.message}" for v in self.violations]
        return "\n".join(lines)


class UrbanGraph:
    """Typed heterogeneous multigraph over regions, POIs, roads and junctions."""

    def __init__(
        self,
        nodes: Mapping[str, Node] | Iterable[Node],
        edges: Iterable[Edge],
        flows: Iterable[FlowRecord] = (),
        config: GraphConfig = GraphConfig(),
    ):
        if isinstance(nodes, Mapping):
            self.nodes: dict[str, Node] = dict(nodes)
        else:
            self.nodes = {n.id: n for n in nodes}
        self.edges: frozenset[Edge] = frozenset(
            (src, dst, EdgeType(et)) for src, dst, et in edges
        )
        self.flows: tuple[FlowRecord, ...] = tuple(flows)
        self.config = config
        self.regions: list[str] = sorted(
            nid for nid, n in self.nodes.items() if n.type == NodeType.REGION
        )
        adj: dict[str, list[tuple[str, EdgeType, bool]]] = {nid: [] for nid in self.nodes}
        for src, dst, et in self.edges:
            if src in adj:
                adj[src].append((dst, et, True))
            if dst in adj and src != dst:
                adj[dst].append((src, et, False))
        # fixed incidence order makes every traversal deterministic
        self._adj = {nid: tuple(sorted(inc)) for nid, inc in adj.items()}

    # -- queries ---------------------------------------------------------

    def incident(self, node: str) -> tuple[tuple[str, EdgeType, bool], ...]:
        """(neighbor, edge type, outgoing?) triples for one-hop edges, sorted."""
        try:
            return self._adj[node]
        except KeyError:
            raise UnknownNodeError(f"unknown node id {node!r}") from None

    def neighbors(
        self, node: str, edge_types: Optional[Iterable[EdgeType]] = None
    ) -> list[str]:
        """All nodes one edge away (either direction), sorted by id.

        An empty or missing ``edge_types`` filter means "no filter".
        """
        allowed = frozenset(edge_types or ())
        out = {
            other
            for other, et, _ in self.incident(node)
            if not allowed or et in allowed
        }
        return sorted(out)

    def has_edge(self, src: str, dst: str, et: EdgeType) -> bool:
        return (src, dst, et) in self.edges

    def node_ids_of_type(self, t: NodeType) -> list[str]:
        return sorted(nid for nid, n in self.nodes.items() if n.type == t)

    def region_index(self) -> dict[str, int]:
        return {rid: i for i, rid in enumerate(self.regions)}


def neighbors(
    graph: UrbanGraph, node: str, edge_types: Optional[Iterable[EdgeType]] = None
) -> list[str]:
    return graph.neighbors(node, edge_types)


# -- validation -----------------------------------------------------------


def validate(graph: UrbanGraph) -> ValidationReport:
    """Collect every schema-invariant violation; an empty report means valid."""
    report = ValidationReport()
    nodes = graph.nodes

    for src, dst, et in sorted(graph.edges):
        if src not in nodes:
            report.add("unknown-node", f"edge ({src},{dst},{et}) references unknown source", src)
            continue
        if dst not in nodes:
            report.add("unknown-node", f"edge ({src},{dst},{et}) references unknown target", dst)
            continue
        if not edge_signature_ok(nodes[src].type, nodes[dst].type, et):
            report.add(
                "signature",
                f"edge ({src},{dst},{et}) violates signature "
                f"{nodes[src].type}->{nodes[dst].type}",
                src,
                dst,
            )
        if et in SYMMETRIC_EDGE_TYPES and (dst, src, et) not in graph.edges:
            report.add(
                "asymmetric",
                f"{et} edge ({src},{dst}) lacks the reverse edge ({dst},{src})",
                src,
                dst,
            )

    for nid in sorted(nodes):
        n = nodes[nid]
        if n.type not in CONTAINED_TYPES:
            continue
        parents = [s for s, d, et in graph.edges if d == nid and et == EdgeType.CONTAINS]
        if len(parents) != 1:
            report.add(
                "contains-count",
                f"{n.type} {nid} has {len(parents)} Contains parents (need exactly 1)",
                nid,
                *sorted(parents),
            )
        cat_et = CATEGORY_EDGE_OF[n.type]
        cats = [s for s, d, et in graph.edges if d == nid and et == cat_et]
        if len(cats) != 1:
            report.add(
                "category-count",
                f"{n.type} {nid} has {len(cats)} {cat_et} edges (need exactly 1)",
                nid,
                *sorted(cats),
            )

    if not graph.regions:
        report.add("no-regions", "graph has no region nodes")

    region_set = set(graph.regions)
    for i, f in enumerate(graph.flows):
        if f.origin not in region_set or f.destination not in region_set:
            report.add(
                "flow-endpoint",
                f"flow #{i} endpoints ({f.origin},{f.destination}) must be regions",
                f.origin,
                f.destination,
            )
        if not (0 <= f.interval < graph.config.intervals):
            report.add(
                "flow-interval",
                f"flow #{i} interval {f.interval} outside [0,{graph.config.intervals})",
            )
        if f.trips < 0:
            report.add("flow-trips", f"flow #{i} has negative trip count {f.trips}")
    return report


# -- CSV I/O ---------------------------------------------------------------


def _data_rows(path: Path):
    """Yield (line_no, row) from a CSV with a header row; '#' lines skipped."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header_seen = False
        for line_no, row in enumerate(reader, start=1):
            if not row or (row[0].startswith("#") and not header_seen):
                continue
            if not header_seen:
                header_seen = True  # header row itself
                continue
            if row and row[0].startswith("#"):
                continue
            yield line_no, row
    if not header_seen:
        raise ParseError(path, 1, "missing header row")


def load_graph(
    nodes_file: str | Path,
    edges_file: str | Path,
    flows_file: Optional[str | Path] = None,
    config: GraphConfig = GraphConfig(),
    strict: bool = True,
) -> UrbanGraph:
    """Parse CSV files into a schema-valid urban graph.

    A NearBy edge present in only one direction is symmetrized. Any other
    invariant violation raises: malformed rows raise ParseError with the
    line number, unknown ids raise ReferentialError, schema violations
    raise SchemaError. With ``strict=False`` semantic violations are left
    for validate() to report and only unreadable rows raise.
    """
    nodes_file, edges_file = Path(nodes_file), Path(edges_file)
    nodes: dict[str, Node] = {}
    for line_no, row in _data_rows(nodes_file):
        if len(row) != 5:
            raise ParseError(nodes_file, line_no, f"expected 5 columns, got {len(row)}")
        nid, t, label, lon, lat = (c.strip() for c in row)
        if not nid:
            raise ParseError(nodes_file, line_no, "empty node id")
        if nid in nodes:
            raise ParseError(nodes_file, line_no, f"duplicate node id {nid!r}")
        try:
            nt = node_type(t)
        except ValueError as exc:
            raise ParseError(nodes_file, line_no, str(exc)) from None
        if (lon == "") != (lat == ""):
            raise ParseError(nodes_file, line_no, "lon/lat must both be set or both blank")
        pos = None
        if lon != "":
            try:
                pos = (float(lon), float(lat))
            except ValueError:
                raise ParseError(nodes_file, line_no, f"bad lon/lat {lon!r},{lat!r}") from None
        nodes[nid] = Node(nid, nt, label, pos)

    edges: set[Edge] = set()
    for line_no, row in _data_rows(edges_file):
        if len(row) != 3:
            raise ParseError(edges_file, line_no, f"expected 3 columns, got {len(row)}")
        src, dst, t = (c.strip() for c in row)
        try:
            et = edge_type(t)
        except ValueError as exc:
            raise ParseError(edges_file, line_no, str(exc)) from None
        if strict:
            for endpoint in (src, dst):
                if endpoint not in nodes:
                    raise ReferentialError(
                        f"{edges_file}:{line_no}: edge references unknown node {endpoint!r}"
                    )
            if not edge_signature_ok(nodes[src].type, nodes[dst].type, et):
                raise SchemaError(
                    f"{edges_file}:{line_no}: edge ({src},{dst},{et}) violates the "
                    f"{et} signature ({nodes[src].type} -> {nodes[dst].type})"
                )
        edges.add((src, dst, et))

    # symmetrize NearBy and friends
    for src, dst, et in list(edges):
        if et in SYMMETRIC_EDGE_TYPES:
            edges.add((dst, src, et))

    flows: list[FlowRecord] = []
    if flows_file is not None:
        flows_file = Path(flows_file)
        for line_no, row in _data_rows(flows_file):
            if len(row) != 4:
                raise ParseError(flows_file, line_no, f"expected 4 columns, got {len(row)}")
            origin, destination, interval_s, trips_s = (c.strip() for c in row)
            if strict:
                for endpoint in (origin, destination):
                    if endpoint not in nodes:
                        raise ReferentialError(
                            f"{flows_file}:{line_no}: flow references unknown node {endpoint!r}"
                        )
                    if nodes[endpoint].type != NodeType.REGION:
                        raise SchemaError(
                            f"{flows_file}:{line_no}: flow endpoint {endpoint!r} is not a region"
                        )
            try:
                interval, trips = int(interval_s), int(trips_s)
            except ValueError:
                raise ParseError(
                    flows_file, line_no, f"bad interval/trips {interval_s!r},{trips_s!r}"
                ) from None
            if not (0 <= interval < config.intervals):
                raise ParseError(
                    flows_file,
                    line_no,
                    f"interval {interval} outside [0,{config.intervals})",
                )
            if trips < 0:
                raise ParseError(flows_file, line_no, f"negative trips {trips}")
            flows.append(FlowRecord(origin, destination, interval, trips))

    graph = UrbanGraph(nodes, edges, flows, config)
    if strict:
        report = validate(graph)
        if not report.ok:
            raise SchemaError(f"loaded graph violates schema invariants:\n{report}")
    return graph


def _fmt(x: float) -> str:
    return repr(float(x))


def save_graph(
    graph: UrbanGraph,
    nodes_file: str | Path,
    edges_file: str | Path,
    flows_file: Optional[str | Path] = None,
    header_comment: Optional[str] = None,
) -> None:
    """Write the graph back out in the CSV formats load_graph accepts."""

    def _open(path):
        return open(path, "w", newline="", encoding="utf-8")

    with _open(nodes_file) as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w.writerow(["id", "type", "label", "lon", "lat"])
        for nid in sorted(graph.nodes):
            n = graph.nodes[nid]
            lon, lat = ("", "") if n.position is None else (_fmt(n.position[0]), _fmt(n.position[1]))
            w.writerow([n.id, n.type.value, n.label, lon, lat])

    with _open(edges_file) as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w.writerow(["src", "dst", "type"])
        for src, dst, et in sorted(graph.edges, key=lambda e: (e[0], e[1], e[2].value)):
            w.writerow([src, dst, et.value])

    if flows_file is not None:
        with _open(flows_file) as fh:
            w = csv.writer(fh, lineterminator="\n")
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w.writerow(["origin", "destination", "interval", "trips"])
            for f in sorted(graph.flows, key=lambda f: (f.origin, f.destination, f.interval)):
                w.writerow([f.origin, f.destination, f.interval, f.trips])


# -- auxiliary tables -------------------------------------------------------


def load_image_features(path: str | Path) -> dict[str, list[list[float]]]:
    """Read ``region_id,f0,...,f{D-1}`` rows; multiple rows per region allowed."""
    path = Path(path)
    out: dict[str, list[list[float]]] = {}
    width = None
    for line_no, row in _data_rows(path):
        if len(row) < 2:
            raise ParseError(path, line_no, "expected region_id plus at least one feature")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(path, line_no, f"expected {width} columns, got {len(row)}")
        rid = row[0].strip()
        try:
            feats = [float(c) for c in row[1:]]
        except ValueError:
            raise ParseError(path, line_no, "non-numeric feature value") from None
        out.setdefault(rid, []).append(feats)
    return out


def load_task(path: str | Path) -> dict[str, float]:
    """Read ``region_id,value`` rows into a label map."""
    path = Path(path)
    out: dict[str, float] = {}
    for line_no, row in _data_rows(path):
        if len(row) != 2:
            raise ParseError(path, line_no, f"expected 2 columns, got {len(row)}")
        rid = row[0].strip()
        if rid in out:
            raise ParseError(path, line_no, f"duplicate region id {rid!r}")
        try:
            out[rid] = float(row[1])
        except ValueError:
            raise ParseError(path, line_no, f"bad value {row[1]!r}") from None
    return out


def save_task(path: str | Path, labels: Mapping[str, float], header_comment: Optional[str] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w.writerow(["region_id", "value"])
        for rid in sorted(labels):
            w.writerow([rid, _fmt(labels[rid])])
