"""Graph patterns: typed filters that govern subgraph extraction.

A pattern is (allowed node types, allowed edge types, termination types).
Termination-type nodes are included when reached but never expanded.
Patterns ship as key-value text files; preset files may also carry
per-type deletion weights for the manually-designed prompt.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import PatternError
from .schema import EDGE_TYPES, LEAF_TYPES, EdgeType, NODE_TYPES, NodeType

PRESET_NAMES = ("full", "P1", "P2", "P3", "P4")


@dataclass(frozen=True)
class GraphPattern:
    node_types: frozenset[NodeType]
    edge_types: frozenset[EdgeType]
    terminals: frozenset[NodeType]

    def __post_init__(self):
        if NodeType.REGION not in self.node_types:
            raise PatternError("pattern must allow the region node type")
        if not self.terminals <= self.node_types:
            extra = {t.value for t in self.terminals - self.node_types}
            raise PatternError(f"terminals {sorted(extra)} not in allowed node types")

    def allows_node(self, t: NodeType) -> bool:
        return t in self.node_types

    def allows_edge(self, t: EdgeType) -> bool:
        return t in self.edge_types


def full_pattern() -> GraphPattern:
    """Every node and edge type, terminating at the leaf category/brand types."""
    return GraphPattern(
        node_types=frozenset(NODE_TYPES),
        edge_types=frozenset(EDGE_TYPES),
        terminals=frozenset(LEAF_TYPES),
    )


def make_pattern(
    exclude_node_types: tuple[NodeType, ...] = (),
    exclude_edge_types: tuple[EdgeType, ...] = (),
    terminals: Optional[frozenset[NodeType]] = None,
) -> GraphPattern:
    node_types = frozenset(NODE_TYPES) - frozenset(exclude_node_types)
    if terminals is None:
        terminals = frozenset(LEAF_TYPES) & node_types
    return GraphPattern(
        node_types=node_types,
        edge_types=frozenset(EDGE_TYPES) - frozenset(exclude_edge_types),
        terminals=terminals,
    )


@dataclass(frozen=True)
class PatternDocument:
    """Parsed pattern file: the pattern plus optional per-type deletion weights."""

    name: str
    pattern: GraphPattern
    weights: dict[NodeType, float] = field(default_factory=dict)


def parse_pattern_text(text: str, name: str = "<string>") -> PatternDocument:
    fields: dict[str, str] = {}
    weights: dict[NodeType, float] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise PatternError(f"{name}:{line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("weight."):
            tname = key[len("weight."):]
            try:
                nt = NodeType(tname)
            except ValueError:
                raise PatternError(f"{name}:{line_no}: unknown node type {tname!r}") from None
            try:
                w = float(value)
            except ValueError:
                raise PatternError(f"{name}:{line_no}: bad weight {value!r}") from None
            if not (0.0 <= w <= 1.0):
                raise PatternError(f"{name}:{line_no}: weight {w} outside [0,1]")
            weights[nt] = w
        else:
            fields[key] = value

    def _list(key, ctor):
        if key not in fields:
            raise PatternError(f"{name}: missing required key {key!r}")
        items = [v.strip() for v in fields[key].split(",") if v.strip()]
        out = []
        for item in items:
            try:
                out.append(ctor(item))
            except ValueError:
                raise PatternError(f"{name}: unknown type {item!r} in {key}") from None
        return frozenset(out)

    pattern = GraphPattern(
        node_types=_list("node_types", NodeType),
        edge_types=_list("edge_types", EdgeType),
        terminals=_list("terminals", NodeType),
    )
    return PatternDocument(name=name, pattern=pattern, weights=weights)


def load_pattern_file(path: str | Path) -> PatternDocument:
    path = Path(path)
    return parse_pattern_text(path.read_text(encoding="utf-8"), name=path.stem)


def load_preset(name: str) -> PatternDocument:
    """Load one of the shipped preset documents (full, P1..P4)."""
    if name not in PRESET_NAMES:
        raise PatternError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    text = resources.files(__package__).joinpath(f"presets/{name}.pattern").read_text("utf-8")
    return parse_pattern_text(text, name=name)


def pattern_document_text(doc: PatternDocument) -> str:
    def _names(values):
        order = NODE_TYPES if values and isinstance(next(iter(values)), NodeType) else EDGE_TYPES
        return ", ".join(t.value for t in order if t in values)

    lines = [
        f"# pattern: {doc.name}",
        f"node_types = {_names(doc.pattern.node_types)}",
        f"edge_types = {_names(doc.pattern.edge_types)}",
        f"terminals = {_names(doc.pattern.terminals)}",
    ]
    for nt in NODE_TYPES:
        if nt in doc.weights:
            lines.append(f"weight.{nt.value} = {doc.weights[nt]!r}")
    return "\n".join(lines) + "\n"
