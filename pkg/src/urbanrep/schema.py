"""Node/edge type enumerations and the fixed urban-graph schema.

The schema has exactly 8 node types and 6 edge types. Every edge type has a
fixed (source type, target type) signature; NearBy is the only symmetric
relation and is stored as a pair of directed edges.
"""

from __future__ import annotations

from enum import Enum


class NodeType(str, Enum):
    REGION = "region"
    POI = "poi"
    POI_CATEGORY = "poi_category"
    BRAND = "brand"
    ROAD = "road"
    ROAD_CATEGORY = "road_category"
    JUNCTION = "junction"
    JUNCTION_CATEGORY = "junction_category"

    def __str__(self) -> str:  # keep CSV output free of the enum prefix
        return self.value


class EdgeType(str, Enum):
    NEARBY = "NearBy"
    CONTAINS = "Contains"
    BRAND_OF = "BrandOf"
    CATE_OF = "CateOf"
    JCATE_OF = "JCateOf"
    RCATE_OF = "RCateOf"

    def __str__(self) -> str:
        return self.value


#: Canonical node-type order used for readout slots and checkpoint layout.
NODE_TYPES: tuple[NodeType, ...] = tuple(NodeType)

#: Canonical edge-type order.
EDGE_TYPES: tuple[EdgeType, ...] = tuple(EdgeType)

NODE_TYPE_INDEX = {t: i for i, t in enumerate(NODE_TYPES)}
EDGE_TYPE_INDEX = {t: i for i, t in enumerate(EDGE_TYPES)}

#: Edge signatures: edge type -> (source type, allowed target types).
EDGE_SIGNATURES: dict[EdgeType, tuple[NodeType, frozenset[NodeType]]] = {
    EdgeType.NEARBY: (NodeType.REGION, frozenset({NodeType.REGION})),
    EdgeType.CONTAINS: (
        NodeType.REGION,
        frozenset({NodeType.POI, NodeType.ROAD, NodeType.JUNCTION}),
    ),
    EdgeType.BRAND_OF: (NodeType.BRAND, frozenset({NodeType.POI})),
    EdgeType.CATE_OF: (NodeType.POI_CATEGORY, frozenset({NodeType.POI})),
    EdgeType.JCATE_OF: (NodeType.JUNCTION_CATEGORY, frozenset({NodeType.JUNCTION})),
    EdgeType.RCATE_OF: (NodeType.ROAD_CATEGORY, frozenset({NodeType.ROAD})),
}

#: Symmetric edge types (stored as two directed edges).
SYMMETRIC_EDGE_TYPES = frozenset({EdgeType.NEARBY})

#: The category relation each spatial entity type must carry exactly once.
CATEGORY_EDGE_OF = {
    NodeType.POI: EdgeType.CATE_OF,
    NodeType.ROAD: EdgeType.RCATE_OF,
    NodeType.JUNCTION: EdgeType.JCATE_OF,
}

#: Entity types that require exactly one Contains parent.
CONTAINED_TYPES = frozenset(CATEGORY_EDGE_OF)

#: Leaf types with no outgoing expansion under the schema; the default
#: termination set for subgraph extraction.
LEAF_TYPES = frozenset(
    {
        NodeType.POI_CATEGORY,
        NodeType.BRAND,
        NodeType.ROAD_CATEGORY,
        NodeType.JUNCTION_CATEGORY,
    }
)


def node_type(value: str) -> NodeType:
    try:
        return NodeType(value)
    except ValueError:
        raise ValueError(f"unknown node type {value!r}") from None


def edge_type(value: str) -> EdgeType:
    try:
        return EdgeType(value)
    except ValueError:
        raise ValueError(f"unknown edge type {value!r}") from None


def edge_signature_ok(src_type: NodeType, dst_type: NodeType, etype: EdgeType) -> bool:
    expected_src, expected_dst = EDGE_SIGNATURES[etype]
    return src_type == expected_src and dst_type in expected_dst
