import zlib

import numpy as np
import pytest

from urbanrep.graph import GraphConfig, Node, UrbanGraph
from urbanrep.schema import EdgeType, NodeType
from urbanrep.synth import SynthSpec, generate_city


def make_graph(nodes, edges, flows=(), intervals=24):
    node_map = {nid: Node(nid, t) for nid, t in nodes.items()}
    return UrbanGraph(node_map, edges, flows, GraphConfig(intervals=intervals))


@pytest.fixture
def tiny_graph():
    """r1-r2 NearBy, r1 contains p1, p1 categorized by c1 (schema-valid)."""
    return make_graph(
        {
            "r1": NodeType.REGION,
            "r2": NodeType.REGION,
            "p1": NodeType.POI,
            "c1": NodeType.POI_CATEGORY,
        },
        {
            ("r1", "r2", EdgeType.NEARBY),
            ("r2", "r1", EdgeType.NEARBY),
            ("r1", "p1", EdgeType.CONTAINS),
            ("c1", "p1", EdgeType.CATE_OF),
        },
    )


@pytest.fixture(scope="session")
def small_city():
    spec = SynthSpec(rows=3, cols=3, image_dim=16, total_trips=800)
    return generate_city(spec, seed=7)


@pytest.fixture(scope="session")
def small_city_spec():
    return SynthSpec(rows=3, cols=3, image_dim=16, total_trips=800)


def rng_for(name: str, i: int = 0) -> np.random.Generator:
    return np.random.default_rng([i, zlib.crc32(name.encode())])
