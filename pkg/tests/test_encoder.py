import numpy as np
import pytest
import torch

from urbanrep.encoder import (
    SELF_LOOP_INDEX,
    SubgraphEncoder,
    TypeSumReadout,
    encode_nodes,
    encode_region,
    subgraph_tensors,
)
from urbanrep.patterns import full_pattern
from urbanrep.schema import EdgeType, NODE_TYPE_INDEX, NODE_TYPES, NodeType
from urbanrep.subgraph import RegionSubgraph, extract

from conftest import make_graph
from oracles import check_gradients


def star_subgraph(d=8, n_leaves=2, seed=0):
    rng = np.random.default_rng(seed)
    nodes = {"r1": NodeType.REGION}
    edges = set()
    for i in range(n_leaves):
        nodes[f"p{i}"] = NodeType.POI
        edges.add(("r1", f"p{i}", EdgeType.CONTAINS))
    feats = {nid: rng.normal(size=d) for nid in nodes}
    return RegionSubgraph("r1", nodes, frozenset(edges), feats)


def test_zero_layer_encoder_is_identity():
    sub = star_subgraph()
    enc = SubgraphEncoder(dim=8, heads=2, layers=0, seed=1)
    out = encode_nodes(sub, enc)
    for nid in sub.nodes:
        assert np.allclose(out[nid].detach().numpy(), sub.features[nid])


def test_permutation_invariance_bit_identical():
    sub = star_subgraph(n_leaves=4, seed=3)
    enc = SubgraphEncoder(dim=8, heads=2, layers=2, seed=2)
    out1 = encode_nodes(sub, enc)

    # same subgraph with shuffled dict/edge insertion order
    nodes2 = dict(reversed(list(sub.nodes.items())))
    feats2 = dict(reversed(list(sub.features.items())))
    edges2 = frozenset(sorted(sub.edges, reverse=True))
    sub2 = RegionSubgraph(sub.root, nodes2, edges2, feats2)
    out2 = encode_nodes(sub2, enc)
    for nid in sub.nodes:
        assert torch.equal(out1[nid], out2[nid])


def test_messages_include_self_loops_and_symmetry():
    g = make_graph(
        {"r1": NodeType.REGION, "r2": NodeType.REGION},
        {("r1", "r2", EdgeType.NEARBY), ("r2", "r1", EdgeType.NEARBY)},
    )
    sub = extract(g, "r1", full_pattern())
    sub = sub.with_features({nid: np.ones(4) for nid in sub.nodes})
    order, x, type_idx, src, dst, rel = subgraph_tensors(sub)
    msgs = sorted(zip(dst.tolist(), src.tolist(), rel.tolist()))
    # two self loops plus both NearBy directions
    assert (0, 0, SELF_LOOP_INDEX) in msgs
    assert (1, 1, SELF_LOOP_INDEX) in msgs
    nearby = [m for m in msgs if m[2] != SELF_LOOP_INDEX]
    assert len(nearby) == 2 and {(m[0], m[1]) for m in nearby} == {(0, 1), (1, 0)}


def test_directed_edges_pass_messages_one_way():
    sub = star_subgraph(n_leaves=1)
    order, x, type_idx, src, dst, rel = subgraph_tensors(sub)
    flows = {(d, s) for d, s, r in zip(dst.tolist(), src.tolist(), rel.tolist()) if r != SELF_LOOP_INDEX}
    p_idx, r_idx = order.index("p0"), order.index("r1")
    assert (p_idx, r_idx) in flows  # region -> poi message
    assert (r_idx, p_idx) not in flows  # nothing back


def test_isolated_node_residual_path():
    d = 6
    rng = np.random.default_rng(4)
    feats = {"r1": rng.normal(size=d)}
    sub = RegionSubgraph("r1", {"r1": NodeType.REGION}, frozenset(), feats)
    enc = SubgraphEncoder(dim=d, heads=2, layers=1, seed=5)
    out = encode_nodes(sub, enc)["r1"]

    # manual single-node path: self-attention weight is 1, message is
    # value(x) W_msg[self] per head, then output map, residual, GELU
    layer = enc.layers[0]
    x = torch.tensor(feats["r1"])
    t = NODE_TYPE_INDEX[NodeType.REGION]
    v = layer.value[t](x).reshape(layer.heads, layer.dk)
    msg = torch.einsum("hd,hdf->hf", v, layer.msg[SELF_LOOP_INDEX]).reshape(-1)
    expected = torch.nn.functional.gelu(x + layer.output[t](msg))
    assert torch.allclose(out, expected, atol=1e-12)


@pytest.mark.parametrize("i", range(4))
def test_encoder_gradients_match_finite_differences(i):
    torch.manual_seed(0)
    d, heads = 4, 2
    sub = star_subgraph(d=d, n_leaves=2, seed=20 + i)
    enc = SubgraphEncoder(dim=d, heads=heads, layers=1, seed=30 + i)
    readout = TypeSumReadout(dim=d, seed=31 + i)
    order, x, type_idx, src, dst, rel = subgraph_tensors(sub)
    probe = torch.tensor(np.random.default_rng(40 + i).normal(size=d))

    named = {"x": x}
    named.update({f"enc.{k}": v for k, v in enc.named_parameters()})
    named.update({f"ro.{k}": v for k, v in readout.named_parameters()})

    def scalar(params):
        enc_params = {k[len("enc."):]: v for k, v in params.items() if k.startswith("enc.")}
        ro_params = {k[len("ro."):]: v for k, v in params.items() if k.startswith("ro.")}
        out = torch.func.functional_call(enc, enc_params, (params["x"], type_idx, src, dst, rel))
        h = torch.func.functional_call(readout, ro_params, (out, type_idx))
        return (h * probe).sum()

    check_gradients(scalar, named)


def test_homogeneous_parameters_reduce_to_plain_attention():
    d, heads = 6, 2
    dk = d // heads
    rng = np.random.default_rng(77)
    enc = SubgraphEncoder(dim=d, heads=heads, layers=1, seed=9)
    layer = enc.layers[0]
    # one shared parameter set for every node and edge type
    q_w, k_w, v_w, o_w = (rng.normal(size=(d, d)) for _ in range(4))
    q_b, k_b, v_b, o_b = (rng.normal(size=d) for _ in range(4))
    att = rng.normal(size=(heads, dk, dk))
    msg = rng.normal(size=(heads, dk, dk))
    with torch.no_grad():
        for t in range(len(NODE_TYPES)):
            for ml, w, b in [
                (layer.query, q_w, q_b),
                (layer.key, k_w, k_b),
                (layer.value, v_w, v_b),
                (layer.output, o_w, o_b),
            ]:
                ml[t].weight.copy_(torch.tensor(w))
                ml[t].bias.copy_(torch.tensor(b))
        layer.att.copy_(torch.tensor(att).expand_as(layer.att))
        layer.msg.copy_(torch.tensor(msg).expand_as(layer.msg))

    sub = star_subgraph(d=d, n_leaves=3, seed=12)
    order, x, type_idx, src, dst, rel = subgraph_tensors(sub)
    got = enc(x, type_idx, src, dst, rel)

    # homogeneous reference: same math, no type indirection
    def lin(w, b, v):
        return v @ torch.tensor(w).T + torch.tensor(b)

    q = lin(q_w, q_b, x).reshape(-1, heads, dk)
    k = lin(k_w, k_b, x).reshape(-1, heads, dk)
    v = lin(v_w, v_b, x).reshape(-1, heads, dk)
    att_t = torch.tensor(att)
    msg_t = torch.tensor(msg)
    n = x.shape[0]
    expected = torch.zeros_like(x)
    for node in range(n):
        incoming = [s for s, dd in zip(src.tolist(), dst.tolist()) if dd == node]
        scores = torch.stack(
            [torch.einsum("hd,hdf,hf->h", k[s], att_t, q[node]) / np.sqrt(dk) for s in incoming]
        )
        alpha = torch.softmax(scores, dim=0)
        msgs = torch.stack([torch.einsum("hd,hdf->hf", v[s], msg_t) for s in incoming])
        agg = (alpha.unsqueeze(-1) * msgs).sum(0).reshape(-1)
        expected[node] = torch.nn.functional.gelu(x[node] + lin(o_w, o_b, agg))
    assert torch.allclose(got, expected, atol=1e-10)


# -- readout ------------------------------------------------------------------


def region_slot_identity_readout(d):
    ro = TypeSumReadout(dim=d, seed=0)
    with torch.no_grad():
        ro.linear.weight.zero_()
        ro.linear.bias.zero_()
        col = NODE_TYPE_INDEX[NodeType.REGION] * d
        ro.linear.weight[:, col : col + d] = torch.eye(d, dtype=torch.float64)
    return ro


def test_readout_root_only_identity_affine():
    d = 5
    rng = np.random.default_rng(8)
    feats = {"r1": rng.normal(size=d)}
    sub = RegionSubgraph("r1", {"r1": NodeType.REGION}, frozenset(), feats)
    ro = region_slot_identity_readout(d)
    enc = SubgraphEncoder(dim=d, heads=1, layers=0, seed=0)
    h = encode_region(sub, enc, ro)
    assert np.allclose(h.detach().numpy(), feats["r1"])


def test_readout_sums_within_type():
    d = 4
    ro = TypeSumReadout(dim=d, seed=3)
    e1 = torch.tensor(np.arange(d, dtype=float))
    e2 = torch.tensor(np.ones(d))
    r = torch.tensor(np.full(d, 2.0))
    ti = torch.tensor(
        [NODE_TYPE_INDEX[NodeType.REGION], NODE_TYPE_INDEX[NodeType.POI], NODE_TYPE_INDEX[NodeType.POI]]
    )
    out = ro(torch.stack([r, e1, e2]), ti)
    # manual slot concatenation: POI slot carries e1+e2
    slots = torch.zeros(len(NODE_TYPES), d, dtype=torch.float64)
    slots[NODE_TYPE_INDEX[NodeType.REGION]] = r
    slots[NODE_TYPE_INDEX[NodeType.POI]] = e1 + e2
    expected = ro.linear(slots.reshape(-1))
    assert torch.equal(out, expected)


def test_readout_duplicate_node_doubles_slot():
    d = 4
    ro = TypeSumReadout(dim=d, seed=3)
    e = torch.tensor(np.arange(d, dtype=float))
    r = torch.zeros(d, dtype=torch.float64)
    t_poi = NODE_TYPE_INDEX[NodeType.POI]
    ti1 = torch.tensor([NODE_TYPE_INDEX[NodeType.REGION], t_poi])
    ti2 = torch.tensor([NODE_TYPE_INDEX[NodeType.REGION], t_poi, t_poi])
    once = ro(torch.stack([r, e]), ti1)
    twice = ro(torch.stack([r, e, e]), ti2)
    slots = torch.zeros(len(NODE_TYPES), d, dtype=torch.float64)
    slots[t_poi] = 2 * e
    assert torch.allclose(twice, ro.linear(slots.reshape(-1)))
    assert not torch.allclose(once, twice)


def test_readout_depends_only_on_type_sums():
    d = 3
    ro = TypeSumReadout(dim=d, seed=1)
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(2, d))
    t_poi = NODE_TYPE_INDEX[NodeType.POI]
    ti = torch.tensor([t_poi, t_poi])
    out1 = ro(torch.tensor(np.stack([a, b])), ti)
    # redistribute the same sum across the two nodes
    out2 = ro(torch.tensor(np.stack([a + b, np.zeros(d)])), ti)
    assert torch.allclose(out1, out2)
