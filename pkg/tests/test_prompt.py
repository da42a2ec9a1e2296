import numpy as np
import pytest
import torch

from urbanrep.errors import ConfigError, PatternError
from urbanrep.kernel import AttributedGraph
from urbanrep.pretrain import PretrainConfig, pretrain
from urbanrep.prompt import (
    PromptGraph,
    PromptModel,
    PromptTuneConfig,
    TaskWeights,
    adjust,
    load_prompt,
    preset,
    prompted_embedding,
    save_prompt,
    tune_prompt,
)
from urbanrep.schema import EdgeType, NodeType
from urbanrep.sources import prompt_inputs, tune_prompt_on_graph
from urbanrep.subgraph import RegionSubgraph
from urbanrep.synth import SynthSpec, generate_city
from urbanrep.transr import TransRConfig, train_transr


def build_subgraph(n_poi=10, with_brand=False, with_road=0, with_junction=0):
    nodes = {"r1": NodeType.REGION, "c1": NodeType.POI_CATEGORY}
    edges = set()
    for i in range(n_poi):
        pid = f"p{i:02d}"
        nodes[pid] = NodeType.POI
        edges.add(("r1", pid, EdgeType.CONTAINS))
        edges.add(("c1", pid, EdgeType.CATE_OF))
    if with_brand:
        nodes["b1"] = NodeType.BRAND
        edges.add(("b1", "p00", EdgeType.BRAND_OF))
    for i in range(with_road):
        rid = f"rd{i:02d}"
        nodes[rid] = NodeType.ROAD
        nodes[f"rc{i:02d}"] = NodeType.ROAD_CATEGORY
        edges.add(("r1", rid, EdgeType.CONTAINS))
        edges.add((f"rc{i:02d}", rid, EdgeType.RCATE_OF))
    for i in range(with_junction):
        jid = f"j{i:02d}"
        nodes[jid] = NodeType.JUNCTION
        nodes[f"jc{i:02d}"] = NodeType.JUNCTION_CATEGORY
        edges.add(("r1", jid, EdgeType.CONTAINS))
        edges.add((f"jc{i:02d}", jid, EdgeType.JCATE_OF))
    return RegionSubgraph("r1", nodes, frozenset(edges))


def test_task_weights_region_must_stay_zero():
    with pytest.raises(ConfigError):
        TaskWeights(weights={NodeType.REGION: 0.5})
    with pytest.raises(ConfigError):
        TaskWeights(weights={NodeType.POI: 1.5})


def test_adjust_zero_weights_identity():
    sub = build_subgraph()
    assert adjust(sub, TaskWeights(), seed=1) is sub


def test_adjust_full_deletion_drops_dependents():
    sub = build_subgraph(n_poi=3, with_brand=True)
    out = adjust(sub, TaskWeights(weights={NodeType.POI: 1.0}), seed=2)
    assert out.nodes_of_type(NodeType.POI) == []
    # category and brand hang off POIs only: disconnected, so gone
    assert out.nodes_of_type(NodeType.BRAND) == []
    assert out.nodes_of_type(NodeType.POI_CATEGORY) == []
    assert set(out.nodes) == {"r1"}


def test_adjust_floor_rule():
    sub = build_subgraph(n_poi=10)
    out = adjust(sub, TaskWeights(weights={NodeType.POI: 0.35}), seed=3)
    assert len(out.nodes_of_type(NodeType.POI)) == 7  # floor(3.5) = 3 deleted


def test_adjust_root_exempt_and_connected():
    sub = build_subgraph(n_poi=4)
    out = adjust(sub, TaskWeights(weights={NodeType.POI: 0.9}), seed=4)
    assert out.root in out.nodes
    for nid in out.nodes:
        assert nid == "r1" or out.nodes[nid] != NodeType.REGION or nid == out.root


def test_adjust_deterministic():
    sub = build_subgraph(n_poi=12)
    w = TaskWeights(weights={NodeType.POI: 0.5})
    a = adjust(sub, w, seed=7)
    b = adjust(sub, w, seed=7)
    assert set(a.nodes) == set(b.nodes)
    assert a.edges == b.edges


def test_preset_p1_excludes_brands():
    w = preset("P1")
    assert w.pattern is not None
    assert NodeType.BRAND not in w.pattern.node_types
    assert EdgeType.BRAND_OF not in w.pattern.edge_types
    assert w.weights == {}


def test_preset_p2_floor_deletion():
    w = preset("P2")
    sub = build_subgraph(n_poi=20, with_road=5, with_junction=5)
    out = adjust(sub, w, seed=5)
    assert len(out.nodes_of_type(NodeType.POI)) == 18  # floor(0.1 * 20) = 2 deleted
    assert len(out.nodes_of_type(NodeType.ROAD)) == 5  # floor(0.1 * 5) = 0
    assert len(out.nodes_of_type(NodeType.JUNCTION)) == 5


def test_preset_p4_pattern_excludes_roads_and_junctions():
    w = preset("P4")
    assert NodeType.ROAD not in w.pattern.node_types
    assert NodeType.JUNCTION not in w.pattern.node_types
    assert w.weights == {NodeType.POI: 0.3}


def test_unknown_preset():
    with pytest.raises(PatternError):
        preset("P9")


# -- prompt model -------------------------------------------------------------


def test_prompt_vector_zero_attributes():
    model = PromptModel(dim=3, config=PromptTuneConfig(sizes=(4,), steps=2), seed=1)
    with torch.no_grad():
        model.prompt_graphs[0].attributes.zero_()
    g = AttributedGraph.of(np.ones((2, 3)), [[0, 1], [1, 0]])
    h = model.prompt_vector(g).detach()
    assert torch.equal(h, torch.zeros(1, dtype=torch.float64))


def test_prompt_vector_identical_graphs_equal_components():
    cfg = PromptTuneConfig(sizes=(5, 5), steps=2)
    model = PromptModel(dim=3, config=cfg, seed=2)
    with torch.no_grad():
        model.prompt_graphs[1].attributes.copy_(model.prompt_graphs[0].attributes)
        model.prompt_graphs[1].logits.copy_(model.prompt_graphs[0].logits)
    g = AttributedGraph.of(np.random.default_rng(0).normal(size=(4, 3)), np.zeros((4, 4)))
    h = model.prompt_vector(g)
    h = h.detach()
    assert float(h[0]) == pytest.approx(float(h[1]), rel=1e-12)


def test_prompt_vector_worked_kernel_example():
    # unit-attribute single-edge region graph against a matching prompt graph
    model = PromptModel(dim=1, config=PromptTuneConfig(sizes=(2,), steps=2), seed=3)
    edge = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    with torch.no_grad():
        model.prompt_graphs[0].attributes.fill_(1.0)
    g = AttributedGraph.of(np.ones((2, 1)), edge.numpy())
    # force the prompt adjacency to the same binary edge for the hand value
    fixed = PromptGraph(2, 1, seed=0, binary_adjacency=edge.numpy())
    with torch.no_grad():
        fixed.attributes.fill_(1.0)
    from urbanrep.kernel import rw_kernel

    with torch.no_grad():
        val = float(rw_kernel(g, fixed.graph(), 2, [1.0, 1.0, 1.0]))
    assert val == pytest.approx(12.0)


def test_prompted_embedding_identity_block():
    model = PromptModel(dim=4, config=PromptTuneConfig(sizes=(3,)), seed=4)
    h_r = torch.tensor([1.0, -2.0, 3.0, 0.5], dtype=torch.float64)
    h_p = torch.tensor([9.9], dtype=torch.float64)
    out = prompted_embedding(h_p, h_r, model)
    # initialization zeroes the prompt block and passes h_r through
    assert torch.equal(out, h_r)


def test_prompted_embedding_hand_case():
    model = PromptModel(dim=1, config=PromptTuneConfig(sizes=(2,)), seed=5)
    with torch.no_grad():
        model.combine.weight.copy_(torch.ones(1, 2, dtype=torch.float64))
        model.combine.bias.zero_()
    out = prompted_embedding(torch.tensor([2.0]), torch.tensor([3.0]), model)
    assert float(out) == pytest.approx(5.0)


def test_prompted_embedding_zero_affine():
    model = PromptModel(dim=2, config=PromptTuneConfig(sizes=(2,)), seed=6)
    with torch.no_grad():
        model.combine.weight.zero_()
        model.combine.bias.zero_()
    out = prompted_embedding(torch.tensor([1.0]), torch.tensor([2.0, 3.0]), model)
    assert torch.equal(out, torch.zeros(2, dtype=torch.float64))


def test_prompted_embedding_dimension_mismatch():
    model = PromptModel(dim=2, config=PromptTuneConfig(sizes=(2,)), seed=6)
    with pytest.raises(ValueError):
        prompted_embedding(torch.tensor([1.0, 2.0]), torch.tensor([2.0, 3.0]), model)


# -- tuning -------------------------------------------------------------------


@pytest.fixture(scope="module")
def tuned_setup():
    spec = SynthSpec(rows=2, cols=4, image_dim=8, total_trips=300, poi_range=(4, 8))
    city = generate_city(spec, seed=31)
    transr = train_transr(city.graph, TransRConfig(dim=12, epochs=20), seed=31)
    cfg = PretrainConfig(dim=12, heads=2, layers=1, epochs=5, lr=0.003)
    state, _ = pretrain(city.graph, cfg, seed=31, transr=transr, images=city.images)
    return city, state


def test_tune_prompt_zero_epochs_is_initialization(tuned_setup):
    city, state = tuned_setup
    cfg = PromptTuneConfig(sizes=(3, 4), steps=2, epochs=0, node_cap=20)
    res1 = tune_prompt_on_graph(city.graph, city.tasks["activity"], state, cfg, seed=2)
    res2 = tune_prompt_on_graph(city.graph, city.tasks["activity"], state, cfg, seed=2)
    for (k1, v1), (k2, v2) in zip(
        sorted(res1.model.state_dict().items()), sorted(res2.model.state_dict().items())
    ):
        assert k1 == k2 and torch.equal(v1, v2)
    assert res1.training_mse == pytest.approx(res1.baseline_mse)


def test_tune_prompt_deterministic_and_frozen_backbone(tuned_setup):
    city, state = tuned_setup
    cfg = PromptTuneConfig(sizes=(3, 4), steps=2, epochs=8, node_cap=20)
    before = state.parameter_hash()
    res1 = tune_prompt_on_graph(city.graph, city.tasks["activity"], state, cfg, seed=5)
    assert state.parameter_hash() == before  # backbone untouched
    res2 = tune_prompt_on_graph(city.graph, city.tasks["activity"], state, cfg, seed=5)
    assert res1.history == res2.history
    for (k1, v1), (k2, v2) in zip(
        sorted(res1.model.state_dict().items()), sorted(res2.model.state_dict().items())
    ):
        assert k1 == k2 and torch.equal(v1, v2), k1


def test_tune_prompt_subsumes_affine_head(tuned_setup):
    city, state = tuned_setup
    cfg = PromptTuneConfig(sizes=(3, 4), steps=2, epochs=40, node_cap=20)
    for task in ("activity", "spending", "infrastructure"):
        res = tune_prompt_on_graph(city.graph, city.tasks[task], state, cfg, seed=7)
        # independent oracle: closed-form affine probe on the frozen embeddings
        graphs, embeddings = prompt_inputs(city.graph, state, cfg, seed=7)
        rids = sorted(city.tasks[task])
        x = np.stack([embeddings[r].numpy() for r in rids])
        y = np.array([city.tasks[task][r] for r in rids])
        design = np.hstack([np.ones((len(rids), 1)), x])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        oracle_mse = float(((design @ coef - y) ** 2).mean())
        assert res.training_mse <= oracle_mse + 1e-9, task
        assert res.baseline_mse == pytest.approx(oracle_mse, rel=1e-6, abs=1e-9)


def test_tune_prompt_empty_task_rejected(tuned_setup):
    city, state = tuned_setup
    cfg = PromptTuneConfig(sizes=(3,), epochs=1, node_cap=10)
    with pytest.raises(ConfigError):
        tune_prompt_on_graph(city.graph, {}, state, cfg, seed=1)


def test_prompt_checkpoint_round_trip(tuned_setup, tmp_path):
    city, state = tuned_setup
    cfg = PromptTuneConfig(sizes=(3, 4), steps=2, epochs=3, node_cap=20)
    res = tune_prompt_on_graph(city.graph, city.tasks["activity"], state, cfg, seed=5)
    save_prompt(res.model, tmp_path / "p.ckpt", extra_meta={"task": "activity"})
    loaded = load_prompt(tmp_path / "p.ckpt")
    assert loaded.config.sizes == (3, 4)
    g = AttributedGraph.of(np.ones((3, 12)), np.zeros((3, 3)))
    a = res.model.prompt_vector(g)
    b = loaded.prompt_vector(g)
    assert torch.allclose(a, b, atol=1e-6)  # float32 round trip
