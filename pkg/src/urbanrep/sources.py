"""Embedding matrices from every supported source, aligned to region order.

Source tags:
    gurp              pre-trained subgraph encoder output h_r
    gurp+manual       h_r after a manual prompt (pattern override + deletions)
    gurp+learnable    prompted embedding from a tuned prompt model
    transr-node       the region's initial feature vector
    transr-graph-mean mean initial feature over the region subgraph
    random            seeded Gaussian matrix of matching width
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .errors import ConfigError, ParseError
from .graph import UrbanGraph, _data_rows
from .kernel import AttributedGraph, from_subgraph
from .patterns import full_pattern
from .pretrain import ModelState
from .prompt import PromptModel, PromptTuneConfig, PromptTuneResult, TaskWeights, adjust, tune_prompt
from .subgraph import RegionSubgraph, extract, subsample

SOURCES = (
    "gurp",
    "gurp+manual",
    "gurp+learnable",
    "transr-node",
    "transr-graph-mean",
    "random",
)


@dataclass
class EmbeddingMatrix:
    region_ids: list[str]
    matrix: np.ndarray  # (N, d)
    source: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.region_ids):
            raise ValueError("matrix rows must match the region list")
        if not np.isfinite(self.matrix).all():
            raise ValueError("embedding matrix contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, region_id: str) -> np.ndarray:
        return self.matrix[self.region_ids.index(region_id)]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {rid: self.matrix[i] for i, rid in enumerate(self.region_ids)}


def _subsample_seed(seed: int, tag: int, index: int) -> int:
    return int(np.random.default_rng([seed, tag, index]).integers(2**31))


def region_subgraphs(
    graph: UrbanGraph,
    state: ModelState,
    seed: int,
    weights: Optional[TaskWeights] = None,
    node_cap: Optional[int] = "config",
) -> dict[str, RegionSubgraph]:
    """Per-region featurized subgraphs as the encoder consumes them.

    With ``weights`` the manual prompt applies: extraction follows the
    pattern override and the deletion proportions run before capping.
    """
    pattern = full_pattern()
    if weights is not None and weights.pattern is not None:
        pattern = weights.pattern
    cap = state.config.node_cap if node_cap == "config" else node_cap
    features = state.feature_lookup()
    out = {}
    for i, rid in enumerate(graph.regions):
        sub = extract(graph, rid, pattern)
        if weights is not None:
            sub = adjust(sub, weights, seed=_subsample_seed(seed, 0xAD, i))
        if cap is not None:
            sub = subsample(sub, cap, seed=_subsample_seed(seed, 0x5AB, i))
        out[rid] = sub.with_features(features)
    return out


def encode_subgraphs(
    subs: Mapping[str, RegionSubgraph], state: ModelState, regions: list[str]
) -> torch.Tensor:
    from .encoder import subgraph_tensors

    rows = []
    with torch.no_grad():
        for rid in regions:
            order, x, type_idx, src, dst, rel = subgraph_tensors(subs[rid])
            rows.append(state.readout(state.encoder(x, type_idx, src, dst, rel), type_idx))
    return torch.stack(rows)


def base_embeddings(
    graph: UrbanGraph,
    state: ModelState,
    seed: int,
    weights: Optional[TaskWeights] = None,
    source: str = "gurp",
) -> EmbeddingMatrix:
    subs = region_subgraphs(graph, state, seed, weights=weights)
    h = encode_subgraphs(subs, state, graph.regions)
    return EmbeddingMatrix(list(graph.regions), h.numpy(), source, {"seed": seed})


def prompt_inputs(
    graph: UrbanGraph,
    state: ModelState,
    prompt_config: PromptTuneConfig,
    seed: int,
) -> tuple[dict[str, AttributedGraph], dict[str, torch.Tensor]]:
    """Kernel inputs and frozen embeddings shared by tuning and embedding.

    The kernel sees subgraphs capped at the prompt config's node cap with
    their initial feature vectors as attributes; embeddings come from the
    backbone's own pipeline.
    """
    features = state.feature_lookup()
    pattern = full_pattern()
    graphs = {}
    for i, rid in enumerate(graph.regions):
        sub = extract(graph, rid, pattern)
        sub = subsample(sub, prompt_config.node_cap, seed=_subsample_seed(seed, 0x9A0, i))
        graphs[rid] = from_subgraph(sub.with_features(features))
    base = base_embeddings(graph, state, seed)
    embeddings = {rid: torch.tensor(base.matrix[i]) for i, rid in enumerate(base.region_ids)}
    return graphs, embeddings


def tune_prompt_on_graph(
    graph: UrbanGraph,
    labels: Mapping[str, float],
    state: ModelState,
    config: PromptTuneConfig,
    seed: int,
) -> PromptTuneResult:
    """Spec-shaped entry point: frozen backbone in, tuned prompt model out."""
    graphs, embeddings = prompt_inputs(graph, state, config, seed)
    return tune_prompt(graphs, embeddings, labels, config, seed, dim=state.config.dim)


def learnable_embeddings(
    graph: UrbanGraph,
    state: ModelState,
    prompt_model: PromptModel,
    seed: int,
) -> EmbeddingMatrix:
    graphs, embeddings = prompt_inputs(graph, state, prompt_model.config, seed)
    rows = []
    with torch.no_grad():
        for rid in graph.regions:
            h_p = prompt_model.prompt_vector(graphs[rid])
            rows.append(prompt_model.prompted_embedding(h_p, embeddings[rid]))
    return EmbeddingMatrix(
        list(graph.regions), torch.stack(rows).numpy(), "gurp+learnable", {"seed": seed}
    )


def transr_node_embeddings(graph: UrbanGraph, state: ModelState) -> EmbeddingMatrix:
    lookup = state.feature_lookup()
    m = np.stack([lookup[rid] for rid in graph.regions])
    return EmbeddingMatrix(list(graph.regions), m, "transr-node")


def transr_graph_mean_embeddings(graph: UrbanGraph, state: ModelState) -> EmbeddingMatrix:
    lookup = state.feature_lookup()
    pattern = full_pattern()
    rows = []
    for rid in graph.regions:
        sub = extract(graph, rid, pattern)
        rows.append(np.mean([lookup[nid] for nid in sub.node_list()], axis=0))
    return EmbeddingMatrix(list(graph.regions), np.stack(rows), "transr-graph-mean")


def random_embeddings(graph: UrbanGraph, dim: int, seed: int) -> EmbeddingMatrix:
    rng = np.random.default_rng([seed, 0xDEAD])
    m = rng.normal(size=(len(graph.regions), dim))
    return EmbeddingMatrix(list(graph.regions), m, "random", {"seed": seed})


def compute_embeddings(
    graph: UrbanGraph,
    source: str,
    state: Optional[ModelState] = None,
    preset_name: Optional[str] = None,
    prompt_model: Optional[PromptModel] = None,
    seed: int = 0,
    dim: Optional[int] = None,
) -> EmbeddingMatrix:
    """Dispatch on the source tag; model-backed sources need a ModelState."""
    if source == "random":
        if dim is None:
            dim = state.config.dim if state is not None else 144
        return random_embeddings(graph, dim, seed)
    if state is None:
        raise ConfigError(f"source {source!r} needs a model checkpoint")
    if source == "gurp":
        return base_embeddings(graph, state, seed)
    if source == "gurp+manual":
        if preset_name is None:
            raise ConfigError("source 'gurp+manual' needs a preset name")
        from .prompt import preset as load_weights

        weights = load_weights(preset_name)
        emb = base_embeddings(
            graph, state, seed, weights=weights, source=f"gurp+manual({preset_name})"
        )
        return emb
    if source == "gurp+learnable":
        if prompt_model is None:
            raise ConfigError("source 'gurp+learnable' needs a prompt checkpoint")
        return learnable_embeddings(graph, state, prompt_model, seed)
    if source == "transr-node":
        return transr_node_embeddings(graph, state)
    if source == "transr-graph-mean":
        return transr_graph_mean_embeddings(graph, state)
    raise ConfigError(f"unknown embedding source {source!r}; expected one of {SOURCES}")


# -- CSV persistence ----------------------------------------------------------


def save_embeddings(path: str | Path, emb: EmbeddingMatrix, run_hash: Optional[str] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# source={emb.source}\n")
        if run_hash:
            fh.write(f"# config_hash={run_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id"] + [f"e{i}" for i in range(emb.dim)])
        for i, rid in enumerate(emb.region_ids):
            w.writerow([rid] + [repr(float(v)) for v in emb.matrix[i]])


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    path = Path(path)
    source = "unknown"
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# source="):
                source = line.strip().split("=", 1)[1]
            if not line.startswith("#"):
                break
    ids: list[str] = []
    rows: list[list[float]] = []
    width = None
    for line_no, row in _data_rows(path):
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(path, line_no, f"expected {width} columns, got {len(row)}")
        ids.append(row[0].strip())
        rows.append([float(c) for c in row[1:]])
    return EmbeddingMatrix(ids, np.array(rows), source)
