"""Multi-view self-supervised pre-training of region embeddings.

The joint objective is ``L = L_sp + L_img + L_flow + mu * L_fuse``:
spatial triplet loss over NearBy adjacency, contrastive alignment with
image embeddings, OD-distribution reconstruction from flow features, and
per-view reconstruction from the fused vector. Disabled views contribute
exactly zero and their embeddings drop out of fusion, shrinking its arity.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import SubgraphEncoder, TypeSumReadout, _init_linear, subgraph_tensors
from .errors import ConfigError, UntrainableError
from .graph import FlowRecord, UrbanGraph
from .losses import (
    FlowDistributions,
    FusionModule,
    contrastive_loss,
    flow_distributions,
    flow_loss,
    sample_triplet,
    triplet_loss,
)
from .patterns import full_pattern
from .subgraph import extract, subsample
from .transr import TransRState, random_feature_lookup

VIEW_GRAPH = "graph"
VIEW_IMAGE = "image"
VIEW_SRC = "src"
VIEW_DST = "dst"


@dataclass(frozen=True)
class PretrainConfig:
    dim: int = 144
    heads: int = 4
    layers: int = 2
    margin: float = 2.0  # triplet margin
    fusion_weight: float = 0.01
    temperature: float = 0.1
    lr: float = 0.001
    weight_decay: float = 1e-6
    epochs: int = 100
    node_cap: Optional[int] = 50
    spatial: bool = True
    imagery: bool = True
    flow: bool = True
    fusion: bool = True
    init: str = "transr"  # "transr" | "random"
    optimizer: str = "adam"  # "adam" | "sgd"
    resample_triplets: bool = True
    normalize_contrastive: bool = False
    fusion_only: bool = False

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("triplet margin must be positive")
        if self.fusion_weight < 0:
            raise ConfigError("fusion weight must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.init not in ("transr", "random"):
            raise ConfigError(f"unknown init mode {self.init!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not (self.spatial or self.imagery or self.flow or self.fusion):
            raise ConfigError("all views disabled; nothing to train")

    def active_views(self) -> tuple[str, ...]:
        views = [VIEW_GRAPH]
        if self.imagery:
            views.append(VIEW_IMAGE)
        if self.flow:
            views += [VIEW_SRC, VIEW_DST]
        return tuple(views)


def config_hash(config) -> str:
    payload = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class FlowEncoder(nn.Module):
    """Shared two-layer perceptron mapping interval counts to embeddings.

    Counts pass through log1p first; raw trip volumes span orders of
    magnitude and would otherwise dominate every joint loss surface.
    """

    def __init__(self, intervals: int, dim: int, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 0xF10])
        self.inner = nn.Linear(intervals, dim, dtype=torch.float64)
        self.outer = nn.Linear(dim, dim, dtype=torch.float64)
        _init_linear(self.inner, rng)
        _init_linear(self.outer, rng)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outer(torch.nn.functional.gelu(self.inner(torch.log1p(x))))


@dataclass
class ModelState:
    """Every trainable table plus the frozen feature initialization."""

    config: PretrainConfig
    seed: int
    node_ids: list[str]
    features: torch.Tensor  # (n_nodes, dim), frozen during pre-training
    encoder: SubgraphEncoder
    readout: TypeSumReadout
    flow_encoder: Optional[FlowEncoder] = None
    image_proj: Optional[nn.Linear] = None
    fusion: Optional[FusionModule] = None
    transr_relation: Optional[torch.Tensor] = None
    transr_projection: Optional[torch.Tensor] = None
    image_dim: Optional[int] = None
    intervals: int = 24

    def __post_init__(self):
        self._index = {nid: i for i, nid in enumerate(self.node_ids)}

    @property
    def hash(self) -> str:
        return config_hash(self.config)

    def feature_lookup(self) -> dict[str, np.ndarray]:
        table = self.features.detach().numpy()
        return {nid: table[i] for nid, i in self._index.items()}

    def modules(self) -> dict[str, nn.Module]:
        out = {"encoder": self.encoder, "readout": self.readout}
        if self.flow_encoder is not None:
            out["flow_encoder"] = self.flow_encoder
        if self.image_proj is not None:
            out["image_proj"] = self.image_proj
        if self.fusion is not None:
            out["fusion"] = self.fusion
        return out

    def trainable_parameters(self) -> list[torch.Tensor]:
        params: list[torch.Tensor] = []
        for mod in self.modules().values():
            params.extend(mod.parameters())
        return params

    def parameter_hash(self) -> str:
        """Digest of every parameter byte; stable identity for frozen backbones."""
        digest = hashlib.sha256()
        digest.update(self.features.detach().numpy().tobytes())
        for name in sorted(self.modules()):
            sd = self.modules()[name].state_dict()
            for key in sorted(sd):
                digest.update(key.encode())
                digest.update(sd[key].detach().numpy().tobytes())
        return digest.hexdigest()


def init_model_state(
    graph: UrbanGraph,
    config: PretrainConfig,
    seed: int,
    transr: Optional[TransRState] = None,
    image_dim: Optional[int] = None,
) -> ModelState:
    node_ids = sorted(graph.nodes)
    if config.init == "transr":
        if transr is None:
            raise ConfigError("init mode 'transr' requires a trained TransR state")
        if transr.node_ids != node_ids:
            raise ConfigError("TransR state does not cover this graph's node set")
        if transr.dim != config.dim:
            raise ConfigError(
                f"TransR dimension {transr.dim} != configured dimension {config.dim}"
            )
        features = transr.entity.detach().clone()
        relation, projection = transr.relation.detach(), transr.projection.detach()
    else:
        lookup = random_feature_lookup(graph, config.dim, seed)
        features = torch.tensor(np.stack([lookup[nid] for nid in node_ids]))
        relation = projection = None

    if config.imagery and image_dim is None:
        raise ConfigError("imagery view enabled but image feature dimension unknown")

    state = ModelState(
        config=config,
        seed=seed,
        node_ids=node_ids,
        features=features,
        encoder=SubgraphEncoder(config.dim, config.heads, config.layers, seed=seed),
        readout=TypeSumReadout(config.dim, seed=seed),
        intervals=graph.config.intervals,
        transr_relation=relation,
        transr_projection=projection,
    )
    if config.flow:
        state.flow_encoder = FlowEncoder(graph.config.intervals, config.dim, seed=seed)
    if config.imagery:
        rng = np.random.default_rng([seed, 0x1396])
        proj = nn.Linear(image_dim, config.dim, dtype=torch.float64)
        _init_linear(proj, rng)
        state.image_proj = proj
        state.image_dim = image_dim
    if config.fusion:
        state.fusion = FusionModule(config.dim, len(config.active_views()), seed=seed)
    return state


# -- training data ----------------------------------------------------------


def flow_features(
    graph: UrbanGraph, flows: Optional[list[FlowRecord]] = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Outflow/inflow interval counts and the interval-summed trip matrix."""
    flows = list(graph.flows if flows is None else flows)
    idx = graph.region_index()
    n, l = len(graph.regions), graph.config.intervals
    s = np.zeros((n, l))
    t = np.zeros((n, l))
    m = np.zeros((n, n))
    for f in flows:
        i, j = idx[f.origin], idx[f.destination]
        s[i, f.interval] += f.trips
        t[j, f.interval] += f.trips
        m[i, j] += f.trips
    return s, t, m


@dataclass
class RegionBatch:
    """All region subgraphs as one disjoint-union graph (one encoder pass)."""

    x: torch.Tensor  # (total_nodes, d)
    type_idx: torch.Tensor  # (total_nodes,)
    src: torch.Tensor
    dst: torch.Tensor
    rel: torch.Tensor
    region_of_node: torch.Tensor  # (total_nodes,) region index per node
    n_regions: int


def batch_regions(packed: list[tuple]) -> RegionBatch:
    xs, types, srcs, dsts, rels, owners = [], [], [], [], [], []
    offset = 0
    for i, (order, x, type_idx, src, dst, rel) in enumerate(packed):
        xs.append(x)
        types.append(type_idx)
        srcs.append(src + offset)
        dsts.append(dst + offset)
        rels.append(rel)
        owners.append(torch.full((len(order),), i, dtype=torch.long))
        offset += len(order)
    return RegionBatch(
        x=torch.cat(xs),
        type_idx=torch.cat(types),
        src=torch.cat(srcs),
        dst=torch.cat(dsts),
        rel=torch.cat(rels),
        region_of_node=torch.cat(owners),
        n_regions=len(packed),
    )


@dataclass
class PretrainData:
    regions: list[str]
    packed: list[tuple]  # subgraph_tensors output per region
    batch: Optional[RegionBatch] = None
    image_means: dict[str, torch.Tensor] = field(default_factory=dict)
    flow_s: Optional[torch.Tensor] = None
    flow_t: Optional[torch.Tensor] = None
    dist: Optional[FlowDistributions] = None
    neighbor_pools: dict[str, list[str]] = field(default_factory=dict)
    negative_pools: dict[str, list[str]] = field(default_factory=dict)


def build_pretrain_data(
    graph: UrbanGraph,
    config: PretrainConfig,
    seed: int,
    features: dict[str, np.ndarray],
    images: Optional[dict[str, list[list[float]]]] = None,
    flows: Optional[list[FlowRecord]] = None,
) -> PretrainData:
    pattern = full_pattern()
    packed = []
    for i, rid in enumerate(graph.regions):
        sub = extract(graph, rid, pattern)
        if config.node_cap is not None:
            sub = subsample(sub, config.node_cap, seed=int(np.random.default_rng([seed, 0x5AB, i]).integers(2**31)))
        packed.append(subgraph_tensors(sub, features))
    data = PretrainData(
        regions=list(graph.regions), packed=packed, batch=batch_regions(packed)
    )

    if config.imagery:
        if not images:
            raise ConfigError("imagery view enabled but no image features supplied")
        for rid in graph.regions:
            shots = images.get(rid)
            if shots:
                stack = torch.tensor(np.asarray(shots, dtype=np.float64))
                data.image_means[rid] = stack.mean(dim=0)
        if not data.image_means:
            raise ConfigError("imagery view enabled but no region has image features")

    if config.flow:
        s, t, m = flow_features(graph, flows)
        if m.sum() <= 0:
            raise ConfigError("flow view enabled but the trip matrix is empty")
        if len(graph.regions) < 2:
            raise ConfigError("flow view needs at least two regions")
        data.flow_s = torch.tensor(s)
        data.flow_t = torch.tensor(t)
        data.dist = flow_distributions(m)

    if config.spatial:
        from .schema import EdgeType, NodeType

        for rid in graph.regions:
            neighbors = [
                r
                for r in graph.neighbors(rid, {EdgeType.NEARBY})
                if graph.nodes[r].type == NodeType.REGION
            ]
            data.neighbor_pools[rid] = neighbors
            data.negative_pools[rid] = [
                r for r in graph.regions if r != rid and r not in set(neighbors)
            ]
    return data


def sample_epoch_triplets(
    data: PretrainData, rng: np.random.Generator
) -> list[tuple[int, int, int]]:
    """(anchor, positive, negative) region indices; invalid anchors skipped."""
    index = {rid: i for i, rid in enumerate(data.regions)}
    out = []
    for rid in data.regions:
        pos_pool = data.neighbor_pools.get(rid, [])
        neg_pool = data.negative_pools.get(rid, [])
        if not pos_pool or not neg_pool:
            continue
        pos = pos_pool[int(rng.integers(0, len(pos_pool)))]
        neg = neg_pool[int(rng.integers(0, len(neg_pool)))]
        out.append((index[rid], index[pos], index[neg]))
    return out


@dataclass
class LossBreakdown:
    spatial: torch.Tensor
    imagery: torch.Tensor
    flow: torch.Tensor
    fusion: torch.Tensor
    total: torch.Tensor

    def floats(self) -> tuple[float, float, float, float, float]:
        return (
            float(self.spatial.detach()),
            float(self.imagery.detach()),
            float(self.flow.detach()),
            float(self.fusion.detach()),
            float(self.total.detach()),
        )


def encode_all_regions(state: ModelState, data: PretrainData) -> torch.Tensor:
    """One encoder pass over the disjoint union of every region subgraph."""
    if data.batch is None:
        rows = []
        for order, x, type_idx, src, dst, rel in data.packed:
            out = state.encoder(x, type_idx, src, dst, rel)
            rows.append(state.readout(out, type_idx))
        return torch.stack(rows)
    b = data.batch
    out = state.encoder(b.x, b.type_idx, b.src, b.dst, b.rel)
    return state.readout.forward_batched(out, b.type_idx, b.region_of_node, b.n_regions)


@dataclass
class ViewTensors:
    """Per-view embedding matrices for one pass over all regions."""

    h: torch.Tensor
    img_rows: Optional[torch.Tensor] = None
    image_index: list[int] = field(default_factory=list)
    h_src: Optional[torch.Tensor] = None
    h_dst: Optional[torch.Tensor] = None

    def detached(self) -> "ViewTensors":
        return ViewTensors(
            h=self.h.detach(),
            img_rows=None if self.img_rows is None else self.img_rows.detach(),
            image_index=list(self.image_index),
            h_src=None if self.h_src is None else self.h_src.detach(),
            h_dst=None if self.h_dst is None else self.h_dst.detach(),
        )


def compute_views(state: ModelState, data: PretrainData) -> ViewTensors:
    cfg = state.config
    views = ViewTensors(h=encode_all_regions(state, data))
    if cfg.imagery:
        views.image_index = [
            i for i, rid in enumerate(data.regions) if rid in data.image_means
        ]
        means = torch.stack([data.image_means[data.regions[i]] for i in views.image_index])
        views.img_rows = state.image_proj(means)
    if cfg.flow:
        views.h_src = state.flow_encoder(data.flow_s)
        views.h_dst = state.flow_encoder(data.flow_t)
    return views


def compute_losses(
    state: ModelState,
    data: PretrainData,
    triplets: list[tuple[int, int, int]],
    views: Optional[ViewTensors] = None,
) -> LossBreakdown:
    """Evaluate every active loss term on the current parameters.

    In fusion-only mode the other terms are skipped and the supplied (or
    freshly computed) view tensors are treated as frozen inputs.
    """
    cfg = state.config
    if views is None:
        views = compute_views(state, data)
        if cfg.fusion_only:
            views = views.detached()
    h = views.h
    zero = h.new_zeros(())
    n = len(data.regions)

    l_sp = zero
    if cfg.spatial and not cfg.fusion_only:
        for a, p, ng in triplets:
            l_sp = l_sp + triplet_loss(h[a], h[p], h[ng], cfg.margin)

    l_img = zero
    if cfg.imagery and not cfg.fusion_only:
        l_img = contrastive_loss(
            h[views.image_index], views.img_rows, cfg.temperature, cfg.normalize_contrastive
        )

    l_flow = zero
    if cfg.flow and not cfg.fusion_only:
        l_flow = flow_loss(views.h_src, views.h_dst, data.dist)

    l_fuse = zero
    if cfg.fusion:
        stack = [h]
        if cfg.imagery:
            img_full = h.new_zeros(n, cfg.dim)
            if views.image_index:
                img_full = img_full.index_copy(
                    0, torch.tensor(views.image_index), views.img_rows
                )
            stack.append(img_full)
        if cfg.flow:
            stack += [views.h_src, views.h_dst]
        fused = state.fusion.fuse(stack)
        l_fuse = state.fusion.reconstruction_loss(fused, stack)

    total = l_sp + l_img + l_flow + cfg.fusion_weight * l_fuse
    return LossBreakdown(l_sp, l_img, l_flow, l_fuse, total)


# -- training loop -----------------------------------------------------------


def pretrain(
    graph: UrbanGraph,
    config: PretrainConfig,
    seed: int,
    transr: Optional[TransRState] = None,
    images: Optional[dict[str, list[list[float]]]] = None,
    flows: Optional[list[FlowRecord]] = None,
) -> tuple[ModelState, list[dict]]:
    """Minimize the joint objective; returns the final state and per-epoch log."""
    image_dim = None
    if config.imagery:
        if not images:
            raise ConfigError("imagery view enabled but no image features supplied")
        first = next(iter(sorted(images)))
        if not images[first]:
            raise ConfigError("imagery table has an empty feature list")
        image_dim = len(images[first][0])

    state = init_model_state(graph, config, seed, transr=transr, image_dim=image_dim)
    data = build_pretrain_data(
        graph, config, seed, state.feature_lookup(), images=images, flows=flows
    )

    trip_rng = np.random.default_rng([seed, 0x121])
    fixed_triplets: list[tuple[int, int, int]] = []
    if config.spatial and not config.resample_triplets:
        fixed_triplets = sample_epoch_triplets(data, trip_rng)

    if config.fusion_only:
        if state.fusion is None:
            raise ConfigError("fusion-only training requires the fusion view")
        params = list(state.fusion.parameters())
    else:
        params = state.trainable_parameters()
    if config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    else:
        opt = torch.optim.SGD(params, lr=config.lr, weight_decay=config.weight_decay)

    frozen_views = None
    if config.fusion_only:
        with torch.no_grad():
            frozen_views = compute_views(state, data).detached()

    rows: list[dict] = []
    for epoch in range(config.epochs):
        if config.spatial and config.resample_triplets:
            triplets = sample_epoch_triplets(data, trip_rng)
        else:
            triplets = fixed_triplets
        losses = compute_losses(state, data, triplets, views=frozen_views)
        opt.zero_grad()
        losses.total.backward()
        opt.step()
        sp, im, fl, fu, tot = losses.floats()
        rows.append(
            {"epoch": epoch, "L_sp": sp, "L_img": im, "L_flow": fl, "L_fuse": fu, "total": tot}
        )
    return state, rows


def write_loss_log(path: str | Path, rows: list[dict], run_hash: Optional[str] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if run_hash:
            fh.write(f"# config_hash={run_hash}\n")
        w = csv.DictWriter(
            fh, fieldnames=["epoch", "L_sp", "L_img", "L_flow", "L_fuse", "total"],
            lineterminator="\n",
        )
        w.writeheader()
        for row in rows:
            w.writerow(row)


# -- checkpoint serialization -------------------------------------------------


def _module_section(mod: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy() for k, v in mod.state_dict().items()}


def save_model(state: ModelState, path: str | Path, extra_meta: Optional[dict] = None) -> None:
    sections: dict[str, dict[str, np.ndarray]] = {
        "transr": {"entity": state.features.detach().numpy()},
        "encoder": _module_section(state.encoder),
        "readout": _module_section(state.readout),
    }
    if state.transr_relation is not None:
        sections["transr"]["relation"] = state.transr_relation.detach().numpy()
        sections["transr"]["projection"] = state.transr_projection.detach().numpy()
    if state.flow_encoder is not None:
        sections["flow_encoder"] = _module_section(state.flow_encoder)
    if state.image_proj is not None:
        sections["image_proj"] = _module_section(state.image_proj)
    if state.fusion is not None:
        sections["fusion"] = _module_section(state.fusion)
    meta = {
        "kind": "model",
        "seed": state.seed,
        "config": asdict(state.config),
        "config_hash": state.hash,
        "views": list(state.config.active_views()),
        "node_ids": state.node_ids,
        "image_dim": state.image_dim,
        "intervals": state.intervals,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, sections, meta)


def _load_module(mod: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    tensors = {k: torch.tensor(v, dtype=torch.float64) for k, v in arrays.items()}
    mod.load_state_dict(tensors)


def load_model(path: str | Path) -> ModelState:
    sections, meta = load_checkpoint(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path}: not a model checkpoint")
    config = PretrainConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in meta["config"].items()})
    state = ModelState(
        config=config,
        seed=meta["seed"],
        node_ids=list(meta["node_ids"]),
        features=torch.tensor(sections["transr"]["entity"], dtype=torch.float64),
        encoder=SubgraphEncoder(config.dim, config.heads, config.layers, seed=meta["seed"]),
        readout=TypeSumReadout(config.dim, seed=meta["seed"]),
        intervals=meta.get("intervals", 24),
        image_dim=meta.get("image_dim"),
    )
    if "relation" in sections["transr"]:
        state.transr_relation = torch.tensor(sections["transr"]["relation"], dtype=torch.float64)
        state.transr_projection = torch.tensor(
            sections["transr"]["projection"], dtype=torch.float64
        )
    _load_module(state.encoder, sections["encoder"])
    _load_module(state.readout, sections["readout"])
    if "flow_encoder" in sections:
        state.flow_encoder = FlowEncoder(state.intervals, config.dim, seed=meta["seed"])
        _load_module(state.flow_encoder, sections["flow_encoder"])
    if "image_proj" in sections:
        proj = nn.Linear(state.image_dim, config.dim, dtype=torch.float64)
        _load_module(proj, sections["image_proj"])
        state.image_proj = proj
    if "fusion" in sections:
        state.fusion = FusionModule(config.dim, len(config.active_views()), seed=meta["seed"])
        _load_module(state.fusion, sections["fusion"])
    return state


def with_feature_table(state: ModelState, transr: TransRState, graph: UrbanGraph) -> ModelState:
    """Swap the frozen feature table for another city's, keeping trained modules.

    Supports cross-city transfer: the encoder/readout/flow/image/fusion
    parameters stay as trained, while node features come from the target
    city's initialization.
    """
    node_ids = sorted(graph.nodes)
    if transr.node_ids != node_ids:
        raise ConfigError("feature table does not cover the target graph's node set")
    if transr.dim != state.config.dim:
        raise ConfigError(
            f"feature dimension {transr.dim} != model dimension {state.config.dim}"
        )
    return replace(
        state,
        node_ids=node_ids,
        features=transr.entity.detach().clone(),
        transr_relation=transr.relation.detach().clone(),
        transr_projection=transr.projection.detach().clone(),
    )
