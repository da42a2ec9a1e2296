"""Task adaptation of frozen region embeddings via graph prompts.

Two mechanisms:
  * manual: a pattern override plus per-type deletion proportions applied
    to the region subgraph before re-encoding;
  * learnable: m trainable attributed prompt graphs compared to each
    region subgraph by the P-step walk kernel; the resulting m-vector is
    concatenated to the frozen embedding and mapped through an affine
    layer feeding a scalar regression head.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import _init_linear
from .errors import ConfigError, PatternError
from .kernel import AttributedGraph, from_subgraph, rw_kernel
from .patterns import GraphPattern, PatternDocument, load_preset
from .pretrain import ModelState, config_hash
from .schema import NODE_TYPES, NodeType
from .subgraph import RegionSubgraph, _connected_to_root

PRESETS = ("P1", "P2", "P3", "P4")


@dataclass(frozen=True)
class TaskWeights:
    """Per-type deletion proportions plus an optional pattern override."""

    weights: Mapping[NodeType, float] = field(default_factory=dict)
    pattern: Optional[GraphPattern] = None

    def __post_init__(self):
        for t, w in self.weights.items():
            if not (0.0 <= w <= 1.0):
                raise ConfigError(f"deletion weight for {t} must lie in [0,1], got {w}")
        if self.weights.get(NodeType.REGION, 0.0) != 0.0:
            raise ConfigError("region deletion weight is fixed at 0")

    def weight(self, t: NodeType) -> float:
        return float(self.weights.get(t, 0.0))


def preset(name: str) -> TaskWeights:
    """One of the shipped manual prompts P1..P4 (pattern + weights)."""
    if name not in PRESETS:
        raise PatternError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    doc: PatternDocument = load_preset(name)
    return TaskWeights(weights=dict(doc.weights), pattern=doc.pattern)


def adjust(sub: RegionSubgraph, weights: TaskWeights, seed: int) -> RegionSubgraph:
    """Delete floor(w * count) uniform nodes per type, then prune the wreckage.

    The root is exempt; edges touching deleted nodes go with them, and any
    node cut off from the root is dropped too. Deterministic in seed.
    """
    rng = np.random.default_rng(seed)
    doomed: set[str] = set()
    for t in NODE_TYPES:
        w = weights.weight(t)
        members = sub.nodes_of_type(t)
        count = len(members)
        if count == 0 or w == 0.0:
            continue
        pool = [n for n in members if n != sub.root]
        k = min(int(np.floor(w * count)), len(pool))
        if k > 0:
            doomed.update(rng.choice(pool, size=k, replace=False))
    if not doomed:
        return sub
    keep = set(sub.nodes) - doomed
    kept_edges = {e for e in sub.edges if e[0] in keep and e[1] in keep}
    connected, kept_edges = _connected_to_root(sub.root, keep, kept_edges)
    nodes = {nid: sub.nodes[nid] for nid in connected}
    feats = None
    if sub.features is not None:
        feats = {nid: sub.features[nid] for nid in connected}
    return RegionSubgraph(root=sub.root, nodes=nodes, edges=frozenset(kept_edges), features=feats)


class PromptGraph(nn.Module):
    """A trainable attributed graph with soft symmetric adjacency.

    The adjacency comes from unconstrained logits through a sigmoid of the
    symmetrized matrix with the diagonal masked out, so symmetry and the
    zero diagonal survive every gradient update by construction. A fixed
    binary adjacency can be supplied instead (attributes stay trainable).
    """

    def __init__(
        self,
        size: int,
        dim: int,
        seed: int = 0,
        binary_adjacency: Optional[np.ndarray] = None,
    ):
        super().__init__()
        if size < 1:
            raise ConfigError("prompt graph needs at least one node")
        rng = np.random.default_rng([seed, 0x9901])
        self.size = size
        self.dim = dim
        scale = 1.0 / np.sqrt(dim)
        attrs = rng.uniform(-scale, scale, size=(size, dim))
        self.attributes = nn.Parameter(torch.tensor(attrs, dtype=torch.float64))
        mask = 1.0 - torch.eye(size, dtype=torch.float64)
        self.register_buffer("diag_mask", mask)
        if binary_adjacency is not None:
            fixed = torch.tensor(binary_adjacency, dtype=torch.float64)
            if fixed.shape != (size, size):
                raise ConfigError("binary adjacency shape mismatch")
            if not torch.equal(fixed, fixed.T) or fixed.diagonal().any():
                raise ConfigError("binary adjacency must be symmetric with zero diagonal")
            self.register_buffer("fixed_adjacency", fixed)
            self.logits = None
        else:
            self.fixed_adjacency = None
            logits = 0.5 * rng.normal(size=(size, size))
            self.logits = nn.Parameter(torch.tensor(logits, dtype=torch.float64))

    def adjacency(self) -> torch.Tensor:
        if self.fixed_adjacency is not None:
            return self.fixed_adjacency
        sym = 0.5 * (self.logits + self.logits.T)
        return torch.sigmoid(sym) * self.diag_mask

    def graph(self) -> AttributedGraph:
        return AttributedGraph(self.attributes, self.adjacency())


@dataclass(frozen=True)
class PromptTuneConfig:
    sizes: tuple[int, ...] = (6, 8)  # one prompt graph per entry (m = len)
    steps: int = 2
    walk_weights: Optional[tuple[float, ...]] = None  # default: all ones
    epochs: int = 200
    lr: float = 0.001
    weight_decay: float = 0.0
    node_cap: int = 50
    soft_adjacency: bool = True
    keep_best: bool = True  # return the params with the lowest training MSE seen

    def __post_init__(self):
        if len(self.sizes) < 1:
            raise ConfigError("need at least one prompt graph")
        if self.steps < 0:
            raise ConfigError("walk steps must be >= 0")
        if self.walk_weights is not None and len(self.walk_weights) != self.steps + 1:
            raise ConfigError("walk_weights length must be steps + 1")

    def resolved_weights(self) -> tuple[float, ...]:
        return self.walk_weights if self.walk_weights is not None else (1.0,) * (self.steps + 1)


class PromptModel(nn.Module):
    """m prompt graphs, the prompting affine map and the regression head."""

    def __init__(self, dim: int, config: PromptTuneConfig, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.config = config
        self.m = len(config.sizes)
        rng = np.random.default_rng([seed, 0xB00])
        graphs = []
        for i, size in enumerate(config.sizes):
            binary = None
            if not config.soft_adjacency:
                upper = rng.random((size, size)) < 0.5
                sym = np.triu(upper, 1)
                binary = (sym | sym.T).astype(np.float64)
            graphs.append(PromptGraph(size, dim, seed=seed * 1000 + i, binary_adjacency=binary))
        self.prompt_graphs = nn.ModuleList(graphs)
        wts = torch.tensor(config.resolved_weights(), dtype=torch.float64)
        self.register_buffer("walk_weights", wts)

        # identity-preserving start: the prompt block reads as zero so the
        # prompted embedding equals the frozen embedding before tuning
        self.combine = nn.Linear(self.m + dim, dim, dtype=torch.float64)
        with torch.no_grad():
            self.combine.weight.zero_()
            self.combine.weight[:, self.m:] = torch.eye(dim, dtype=torch.float64)
            self.combine.bias.zero_()
        self.head = nn.Linear(dim, 1, dtype=torch.float64)
        _init_linear(self.head, rng)

    def prompt_vector(self, g: AttributedGraph) -> torch.Tensor:
        values = [
            rw_kernel(g, pg.graph(), self.config.steps, self.walk_weights)
            for pg in self.prompt_graphs
        ]
        return torch.stack(values)

    def prompted_embedding(self, h_prompt: torch.Tensor, h_region: torch.Tensor) -> torch.Tensor:
        if h_prompt.shape[-1] != self.m or h_region.shape[-1] != self.dim:
            raise ValueError("prompt/embedding dimensions do not match the model")
        return self.combine(torch.cat([h_prompt, h_region], dim=-1))

    def predict(self, g: AttributedGraph, h_region: torch.Tensor) -> torch.Tensor:
        emb = self.prompted_embedding(self.prompt_vector(g), h_region)
        return self.head(emb).squeeze(-1)

    def fit_head_least_squares(self, h_regions: torch.Tensor, y: torch.Tensor) -> None:
        """Warm-start the head with the closed-form linear probe on h_r."""
        n = h_regions.shape[0]
        design = np.hstack([np.ones((n, 1)), h_regions.detach().numpy()])
        coef, *_ = np.linalg.lstsq(design, y.detach().numpy(), rcond=None)
        with torch.no_grad():
            self.head.bias.copy_(torch.tensor(coef[:1]))
            self.head.weight.copy_(torch.tensor(coef[1:]).unsqueeze(0))


def prompt_vector(sub: RegionSubgraph, model: PromptModel) -> torch.Tensor:
    return model.prompt_vector(from_subgraph(sub))


def prompted_embedding(h_prompt, h_region, model: PromptModel) -> torch.Tensor:
    return model.prompted_embedding(
        torch.as_tensor(h_prompt, dtype=torch.float64),
        torch.as_tensor(h_region, dtype=torch.float64),
    )


@dataclass
class PromptTuneResult:
    model: PromptModel
    training_mse: float
    baseline_mse: float  # closed-form affine head on the frozen embeddings
    history: list[float]


def tune_prompt(
    region_graphs: dict[str, AttributedGraph],
    region_embeddings: dict[str, torch.Tensor],
    labels: Mapping[str, float],
    config: PromptTuneConfig,
    seed: int,
    dim: Optional[int] = None,
) -> PromptTuneResult:
    """Fit the prompt model on labeled regions against frozen inputs.

    Only prompt parameters train; the caller supplies frozen embeddings
    and kernel inputs, so the backbone cannot move by construction. The
    best-seen training MSE parameters are returned (the initialization
    counts as seen, and it already matches the closed-form affine probe).
    """
    rids = sorted(r for r in labels if r in region_embeddings)
    if not rids:
        raise ConfigError("no labeled regions with embeddings to tune on")
    missing = [r for r in rids if r not in region_graphs]
    if missing:
        raise ConfigError(f"missing kernel inputs for regions: {missing[:3]}")

    h = torch.stack([region_embeddings[r].detach().double() for r in rids])
    y = torch.tensor([labels[r] for r in rids], dtype=torch.float64)
    graphs = [region_graphs[r] for r in rids]
    if dim is None:
        dim = h.shape[1]

    model = PromptModel(dim, config, seed=seed)
    model.fit_head_least_squares(h, y)

    def training_mse() -> torch.Tensor:
        preds = torch.stack([model.predict(g, h[i]) for i, g in enumerate(graphs)])
        return ((preds - y) ** 2).mean()

    with torch.no_grad():
        baseline = float(training_mse())

    best_mse = baseline
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = [baseline]
    for _epoch in range(config.epochs):
        opt.zero_grad()
        mse = training_mse()
        mse.backward()
        opt.step()
        with torch.no_grad():
            current = float(training_mse())
        history.append(current)
        if current < best_mse:
            best_mse = current
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if config.keep_best:
        model.load_state_dict(best_state)
        final_mse = best_mse
    else:
        final_mse = history[-1]
    return PromptTuneResult(model=model, training_mse=final_mse, baseline_mse=baseline, history=history)


# -- persistence --------------------------------------------------------------


def save_prompt(model: PromptModel, path: str | Path, extra_meta: Optional[dict] = None) -> None:
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    meta = {
        "kind": "prompt",
        "dim": model.dim,
        "sizes": list(model.config.sizes),
        "steps": model.config.steps,
        "walk_weights": list(model.config.resolved_weights()),
        "soft_adjacency": model.config.soft_adjacency,
        "config_hash": config_hash(model.config),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, {"prompt": arrays}, meta)


def load_prompt(path: str | Path) -> PromptModel:
    sections, meta = load_checkpoint(path)
    if meta.get("kind") != "prompt":
        raise ValueError(f"{path}: not a prompt checkpoint")
    config = PromptTuneConfig(
        sizes=tuple(meta["sizes"]),
        steps=meta["steps"],
        walk_weights=tuple(meta["walk_weights"]),
        soft_adjacency=meta["soft_adjacency"],
    )
    model = PromptModel(meta["dim"], config, seed=0)
    tensors = {k: torch.tensor(v, dtype=torch.float64) for k, v in sections["prompt"].items()}
    model.load_state_dict(tensors)
    return model
