"""Relation-projected knowledge-graph embeddings initializing all node features.

Entities and relations live in one d-dimensional space; each relation also
carries a d x d projection. The plausibility score of a triple is
``|| M_r h + r - M_r t ||^2`` (lower is better). Training is plain SGD on
full-batch margin ranking loss against filtered negative samples, with the
entity-norm ball constraint re-applied after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import UntrainableError
from .graph import UrbanGraph
from .schema import EDGE_TYPE_INDEX, EDGE_TYPES, EdgeType


@dataclass(frozen=True)
class TransRConfig:
    dim: int = 144
    margin: float = 1.0
    epochs: int = 100
    lr: float = 0.01
    negatives: int = 1
    projection_noise: float = 0.01


@dataclass
class TransRState:
    node_ids: list[str]
    entity: torch.Tensor  # (n, d) float64
    relation: torch.Tensor  # (|T_E|, d)
    projection: torch.Tensor  # (|T_E|, d, d)
    dim: int
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.index = {nid: i for i, nid in enumerate(self.node_ids)}

    def vector(self, node_id: str) -> np.ndarray:
        return self.entity[self.index[node_id]].detach().numpy()

    def feature_lookup(self) -> dict[str, np.ndarray]:
        ent = self.entity.detach().numpy()
        return {nid: ent[i] for nid, i in self.index.items()}

    def relation_vector(self, et: EdgeType) -> torch.Tensor:
        return self.relation[EDGE_TYPE_INDEX[et]]

    def relation_projection(self, et: EdgeType) -> torch.Tensor:
        return self.projection[EDGE_TYPE_INDEX[et]]

    def clone(self) -> "TransRState":
        return TransRState(
            node_ids=list(self.node_ids),
            entity=self.entity.detach().clone(),
            relation=self.relation.detach().clone(),
            projection=self.projection.detach().clone(),
            dim=self.dim,
            loss_history=list(self.loss_history),
        )


def score_parts(
    head: torch.Tensor, relation: torch.Tensor, projection: torch.Tensor, tail: torch.Tensor
) -> torch.Tensor:
    """``|| M h + r - M t ||^2`` for single vectors or batched (..., d) inputs."""
    if head.shape[-1] != tail.shape[-1] or head.shape[-1] != relation.shape[-1]:
        raise ValueError("dimension mismatch between head/relation/tail")
    if projection.shape[-1] != head.shape[-1] or projection.shape[-2] != head.shape[-1]:
        raise ValueError("projection shape incompatible with embedding dimension")
    ph = (projection @ head.unsqueeze(-1)).squeeze(-1)
    pt = (projection @ tail.unsqueeze(-1)).squeeze(-1)
    diff = ph + relation - pt
    return (diff * diff).sum(-1)


def transr_score(head, relation: EdgeType, tail, state: TransRState) -> float:
    """Score an (h, r, t) triple with the state's relation parameters."""
    h = torch.as_tensor(head, dtype=torch.float64)
    t = torch.as_tensor(tail, dtype=torch.float64)
    if h.shape[-1] != state.dim or t.shape[-1] != state.dim:
        raise ValueError(f"expected dimension {state.dim}")
    return float(
        score_parts(h, state.relation_vector(relation), state.relation_projection(relation), t)
    )


def _init_state(graph: UrbanGraph, config: TransRConfig, rng: np.random.Generator) -> TransRState:
    node_ids = sorted(graph.nodes)
    d = config.dim
    bound = 6.0 / np.sqrt(d)
    entity = rng.uniform(-bound, bound, size=(len(node_ids), d))
    norms = np.linalg.norm(entity, axis=1, keepdims=True)
    entity = entity / np.maximum(norms, 1.0)  # start inside the unit ball
    relation = rng.uniform(-bound, bound, size=(len(EDGE_TYPES), d))
    projection = np.stack(
        [np.eye(d) + config.projection_noise * rng.normal(size=(d, d)) for _ in EDGE_TYPES]
    )
    return TransRState(
        node_ids=node_ids,
        entity=torch.tensor(entity, dtype=torch.float64),
        relation=torch.tensor(relation, dtype=torch.float64),
        projection=torch.tensor(projection, dtype=torch.float64),
        dim=d,
    )


def sample_corruptions(
    rng: np.random.Generator,
    triple: tuple[int, int, int],
    n_nodes: int,
    true_triples: set[tuple[int, int, int]],
    count: int,
    max_tries: int = 100,
) -> list[tuple[int, int, int]]:
    """Corrupt head or tail uniformly, rejecting corruptions that are true edges."""
    h, r, t = triple
    out = []
    for _ in range(count):
        for _try in range(max_tries):
            corrupt_head = bool(rng.integers(0, 2))
            node = int(rng.integers(0, n_nodes))
            cand = (node, r, t) if corrupt_head else (h, r, node)
            if cand not in true_triples and cand != triple:
                out.append(cand)
                break
    return out


def train_transr(
    graph: UrbanGraph,
    config: TransRConfig,
    seed: int,
    warm_start: "TransRState | None" = None,
) -> TransRState:
    """Fit embeddings on the graph's typed edges; deterministic in seed.

    ``warm_start`` seeds shared vocabulary: entity rows whose ids exist in
    both graphs, plus the relation tables, start from the given state. This
    keeps embedding spaces of related cities roughly aligned for transfer.
    """
    if not graph.edges:
        raise UntrainableError("graph has no edges; nothing to train on")
    rng = np.random.default_rng(seed)
    state = _init_state(graph, config, rng)
    if warm_start is not None:
        if warm_start.dim != config.dim:
            raise ValueError("warm-start dimension mismatch")
        with torch.no_grad():
            shared = [nid for nid in state.node_ids if nid in warm_start.index]
            for nid in shared:
                state.entity[state.index[nid]] = warm_start.entity[warm_start.index[nid]]
            state.relation.copy_(warm_start.relation)
            state.projection.copy_(warm_start.projection)

    index = state.index
    triples = sorted(
        (index[s], EDGE_TYPE_INDEX[et], index[d]) for s, d, et in graph.edges
    )
    true_set = set(triples)
    n_nodes = len(state.node_ids)

    entity = state.entity.requires_grad_(True)
    relation = state.relation.requires_grad_(True)
    projection = state.projection.requires_grad_(True)
    opt = torch.optim.SGD([entity, relation, projection], lr=config.lr)

    def batched_scores(h_idx, r_idx, t_idx):
        # scoring grouped per relation: six (n_r, d) @ (d, d) products
        # instead of gathering a (d, d) matrix per triple
        scores = entity.new_zeros(len(h_idx))
        for r in range(len(EDGE_TYPES)):
            mask = r_idx == r
            if not mask.any():
                continue
            m_t = projection[r].T
            ph = entity[h_idx[mask]] @ m_t
            pt = entity[t_idx[mask]] @ m_t
            diff = ph + relation[r] - pt
            scores = scores.index_put((torch.nonzero(mask).squeeze(1),), (diff * diff).sum(-1))
        return scores

    def epoch_pairs():
        pairs: list[tuple[int, tuple[int, int, int]]] = []
        for i, triple in enumerate(triples):
            for neg in sample_corruptions(rng, triple, n_nodes, true_set, config.negatives):
                pairs.append((i, neg))
        if not pairs:
            raise UntrainableError("could not sample any negative triples")
        pos_idx = torch.tensor([i for i, _ in pairs])
        neg_h = torch.tensor([n[0] for _, n in pairs])
        neg_r = torch.tensor([n[1] for _, n in pairs])
        neg_t = torch.tensor([n[2] for _, n in pairs])
        return pos_idx, neg_h, neg_r, neg_t

    pos_h = torch.tensor([t[0] for t in triples])
    pos_r = torch.tensor([t[1] for t in triples])
    pos_t = torch.tensor([t[2] for t in triples])

    for _epoch in range(config.epochs):
        pos_idx, neg_h, neg_r, neg_t = epoch_pairs()
        opt.zero_grad()
        f_pos = batched_scores(pos_h, pos_r, pos_t)
        f_neg = batched_scores(neg_h, neg_r, neg_t)
        loss = torch.clamp(config.margin + f_pos[pos_idx] - f_neg, min=0.0).mean()
        state.loss_history.append(float(loss.detach()))
        loss.backward()
        opt.step()
        with torch.no_grad():
            norms = entity.norm(dim=1, keepdim=True)
            entity.data = entity.data / torch.clamp(norms, min=1.0)

    if config.epochs > 0:
        with torch.no_grad():
            pos_idx, neg_h, neg_r, neg_t = epoch_pairs()
            f_pos = batched_scores(pos_h, pos_r, pos_t)
            f_neg = batched_scores(neg_h, neg_r, neg_t)
            final = torch.clamp(config.margin + f_pos[pos_idx] - f_neg, min=0.0).mean()
            state.loss_history.append(float(final))

    state.entity = entity.detach()
    state.relation = relation.detach()
    state.projection = projection.detach()
    return state


def random_feature_lookup(graph: UrbanGraph, dim: int, seed: int) -> dict[str, np.ndarray]:
    """Random-initialization stand-in for the trained feature table."""
    rng = np.random.default_rng(seed)
    bound = 6.0 / np.sqrt(dim)
    out = {}
    for nid in sorted(graph.nodes):
        v = rng.uniform(-bound, bound, size=dim)
        n = np.linalg.norm(v)
        out[nid] = v / max(n, 1.0)
    return out


def save_transr(state: TransRState, path, extra_meta: dict | None = None) -> None:
    from .checkpoint import save_checkpoint

    meta = {
        "kind": "transr",
        "node_ids": state.node_ids,
        "dim": state.dim,
        "loss_history": state.loss_history,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(
        path,
        {
            "transr": {
                "entity": state.entity.detach().numpy(),
                "relation": state.relation.detach().numpy(),
                "projection": state.projection.detach().numpy(),
            }
        },
        meta,
    )


def load_transr(path) -> TransRState:
    from .checkpoint import load_checkpoint

    sections, meta = load_checkpoint(path)
    if meta.get("kind") != "transr":
        raise ValueError(f"{path}: not a TransR checkpoint")
    return TransRState(
        node_ids=list(meta["node_ids"]),
        entity=torch.tensor(sections["transr"]["entity"], dtype=torch.float64),
        relation=torch.tensor(sections["transr"]["relation"], dtype=torch.float64),
        projection=torch.tensor(sections["transr"]["projection"], dtype=torch.float64),
        dim=meta["dim"],
        loss_history=list(meta.get("loss_history", [])),
    )
