"""Heterogeneous subgraph encoder and the type-sum readout.

Message passing follows the transformer recipe with node- and edge-type
dependent parameters: per node type query/key/value/output affine maps,
per edge type attention and message matrices, multi-head scores
``key(s) W_att query(t) / sqrt(d/heads)`` softmax-normalized over each
target's in-neighbors. Every node gets a self-loop (its own relation slot)
so no softmax is empty; aggregated messages go through the target-type
output map, are added to the residual, then GELU.

The readout sums node embeddings per node type into 8 fixed slots
(canonical type order, zero vector for absent types) and applies one
affine map to the concatenation.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .schema import EDGE_TYPE_INDEX, EDGE_TYPES, NODE_TYPE_INDEX, NODE_TYPES, NodeType
from .subgraph import RegionSubgraph
from .schema import SYMMETRIC_EDGE_TYPES

#: index of the internal self-loop relation (appended after the schema's edge types)
SELF_LOOP_INDEX = len(EDGE_TYPES)
N_RELATIONS = len(EDGE_TYPES) + 1


def _init_linear(linear: nn.Linear, rng: np.random.Generator) -> None:
    fan_in, fan_out = linear.in_features, linear.out_features
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    with torch.no_grad():
        linear.weight.copy_(torch.tensor(w, dtype=linear.weight.dtype))
        linear.bias.zero_()


class TypedAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.dk = dim // heads
        mk = lambda: nn.Linear(dim, dim, dtype=torch.float64)
        self.query = nn.ModuleList([mk() for _ in NODE_TYPES])
        self.key = nn.ModuleList([mk() for _ in NODE_TYPES])
        self.value = nn.ModuleList([mk() for _ in NODE_TYPES])
        self.output = nn.ModuleList([mk() for _ in NODE_TYPES])
        for ml in (self.query, self.key, self.value, self.output):
            for lin in ml:
                _init_linear(lin, rng)
        shape = (N_RELATIONS, heads, self.dk, self.dk)
        eye = np.broadcast_to(np.eye(self.dk), shape).copy()
        noise = 0.05 * rng.normal(size=shape)
        self.att = nn.Parameter(torch.tensor(eye + noise, dtype=torch.float64))
        noise = 0.05 * rng.normal(size=shape)
        self.msg = nn.Parameter(torch.tensor(eye + noise, dtype=torch.float64))

    def _apply_typed(self, maps: nn.ModuleList, x: torch.Tensor, type_idx: torch.Tensor):
        out = torch.zeros_like(x)
        for t in range(len(NODE_TYPES)):
            mask = type_idx == t
            if mask.any():
                out[mask] = maps[t](x[mask])
        return out

    def forward(
        self,
        x: torch.Tensor,  # (n, d)
        type_idx: torch.Tensor,  # (n,)
        src: torch.Tensor,  # (e,) message sources (self-loops included)
        dst: torch.Tensor,  # (e,) message targets, sorted ascending
        rel: torch.Tensor,  # (e,) relation index per message
    ) -> torch.Tensor:
        n = x.shape[0]
        h, dk = self.heads, self.dk
        q = self._apply_typed(self.query, x, type_idx).reshape(n, h, dk)
        k = self._apply_typed(self.key, x, type_idx).reshape(n, h, dk)
        v = self._apply_typed(self.value, x, type_idx).reshape(n, h, dk)

        # score/message assembly grouped per relation type: avoids gathering
        # one (heads, dk, dk) matrix per message
        scores = x.new_zeros(src.shape[0], h)
        messages = x.new_zeros(src.shape[0], h, dk)
        for r in range(N_RELATIONS):
            idx = torch.nonzero(rel == r).squeeze(1)
            if idx.numel() == 0:
                continue
            k_r, q_r, v_r = k[src[idx]], q[dst[idx]], v[src[idx]]
            kw = torch.einsum("ehd,hdf->ehf", k_r, self.att[r])
            scores = scores.index_put((idx,), (kw * q_r).sum(-1) / np.sqrt(dk))
            messages = messages.index_put(
                (idx,), torch.einsum("ehd,hdf->ehf", v_r, self.msg[r])
            )

        # per-target softmax; the shift constant is detached (softmax is
        # shift-invariant) and messages are pre-sorted by target, so the
        # sequential index_add reduction order is canonical
        dst_cols = dst.unsqueeze(-1).expand_as(scores)
        seg_max = scores.new_full((n, h), -torch.inf).scatter_reduce(
            0, dst_cols, scores.detach(), reduce="amax", include_self=True
        )
        expd = torch.exp(scores - seg_max[dst])
        denom = expd.new_zeros(n, h).index_add(0, dst, expd)
        alpha = expd / denom[dst]  # self-loops keep every denominator positive
        agg = x.new_zeros(n, h, dk).index_add(0, dst, alpha.unsqueeze(-1) * messages)
        agg = agg.reshape(n, self.dim)
        out = self._apply_typed(self.output, agg, type_idx)
        return torch.nn.functional.gelu(x + out)


class SubgraphEncoder(nn.Module):
    """Stack of typed attention layers; with zero layers it is the identity."""

    def __init__(self, dim: int = 144, heads: int = 4, layers: int = 2, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 0x9E37])
        self.dim = dim
        self.heads = heads
        self.layers = nn.ModuleList(
            TypedAttentionLayer(dim, heads, rng) for _ in range(layers)
        )

    def forward(self, x, type_idx, src, dst, rel):
        for layer in self.layers:
            x = layer(x, type_idx, src, dst, rel)
        return x


class TypeSumReadout(nn.Module):
    """Sum node embeddings per type into fixed slots, then one affine map."""

    def __init__(self, dim: int = 144, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 0x51AB])
        self.dim = dim
        self.linear = nn.Linear(len(NODE_TYPES) * dim, dim, dtype=torch.float64)
        _init_linear(self.linear, rng)

    def forward(self, node_embs: torch.Tensor, type_idx: torch.Tensor) -> torch.Tensor:
        slots = node_embs.new_zeros(len(NODE_TYPES), self.dim)
        slots = slots.index_add(0, type_idx, node_embs)
        return self.linear(slots.reshape(-1))

    def forward_batched(
        self,
        node_embs: torch.Tensor,
        type_idx: torch.Tensor,
        owner: torch.Tensor,
        n_graphs: int,
    ) -> torch.Tensor:
        """Type-sum readout for a disjoint union of graphs: (n_graphs, dim)."""
        t = len(NODE_TYPES)
        slots = node_embs.new_zeros(n_graphs * t, self.dim)
        slots = slots.index_add(0, owner * t + type_idx, node_embs)
        return self.linear(slots.reshape(n_graphs, t * self.dim))


def subgraph_tensors(
    sub: RegionSubgraph, features: Optional[dict[str, np.ndarray]] = None
) -> tuple[list[str], torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pack a subgraph into (order, X, type_idx, src, dst, rel) tensors.

    Symmetric edge types expand into both directed messages; all other
    types pass messages from source to target only. Self-loops are added
    for every node. Messages are sorted by (target, source, relation) so
    the encoder output does not depend on enumeration order.
    """
    order = sub.node_list()
    index = {nid: i for i, nid in enumerate(order)}
    lookup = features if features is not None else sub.features
    if lookup is None:
        raise ValueError("subgraph has no features; attach them or pass a lookup")
    for nid in order:
        if nid not in lookup:
            raise KeyError(f"missing feature vector for node {nid!r}")
    x = torch.tensor(np.stack([np.asarray(lookup[nid], float) for nid in order]))
    type_idx = torch.tensor([NODE_TYPE_INDEX[sub.nodes[nid]] for nid in order])

    msgs: set[tuple[int, int, int]] = {(i, i, SELF_LOOP_INDEX) for i in range(len(order))}
    for s, d, et in sub.edges:
        si, di, ei = index[s], index[d], EDGE_TYPE_INDEX[et]
        msgs.add((di, si, ei))
        if et in SYMMETRIC_EDGE_TYPES and si != di:
            msgs.add((si, di, ei))
    ordered = sorted(msgs)
    dst = torch.tensor([m[0] for m in ordered])
    src = torch.tensor([m[1] for m in ordered])
    rel = torch.tensor([m[2] for m in ordered])
    return order, x, type_idx, src, dst, rel


def encode_nodes(
    sub: RegionSubgraph,
    encoder: SubgraphEncoder,
    features: Optional[dict[str, np.ndarray]] = None,
) -> dict[str, torch.Tensor]:
    """Per-node embeddings for one subgraph, keyed by node id."""
    order, x, type_idx, src, dst, rel = subgraph_tensors(sub, features)
    out = encoder(x, type_idx, src, dst, rel)
    return {nid: out[i] for i, nid in enumerate(order)}


def encode_region(
    sub: RegionSubgraph,
    encoder: SubgraphEncoder,
    readout: TypeSumReadout,
    features: Optional[dict[str, np.ndarray]] = None,
) -> torch.Tensor:
    """Region embedding h_r = readout(encoder(subgraph))."""
    order, x, type_idx, src, dst, rel = subgraph_tensors(sub, features)
    out = encoder(x, type_idx, src, dst, rel)
    return readout(out, type_idx)


def readout_from_map(
    node_embs: dict[str, torch.Tensor], sub: RegionSubgraph, readout: TypeSumReadout
) -> torch.Tensor:
    order = sub.node_list()
    embs = torch.stack([node_embs[nid] for nid in order])
    type_idx = torch.tensor([NODE_TYPE_INDEX[sub.nodes[nid]] for nid in order])
    return readout(embs, type_idx)
