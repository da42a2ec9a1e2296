"""The four self-supervision objectives and their building blocks.

All functions are plain torch so gradients flow to whatever inputs require
them; shapes are validated eagerly because silent broadcasting is the main
failure mode here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import MissingViewError
from .graph import UrbanGraph
from .schema import EdgeType, NodeType


def triplet_loss(
    h: torch.Tensor, h_pos: torch.Tensor, h_neg: torch.Tensor, margin: float
) -> torch.Tensor:
    """``max(||h - h+|| - ||h - h-|| + margin, 0)`` with Euclidean distances."""
    if not (h.shape == h_pos.shape == h_neg.shape):
        raise ValueError("anchor/positive/negative dimensions differ")
    d_pos = torch.linalg.vector_norm(h - h_pos)
    d_neg = torch.linalg.vector_norm(h - h_neg)
    return torch.clamp(d_pos - d_neg + margin, min=0.0)


def sample_triplet(
    graph: UrbanGraph, anchor: str, rng: np.random.Generator
) -> Optional[tuple[str, str]]:
    """Uniform positive among NearBy neighbors, uniform negative among the rest.

    Returns None (skip-anchor signal) when either pool is empty.
    """
    neighbors = [
        r for r in graph.neighbors(anchor, {EdgeType.NEARBY})
        if graph.nodes[r].type == NodeType.REGION
    ]
    non_neighbors = [
        r for r in graph.regions if r != anchor and r not in set(neighbors)
    ]
    if not neighbors or not non_neighbors:
        return None
    pos = neighbors[int(rng.integers(0, len(neighbors)))]
    neg = non_neighbors[int(rng.integers(0, len(non_neighbors)))]
    return pos, neg


def image_embed(features: Sequence, proj: nn.Linear) -> torch.Tensor:
    """Affine projection of the mean image feature vector."""
    if len(features) == 0:
        raise MissingViewError("region has an empty image feature list")
    stack = torch.stack([torch.as_tensor(f, dtype=torch.float64) for f in features])
    if stack.shape[1] != proj.in_features:
        raise ValueError(
            f"image feature dim {stack.shape[1]} != projection input {proj.in_features}"
        )
    return proj(stack.mean(dim=0))


def contrastive_loss(
    h_batch: torch.Tensor, img_batch: torch.Tensor, temperature: float,
    normalize: bool = False,
) -> torch.Tensor:
    """In-batch InfoNCE aligning region embeddings with their image embeddings.

    The negatives for region r are the other rows of img_batch. With a
    single row there are no negatives and the loss is exactly zero.
    """
    if h_batch.shape != img_batch.shape:
        raise ValueError("region/image batches must align")
    if h_batch.ndim != 2 or h_batch.shape[0] < 1:
        raise ValueError("expected (B, d) batches with B >= 1")
    h, img = h_batch, img_batch
    if normalize:
        h = h / torch.clamp(h.norm(dim=1, keepdim=True), min=1e-12)
        img = img / torch.clamp(img.norm(dim=1, keepdim=True), min=1e-12)
    logits = (h @ img.T) / temperature  # (B, B); diagonal is the aligned pair
    pos = torch.diagonal(logits)
    return (torch.logsumexp(logits, dim=1) - pos).sum()


@dataclass
class FlowDistributions:
    """Empirical origin->destination distributions from a trip matrix.

    p_sc rows are P(dest | origin); p_dt columns are P(origin | dest).
    Rows/columns with zero trips are all-zero and flagged inactive.
    """

    p_sc: torch.Tensor  # (N, N), rows sum to 1 where active
    p_dt: torch.Tensor  # (N, N), columns sum to 1 where active
    active_rows: torch.Tensor  # (N,) bool: origin has outgoing trips
    active_cols: torch.Tensor  # (N,) bool: destination has incoming trips

    def entropy_bound(self) -> float:
        """H(P_sc) + H(P_dt), the cross-entropy floor of the flow loss."""

        def _h(p: torch.Tensor, mask: torch.Tensor, by_rows: bool) -> float:
            m = p if by_rows else p.T
            sel = m[mask]
            terms = torch.where(sel > 0, sel * torch.log(sel), torch.zeros_like(sel))
            return float(-terms.sum())

        return _h(self.p_sc, self.active_rows, True) + _h(self.p_dt, self.active_cols, False)


def flow_distributions(m) -> FlowDistributions:
    m = torch.as_tensor(m, dtype=torch.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("trip matrix must be square")
    if (m < 0).any():
        raise ValueError("trip matrix must be non-negative")
    row = m.sum(dim=1)
    col = m.sum(dim=0)
    p_sc = torch.where(row[:, None] > 0, m / torch.clamp(row[:, None], min=1e-300), torch.zeros_like(m))
    p_dt = torch.where(col[None, :] > 0, m / torch.clamp(col[None, :], min=1e-300), torch.zeros_like(m))
    return FlowDistributions(p_sc, p_dt, row > 0, col > 0)


def flow_loss(h_src: torch.Tensor, h_dst: torch.Tensor, dist: FlowDistributions) -> torch.Tensor:
    """Cross-entropy between empirical and reconstructed OD distributions.

    Reconstructions are softmax over destinations of ``h_src_i . h_dst_j``
    (per origin) and softmax over origins of ``h_dst_j . h_src_i`` (per
    destination); inactive origins/destinations contribute nothing.
    """
    n = dist.p_sc.shape[0]
    if n < 2:
        raise ValueError("flow loss needs at least two regions")
    if h_src.shape != h_dst.shape or h_src.shape[0] != n:
        raise ValueError("embeddings must be (N, d) matching the trip matrix")
    log_sc = torch.log_softmax(h_src @ h_dst.T, dim=1)  # (i, j)
    loss = -(dist.p_sc[dist.active_rows] * log_sc[dist.active_rows]).sum()
    log_dt = torch.log_softmax(h_dst @ h_src.T, dim=1)  # (j, i)
    p_dt_by_dest = dist.p_dt.T  # rows indexed by destination j
    loss = loss - (p_dt_by_dest[dist.active_cols] * log_dt[dist.active_cols]).sum()
    return loss


class FusionModule(nn.Module):
    """Rectified affine fusion of k view embeddings plus per-view decoders."""

    def __init__(self, dim: int, arity: int, seed: int = 0):
        super().__init__()
        from .encoder import _init_linear

        rng = np.random.default_rng([seed, 0xF05E])
        self.dim = dim
        self.arity = arity
        self.combine = nn.Linear(arity * dim, dim, dtype=torch.float64)
        _init_linear(self.combine, rng)
        self.decoders = nn.ModuleList(
            nn.Linear(dim, dim, dtype=torch.float64) for _ in range(arity)
        )
        for dec in self.decoders:
            _init_linear(dec, rng)

    def fuse(self, views: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(views) != self.arity:
            raise ValueError(f"expected {self.arity} views, got {len(views)}")
        return torch.relu(self.combine(torch.cat(tuple(views), dim=-1)))

    def reconstruction_loss(
        self, fused: torch.Tensor, views: Sequence[torch.Tensor]
    ) -> torch.Tensor:
        if len(views) != self.arity:
            raise ValueError(f"expected {self.arity} views, got {len(views)}")
        loss = fused.new_zeros(())
        for dec, view in zip(self.decoders, views):
            diff = view - dec(fused)
            loss = loss + (diff * diff).sum()
        return loss


def fuse(views: Sequence[torch.Tensor], module: FusionModule) -> torch.Tensor:
    return module.fuse(views)


def fusion_loss(
    fused: torch.Tensor, views: Sequence[torch.Tensor], decoders: Sequence[nn.Module]
) -> torch.Tensor:
    """Sum of squared reconstruction errors of each view from the fused vector."""
    if len(views) != len(decoders):
        raise ValueError("one decoder per view required")
    loss = fused.new_zeros(())
    for dec, view in zip(decoders, views):
        diff = view - dec(fused)
        loss = loss + (diff * diff).sum()
    return loss
