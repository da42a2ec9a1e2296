"""Attributed P-step random-walk graph kernel over the direct product graph.

For graphs (X1, A1) and (X2, A2) the product graph has node-pair attributes
``S = X1 X2^T`` (flattened row-major to s) and adjacency ``A1 (x) A2``
(Kronecker product; soft adjacencies multiply edge weights). The kernel is

    K = sum_p  lambda_p * s^T (A1 (x) A2)^p s,

computed with p small matrix products per step via the identity
``(A (x) B) vec(W) = vec(A W B^T)`` — the product adjacency power is never
materialized. Everything is differentiable in both graphs' attributes and
adjacencies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class AttributedGraph:
    attributes: torch.Tensor  # (n, d)
    adjacency: torch.Tensor  # (n, n)

    @staticmethod
    def of(attributes, adjacency) -> "AttributedGraph":
        x = torch.as_tensor(attributes, dtype=torch.float64)
        a = torch.as_tensor(adjacency, dtype=torch.float64)
        if x.ndim != 2 or a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != x.shape[0]:
            raise ValueError("attributes must be (n, d) and adjacency (n, n)")
        return AttributedGraph(x, a)

    @property
    def size(self) -> int:
        return self.attributes.shape[0]


def from_subgraph(sub) -> AttributedGraph:
    """Region subgraphs enter the kernel with their undirected adjacency."""
    return AttributedGraph.of(sub.feature_matrix(), sub.adjacency_matrix())


def product_similarity(g1: AttributedGraph, g2: AttributedGraph) -> tuple[torch.Tensor, torch.Tensor]:
    """Node-pair similarity vector s and the explicit product adjacency.

    Indexing is row-major: product node (v1, v2) sits at v1 * n2 + v2, and
    edge ((v1,v2),(u1,u2)) has weight a1[v1,u1] * a2[v2,u2].
    """
    if g1.attributes.shape[1] != g2.attributes.shape[1]:
        raise ValueError("attribute dimensions differ")
    s = (g1.attributes @ g2.attributes.T).reshape(-1)
    a_cross = torch.kron(g1.adjacency, g2.adjacency)
    return s, a_cross


def rw_kernel(
    g1: AttributedGraph,
    g2: AttributedGraph,
    steps: int,
    weights: Sequence[float] | torch.Tensor,
) -> torch.Tensor:
    """P-step walk kernel; ``weights`` holds lambda_0..lambda_P."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    w = torch.as_tensor(weights, dtype=g1.attributes.dtype)
    if w.numel() != steps + 1:
        raise ValueError(f"need {steps + 1} weights for {steps} steps, got {w.numel()}")
    if g1.attributes.shape[1] != g2.attributes.shape[1]:
        raise ValueError("attribute dimensions differ")
    s_mat = g1.attributes @ g2.attributes.T  # (n1, n2)
    walk = s_mat
    total = w[0] * (s_mat * walk).sum()
    for p in range(1, steps + 1):
        walk = g1.adjacency @ walk @ g2.adjacency.T
        total = total + w[p] * (s_mat * walk).sum()
    return total


def rw_kernel_value(g1, g2, steps, weights) -> float:
    return float(rw_kernel(g1, g2, steps, weights))
