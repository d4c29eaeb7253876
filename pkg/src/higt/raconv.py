"""RAConv+: resolution-aware dual attention over the hierarchical graph.

For target node j the neighbourhood is split into one group per pyramid level.
A resolution-level softmax weighs the groups through their mean embeddings and
a node-level softmax weighs members inside each group; a member's score is the
sum of its group's weight and its own weight, so it lies in (0, 2).  The score
matrix is used as is (no renormalisation) to propagate ``H @ W``.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .graph import HierarchicalGraph


def scatter_softmax(logits: torch.Tensor, index: torch.Tensor, size: int) -> torch.Tensor:
    """Softmax of ``logits`` within each bucket of ``index``."""
    peak = torch.full((size,), -math.inf, dtype=logits.dtype, device=logits.device)
    peak = peak.scatter_reduce(0, index, logits.detach(), reduce="amax", include_self=True)
    ex = torch.exp(logits - peak[index])
    denom = torch.zeros(size, dtype=logits.dtype, device=logits.device).index_add(0, index, ex)
    return ex / denom[index]


def _pair_logit(proj: torch.Tensor, vec: torch.Tensor, h_j: torch.Tensor, others: torch.Tensor,
                slope: float, plus: bool) -> torch.Tensor:
    d = proj.shape[1]
    z_j = (h_j @ proj).expand(others.shape[0], d)
    z = torch.cat([z_j, others @ proj], dim=-1)
    if plus:
        return F.leaky_relu(z, slope) @ vec
    return F.leaky_relu(z @ vec, slope)


def resolution_attention(h_j, means, U, a, slope: float = 0.2, plus: bool = True) -> torch.Tensor:
    """Weights over resolution groups from their mean embeddings ``means`` [K, C]."""
    if means.shape[0] == 0:
        raise ValueError("empty neighbourhood: no resolution group to normalise over")
    return torch.softmax(_pair_logit(U, a, h_j, means, slope, plus), dim=0)


def node_attention(h_j, group, V, b, slope: float = 0.2, plus: bool = True) -> torch.Tensor:
    """Weights over the members ``group`` [m, C] of one resolution group."""
    if group.shape[0] == 0:
        raise ValueError("empty resolution group")
    return torch.softmax(_pair_logit(V, b, h_j, group, slope, plus), dim=0)


def combined_attention(alpha_k, alpha_nodes):
    return alpha_k + alpha_nodes


class RAConvPlus(nn.Module):
    """One propagation layer ``H' = sigma(A @ H @ W)`` with the dual-attention ``A``.

    ``plus=False`` gives the variant that applies LeakyReLU after the scoring
    dot product instead of between the projection and the scoring vector.
    ``activation=None`` disables the output non-linearity.
    """

    def __init__(self, in_dim: int, out_dim: int, attn_dim: int = 64, leaky_slope: float = 0.2,
                 plus: bool = True, activation=F.elu):
        super().__init__()
        self.in_dim, self.out_dim, self.attn_dim = in_dim, out_dim, attn_dim
        self.leaky_slope = leaky_slope
        self.plus = plus
        self.activation = activation
        self.U = nn.Parameter(torch.empty(in_dim, attn_dim))
        self.V = nn.Parameter(torch.empty(in_dim, attn_dim))
        self.a = nn.Parameter(torch.empty(2 * attn_dim))
        self.b = nn.Parameter(torch.empty(2 * attn_dim))
        self.W = nn.Parameter(torch.empty(in_dim, out_dim))
        self.reset_parameters()

    def reset_parameters(self):
        for p in (self.U, self.V, self.W):
            nn.init.xavier_uniform_(p)
        bound = 1.0 / math.sqrt(2 * self.attn_dim)
        nn.init.uniform_(self.a, -bound, bound)
        nn.init.uniform_(self.b, -bound, bound)

    def _score(self, z: torch.Tensor, vec: torch.Tensor) -> torch.Tensor:
        if self.plus:
            return F.leaky_relu(z, self.leaky_slope) @ vec
        return F.leaky_relu(z @ vec, self.leaky_slope)

    def attention_parts(self, graph: HierarchicalGraph, H: torch.Tensor):
        """Per-group resolution weights and per-membership node weights.

        Returns ``(alpha_k [groups], alpha_n [memberships])``; both index into
        ``graph.neighbor_table``.
        """
        t = graph.neighbor_table
        src = torch.from_numpy(t.edge_source)
        tgt = torch.from_numpy(t.edge_target)
        grp = torch.from_numpy(t.edge_group)
        gtgt = torch.from_numpy(t.group_target)
        n_groups = t.num_groups

        counts = torch.bincount(grp, minlength=n_groups).to(H.dtype)
        means = torch.zeros(n_groups, H.shape[1], dtype=H.dtype).index_add(0, grp, H[src])
        means = means / counts[:, None]

        UH = H @ self.U
        res_logit = self._score(torch.cat([UH[gtgt], means @ self.U], dim=-1), self.a)
        alpha_k = scatter_softmax(res_logit, gtgt, H.shape[0])

        VH = H @ self.V
        node_logit = self._score(torch.cat([VH[tgt], VH[src]], dim=-1), self.b)
        alpha_n = scatter_softmax(node_logit, grp, n_groups)
        return alpha_k, alpha_n

    def edge_scores(self, graph: HierarchicalGraph, H: torch.Tensor):
        """(target, source, combined score) for every neighbourhood membership."""
        t = graph.neighbor_table
        alpha_k, alpha_n = self.attention_parts(graph, H)
        grp = torch.from_numpy(t.edge_group)
        return (torch.from_numpy(t.edge_target), torch.from_numpy(t.edge_source),
                combined_attention(alpha_k[grp], alpha_n))

    def attention_matrix(self, graph: HierarchicalGraph, H: torch.Tensor) -> torch.Tensor:
        tgt, src, score = self.edge_scores(graph, H)
        A = torch.zeros(H.shape[0], H.shape[0], dtype=H.dtype)
        return A.index_put((tgt, src), score)

    def forward(self, graph: HierarchicalGraph, H: torch.Tensor) -> torch.Tensor:
        if H.shape[0] != graph.num_nodes or H.shape[1] != self.in_dim:
            raise ValueError(f"RAConv+ expects H of shape ({graph.num_nodes}, {self.in_dim}), "
                             f"got {tuple(H.shape)}")
        if not torch.isfinite(H).all():
            raise ValueError("RAConv+ input contains NaN or Inf")
        tgt, src, score = self.edge_scores(graph, H)
        HW = H @ self.W
        out = torch.zeros(H.shape[0], self.out_dim, dtype=H.dtype).index_add(
            0, tgt, score[:, None] * HW[src])
        return self.activation(out) if self.activation is not None else out
