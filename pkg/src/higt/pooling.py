"""Hierarchy-guided soft pooling of the deepest pyramid level into its parents.

Each child gets a score from a learned scalar projection, softmax-normalised
among its siblings; a parent's cluster embedding is the score-weighted sum of
its children plus its own embedding.  This is a stand-in with the same
contract as the IHPool operator (children collapse into their pyramid parents),
not a transcription of it.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .graph import PATCH, REGION, THUMBNAIL, HierarchicalGraph
from .raconv import scatter_softmax


@dataclass
class PoolAssignment:
    step: int
    child_to_cluster: np.ndarray   # child node index -> cluster (= surviving parent) index
    children: np.ndarray           # child node indices, aligned with child_to_cluster
    cluster_score: torch.Tensor    # per child, sums to 1 within each sibling group
    pooled_graph: HierarchicalGraph

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "children": self.children.tolist(),
            "child_to_cluster": self.child_to_cluster.tolist(),
            "cluster_score": self.cluster_score.detach().cpu().tolist(),
        }


@dataclass
class TokenSets:
    thumbnail: torch.Tensor   # [C]
    regions: torch.Tensor     # [N, C]
    patches: torch.Tensor     # [P, C], patch nodes in graph order
    group: torch.Tensor       # [P] region index (0..N-1) of each patch

    @property
    def group_sizes(self) -> list[int]:
        return torch.bincount(self.group, minlength=self.regions.shape[0]).tolist()


def drop_deepest_level(graph: HierarchicalGraph) -> HierarchicalGraph:
    deepest = int(graph.level.max())
    keep = graph.level < deepest
    # deepest nodes come last in node order, so surviving indices are unchanged
    n_keep = int(keep.sum())
    if not keep[:n_keep].all():
        raise ValueError("node order must place the deepest level last")
    edges = graph.spatial_edges
    edges = edges[(edges < n_keep).all(axis=1)] if len(edges) else edges
    return HierarchicalGraph(
        features=graph.features[:n_keep].copy(),
        level=graph.level[:n_keep].copy(),
        coord=graph.coord[:n_keep].copy(),
        spatial_edges=edges.copy(),
        parent=graph.parent[:n_keep].copy(),
        label=graph.label,
        slide_id=graph.slide_id,
    )


class ParentPool(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.score = nn.Parameter(torch.empty(dim))
        nn.init.uniform_(self.score, -1.0 / dim ** 0.5, 1.0 / dim ** 0.5)

    def forward(self, graph: HierarchicalGraph, H: torch.Tensor, step: int = 0):
        """One pooling step: ``(pooled graph, pooled H, PoolAssignment | None)``."""
        deepest = int(graph.level.max())
        if deepest <= REGION:
            warnings.warn("graph already reduced to thumbnail plus one level; pooling is a no-op",
                          RuntimeWarning, stacklevel=2)
            return graph, H, None
        children = np.flatnonzero(graph.level == deepest)
        pooled_graph = drop_deepest_level(graph)
        n_keep = pooled_graph.num_nodes
        parents = torch.from_numpy(graph.parent[children].astype(np.int64))
        kids = torch.from_numpy(children)
        logits = H[kids] @ self.score
        scores = scatter_softmax(logits, parents, n_keep)
        pooled = H[:n_keep].index_add(0, parents, scores[:, None] * H[kids])
        assignment = PoolAssignment(step, graph.parent[children].astype(np.int64), children,
                                    scores, pooled_graph)
        return pooled_graph, pooled, assignment


def pool_step(graph: HierarchicalGraph, H: torch.Tensor, pool: ParentPool, step: int = 0):
    return pool(graph, H, step)


def pooled_token_sets(graph: HierarchicalGraph, H: torch.Tensor,
                      pooled_H: torch.Tensor | None = None) -> TokenSets:
    """Split node embeddings into thumbnail, region and grouped patch tokens.

    ``graph``/``H`` describe the unpooled three-level graph; when ``pooled_H``
    is given (the output of a pooling step) the thumbnail and region tokens are
    taken from it, so patch grouping is unchanged while region features carry
    the aggregated child information.
    """
    thumb = graph.nodes_at(THUMBNAIL)
    regions = graph.nodes_at(REGION)
    patches = graph.nodes_at(PATCH)
    if len(thumb) != 1 or len(regions) == 0:
        raise ValueError("token extraction needs one thumbnail and at least one region node")
    src = H if pooled_H is None else pooled_H
    region_pos = np.full(graph.num_nodes, -1, dtype=np.int64)
    region_pos[regions] = np.arange(len(regions))
    group = region_pos[graph.parent[patches]]
    if (group < 0).any():
        raise ValueError("patch node whose parent is not a region")
    return TokenSets(
        thumbnail=src[int(thumb[0])],
        regions=src[torch.from_numpy(regions)],
        patches=H[torch.from_numpy(patches)],
        group=torch.from_numpy(group),
    )
