"""Hierarchical interaction ViT: patch blocks, bidirectional interaction, region blocks."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class SeparableSelfAttention(nn.Module):
    """Attention through a single latent context vector; O(n) in the token count.

    scores = softmax_n(x W_I); context = sum_n scores_n (x_n W_K);
    out_n = (relu(x_n W_V) * context) W_O
    """

    def __init__(self, dim: int):
        super().__init__()
        self.W_I = nn.Parameter(torch.empty(dim, 1))
        self.W_K = nn.Parameter(torch.empty(dim, dim))
        self.W_V = nn.Parameter(torch.empty(dim, dim))
        self.W_O = nn.Parameter(torch.empty(dim, dim))
        for p in self.parameters():
            nn.init.xavier_uniform_(p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[0] == 0:
            raise ValueError("separable attention needs at least one token")
        scores = torch.softmax(x @ self.W_I, dim=0)            # [n, 1]
        context = (scores * (x @ self.W_K)).sum(dim=0)         # [C]
        return (F.relu(x @ self.W_V) * context) @ self.W_O


class FullSelfAttention(nn.Module):
    """Single-head scaled dot-product attention (quadratic in tokens)."""

    def __init__(self, dim: int):
        super().__init__()
        self.W_Q = nn.Parameter(torch.empty(dim, dim))
        self.W_K = nn.Parameter(torch.empty(dim, dim))
        self.W_V = nn.Parameter(torch.empty(dim, dim))
        self.W_O = nn.Parameter(torch.empty(dim, dim))
        for p in self.parameters():
            nn.init.xavier_uniform_(p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[0] == 0:
            raise ValueError("attention needs at least one token")
        q, k, v = x @ self.W_Q, x @ self.W_K, x @ self.W_V
        attn = torch.softmax(q @ k.T / math.sqrt(x.shape[1]), dim=-1)
        return (attn @ v) @ self.W_O


class TokenBlock(nn.Module):
    """attention -> 1x1 conv (per-token linear) -> LayerNorm, optionally residual."""

    def __init__(self, dim: int, use_ssa: bool = True, residual: bool = True, eps: float = 1e-5):
        super().__init__()
        self.attn = SeparableSelfAttention(dim) if use_ssa else FullSelfAttention(dim)
        self.conv = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim, eps=eps)
        self.residual = residual

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[0] == 0:
            raise ValueError("token block received an empty token set")
        y = self.norm(self.conv(self.attn(x)))
        return x + y if self.residual else y

    def make_identity(self) -> None:
        if not self.residual:
            raise ValueError("identity initialisation needs the residual path")
        with torch.no_grad():
            self.norm.weight.zero_()
            self.norm.bias.zero_()


class SqueezeExcite(nn.Module):
    """Channel gates from the mean over a token set: sigmoid(W2 relu(W1 mean(x)))."""

    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        if dim % ratio:
            raise ValueError(f"reduction ratio {ratio} must divide {dim}")
        self.fc1 = nn.Linear(dim, dim // ratio)
        self.fc2 = nn.Linear(dim // ratio, dim)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(F.relu(self.fc1(x.mean(dim=0)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.gates(x) * x

    def make_closed(self, bias: float = -40.0) -> None:
        """Drive every gate to ~0 (used to build identity blocks)."""
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
            self.fc2.bias.fill_(bias)


def group_mean(tokens: torch.Tensor, group: torch.Tensor, num_groups: int) -> torch.Tensor:
    counts = torch.bincount(group, minlength=num_groups)
    if (counts == 0).any():
        empty = int(torch.nonzero(counts == 0)[0])
        raise ValueError(f"region {empty} has no patch tokens")
    sums = torch.zeros(num_groups, tokens.shape[1], dtype=tokens.dtype).index_add(0, group, tokens)
    return sums / counts[:, None].to(tokens.dtype)


class BidirectionalInteraction(nn.Module):
    def __init__(self, dim: int, ratio: int = 4, patch_to_region: bool = True):
        super().__init__()
        self.se_region = SqueezeExcite(dim, ratio)
        self.se_patch = SqueezeExcite(dim, ratio)
        self.patch_to_region = patch_to_region

    def region_to_patch(self, regions, patches, group):
        if group.numel() and int(group.max()) >= regions.shape[0]:
            raise ValueError("patch group refers to a missing region")
        gated = self.se_region(regions)
        return patches + gated[group]

    def patch_to_region_update(self, patches, regions, group):
        means = group_mean(patches, group, regions.shape[0])
        return self.se_patch(means) + regions

    def forward(self, regions, patches_hat, group):
        new_patches = self.region_to_patch(regions, patches_hat, group)
        if self.patch_to_region:
            new_regions = self.patch_to_region_update(patches_hat, regions, group)
        else:
            new_regions = regions
        return new_patches, new_regions


class HIViTBlock(nn.Module):
    def __init__(self, dim: int, use_ssa: bool = True, use_bi: bool = True, residual: bool = True,
                 se_ratio: int = 4, eps: float = 1e-5):
        super().__init__()
        self.pl = TokenBlock(dim, use_ssa, residual, eps)
        self.bi = BidirectionalInteraction(dim, se_ratio, patch_to_region=use_bi)
        self.rl = TokenBlock(dim, use_ssa, residual, eps)

    def forward(self, regions, patches, group):
        patches_hat = self.pl(patches)
        patches_next, regions_hat = self.bi(regions, patches_hat, group)
        return patches_next, self.rl(regions_hat)

    def make_identity(self) -> None:
        self.pl.make_identity()
        self.rl.make_identity()
        self.bi.se_region.make_closed()
        self.bi.se_patch.make_closed()


class HIViT(nn.Module):
    def __init__(self, dim: int, num_blocks: int = 2, **block_kw):
        super().__init__()
        if num_blocks < 1:
            raise ValueError("HIViT needs at least one block")
        self.blocks = nn.ModuleList(HIViTBlock(dim, **block_kw) for _ in range(num_blocks))

    def forward(self, regions, patches, group, thumbnail=None):
        for block in self.blocks:
            patches, regions = block(regions, patches, group)
        return patches, regions


def hivit_forward(regions, patches, group, model: HIViT, thumbnail=None):
    return model(regions, patches, group, thumbnail)
