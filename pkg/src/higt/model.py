"""Fusion head, slide classifier and the end-to-end HIGT model."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .graph import HierarchicalGraph
from .hivit import HIViT
from .pooling import ParentPool, pooled_token_sets
from .raconv import RAConvPlus

CKPT_MAGIC = b"HIGTCK1\x00"
CKPT_VERSION = 1

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class CheckpointError(ValueError):
    pass


@dataclass
class SlidePrediction:
    logits: np.ndarray
    probs: np.ndarray
    pred: int

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "SlidePrediction":
        logits = logits.detach().to(torch.float64)
        probs = torch.softmax(logits, dim=-1)
        return cls(logits.numpy().copy(), probs.numpy().copy(), int(torch.argmax(logits)))


def fuse(thumbnail: torch.Tensor, gnn_patch: torch.Tensor, hivit_patch: torch.Tensor,
         conv: nn.Linear) -> torch.Tensor:
    """(gnn patches + thumbnail) concatenated with HIViT patches, then a 1x1 conv."""
    if gnn_patch.shape != hivit_patch.shape:
        raise ValueError(f"fusion streams disagree: {tuple(gnn_patch.shape)} vs {tuple(hivit_patch.shape)}")
    coarse = gnn_patch + thumbnail
    return conv(torch.cat([coarse, hivit_patch], dim=-1))


def classify(tokens: torch.Tensor, classifier: nn.Linear) -> torch.Tensor:
    if tokens.shape[0] == 0:
        raise ValueError("cannot classify an empty token set")
    return classifier(tokens.mean(dim=0))


class HIGT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        dims = [c.feature_dim] + [c.hidden_dim] * c.num_gnn_layers_per_stage
        self.gnn = nn.ModuleList(
            RAConvPlus(d_in, d_out, c.attn_dim, c.leaky_slope, plus=c.use_raconv_plus)
            for d_in, d_out in zip(dims[:-1], dims[1:]))
        self.pool = ParentPool(c.hidden_dim) if c.pool_stages else None
        self.input_proj = None if c.consume_pooled else nn.Linear(c.feature_dim, c.hidden_dim)
        self.hivit = HIViT(c.hidden_dim, c.num_blocks, use_ssa=c.use_ssa, use_bi=c.use_bi,
                           residual=c.pl_residual, se_ratio=c.se_ratio, eps=c.layernorm_eps)
        self.fusion = nn.Linear(2 * c.hidden_dim, c.hidden_dim)
        self.classifier = nn.Linear(c.hidden_dim, c.num_classes)
        # the unnormalised score matrix grows activations layer by layer; a near-zero
        # head starts every slide at near-uniform logits instead of a large random gap
        nn.init.normal_(self.classifier.weight, std=1e-3)
        nn.init.zeros_(self.classifier.bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.classifier.weight.dtype

    def _check(self, stage: str, x: torch.Tensor):
        if not torch.isfinite(x).all():
            raise StageError(stage, "non-finite values")
        return x

    def forward(self, graph: HierarchicalGraph) -> torch.Tensor:
        c = self.config
        if graph.feature_dim != c.feature_dim:
            raise StageError("input", f"graph has C={graph.feature_dim}, model expects {c.feature_dim}")
        X = torch.from_numpy(graph.features).to(self.dtype)
        self._check("input", X)

        H = X
        for layer in self.gnn:
            H = self._check("raconv", layer(graph, H))
        pooled = None
        if self.pool is not None:
            _, pooled, _ = self.pool(graph, H)
            self._check("pool", pooled)
        gnn_tokens = pooled_token_sets(graph, H, pooled)

        if c.consume_pooled:
            vit_in = gnn_tokens
        else:
            vit_in = pooled_token_sets(graph, self.input_proj(X))
        if vit_in.patches.shape[0] == 0:
            raise StageError("tokens", "graph has no patch nodes")
        try:
            vit_patch, _ = self.hivit(vit_in.regions, vit_in.patches, vit_in.group, vit_in.thumbnail)
        except ValueError as exc:
            raise StageError("hivit", str(exc)) from exc
        self._check("hivit", vit_patch)

        if c.use_fusion and c.fusion_order == "conv_mean":
            fused = fuse(gnn_tokens.thumbnail, gnn_tokens.patches, vit_patch, self.fusion)
            logits = classify(fused, self.classifier)
        elif c.use_fusion:
            # conv and mean are both linear, so this equals conv_mean up to rounding
            coarse = gnn_tokens.patches + gnn_tokens.thumbnail
            pooled_vec = torch.cat([coarse, vit_patch], dim=-1).mean(dim=0)
            logits = self.classifier(self.fusion(pooled_vec))
        else:
            logits = classify(vit_patch, self.classifier)
        return self._check("classifier", logits)

    @torch.no_grad()
    def predict(self, graph: HierarchicalGraph) -> SlidePrediction:
        was_training = self.training
        self.eval()
        try:
            return SlidePrediction.from_logits(self(graph))
        finally:
            self.train(was_training)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig, seed: int | None = None) -> HIGT:
    torch.manual_seed(config.seed if seed is None else seed)
    return HIGT(config).to(DTYPES[config.dtype])


def higt_forward(graph: HierarchicalGraph, model: HIGT) -> SlidePrediction:
    return model.predict(graph)


# --------------------------------------------------------------------------- checkpoints

def checkpoint_bytes(model: HIGT, extra: dict | None = None) -> bytes:
    entries, blobs, pos = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                        "offset": pos, "nbytes": len(raw)})
        blobs.append(raw)
        pos += len(raw)
    header = {"version": CKPT_VERSION, "config": model.config.to_dict(),
              "params": entries, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs)
    return CKPT_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def model_from_checkpoint_bytes(data: bytes) -> tuple[HIGT, dict]:
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError("not a HIGT checkpoint (bad magic)")
    body = data[8:]
    if len(body) < 8:
        raise CheckpointError("truncated checkpoint")
    payload, (crc,) = body[:-4], struct.unpack("<I", body[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint CRC32 mismatch")
    (hlen,) = struct.unpack_from("<I", payload, 0)
    header = json.loads(payload[4:4 + hlen])
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    config = ModelConfig.from_dict(header["config"])
    model = HIGT(config).to(DTYPES[config.dtype])
    base = 4 + hlen
    state = {}
    for e in header["params"]:
        arr = np.frombuffer(payload, dtype=e["dtype"], count=e["nbytes"] // np.dtype(e["dtype"]).itemsize,
                            offset=base + e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.dtype(e["dtype"]).newbyteorder("=")))
    model.load_state_dict(state, strict=True)
    return model, header.get("extra", {})


def save_checkpoint(model: HIGT, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def load_checkpoint(path: str | Path) -> tuple[HIGT, dict]:
    return model_from_checkpoint_bytes(Path(path).read_bytes())
