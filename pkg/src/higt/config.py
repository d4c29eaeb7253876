"""Configuration dataclasses and their key-value text form."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml


@dataclass
class ModelConfig:
    # architecture
    feature_dim: int = 1024
    hidden_dim: int = 256
    attn_dim: int = 64
    num_gnn_layers_per_stage: int = 2
    pool_stages: int = 1
    consume_pooled: bool = True
    num_blocks: int = 2
    num_classes: int = 2
    leaky_slope: float = 0.2
    se_ratio: int = 4
    pl_residual: bool = True
    layernorm_eps: float = 1e-5
    fusion_order: str = "conv_mean"
    # ablation switches
    use_raconv_plus: bool = True
    use_ssa: bool = True
    use_bi: bool = True
    use_fusion: bool = True
    # optimisation
    optimizer: str = "adam"
    lr: float = 0.0005
    batch_size: int = 8
    epochs: int = 50
    folds: int = 5
    repeats: int = 5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("feature_dim", "hidden_dim", "attn_dim", "num_gnn_layers_per_stage",
                     "num_blocks", "num_classes", "se_ratio", "batch_size", "folds", "repeats"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.pool_stages not in (0, 1):
            raise ValueError("pool_stages must be 0 or 1 for a three-level pyramid")
        if self.hidden_dim % self.se_ratio:
            raise ValueError(f"se_ratio {self.se_ratio} must divide hidden_dim {self.hidden_dim}")
        if self.fusion_order not in ("conv_mean", "mean_conv"):
            raise ValueError(f"unknown fusion_order {self.fusion_order!r}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def desk_config(**overrides) -> ModelConfig:
    """Small single-CPU configuration for the planted-signal experiments."""
    base = dict(feature_dim=32, hidden_dim=32, attn_dim=16, num_blocks=2, epochs=10, folds=5, repeats=1)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class SynthSpec:
    """Knobs for the synthetic pyramid generator."""

    region_rows: int = 3
    region_cols: int = 3
    patch_size: int = 32
    num_classes: int = 2
    signal_strength: float = 1.0
    noise: float = 0.08
    tissue_prob: float = 0.7
    texture_prob: float = 0.5

    def __post_init__(self):
        if self.region_rows < 1 or self.region_cols < 1:
            raise ValueError("region grid must be at least 1x1")
        if self.patch_size < 4:
            raise ValueError("patch_size must be >= 4 for synthetic textures")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.signal_strength < 0 or self.noise < 0:
            raise ValueError("signal_strength and noise must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def dump_config(obj, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(obj.to_dict(), sort_keys=False))


def load_model_config(path: str | Path) -> ModelConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a key-value mapping")
    return ModelConfig.from_dict(data)


def load_synth_spec(path: str | Path) -> SynthSpec:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return SynthSpec(**data)
