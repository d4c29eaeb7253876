"""Dataset helpers: synthetic graph sets and HG1 directories."""
from __future__ import annotations

from pathlib import Path

from .config import SynthSpec
from .graph import HierarchicalGraph, build_hierarchical_graph, load
from .tiles import RandomProjectionExtractor, ingest_slide, synth_slide


def synth_graph(seed: int, spec: SynthSpec, extractor, slide_id: str | None = None) -> HierarchicalGraph:
    raster, label = synth_slide(seed, spec)
    slide_id = slide_id or f"synth_{seed:05d}"
    grids = ingest_slide(raster, extractor, spec.patch_size, slide_id)
    return build_hierarchical_graph(grids, label, slide_id)


def synth_dataset(n: int, spec: SynthSpec | None = None, seed: int = 0, feature_dim: int = 32,
                  extractor_seed: int = 0) -> list[HierarchicalGraph]:
    """``n`` graphs from consecutive slide seeds ``seed * 100_000 + i``.

    Labels cycle with the slide seed, so any ``n`` divisible by the class count
    is exactly balanced.
    """
    spec = spec or SynthSpec()
    extractor = RandomProjectionExtractor(feature_dim, extractor_seed)
    base = seed * 100_000
    return [synth_graph(base + i, spec, extractor, f"synth_{base + i:07d}") for i in range(n)]


def load_dataset(directory: str | Path) -> list[HierarchicalGraph]:
    paths = sorted(Path(directory).glob("*.hg1"))
    if not paths:
        raise FileNotFoundError(f"no .hg1 graphs in {directory}")
    return [load(p) for p in paths]
