import numpy as np
import pytest
import torch

from higt.config import ModelConfig, SynthSpec
from higt.data import synth_dataset
from higt.graph import build_hierarchical_graph
from higt.tiles import TileGrid, TileRecord

torch.set_num_threads(1)


def grids_from_coords(region_coords, patch_coords, dim=4, seed=0, region_shape=None):
    """Hand-built grids with random features; patch coords are absolute on the 2x grid."""
    rng = np.random.default_rng(seed)
    rows = 1 + max(r for r, _ in region_coords)
    cols = 1 + max(c for _, c in region_coords)
    rows, cols = region_shape or (rows, cols)

    def grid(level, coords, shape):
        present = np.zeros(shape, dtype=bool)
        tiles = []
        for r, c in coords:
            present[r, c] = True
            tiles.append(TileRecord(level, r, c, feature=rng.standard_normal(dim).astype(np.float32)))
        return TileGrid(level, shape[0], shape[1], present, tiles)

    return {
        "thumbnail": grid("thumbnail", [(0, 0)], (1, 1)),
        "region": grid("region", region_coords, (rows, cols)),
        "patch": grid("patch", patch_coords, (2 * rows, 2 * cols)),
    }


def graph_from_coords(region_coords, patch_coords, dim=4, seed=0, label=0):
    return build_hierarchical_graph(grids_from_coords(region_coords, patch_coords, dim, seed), label)


def random_graph(rng, max_nodes=30, dim=4):
    """Random sparse pyramid with at most ``max_nodes`` nodes; every region keeps >= 1 patch."""
    while True:
        rows, cols = rng.integers(1, 4, size=2)
        mask = rng.random((rows, cols)) < 0.7
        if not mask.any():
            continue
        regions = [tuple(map(int, rc)) for rc in np.argwhere(mask)]
        patches = []
        for r, c in regions:
            quad = [(2 * r + dr, 2 * c + dc) for dr in (0, 1) for dc in (0, 1)]
            keep = [q for q in quad if rng.random() < 0.6] or [quad[int(rng.integers(4))]]
            patches += keep
        if 1 + len(regions) + len(patches) <= max_nodes:
            return graph_from_coords(regions, sorted(patches), dim, int(rng.integers(1 << 30)))


@pytest.fixture
def single_region_graph():
    return graph_from_coords([(0, 0)], [(0, 0), (0, 1), (1, 0), (1, 1)], dim=4, seed=3)


@pytest.fixture
def two_region_graph():
    # regions (0,0) and (0,1); five patches split {3, 2}
    return graph_from_coords([(0, 0), (0, 1)], [(0, 0), (0, 1), (1, 1), (0, 2), (1, 3)], dim=4, seed=5)


def micro_config(**kw):
    """C = 8, one HIViT block, double precision."""
    base = dict(feature_dim=8, hidden_dim=8, attn_dim=4, num_blocks=1, se_ratio=4, dtype="float64",
                batch_size=2, epochs=1, folds=2, repeats=1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def micro_graphs():
    return synth_dataset(4, SynthSpec(region_rows=2, region_cols=2), feature_dim=8)


# --------------------------------------------------------------------------- acceptance summary

_CRITERIA: dict[str, tuple] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    prev = _CRITERIA.get(item.nodeid)
    passed = rep.passed and (prev is None or prev[2])
    _CRITERIA[item.nodeid] = (number, title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    merged: dict[int, list] = {}
    for number, title, passed, detail in _CRITERIA.values():
        entry = merged.setdefault(number, [title, True, []])
        entry[1] = entry[1] and passed
        if detail:
            entry[2].append(detail)
    for number in sorted(merged):
        title, passed, details = merged[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        if details:
            line += "  [" + " | ".join(details) + "]"
        terminalreporter.write_line(line)
