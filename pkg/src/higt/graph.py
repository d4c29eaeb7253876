"""Three-level hierarchical slide graph and its HG1 binary container."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .tiles import LEVELS, TileGrid

THUMBNAIL, REGION, PATCH = 0, 1, 2
HG1_MAGIC = b"HIGTHG1\x00"
HG1_VERSION = 1

# forward half of the 8-neighbourhood; the other half is covered by symmetry
_HALF_NEIGHBOURS = ((0, 1), (1, -1), (1, 0), (1, 1))


class GraphConstructionError(ValueError):
    pass


class HG1Error(ValueError):
    """Base class for container read errors."""


class HG1FormatError(HG1Error):
    pass


class HG1ChecksumError(HG1Error):
    pass


class HG1TruncatedError(HG1Error):
    pass


@dataclass(eq=False)
class HierarchicalGraph:
    features: np.ndarray          # float32 [N, C]
    level: np.ndarray             # uint8 [N]
    coord: np.ndarray             # int32 [N, 2]
    spatial_edges: np.ndarray     # uint32 [E, 2], i < j, lexicographically sorted
    parent: np.ndarray            # int32 [N], -1 for the thumbnail
    label: int = -1
    slide_id: str = ""

    @property
    def num_nodes(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def nodes_at(self, level: int) -> np.ndarray:
        return np.flatnonzero(self.level == level)

    def level_counts(self) -> list[int]:
        return [int((self.level == k).sum()) for k in range(len(LEVELS))]

    def children(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.parent == node)

    @cached_property
    def neighbor_table(self) -> "NeighborTable":
        return NeighborTable.from_graph(self)

    def __eq__(self, other):
        if not isinstance(other, HierarchicalGraph):
            return NotImplemented
        return (self.label == other.label and self.slide_id == other.slide_id
                and all(_array_identical(getattr(self, f), getattr(other, f))
                        for f in ("features", "level", "coord", "spatial_edges", "parent")))


def _array_identical(a: np.ndarray, b: np.ndarray) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass
class NeighborTable:
    """Flattened neighbourhood views of every node, grouped by resolution.

    A node's view holds itself and its spatial neighbours (own level), its
    parent, and its children, split into one group per level.  ``edge_*``
    arrays list (target, source) memberships; ``group_*`` arrays describe the
    per-(target, level) groups the memberships fall into.
    """

    edge_target: np.ndarray
    edge_source: np.ndarray
    edge_group: np.ndarray
    group_target: np.ndarray
    group_level: np.ndarray

    @property
    def num_groups(self) -> int:
        return int(self.group_target.shape[0])

    @classmethod
    def from_graph(cls, g: HierarchicalGraph) -> "NeighborTable":
        n = g.num_nodes
        nodes = np.arange(n)
        e = g.spatial_edges.astype(np.int64).reshape(-1, 2)
        child = np.flatnonzero(g.parent >= 0)
        par = g.parent[child].astype(np.int64)
        tgt = np.concatenate([nodes, e[:, 0], e[:, 1], child, par])
        src = np.concatenate([nodes, e[:, 1], e[:, 0], par, child])
        key = tgt * len(LEVELS) + g.level[src].astype(np.int64)
        order = np.lexsort((src, key))
        tgt, src, key = tgt[order], src[order], key[order]
        uniq, group = np.unique(key, return_inverse=True)
        return cls(tgt, src, group.reshape(-1), uniq // len(LEVELS), uniq % len(LEVELS))


def neighborhood_view(g: HierarchicalGraph, node: int) -> dict[int, list[int]]:
    """Resolution level -> sorted member list for one node's neighbourhood."""
    t = g.neighbor_table
    sel = t.edge_target == node
    view: dict[int, list[int]] = {}
    for src in t.edge_source[sel]:
        view.setdefault(int(g.level[src]), []).append(int(src))
    return {k: sorted(v) for k, v in sorted(view.items())}


def spatial_adjacency(coords: Sequence[tuple[int, int]]) -> np.ndarray:
    """Unordered index pairs (i < j) at Chebyshev distance exactly 1."""
    coords = [tuple(int(x) for x in rc) for rc in coords]
    index = {rc: i for i, rc in enumerate(coords)}
    if len(index) != len(coords):
        raise ValueError("duplicate coordinates in spatial_adjacency")
    pairs = []
    for i, (r, c) in enumerate(coords):
        for dr, dc in _HALF_NEIGHBOURS:
            j = index.get((r + dr, c + dc))
            if j is not None:
                pairs.append((min(i, j), max(i, j)))
    if not pairs:
        return np.zeros((0, 2), dtype=np.uint32)
    return np.array(sorted(pairs), dtype=np.uint32)


def scaling_parent(patch_coord: tuple[int, int]) -> tuple[int, int]:
    row, col = patch_coord
    return row // 2, col // 2


def build_hierarchical_graph(grids: Mapping[str, TileGrid], label: int = -1,
                             slide_id: str = "") -> HierarchicalGraph:
    """Assemble nodes (thumbnail, regions row-major, patches row-major) and edges."""
    if "thumbnail" not in grids or "region" not in grids:
        raise GraphConstructionError("grids need at least thumbnail and region levels")
    ordered = []
    for lv, name in enumerate(LEVELS):
        grid = grids.get(name)
        tiles = sorted(grid.tiles, key=lambda t: (t.row, t.col)) if grid is not None else []
        if lv == THUMBNAIL and len(tiles) != 1:
            raise GraphConstructionError(f"expected one thumbnail tile, got {len(tiles)}")
        if lv == REGION and not tiles:
            raise GraphConstructionError("no region tiles: empty slide")
        ordered.append(tiles)

    feats, level, coord = [], [], []
    for lv, tiles in enumerate(ordered):
        for t in tiles:
            if t.feature is None:
                raise GraphConstructionError(f"{LEVELS[lv]} tile ({t.row}, {t.col}) has no feature")
            feats.append(t.feature)
            level.append(lv)
            coord.append((t.row, t.col))
    dims = {len(f) for f in feats}
    if len(dims) != 1:
        raise GraphConstructionError(f"inconsistent feature lengths {sorted(dims)}")

    n_reg = len(ordered[REGION])
    region_index = {(t.row, t.col): 1 + i for i, t in enumerate(ordered[REGION])}
    parent = [-1] + [0] * n_reg
    for t in ordered[PATCH]:
        p = region_index.get(scaling_parent((t.row, t.col)))
        if p is None:
            raise GraphConstructionError(
                f"patch tile ({t.row}, {t.col}) has no region parent at {scaling_parent((t.row, t.col))}")
        parent.append(p)

    edges = []
    offset = 1
    for lv in (REGION, PATCH):
        tiles = ordered[lv]
        e = spatial_adjacency([(t.row, t.col) for t in tiles]).astype(np.int64) + offset
        edges.append(e)
        offset += len(tiles)
    spatial = np.concatenate(edges).astype(np.uint32) if edges else np.zeros((0, 2), np.uint32)

    return HierarchicalGraph(
        features=np.stack(feats).astype(np.float32),
        level=np.array(level, dtype=np.uint8),
        coord=np.array(coord, dtype=np.int32).reshape(-1, 2),
        spatial_edges=spatial.reshape(-1, 2),
        parent=np.array(parent, dtype=np.int32),
        label=int(label),
        slide_id=slide_id,
    )


def validate(g: HierarchicalGraph) -> list[str]:
    """Return one message per broken invariant (empty when the graph is sound)."""
    problems: list[str] = []
    n = g.features.shape[0] if g.features.ndim == 2 else -1
    if g.features.ndim != 2:
        return ["features must be a 2-D matrix"]
    for name in ("level", "parent"):
        if getattr(g, name).shape != (n,):
            problems.append(f"{name} length {getattr(g, name).shape} != num_nodes {n}")
    if g.coord.shape != (n, 2):
        problems.append(f"coord shape {g.coord.shape} != ({n}, 2)")
    if problems:
        return problems
    if not np.isfinite(g.features).all():
        bad = np.flatnonzero(~np.isfinite(g.features).all(axis=1))
        problems.append(f"non-finite features @node {int(bad[0])}")
    thumbs = np.flatnonzero(g.level == THUMBNAIL)
    if len(thumbs) != 1:
        problems.append(f"expected exactly one thumbnail node, found {len(thumbs)}")
    if np.any(g.level > PATCH):
        problems.append(f"unknown level @node {int(np.flatnonzero(g.level > PATCH)[0])}")
    for k in range(n):
        p = int(g.parent[k])
        lv = int(g.level[k])
        if lv == THUMBNAIL:
            if p != -1:
                problems.append(f"thumbnail has a parent @node {k}")
            continue
        if not 0 <= p < n:
            problems.append(f"missing parent @node {k}")
        elif int(g.level[p]) != lv - 1:
            kind = "level-skip parent" if int(g.level[p]) < lv - 1 else "bad parent level"
            problems.append(f"{kind} @node {k}")
    seen = set()
    for i, j in g.spatial_edges.astype(np.int64):
        i, j = int(i), int(j)
        if not (0 <= i < n and 0 <= j < n) or i == j:
            problems.append(f"invalid spatial edge ({i}, {j})")
            continue
        if (min(i, j), max(i, j)) in seen:
            problems.append(f"duplicate spatial edge ({i}, {j})")
        seen.add((min(i, j), max(i, j)))
        if g.level[i] != g.level[j]:
            problems.append(f"cross-level spatial edge ({i}, {j})")
        elif g.level[i] == THUMBNAIL:
            problems.append(f"thumbnail spatial edge ({i}, {j})")
        elif np.abs(g.coord[i].astype(np.int64) - g.coord[j]).max() != 1:
            problems.append(f"non-adjacent spatial edge ({i}, {j})")
    return problems


# --------------------------------------------------------------------------- HG1 io

_ARRAYS = (
    ("features", "<f4"),
    ("level", "u1"),
    ("coord", "<i4"),
    ("spatial_edges", "<u4"),
    ("parent", "<i4"),
)


def to_bytes(g: HierarchicalGraph) -> bytes:
    blobs, offsets, pos = [], {}, 0
    for name, dt in _ARRAYS:
        raw = np.ascontiguousarray(getattr(g, name), dtype=dt).tobytes()
        offsets[name] = [pos, len(raw)]
        blobs.append(raw)
        pos += len(raw)
    header = {
        "version": HG1_VERSION,
        "slide_id": g.slide_id,
        "label": int(g.label),
        "num_nodes": g.num_nodes,
        "C": g.feature_dim,
        "num_edges": int(g.spatial_edges.shape[0]),
        "counts": g.level_counts(),
        "offsets": offsets,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs)
    return HG1_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def from_bytes(data: bytes) -> HierarchicalGraph:
    if len(data) < len(HG1_MAGIC):
        raise HG1TruncatedError("file shorter than the HG1 magic")
    if data[:8] != HG1_MAGIC:
        raise HG1FormatError(f"bad magic {data[:8]!r}, expected {HG1_MAGIC!r}")
    body = data[8:]
    if len(body) < 8:
        raise HG1TruncatedError("missing header length")
    (hlen,) = struct.unpack_from("<I", body, 0)
    if len(body) < 4 + hlen + 4:
        raise HG1TruncatedError("truncated header")
    try:
        header = json.loads(body[4:4 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError):
        # a damaged header is either corruption or not our format; the CRC decides
        if zlib.crc32(body[:-4]) != struct.unpack("<I", body[-4:])[0]:
            raise HG1ChecksumError("CRC32 mismatch (header corrupted)") from None
        raise HG1FormatError("unreadable JSON header") from None
    if header.get("version") != HG1_VERSION:
        raise HG1FormatError(f"unsupported HG1 version {header.get('version')}")
    array_len = sum(ln for _, ln in header["offsets"].values())
    expected = 4 + hlen + array_len + 4
    if len(body) < expected:
        raise HG1TruncatedError(f"expected {expected + 8} bytes, got {len(data)}")
    if len(body) > expected:
        raise HG1FormatError("trailing bytes after checksum")
    payload, (crc,) = body[:-4], struct.unpack("<I", body[-4:])
    if zlib.crc32(payload) != crc:
        raise HG1ChecksumError("CRC32 mismatch")
    base = 4 + hlen
    n, c, ne = header["num_nodes"], header["C"], header["num_edges"]
    shapes = {"features": (n, c), "level": (n,), "coord": (n, 2),
              "spatial_edges": (ne, 2), "parent": (n,)}
    arrays = {}
    for name, dt in _ARRAYS:
        off, ln = header["offsets"][name]
        arr = np.frombuffer(payload, dtype=dt, count=ln // np.dtype(dt).itemsize, offset=base + off)
        arrays[name] = arr.reshape(shapes[name]).astype(np.dtype(dt).newbyteorder("="))
    return HierarchicalGraph(label=int(header["label"]), slide_id=header["slide_id"], **arrays)


def save(g: HierarchicalGraph, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(g))


def load(path: str | Path) -> HierarchicalGraph:
    return from_bytes(Path(path).read_bytes())
