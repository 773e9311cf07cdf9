"""Semantic map representations and their affinity-driven activation.

Metric maps hold one confidence channel per object category; topological
graphs hold nodes with object sets and an embedding.  Activation scales
channels (or node embeddings) by affinity so downstream policies see the
target-relevant structure amplified.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAP_MAGIC = b"LOATMAP1"


@dataclass(frozen=True)
class MetricMap:
    """Per-category confidence grid of shape (M, H, W), values in [0, 1]."""

    channels: tuple[str, ...]
    grid: np.ndarray

    def __post_init__(self):
        if self.grid.ndim != 3 or self.grid.shape[0] != len(self.channels):
            raise ValueError(
                f"grid shape {self.grid.shape} does not match {len(self.channels)} channels"
            )
        lo, hi = float(self.grid.min(initial=0.0)), float(self.grid.max(initial=0.0))
        if lo < 0.0 or hi > 1.0 + 1e-12:
            raise ValueError(f"grid values outside [0, 1]: min {lo}, max {hi}")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.grid.shape[1], self.grid.shape[2]


@dataclass(frozen=True)
class TopoNode:
    """A region of the environment: its object set and an embedding."""

    objects: frozenset[str]
    embedding: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("node embedding has non-finite components")


@dataclass(frozen=True)
class TopoGraph:
    nodes: tuple[TopoNode, ...]
    edges: dict[int, tuple[tuple[int, float], ...]] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.nodes)
        for src, nbrs in self.edges.items():
            if not 0 <= src < n:
                raise ValueError(f"edge source {src} out of range")
            for dst, w in nbrs:
                if not 0 <= dst < n:
                    raise ValueError(f"edge target {dst} out of range")
                if not np.isfinite(w):
                    raise ValueError(f"edge weight {w!r} not finite")


def activate_metric(semantic_map: MetricMap, scores: np.ndarray) -> MetricMap:
    """Channel-wise activation: channel c is scaled by scores[c]."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(semantic_map.channels),):
        raise ValueError(
            f"scores length {scores.shape} does not match {len(semantic_map.channels)} channels"
        )
    return MetricMap(semantic_map.channels, scores[:, None, None] * semantic_map.grid)


def activate_graph(graph: TopoGraph, per_object_scores) -> list[np.ndarray]:
    """Node-wise activation: each node embedding scaled by the mean affinity
    of its objects (zero for empty nodes)."""
    activations = []
    for node in graph.nodes:
        if node.objects:
            total = 0.0
            for name in sorted(node.objects):
                if name not in per_object_scores:
                    raise ValueError(f"no affinity score for node object {name!r}")
                total += float(per_object_scores[name])
            node_affinity = total / len(node.objects)
        else:
            node_affinity = 0.0
        activations.append(node_affinity * node.embedding)
    return activations


def mean_object_embedding(table, objects) -> np.ndarray:
    """Desk-scale node embedding: mean of the member objects' text embeddings."""
    from .embeddings import embed

    if not objects:
        return np.zeros(table.dim)
    vecs = [embed(table, name)[0] for name in sorted(objects)]
    return np.mean(vecs, axis=0)


# ---------------------------------------------------------------------------
# Binary snapshot container


def _write_planes(fh, channels, planes: np.ndarray) -> None:
    m, h, w = planes.shape
    fh.write(MAP_MAGIC)
    fh.write(struct.pack("<III", m, h, w))
    for name in channels:
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
    fh.write(np.ascontiguousarray(planes, dtype="<f4").tobytes())


def _read_planes(fh):
    magic = fh.read(8)
    if magic != MAP_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    m, h, w = struct.unpack("<III", fh.read(12))
    channels = []
    for _ in range(m):
        (n,) = struct.unpack("<I", fh.read(4))
        channels.append(fh.read(n).decode("utf-8"))
    data = np.frombuffer(fh.read(m * h * w * 4), dtype="<f4")
    if data.size != m * h * w:
        raise ValueError("truncated plane data")
    return tuple(channels), data.reshape(m, h, w).astype(np.float64)


def save_map_snapshot(path, semantic_map: MetricMap) -> None:
    with open(path, "wb") as fh:
        _write_planes(fh, semantic_map.channels, semantic_map.grid)


def load_map_snapshot(path) -> MetricMap:
    with open(path, "rb") as fh:
        channels, grid = _read_planes(fh)
        return MetricMap(channels, grid)
