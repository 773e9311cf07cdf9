"""Affinity scores over a map's object vocabulary for a navigation target.

Four score families, all aligned with ``AffinityQuery.map_objects``:

* experiential — scaled dot-product attention between learned projections
  of text embeddings (softmax normalized),
* generalized — binary relevance sets from an LLM, normalized over their
  support (uniform when the support is empty or the target unknown),
* fused — convex combination of the two under a guidance ratio gamma,
* multiplicative — the binary relevance used as a gate on the experiential
  softmax, deliberately left unnormalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingTable, embed
from .formats import canonical_dumps, parse_json_no_duplicates

# Score vectors are plain 1-D float64 arrays aligned with map_objects.
AffinityScores = np.ndarray


@dataclass(frozen=True)
class ExperientialParams:
    """Learned query/key projections for the experiential attention."""

    w_q: np.ndarray  # (d_k, dim)
    w_k: np.ndarray  # (d_k, dim)

    def __post_init__(self):
        if self.w_q.ndim != 2 or self.w_q.shape != self.w_k.shape:
            raise ValueError(
                f"w_q and w_k must share one (d_k, dim) shape, "
                f"got {self.w_q.shape} and {self.w_k.shape}"
            )
        if not (np.all(np.isfinite(self.w_q)) and np.all(np.isfinite(self.w_k))):
            raise ValueError("projection matrices contain non-finite entries")

    @property
    def d_k(self) -> int:
        return self.w_q.shape[0]

    @property
    def dim(self) -> int:
        return self.w_q.shape[1]


@dataclass(frozen=True)
class GeneralizedTable:
    """Per-target sets of related categories, as emitted by the LLM exporter.

    Membership is the binary relevance: related iff the category is in the
    target's set.  The relation is target-conditional and not symmetric.
    """

    relevance: dict[str, frozenset[str]] = field(default_factory=dict)
    model: str = ""

    def related(self, target: str) -> frozenset[str]:
        return self.relevance.get(target, frozenset())


@dataclass(frozen=True)
class AffinityQuery:
    """A target category plus the map's ordered object vocabulary."""

    target: str
    map_objects: tuple[str, ...]

    def __post_init__(self):
        if len(self.map_objects) < 1:
            raise ValueError("map_objects must contain at least one category")
        if len(set(self.map_objects)) != len(self.map_objects):
            raise ValueError("map_objects entries must be unique")


def _softmax_stable(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    exp = np.exp(shifted)
    return exp / np.sum(exp)


def query_embeddings(params: ExperientialParams, table: EmbeddingTable,
                     query: AffinityQuery, seed: int = 0):
    """Embedding vectors for the target and each map object (with fallback)."""
    if table.dim != params.dim:
        raise ValueError(
            f"embedding dim {table.dim} does not match projection dim {params.dim}"
        )
    e_target, _ = embed(table, query.target, seed)
    e_objects = np.stack([embed(table, name, seed)[0] for name in query.map_objects])
    return e_target, e_objects


def experiential_logits(params: ExperientialParams, e_target: np.ndarray,
                        e_objects: np.ndarray) -> np.ndarray:
    q = params.w_q @ e_target
    keys = e_objects @ params.w_k.T
    return (keys @ q) / math.sqrt(params.d_k)


def experiential_scores(params: ExperientialParams, table: EmbeddingTable,
                        query: AffinityQuery, seed: int = 0) -> AffinityScores:
    """Softmax attention of the target's query against every map object's key."""
    e_target, e_objects = query_embeddings(params, table, query, seed)
    return _softmax_stable(experiential_logits(params, e_target, e_objects))


def generalized_scores(gtable: GeneralizedTable, query: AffinityQuery) -> AffinityScores:
    """Normalized binary relevance; uniform when the support is empty."""
    related = gtable.related(query.target)
    raw = np.array([1.0 if name in related else 0.0 for name in query.map_objects])
    total = raw.sum()
    m = len(query.map_objects)
    if total == 0:
        return np.full(m, 1.0 / m)
    return raw / total


def fuse(gamma: float, a_g: AffinityScores, a_e: AffinityScores) -> AffinityScores:
    """Convex combination ``gamma * a_g + (1 - gamma) * a_e``.

    gamma = 0 returns a_e exactly and gamma = 1 returns a_g exactly.
    """
    if not (0.0 <= gamma <= 1.0):
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    a_g = np.asarray(a_g, dtype=np.float64)
    a_e = np.asarray(a_e, dtype=np.float64)
    if a_g.shape != a_e.shape:
        raise ValueError(f"length mismatch: {a_g.shape} vs {a_e.shape}")
    for name, vec in (("a_g", a_g), ("a_e", a_e)):
        if abs(float(vec.sum()) - 1.0) > 1e-6:
            raise ValueError(f"{name} must sum to 1, got {float(vec.sum())!r}")
    return gamma * a_g + (1.0 - gamma) * a_e


def relevance_mask(gtable: GeneralizedTable, query: AffinityQuery) -> np.ndarray:
    related = gtable.related(query.target)
    return np.array([1.0 if name in related else 0.0 for name in query.map_objects])


def loat_mul_scores(params: ExperientialParams, table: EmbeddingTable,
                    gtable: GeneralizedTable, query: AffinityQuery,
                    seed: int = 0) -> AffinityScores:
    """Binary relevance applied as a gate on the experiential softmax.

    The gated product is not renormalized: mass may sum to below one, and
    an all-zero vector is a valid output when nothing is relevant.
    """
    return relevance_mask(gtable, query) * experiential_scores(params, table, query, seed)


def load_generalized_table(path) -> GeneralizedTable:
    with open(path, "r", encoding="utf-8") as fh:
        raw = parse_json_no_duplicates(fh.read())
    if not isinstance(raw, dict) or "targets" not in raw:
        raise ValueError(f"{path}: not a generalized table file")
    relevance = {}
    for target, related in raw["targets"].items():
        if not isinstance(related, list) or not all(isinstance(x, str) for x in related):
            raise ValueError(f"{path}: target {target!r} has a malformed related list")
        relevance[target] = frozenset(related)
    return GeneralizedTable(relevance=relevance, model=str(raw.get("model", "")))


def dumps_generalized_table(gtable: GeneralizedTable) -> str:
    obj = {
        "model": gtable.model,
        "targets": {t: sorted(s) for t, s in gtable.relevance.items()},
    }
    return canonical_dumps(obj)


def save_generalized_table(path, gtable: GeneralizedTable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_generalized_table(gtable))
