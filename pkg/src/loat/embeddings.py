"""Category-name text embeddings: table storage plus a deterministic fallback.

The table file is produced offline by the exporter; this module only loads,
validates and queries it.  Categories missing from the table are embedded
with :func:`hash_embed`, a counter-based pseudo-random unit vector, so that
open-vocabulary targets never abort a run.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .formats import canonical_dumps, parse_json_no_duplicates


@dataclass(frozen=True)
class EmbeddingTable:
    """Immutable map from category name to a fixed-dimension dense vector."""

    dim: int
    model: str
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        for name, vec in self.entries.items():
            if not name:
                raise ValueError("empty category name")
            if vec.shape != (self.dim,):
                raise ValueError(
                    f"entry {name!r} has length {vec.shape}, expected ({self.dim},)"
                )
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"entry {name!r} has non-finite components")

    def __contains__(self, category: str) -> bool:
        return category in self.entries


def hash_embed(category: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic unit-norm embedding for an arbitrary category name.

    A stable 64-bit hash of (category, seed) keys a Philox counter-based
    generator; `dim` standard normals are drawn and normalized.  The same
    inputs give the same vector on every platform.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    digest = hashlib.blake2b(
        f"{seed}\x1f{category}".encode("utf-8"), digest_size=8
    ).digest()
    key = int.from_bytes(digest, "little")
    rng = np.random.Generator(np.random.Philox(key=key))
    vec = rng.standard_normal(dim)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:  # unreachable in practice, keeps the contract total
        vec[0] = 1.0
        norm = 1.0
    return vec / norm


def embed(table: EmbeddingTable, category: str, seed: int = 0):
    """Look up ``category``, falling back to :func:`hash_embed` when absent.

    Returns ``(vector, used_fallback)``.
    """
    vec = table.entries.get(category)
    if vec is not None:
        return vec, False
    return hash_embed(category, table.dim, seed), True


def load_table(path) -> EmbeddingTable:
    """Load an embedding table file, validating every invariant."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    raw = parse_json_no_duplicates(text)
    if not isinstance(raw, dict) or "dim" not in raw or "entries" not in raw:
        raise ValueError(f"{path}: not an embedding table file")
    dim = raw["dim"]
    if not isinstance(dim, int) or dim < 1:
        raise ValueError(f"{path}: bad dim {dim!r}")
    entries = {}
    for name, values in raw["entries"].items():
        if not isinstance(values, list) or len(values) != dim:
            raise ValueError(
                f"{path}: entry {name!r} has {len(values)} values, header says {dim}"
            )
        vec = np.asarray(values, dtype=np.float64)
        vec.setflags(write=False)
        entries[name] = vec
    return EmbeddingTable(dim=dim, model=str(raw.get("model", "")), entries=entries)


def dumps_table(table: EmbeddingTable) -> str:
    obj = {
        "dim": table.dim,
        "model": table.model,
        "entries": {name: [float(x) for x in vec] for name, vec in table.entries.items()},
    }
    return canonical_dumps(obj)


def save_table(path, table: EmbeddingTable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_table(table))


def table_from_hash(
    names, dim: int, seed: int = 0, model: str = "hash-embed-v1"
) -> EmbeddingTable:
    """Build a table whose vectors all come from :func:`hash_embed`."""
    entries = {}
    for name in names:
        vec = hash_embed(name, dim, seed)
        vec.setflags(write=False)
        entries[name] = vec
    return EmbeddingTable(dim=dim, model=model, entries=entries)


def check_unit_norm(vec: np.ndarray, tol: float = 1e-9) -> bool:
    return math.isfinite(float(np.dot(vec, vec))) and abs(float(np.linalg.norm(vec)) - 1.0) <= tol
