"""Canonical serialization helpers shared by every on-disk artifact.

All JSON artifacts are written through :func:`canonical_dumps` so that
re-running any command reproduces files byte for byte: keys sorted,
two-space indent, trailing newline, floats in shortest round-trip form
(Python's ``repr``).
"""

from __future__ import annotations

import hashlib
import json


def canonical_dumps(obj) -> str:
    """Serialize ``obj`` to the canonical JSON text form."""
    return json.dumps(obj, ensure_ascii=True, sort_keys=True, indent=2) + "\n"


def write_canonical_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_dumps(obj))


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def parse_json_no_duplicates(text: str):
    """Parse JSON, rejecting duplicate object keys instead of silently
    keeping the last one."""

    def hook(pairs):
        out = {}
        for key, value in pairs:
            if key in out:
                raise ValueError(f"duplicate key {key!r}")
            out[key] = value
        return out

    return json.loads(text, object_pairs_hook=hook)


def git_blob_sha1(data: bytes) -> str:
    """Content hash in git blob form: sha1 over ``blob <len>\\0<data>``."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def file_content_hash(path) -> str:
    with open(path, "rb") as fh:
        return git_blob_sha1(fh.read())
