"""Small shared pieces: class labels, hashing, stable JSON."""

from __future__ import annotations

import hashlib
import json

# Canonical class order. Index = class id everywhere (confusion matrices,
# model outputs, tie-breaking).
LABELS = ("NC", "MCI", "AD")

LABEL_TO_INDEX = {name: i for i, name in enumerate(LABELS)}


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stable_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace drift)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=1)
