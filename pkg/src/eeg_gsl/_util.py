"""Shared helpers: deterministic RNG derivation and atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np


def seeded_rng(*keys) -> np.random.Generator:
    """Generator derived deterministically from a tuple of keys.

    Keys may be ints or strings; strings are hashed so the stream does not
    depend on interning or platform hash randomization. Used to give each
    (run, subject, window) its own reproducible stream regardless of
    worker scheduling.
    """
    ints = []
    for k in keys:
        if isinstance(k, (int, np.integer)):
            ints.append(int(k) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(k).encode()).digest()
            ints.append(int.from_bytes(digest[:4], "little"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(ints)))


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write-temp-then-rename so partially written files are never visible."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())
