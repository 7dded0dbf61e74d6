"""Shared helpers: deterministic RNG streams, stable hashing, file digests."""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any, Iterable

import numpy as np


def _key_ints(parts: Iterable[Any]) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, (bool,)):
            raise TypeError("bool is not a valid stream key")
        if isinstance(p, (int, np.integer)):
            if int(p) < 0:
                raise ValueError("stream keys must be non-negative")
            out.append(int(p))
        elif isinstance(p, str):
            h = hashlib.blake2s(p.encode("utf-8"), digest_size=8).digest()
            out.append(int.from_bytes(h, "big"))
        else:
            raise TypeError(f"unsupported stream key type: {type(p)!r}")
    return out


def child_rng(seed: int, *parts: Any) -> np.random.Generator:
    """Independent generator for (seed, *parts).

    Streams for distinct key tuples are statistically independent, so
    columns or draws can be produced in any order (or in parallel) while
    staying bit-identical for a given root seed.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([int(seed), *_key_ints(parts)]))


def stage_seed(seed: int, name: str) -> int:
    """Fan a root seed out to a named pipeline stage."""
    h = hashlib.blake2s(f"{seed}:{name}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "big") % (2**63)


def worker_count(upper: int = 32) -> int:
    """Worker cap for parallel sections, from MIXEDABC_THREADS (default 1)."""
    raw = os.environ.get("MIXEDABC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MIXEDABC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("MIXEDABC_THREADS must be >= 1")
    return min(n, upper)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(obj: Any, path) -> None:
    """Canonical JSON emission: sorted keys, no trailing whitespace drift."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def json_ready(x: Any) -> Any:
    """Recursively convert numpy scalars/arrays so json.dump accepts them."""
    if isinstance(x, dict):
        return {str(k): json_ready(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [json_ready(v) for v in x]
    if isinstance(x, np.ndarray):
        return [json_ready(v) for v in x.tolist()]
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x
