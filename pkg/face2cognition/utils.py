"""Seeding, hashing and error types shared across face2cognition."""

import hashlib
import json
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np


class DataError(ValueError):
    """Raised when input data is missing, malformed or infeasible."""


class NumericError(RuntimeError):
    """Raised when a numerical procedure diverges (non-finite loss, NaN params)."""


def derive_seed(root: int, *names: object) -> int:
    """Derive a 32-bit substream seed from a root seed and a named path.
    
    Uses SHA-256 over the root seed and the names, so every stage, participant
    or fold gets an independent but reproducible stream.
    
    Args:
        root: Root seed of the run
        *names: Path components naming the substream (e.g. "cohort", "p003")
        
    Returns:
        32-bit unsigned integer seed
    """
    key = ":".join([str(int(root))] + [str(n) for n in names])
    hash_digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(hash_digest[:4], byteorder='big', signed=False)


def rng(root: int, *names: object) -> np.random.Generator:
    """Create a seeded random number generator for a named substream."""
    return np.random.default_rng(derive_seed(root, *names))


def file_sha256(path: Path) -> str:
    """Hex SHA-256 of a file's bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def to_jsonable(obj: Any) -> Any:
    """Convert dataclasses, numpy scalars/arrays and tuples to JSON-friendly values."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return to_jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys so equal inputs give equal bytes."""
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    """Short SHA-256 of the canonical JSON form of a config object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]
