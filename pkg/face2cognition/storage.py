"""Binary persistence: TSCK model checkpoints and the TSLF latent store.

All integers and floats are little-endian.

TSCK layout::

    b"TSCK" | u16 version | u32 config length | config JSON (UTF-8)
    then until EOF, per parameter:
    u32 name length | name (UTF-8) | u32 rank | rank x u64 dims | f32 payload

TSLF layout::

    b"TSLF" | u64 count | count x (u64 video hash | u32 frame index | 128 x f32)
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .utils import DataError

CHECKPOINT_MAGIC = b"TSCK"
CHECKPOINT_VERSION = 1
LATENT_MAGIC = b"TSLF"
LATENT_DIM = 128

_LATENT_RECORD = np.dtype([("video", "<u8"), ("frame", "<u4"), ("latent", "<f4", (LATENT_DIM,))])


@dataclass
class ModelCheckpoint:
    """Serialized parameter set plus its training configuration.

    Attributes:
        kind: Model family, "cae" or "transformer"
        config: JSON-serializable configuration (model + training config)
        seed: Seed the parameters were trained with
        params: Named float32 arrays (BN running statistics included for the CAE)
    """
    kind: str
    config: dict[str, Any]
    seed: int
    params: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(ckpt: ModelCheckpoint, path: Path) -> None:
    """Write a checkpoint in the TSCK format."""
    blob = json.dumps({"kind": ckpt.kind, "seed": int(ckpt.seed), "config": ckpt.config},
                      sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(blob)), blob]
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Path) -> ModelCheckpoint:
    """Read a TSCK checkpoint.

    Raises:
        DataError: If the file is missing, has the wrong magic, or is truncated
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a TSCK checkpoint")
    version, blob_len = struct.unpack_from("<HI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = 10
    header = json.loads(buf[off:off + blob_len].decode("utf-8"))
    off += blob_len
    params = {}
    try:
        while off < len(buf):
            (name_len,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise DataError(f"truncated checkpoint {path}: {exc}") from exc
    return ModelCheckpoint(kind=header["kind"], config=header["config"], seed=header["seed"],
                           params=params)


def video_hash(video_id: str) -> int:
    """Stable 64-bit hash of a video id (first 8 bytes of SHA-256)."""
    return int.from_bytes(hashlib.sha256(video_id.encode("utf-8")).digest()[:8], "little")


@dataclass
class LatentStore:
    """Per-frame latent vectors keyed by (video hash, frame index).

    Attributes:
        entries: Mapping (video hash, frame index) -> 128-d float32 vector
    """
    entries: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def add(self, video_id: str, frame_indices: Iterable[int], latents: np.ndarray) -> None:
        vh = video_hash(video_id)
        latents = np.asarray(latents, dtype=np.float32)
        if latents.ndim != 2 or latents.shape[1] != LATENT_DIM:
            raise ValueError(f"latents must have shape (n, {LATENT_DIM}), got {latents.shape}")
        for frame, vec in zip(frame_indices, latents):
            self.entries[(vh, int(frame))] = vec

    def get(self, video_id: str, frame_indices: Iterable[int]) -> np.ndarray:
        """Stack the latents of ``frame_indices`` of one video in the given order.

        Raises:
            DataError: If any requested frame has no stored latent
        """
        vh = video_hash(video_id)
        rows = []
        for frame in frame_indices:
            key = (vh, int(frame))
            if key not in self.entries:
                raise DataError(f"no latent stored for video '{video_id}' frame {frame}")
            rows.append(self.entries[key])
        if not rows:
            return np.zeros((0, LATENT_DIM), dtype=np.float32)
        return np.stack(rows)

    def __len__(self) -> int:
        return len(self.entries)


def save_latents(store: LatentStore, path: Path) -> None:
    """Write a latent store in the TSLF format, records sorted by key."""
    keys = sorted(store.entries)
    records = np.zeros(len(keys), dtype=_LATENT_RECORD)
    for i, key in enumerate(keys):
        records[i] = (key[0], key[1], store.entries[key])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(LATENT_MAGIC + struct.pack("<Q", len(keys)) + records.tobytes())


def load_latents(path: Path) -> LatentStore:
    """Read a TSLF latent store.

    Raises:
        DataError: If the file is missing, has the wrong magic, or is truncated
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"latent store not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != LATENT_MAGIC:
        raise DataError(f"{path} is not a TSLF latent store")
    (count,) = struct.unpack_from("<Q", buf, 4)
    if len(buf) != 12 + count * _LATENT_RECORD.itemsize:
        raise DataError(f"latent store {path} is truncated")
    records = np.frombuffer(buf, dtype=_LATENT_RECORD, count=count, offset=12)
    store = LatentStore()
    for rec in records:
        store.entries[(int(rec["video"]), int(rec["frame"]))] = np.array(rec["latent"],
                                                                         dtype=np.float32)
    return store
