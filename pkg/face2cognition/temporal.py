"""Segments, sequences and per-token (position, sequence, segment) indices.

A segment is a run of face-present frames that ends once ``gap_tolerance``
consecutive frames lack the main face; shorter gaps are bridged but their
frames are not kept. Sequences are fixed-length windows inside one segment.
All frame indices here are positions in the rate-normalized frame stream.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .utils import DataError

LABELS = ("NC", "MCI")


def label_to_int(label: str) -> int:
    """MCI -> 1 (positive class), NC -> 0."""
    if label not in LABELS:
        raise ValueError(f"unknown label '{label}', expected one of {LABELS}")
    return LABELS.index(label)


@dataclass
class Segment:
    """Face-present run of one video.

    Attributes:
        start_frame: First kept frame
        end_frame: Last kept frame
        kept_frames: Face-present frames in order (bridged gaps excluded)
    """
    start_frame: int
    end_frame: int
    kept_frames: list[int]

    def __len__(self) -> int:
        return len(self.kept_frames)


@dataclass
class PackingConfig:
    """Sequence packing settings.

    Attributes:
        l: Sequence size in frames
        overlap_fraction: Fraction of a window shared with the next one, in [0, 1)
        gap_tolerance: Consecutive face-absent frames that end a segment
    """
    l: int = 15
    overlap_fraction: float = 0.0
    gap_tolerance: int = 3

    def __post_init__(self):
        if self.l < 2:
            raise ValueError(f"sequence size l must be >= 2, got {self.l}")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError(f"overlap_fraction must be in [0, 1), got {self.overlap_fraction}")
        if self.gap_tolerance < 1:
            raise ValueError(f"gap_tolerance must be >= 1, got {self.gap_tolerance}")
        if self.stride < 1:
            raise ValueError(f"overlap {self.overlap_fraction} leaves stride < 1 for l={self.l}")

    @property
    def stride(self) -> int:
        # round half up
        return self.l - int(np.floor(self.l * self.overlap_fraction + 0.5))


def extract_segments(mask: Iterable[bool], gap_tolerance: int = 3) -> list[Segment]:
    """Split a presence mask into segments.

    Args:
        mask: Per-frame main-face presence
        gap_tolerance: Number of consecutive absent frames that ends a segment

    Returns:
        Segments in frame order; empty for an all-false mask
    """
    segments: list[Segment] = []
    kept: list[int] = []
    absent_run = 0
    for i, present in enumerate(mask):
        if present:
            if kept and absent_run >= gap_tolerance:
                segments.append(Segment(kept[0], kept[-1], kept))
                kept = []
            kept.append(i)
            absent_run = 0
        else:
            absent_run += 1
    if kept:
        segments.append(Segment(kept[0], kept[-1], kept))
    return segments


def mask_from_segments(segments: list[Segment], gap_tolerance: int = 3) -> np.ndarray:
    """Rebuild a compact mask: segments in order, separated by exactly ``gap_tolerance`` absences."""
    if not segments:
        return np.zeros(0, dtype=bool)
    parts = []
    for k, seg in enumerate(segments):
        if k:
            parts.append(np.zeros(gap_tolerance, dtype=bool))
        local = np.zeros(seg.end_frame - seg.start_frame + 1, dtype=bool)
        local[np.asarray(seg.kept_frames) - seg.start_frame] = True
        parts.append(local)
    return np.concatenate(parts)


def pack_sequences(segment: Segment, cfg: PackingConfig) -> list[list[int]]:
    """Fixed-length windows over a segment's kept frames.

    Windows start at 0, stride, 2*stride, ... and are emitted only when they
    fit entirely inside the segment; segments shorter than ``l`` give none.
    """
    frames = segment.kept_frames
    return [frames[start:start + cfg.l]
            for start in range(0, len(frames) - cfg.l + 1, cfg.stride)]


def index_video(segments: list[Segment], windows: list[list[int]]) -> np.ndarray:
    """Per-token (p, M, S) triples for every window of a video.

    Slot 0 of each window belongs to the classification token; frame tokens
    use slots 1..l. M is the window ordinal, S the ordinal of the parent
    segment among segments that contribute at least one window.

    Returns:
        int64 array of shape (n_windows, l + 1, 3)

    Raises:
        ValueError: If windows are not ordered or a window spans two segments
    """
    if not windows:
        return np.zeros((0, 0, 3), dtype=np.int64)
    owner = {}
    for k, seg in enumerate(segments):
        for f in seg.kept_frames:
            owner[f] = k
    l = len(windows[0])
    triples = np.zeros((len(windows), l + 1, 3), dtype=np.int64)
    seg_ordinal = -1
    last_parent = None
    last_start = None
    for m, window in enumerate(windows):
        if last_start is not None and window[0] <= last_start:
            raise ValueError("windows must be ordered by first frame")
        last_start = window[0]
        parents = {owner.get(f) for f in window}
        if len(parents) != 1 or None in parents:
            raise ValueError(f"window {m} does not lie inside a single segment")
        parent = parents.pop()
        if parent != last_parent:
            seg_ordinal += 1
            last_parent = parent
        triples[m, :, 0] = np.arange(l + 1)
        triples[m, :, 1] = m
        triples[m, :, 2] = seg_ordinal
    return triples


@dataclass
class VideoStructure:
    """Segments, windows and index triples of one video.

    Attributes:
        video_id: Unique video id
        segments: All extracted segments (including ones too short for a window)
        windows: Frame-index windows in video order
        triples: (n_windows, l + 1, 3) positional triples
    """
    video_id: str
    segments: list[Segment]
    windows: list[list[int]]
    triples: np.ndarray


def structure_video(mask: Iterable[bool], cfg: PackingConfig, video_id: str = "") -> VideoStructure:
    """Extract segments, pack windows and assign triples for one presence mask."""
    segments = extract_segments(mask, cfg.gap_tolerance)
    windows = [w for seg in segments for w in pack_sequences(seg, cfg)]
    return VideoStructure(video_id=video_id, segments=segments, windows=windows,
                          triples=index_video(segments, windows))


@dataclass
class InteractionSummary:
    """Segment and sequence counts of one video."""
    num_segments: int
    num_sequences: int
    mean_segment_len: float


def interaction_summary(video: VideoStructure) -> InteractionSummary:
    """Count segments and sequences; mean length is over kept frames of all segments."""
    lengths = [len(s) for s in video.segments]
    return InteractionSummary(num_segments=len(lengths), num_sequences=len(video.windows),
                              mean_segment_len=float(np.mean(lengths)) if lengths else 0.0)


def interaction_trace(video: VideoStructure) -> list[tuple[int, int, int]]:
    """(frame, sequence index, segment index) for every windowed frame, in order."""
    trace = []
    for window, tri in zip(video.windows, video.triples):
        m, s = int(tri[0, 1]), int(tri[0, 2])
        trace.extend((int(f), m, s) for f in window)
    return trace


@dataclass
class Sequence:
    """One window of latent vectors.

    Attributes:
        frames: (l, dim) latent vectors
        seq_index: Window ordinal M within the video
        seg_index: Parent segment ordinal S within the video
        video_id: Source video
        label: "MCI" or "NC"
    """
    frames: np.ndarray
    seq_index: int
    seg_index: int
    video_id: str
    label: str


@dataclass
class SequenceBatch:
    """Packed sequences ready for the transformer.

    Attributes:
        latents: (n, l, dim) float32
        triples: (n, l + 1, 3) int64
        labels: (n,) int64, 1 = MCI
        video_ids: Source video per sequence
        participant_ids: Source participant per sequence
    """
    latents: np.ndarray
    triples: np.ndarray
    labels: np.ndarray
    video_ids: list[str] = field(default_factory=list)
    participant_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.latents.shape[0])

    def subset(self, idx: np.ndarray) -> "SequenceBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceBatch(latents=self.latents[idx], triples=self.triples[idx],
                             labels=self.labels[idx],
                             video_ids=[self.video_ids[i] for i in idx],
                             participant_ids=[self.participant_ids[i] for i in idx])

    def sequences(self) -> list[Sequence]:
        return [Sequence(frames=self.latents[i], seq_index=int(self.triples[i, 0, 1]),
                         seg_index=int(self.triples[i, 0, 2]), video_id=self.video_ids[i],
                         label=LABELS[int(self.labels[i])])
                for i in range(len(self))]


def build_batch(videos: Iterable[tuple[VideoStructure, str, str]],
                latent_lookup: Callable[[str, list[int]], np.ndarray],
                l: int, dim: int = 128) -> SequenceBatch:
    """Gather latents for every window of the given videos.

    Args:
        videos: (structure, participant id, label) per video
        latent_lookup: Returns (len(frames), dim) latents for a video's frames
        l: Sequence size (for the empty-batch shape)
        dim: Latent dimension

    Returns:
        SequenceBatch with sequences in video order then window order
    """
    latents, triples, labels, vids, pids = [], [], [], [], []
    for structure, participant_id, label in videos:
        y = label_to_int(label)
        for window, tri in zip(structure.windows, structure.triples):
            latents.append(latent_lookup(structure.video_id, window))
            triples.append(tri)
            labels.append(y)
            vids.append(structure.video_id)
            pids.append(participant_id)
    if not latents:
        return SequenceBatch(latents=np.zeros((0, l, dim), dtype=np.float32),
                             triples=np.zeros((0, l + 1, 3), dtype=np.int64),
                             labels=np.zeros(0, dtype=np.int64))
    return SequenceBatch(latents=np.stack(latents).astype(np.float32), triples=np.stack(triples),
                         labels=np.asarray(labels, dtype=np.int64), video_ids=vids,
                         participant_ids=pids)


def write_sequence_manifest(videos: Iterable[tuple[VideoStructure, str]], path: Path) -> int:
    """Write one JSON line per sequence: video, indices, frames and label.

    Args:
        videos: (structure, label) per video

    Returns:
        Number of sequences written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for structure, label in videos:
            for window, tri in zip(structure.windows, structure.triples):
                fh.write(json.dumps({"video_id": structure.video_id,
                                     "seq_index": int(tri[0, 1]),
                                     "seg_index": int(tri[0, 2]),
                                     "frame_indices": [int(f) for f in window],
                                     "label": label}, sort_keys=True) + "\n")
                count += 1
    return count


def read_sequence_manifest(path: Path) -> list[dict]:
    """Read a sequence manifest back as a list of dicts."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"sequence manifest not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
