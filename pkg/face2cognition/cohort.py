"""Synthetic participants: procedural faces with a planted temporal signal.

Every video is a sequence of face-present segments separated by gaps of at
least three selected frames. Segment lengths are geometric with a class
mean (MCI participants talk in shorter runs than NC ones); a small per-class
shift of the expression parameters adds a weak appearance signal. Faces are
rendered on demand from smooth parameter trajectories, so a cohort only
stores a handful of numbers per video.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .preprocessing import (DetectionRecord, FaceDetection, QualityRating, RoiFilter,
                            write_detection_records, write_quality_ratings)
from .temporal import LABELS, PackingConfig, structure_video
from .utils import DataError, canonical_json, rng

FRAME_WIDTH = 640
FRAME_HEIGHT = 360
DEFAULT_ROI = (320, 0, 320, 360)
MIN_FACE_AREA = 1600.0
STUDY_THEMES = ("Summertime", "Self-care", "Halloween", "Cities and Towns")

# (low, high) for every bounded face parameter
PARAM_BOUNDS = {
    "face_width": (0.5, 0.85),
    "face_height": (0.65, 0.95),
    "eye_spacing": (0.22, 0.45),
    "eye_height": (-0.35, -0.05),
    "eye_open": (0.1, 1.0),
    "mouth_open": (0.0, 1.0),
    "brow_raise": (0.0, 1.0),
    "tilt": (-0.35, 0.35),
    "offset_x": (-0.1, 0.1),
    "offset_y": (-0.1, 0.1),
}
MOTION_PARAMS = ("eye_open", "mouth_open", "brow_raise", "tilt", "offset_x", "offset_y")


@dataclass
class ProceduralFace:
    """Parameters of one rendered face.

    Identity: face_width, face_height, eye_spacing, eye_height, skin.
    Expression: eye_open, mouth_open, brow_raise. Pose: tilt, offset_x, offset_y.
    Lengths are fractions of the half image width; tilt is in radians.
    """
    face_width: float = 0.7
    face_height: float = 0.85
    eye_spacing: float = 0.32
    eye_height: float = -0.18
    eye_open: float = 0.6
    mouth_open: float = 0.3
    brow_raise: float = 0.5
    tilt: float = 0.0
    offset_x: float = 0.0
    offset_y: float = 0.0
    skin: tuple = (0.85, 0.68, 0.55)
    background: tuple = (0.25, 0.3, 0.38)

    def clipped(self) -> "ProceduralFace":
        """Copy with every bounded parameter clipped into its range."""
        values = {name: float(np.clip(getattr(self, name), lo, hi))
                  for name, (lo, hi) in PARAM_BOUNDS.items()}
        return replace(self, **values,
                       skin=tuple(float(np.clip(c, 0.0, 1.0)) for c in self.skin),
                       background=tuple(float(np.clip(c, 0.0, 1.0)) for c in self.background))

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_BOUNDS], dtype=np.float64)


def _soft_ellipse(xx, yy, cx, cy, rx, ry, angle, softness=0.08):
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = xx - cx, yy - cy
    u = (c * dx + s * dy) / rx
    w = (-s * dx + c * dy) / ry
    r = np.sqrt(u * u + w * w)
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) / softness, -50.0, 50.0)))


def render_face(face: ProceduralFace, size: int = 112) -> np.ndarray:
    """Render a face as float32 (size, size, 3) in [0,1].

    Edges are smooth, so the image varies continuously with the parameters.
    """
    f = face.clipped()
    axis = (np.arange(size, dtype=np.float64) + 0.5) / size * 2.0 - 1.0
    xx, yy = np.meshgrid(axis, axis)
    cx, cy, t = f.offset_x, f.offset_y, f.tilt
    c, s = np.cos(t), np.sin(t)

    def place(dx, dy):
        return cx + c * dx - s * dy, cy + s * dx + c * dy

    img = np.empty((size, size, 3), dtype=np.float64)
    img[...] = f.background

    def paint(alpha, color):
        nonlocal img
        img = img * (1.0 - alpha[..., None]) + np.asarray(color)[None, None, :] * alpha[..., None]

    paint(_soft_ellipse(xx, yy, cx, cy, f.face_width, f.face_height, t), f.skin)
    dark = (0.12, 0.1, 0.1)
    for side in (-1.0, 1.0):
        ex, ey = place(side * f.eye_spacing, f.eye_height)
        paint(_soft_ellipse(xx, yy, ex, ey, 0.11, 0.015 + 0.07 * f.eye_open, t, 0.15), dark)
        bx, by = place(side * f.eye_spacing, f.eye_height - 0.13 - 0.08 * f.brow_raise)
        paint(_soft_ellipse(xx, yy, bx, by, 0.13, 0.025, t, 0.2), (0.3, 0.2, 0.15))
    mx, my = place(0.0, 0.38 * f.face_height)
    paint(_soft_ellipse(xx, yy, mx, my, 0.2, 0.02 + 0.12 * f.mouth_open, t, 0.15), (0.45, 0.1, 0.12))
    return img.astype(np.float32)


@dataclass
class CohortSpec:
    """Generator settings.

    Attributes:
        n_participants: Number of participants
        class_balance: Fraction of MCI participants, in (0, 1)
        frames_per_video: Selected (10 fps) frames per video
        segment_length_means: Mean planted segment length per class, in frames
        feature_shift: Expression offset applied to MCI faces
        seed: Root seed
        themes: Themes every participant records one video of
        seq_len: Sequence size the cohort must support
        gap_mean: Mean gap between segments (gaps are at least ``min_gap``)
        min_gap: Smallest planted gap
        fps_original: Source frame rate of the emitted records
        crop_size: Side of the rendered face crops
        poor_fraction: Fraction of videos rated poor (excluded by the quality gate)
    """
    n_participants: int = 30
    class_balance: float = 0.5
    frames_per_video: int = 3000
    segment_length_means: dict = field(default_factory=lambda: {"NC": 60.0, "MCI": 25.0})
    feature_shift: float = 0.1
    seed: int = 0
    themes: tuple = ("Summertime",)
    seq_len: int = 15
    gap_mean: float = 10.0
    min_gap: int = 3
    fps_original: float = 30.0
    crop_size: int = 112
    poor_fraction: float = 0.0

    def __post_init__(self):
        self.themes = tuple(self.themes)
        self.segment_length_means = {k: float(v) for k, v in self.segment_length_means.items()}
        if not 0.0 < self.class_balance < 1.0:
            raise ValueError(f"class_balance must be in (0, 1), got {self.class_balance}")
        if self.n_participants < 2:
            raise ValueError(f"n_participants must be >= 2, got {self.n_participants}")
        if self.frames_per_video < 1:
            raise ValueError(f"frames_per_video must be >= 1, got {self.frames_per_video}")
        if set(self.segment_length_means) != set(LABELS):
            raise ValueError(f"segment_length_means needs keys {LABELS}")
        if self.min_gap < 3 or self.gap_mean < self.min_gap:
            raise ValueError(f"gaps must be >= 3 frames with gap_mean >= min_gap, got "
                             f"min_gap={self.min_gap}, gap_mean={self.gap_mean}")
        if not self.themes:
            raise ValueError("at least one theme is required")
        if not 0.0 <= self.poor_fraction < 1.0:
            raise ValueError(f"poor_fraction must be in [0, 1), got {self.poor_fraction}")

    @classmethod
    def from_dict(cls, data: dict) -> "CohortSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class SyntheticVideo:
    """One participant-theme video, rendered lazily.

    Attributes:
        video_id: "<participant>_<theme slug>"
        participant_id: Owner
        label: "MCI" or "NC"
        theme: Conversation theme
        frame_count: Frames at the original rate
        shift: Original frames per selected frame
        segments: Planted (start, end) selected-stream positions, inclusive
        identity: Base face of the participant (class shift included)
        motion: Per motion parameter (amplitude, period, phase)
        quality: Manual-style quality rating
        crop_size: Side of rendered crops
    """
    video_id: str
    participant_id: str
    label: str
    theme: str
    frame_count: int
    shift: int
    segments: list[tuple[int, int]]
    identity: ProceduralFace
    motion: dict[str, tuple[float, float, float]]
    quality: QualityRating = QualityRating.VERY_GOOD
    crop_size: int = 112

    @property
    def num_selected(self) -> int:
        return -(-self.frame_count // self.shift)

    def mask(self) -> np.ndarray:
        """Planted presence over selected-stream positions."""
        m = np.zeros(self.num_selected, dtype=bool)
        for start, end in self.segments:
            m[start:end + 1] = True
        return m

    def face_at(self, position: int) -> ProceduralFace:
        values = {}
        for name, (amp, period, phase) in self.motion.items():
            values[name] = getattr(self.identity, name) + amp * np.sin(
                2.0 * np.pi * position / period + phase)
        return replace(self.identity, **values).clipped()

    def participant_bbox(self, face: ProceduralFace) -> tuple[int, int, int, int]:
        rx, ry, rw, rh = DEFAULT_ROI
        w, h = 120, 140
        x = int(round(rx + rw / 2 + face.offset_x * rw - w / 2))
        y = int(round(ry + rh / 2 + face.offset_y * rh - h / 2))
        return x, y, w, h

    def records(self) -> Iterator[DetectionRecord]:
        """Detection records of every selected frame, faces rendered on the fly.

        The interviewer tile is always detected (outside the ROI, no crop); the
        participant face and the id overlay appear only inside planted segments.
        """
        interviewer = FaceDetection(bbox=(80, 80, 160, 180))
        mask = self.mask()
        for pos in range(self.num_selected):
            if not mask[pos]:
                yield DetectionRecord(frame_index=pos * self.shift, participant_id_visible=False,
                                      faces=[interviewer])
                continue
            face = self.face_at(pos)
            crop = render_face(face, self.crop_size)
            yield DetectionRecord(frame_index=pos * self.shift, participant_id_visible=True,
                                  faces=[interviewer,
                                         FaceDetection(bbox=self.participant_bbox(face),
                                                       crop=crop)])


@dataclass
class SyntheticCohort:
    """Generated videos plus the frame geometry they were rendered for."""
    spec: CohortSpec
    videos: list[SyntheticVideo] = field(default_factory=list)
    roi: RoiFilter = field(default_factory=lambda: RoiFilter(DEFAULT_ROI, MIN_FACE_AREA))

    def participants(self) -> dict[str, str]:
        return {v.participant_id: v.label for v in self.videos}


def theme_slug(theme: str) -> str:
    return "".join(ch.lower() if ch.isalnum() else "-" for ch in theme).strip("-")


def plant_segments(n_frames: int, mean_len: float, gap_mean: float, min_gap: int,
                   gen: np.random.Generator) -> list[tuple[int, int]]:
    """Alternate geometric segment lengths and gaps of at least ``min_gap`` frames."""
    segments = []
    gap_p = 1.0 / (gap_mean - min_gap + 1.0)
    pos = int(gen.geometric(gap_p)) - 1
    while pos < n_frames:
        length = int(gen.geometric(1.0 / mean_len))
        end = min(n_frames, pos + length) - 1
        segments.append((pos, end))
        pos = end + 1 + min_gap + int(gen.geometric(gap_p)) - 1
    return segments


def _identity(gen: np.random.Generator) -> ProceduralFace:
    def draw(name, margin=0.2):
        lo, hi = PARAM_BOUNDS[name]
        pad = (hi - lo) * margin
        return float(gen.uniform(lo + pad, hi - pad))

    return ProceduralFace(face_width=draw("face_width"), face_height=draw("face_height"),
                          eye_spacing=draw("eye_spacing"), eye_height=draw("eye_height"),
                          eye_open=draw("eye_open", 0.3), mouth_open=draw("mouth_open", 0.3),
                          brow_raise=draw("brow_raise", 0.3), tilt=0.0, offset_x=0.0,
                          offset_y=0.0,
                          skin=tuple(float(c) for c in gen.uniform([0.6, 0.45, 0.35],
                                                                   [0.95, 0.8, 0.7])))


def _motion(gen: np.random.Generator) -> dict[str, tuple[float, float, float]]:
    amps = {"eye_open": 0.25, "mouth_open": 0.35, "brow_raise": 0.3, "tilt": 0.15,
            "offset_x": 0.04, "offset_y": 0.04}
    return {name: (float(amps[name] * gen.uniform(0.5, 1.0)), float(gen.uniform(15.0, 60.0)),
                   float(gen.uniform(0.0, 2.0 * np.pi)))
            for name in MOTION_PARAMS}


def generate_cohort(spec: CohortSpec, verbose: bool = True) -> SyntheticCohort:
    """Draw participants, labels, planted segments and face trajectories.

    Raises:
        DataError: If a class mean segment length is below ``seq_len``
    """
    for label, mu in spec.segment_length_means.items():
        if mu < spec.seq_len:
            raise DataError(f"mean {label} segment length {mu} is below the sequence size "
                            f"{spec.seq_len}; no sequences could be formed")
    n_mci = int(np.clip(round(spec.n_participants * spec.class_balance), 1,
                        spec.n_participants - 1))
    labels = ["MCI"] * n_mci + ["NC"] * (spec.n_participants - n_mci)
    labels = [labels[i] for i in rng(spec.seed, "cohort", "labels").permutation(len(labels))]
    shift = max(1, int(spec.fps_original // 10.0))
    if verbose:
        print(f"🎭 Generating {spec.n_participants} participants ({n_mci} MCI) over "
              f"{len(spec.themes)} theme(s), {spec.frames_per_video} frames per video")
    cohort = SyntheticCohort(spec=spec)
    for i, label in enumerate(labels):
        pid = f"p{i:03d}"
        identity = _identity(rng(spec.seed, "cohort", pid, "identity"))
        if label == "MCI":
            identity = replace(identity, eye_open=identity.eye_open - spec.feature_shift,
                               mouth_open=identity.mouth_open + spec.feature_shift,
                               brow_raise=identity.brow_raise - spec.feature_shift)
        for theme in spec.themes:
            gen = rng(spec.seed, "cohort", pid, theme)
            segments = plant_segments(spec.frames_per_video,
                                      spec.segment_length_means[label], spec.gap_mean,
                                      spec.min_gap, gen)
            quality = (QualityRating.POOR if gen.random() < spec.poor_fraction
                       else QualityRating(int(gen.integers(1, 3))))
            cohort.videos.append(SyntheticVideo(
                video_id=f"{pid}_{theme_slug(theme)}", participant_id=pid, label=label,
                theme=theme, frame_count=spec.frames_per_video * shift, shift=shift,
                segments=segments, identity=identity, motion=_motion(gen), quality=quality,
                crop_size=spec.crop_size))
    return cohort


@dataclass
class CohortRow:
    """Per-class statistics."""
    label: str
    participants: int
    videos: int
    segments: int
    mean_segments_per_video: float
    mean_segment_len: float
    sequences: int


def describe_cohort(cohort: SyntheticCohort, l: Optional[int] = None) -> list[CohortRow]:
    """Class counts plus segment and sequence statistics recovered from the masks."""
    packing = PackingConfig(l=l or cohort.spec.seq_len)
    rows = []
    for label in LABELS:
        videos = [v for v in cohort.videos if v.label == label]
        if not videos:
            continue
        structures = [structure_video(v.mask(), packing, v.video_id) for v in videos]
        lengths = [len(s) for st in structures for s in st.segments]
        rows.append(CohortRow(label=label,
                              participants=len({v.participant_id for v in videos}),
                              videos=len(videos), segments=len(lengths),
                              mean_segments_per_video=len(lengths) / len(videos),
                              mean_segment_len=float(np.mean(lengths)) if lengths else 0.0,
                              sequences=sum(len(st.windows) for st in structures)))
    return rows


@dataclass
class CohortVideoEntry:
    """Index entry of one written video."""
    video_id: str
    participant_id: str
    label: str
    theme: str
    frame_count: int
    records: str
    segments: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class CohortIndex:
    """Contents of ``cohort.json``.

    An index written for outside detection records may list only ``videos``;
    the frame geometry and ROI then come from the ``preprocess`` flags.
    """
    videos: list[CohortVideoEntry]
    spec: dict = field(default_factory=dict)
    fps_original: Optional[float] = None
    frame_width: Optional[int] = None
    frame_height: Optional[int] = None
    roi: Optional[RoiFilter] = None

    @property
    def frame_size(self) -> Optional[tuple[int, int]]:
        if self.frame_width is None or self.frame_height is None:
            return None
        return self.frame_width, self.frame_height


def write_cohort(cohort: SyntheticCohort, out_dir: Path, inline_images: bool = False,
                 verbose: bool = True) -> CohortIndex:
    """Write records, crops, ``quality.json`` and ``cohort.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    total = len(cohort.videos)
    for i, video in enumerate(cohort.videos, start=1):
        rel = f"videos/{video.video_id}.ndjson"
        write_detection_records(video.records(), out_dir / rel,
                                crops_dir=None if inline_images
                                else out_dir / "crops" / video.video_id,
                                inline_images=inline_images)
        entries.append(CohortVideoEntry(video_id=video.video_id,
                                        participant_id=video.participant_id, label=video.label,
                                        theme=video.theme, frame_count=video.frame_count,
                                        records=rel, segments=list(video.segments)))
        if verbose and (i % max(1, total // 4) == 0 or i == total):
            print(f"   [{int(100 * i / total)}%] wrote {i}/{total} videos")
    write_quality_ratings({v.video_id: v.quality for v in cohort.videos},
                          out_dir / "quality.json")
    index = CohortIndex(spec=asdict(cohort.spec), fps_original=cohort.spec.fps_original,
                        frame_width=FRAME_WIDTH, frame_height=FRAME_HEIGHT, roi=cohort.roi,
                        videos=entries)
    (out_dir / "cohort.json").write_text(canonical_json(index) + "\n", encoding="utf-8")
    return index


def _optional(raw: dict, key: str, cast):
    return None if raw.get(key) is None else cast(raw[key])


def read_cohort(path: Path) -> CohortIndex:
    """Load ``cohort.json`` from a cohort directory (or the file itself).

    Raises:
        DataError: If the index is missing or malformed
    """
    path = Path(path)
    if path.is_dir():
        path = path / "cohort.json"
    if not path.exists():
        raise DataError(f"cohort index not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        roi = None
        if raw.get("roi") is not None:
            roi = RoiFilter(region=tuple(raw["roi"]["region"]),
                            min_face_area=raw["roi"]["min_face_area"])
        videos = [CohortVideoEntry(**{**v, "segments": [tuple(s) for s in v.get("segments", [])]})
                  for v in raw["videos"]]
        return CohortIndex(videos=videos, spec=raw.get("spec", {}),
                           fps_original=_optional(raw, "fps_original", float),
                           frame_width=_optional(raw, "frame_width", int),
                           frame_height=_optional(raw, "frame_height", int), roi=roi)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed cohort index {path}: {exc}") from exc
