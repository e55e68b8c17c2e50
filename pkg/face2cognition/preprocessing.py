"""Turn per-frame detection records into rate-normalized, quality-gated face streams.

OCR and face detection are external: this module consumes their output as
``DetectionRecord`` streams (newline-delimited JSON with PNG crops) and
applies the frame-rate, ROI and quality rules.
"""

import base64
import io
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
from PIL import Image

from .utils import DataError

FACE_SIZE = 96


class QualityRating(IntEnum):
    """Manual per-video quality rating (1 = best)."""
    VERY_GOOD = 1
    GOOD = 2
    OK = 3
    POOR = 4
    VERY_POOR = 5


@dataclass
class FaceDetection:
    """One detected face.

    Attributes:
        bbox: (x, y, w, h) in pixels
        crop: Optional RGB crop, uint8 or float in [0,1], any size
    """
    bbox: tuple[int, int, int, int]
    crop: Optional[np.ndarray] = None

    @property
    def area(self) -> int:
        return int(self.bbox[2]) * int(self.bbox[3])

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return x + w / 2.0, y + h / 2.0


@dataclass
class DetectionRecord:
    """Detector output for one source frame.

    Attributes:
        frame_index: Index of the frame in the original video
        participant_id_visible: Whether OCR found the participant id overlay
        faces: Detected faces in this frame
    """
    frame_index: int
    participant_id_visible: bool
    faces: list[FaceDetection] = field(default_factory=list)


@dataclass
class RoiFilter:
    """Area of interest in which the participant's face is expected.

    Attributes:
        region: (x, y, w, h) bounding box in pixels
        min_face_area: Minimum face area in pixels²
    """
    region: tuple[int, int, int, int]
    min_face_area: float

    def __post_init__(self):
        if self.min_face_area <= 0:
            raise ValueError(f"min_face_area must be > 0, got {self.min_face_area}")
        x, y, w, h = self.region
        if w <= 0 or h <= 0 or x < 0 or y < 0:
            raise ValueError(f"invalid ROI region {self.region}")

    def validate(self, frame_width: int, frame_height: int) -> None:
        x, y, w, h = self.region
        if x + w > frame_width or y + h > frame_height:
            raise ValueError(f"ROI {self.region} exceeds frame {frame_width}x{frame_height}")

    def contains(self, point: tuple[float, float]) -> bool:
        x, y, w, h = self.region
        return x <= point[0] < x + w and y <= point[1] < y + h


@dataclass
class PreprocessConfig:
    """Frame-rate and ROI settings for one preprocessing run.

    Attributes:
        fps_original: Source frame rate
        fps_target: Target frame rate (10 fps)
        roi: Main-face filter
        frame_size: (width, height) of the source frames; bboxes are checked
            against it when given
    """
    fps_original: float
    roi: RoiFilter
    fps_target: float = 10.0
    frame_size: Optional[tuple[int, int]] = None


@dataclass
class PreprocessedVideo:
    """Main-face stream of one participant-theme video.

    Attributes:
        video_id: Unique video id
        participant_id: Owner of the video
        label: "MCI" or "NC"
        theme: Conversation theme
        frame_indices: Original indices of the selected (rate-normalized) frames
        mask: Per selected frame, whether a main face was found
        faces: uint8 crops (n_present, 96, 96, 3) in selected-stream order
    """
    video_id: str
    participant_id: str
    label: str
    theme: str
    frame_indices: np.ndarray
    mask: np.ndarray
    faces: np.ndarray

    @property
    def present_positions(self) -> np.ndarray:
        """Selected-stream positions that carry a face, aligned with ``faces``."""
        return np.flatnonzero(self.mask)

    def face_images(self) -> np.ndarray:
        """Faces as float32 in [0,1]."""
        return self.faces.astype(np.float32) / 255.0


def compute_frame_shift(fps_original: float, fps_target: float) -> int:
    """Frame stride that downsamples ``fps_original`` to ``fps_target``.

    Args:
        fps_original: Source frames per second
        fps_target: Desired frames per second

    Returns:
        floor(fps_original / fps_target), always >= 1

    Raises:
        ValueError: If fps_target <= 0 or fps_target > fps_original
    """
    if fps_target <= 0:
        raise ValueError(f"fps_target must be > 0, got {fps_target}")
    if fps_target > fps_original:
        raise ValueError(f"fps_target {fps_target} exceeds fps_original {fps_original}; "
                         f"only downsampling is supported")
    return max(1, int(math.floor(fps_original / fps_target)))


def select_frames(frame_count: int, shift: int) -> list[int]:
    """Indices 0, shift, 2*shift, ... below ``frame_count``."""
    if shift < 1:
        raise ValueError(f"shift must be >= 1, got {shift}")
    return list(range(0, max(0, frame_count), shift))


def select_main_face(record: DetectionRecord, roi: RoiFilter) -> Optional[FaceDetection]:
    """Pick the participant's face: largest face centered in the ROI above the area floor.

    Returns None when the participant id overlay is not visible or no face
    qualifies. Equal areas keep the earlier detection.
    """
    if not record.participant_id_visible:
        return None
    best = None
    for face in record.faces:
        if face.area < roi.min_face_area or not roi.contains(face.center):
            continue
        if best is None or face.area > best.area:
            best = face
    return best


def resize_face(crop: np.ndarray, size: int = FACE_SIZE) -> np.ndarray:
    """Bilinear resize of an RGB crop to ``size`` x ``size``, returned as uint8."""
    arr = np.asarray(crop)
    if np.issubdtype(arr.dtype, np.floating):
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"face crop must be HxWx3, got {arr.shape}")
    img = Image.fromarray(arr)
    if img.size != (size, size):
        img = img.resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def main_face(record: DetectionRecord, roi: RoiFilter) -> Optional[np.ndarray]:
    """Main-face crop of a frame, resized to 96x96x3 float32 in [0,1], or None.

    A main face detected without a crop image counts as absent.
    """
    face = select_main_face(record, roi)
    if face is None or face.crop is None:
        return None
    return resize_face(face.crop).astype(np.float32) / 255.0


def gate_quality(video_rating: QualityRating) -> bool:
    """Accept only videos rated very good or good."""
    return QualityRating(video_rating) in (QualityRating.VERY_GOOD, QualityRating.GOOD)


def write_quality_ratings(ratings: dict[str, QualityRating], path: Path) -> None:
    """Write the ``{video_id: rating}`` sidecar."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({k: int(v) for k, v in sorted(ratings.items())},
                                     indent=2) + "\n", encoding="utf-8")


def load_quality_ratings(path: Path) -> dict[str, QualityRating]:
    """Read the ``{video_id: rating}`` sidecar; a missing file means no ratings.

    Raises:
        DataError: If a rating is not in 1..5
    """
    path = Path(path)
    if not path.exists():
        return {}
    try:
        return {k: QualityRating(int(v))
                for k, v in json.loads(path.read_text(encoding="utf-8")).items()}
    except (ValueError, TypeError, AttributeError) as exc:
        raise DataError(f"malformed quality ratings {path}: {exc}") from exc


def presence_mask(frames: Iterable[Optional[object]]) -> np.ndarray:
    """Boolean mask, true where the frame yielded a main face."""
    return np.array([f is not None for f in frames], dtype=bool)


def check_record(rec: DetectionRecord, previous_index: int,
                 frame_size: Optional[tuple[int, int]] = None) -> None:
    """Check one record against its predecessor's frame index and the frame bounds.

    Raises:
        DataError: On a non-increasing frame index or an out-of-frame bbox
    """
    if rec.frame_index < 0 or rec.frame_index <= previous_index:
        raise DataError(f"frame_index {rec.frame_index} is not strictly increasing "
                        f"(previous {previous_index})")
    if frame_size is None:
        return
    frame_width, frame_height = frame_size
    for face in rec.faces:
        x, y, w, h = face.bbox
        if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > frame_width or y + h > frame_height:
            raise DataError(f"frame {rec.frame_index}: bbox {face.bbox} outside "
                            f"{frame_width}x{frame_height} frame")


def validate_records(records: Iterable[DetectionRecord], frame_width: int,
                     frame_height: int) -> None:
    """Check index ordering and bbox bounds of a whole record stream."""
    last = -1
    for rec in records:
        check_record(rec, last, (frame_width, frame_height))
        last = rec.frame_index


def preprocess_video(records: Iterable[DetectionRecord], frame_count: int, cfg: PreprocessConfig,
                     video_id: str, participant_id: str = "", label: str = "", theme: str = "",
                     verbose: bool = False) -> PreprocessedVideo:
    """Rate-normalize a record stream and keep the main face of every selected frame.

    Frames without a record count as face-absent. Records are consumed in
    order, so lazily rendered streams are never materialized whole.

    Raises:
        DataError: If frame indices do not strictly increase, or a bbox leaves
            ``cfg.frame_size``
    """
    shift = compute_frame_shift(cfg.fps_original, cfg.fps_target)
    selected = select_frames(frame_count, shift)
    wanted = set(selected)
    by_index: dict[int, np.ndarray] = {}
    last = -1
    for rec in records:
        check_record(rec, last, cfg.frame_size)
        last = rec.frame_index
        if rec.frame_index not in wanted:
            continue
        face = main_face(rec, cfg.roi)
        if face is not None:
            by_index[rec.frame_index] = face
    per_frame = [by_index.get(i) for i in selected]
    mask = presence_mask(per_frame)
    faces = [np.clip(np.rint(f * 255.0), 0, 255).astype(np.uint8) for f in per_frame
             if f is not None]
    faces_arr = (np.stack(faces) if faces
                 else np.zeros((0, FACE_SIZE, FACE_SIZE, 3), dtype=np.uint8))
    if verbose:
        print(f"   🧹 {video_id}: shift={shift}, {len(selected)} frames selected, "
              f"{int(mask.sum())} with main face")
    return PreprocessedVideo(video_id=video_id, participant_id=participant_id, label=label,
                             theme=theme, frame_indices=np.asarray(selected, dtype=np.int64),
                             mask=mask, faces=faces_arr)


# --- DetectionRecord files ---

def _encode_png(crop: np.ndarray) -> bytes:
    arr = np.asarray(crop)
    if np.issubdtype(arr.dtype, np.floating):
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _decode_png(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.uint8)


def write_detection_records(records: Iterable[DetectionRecord], path: Path,
                            crops_dir: Optional[Path] = None, inline_images: bool = False) -> int:
    """Write records as newline-delimited JSON.

    Crops go to PNG files under ``crops_dir`` (paths stored relative to the
    NDJSON file) or inline as base64 when ``inline_images`` is set.

    Returns:
        Number of records written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if crops_dir is not None:
        Path(crops_dir).mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            faces = []
            for k, face in enumerate(rec.faces):
                entry = {"bbox": [int(v) for v in face.bbox]}
                if face.crop is not None:
                    png = _encode_png(face.crop)
                    if inline_images or crops_dir is None:
                        entry["crop_b64"] = base64.b64encode(png).decode("ascii")
                    else:
                        crop_path = Path(crops_dir) / f"{rec.frame_index:06d}_{k}.png"
                        crop_path.write_bytes(png)
                        entry["crop"] = str(crop_path.relative_to(path.parent)
                                            if crop_path.is_relative_to(path.parent)
                                            else crop_path)
                faces.append(entry)
            fh.write(json.dumps({"frame_index": int(rec.frame_index),
                                 "participant_id_visible": bool(rec.participant_id_visible),
                                 "faces": faces}) + "\n")
            count += 1
    return count


def read_detection_records(path: Path) -> Iterator[DetectionRecord]:
    """Stream records from a newline-delimited JSON file.

    Raises:
        DataError: If the file is missing or a line is malformed
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"detection record file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                faces = []
                for entry in raw.get("faces", []):
                    crop = None
                    if "crop_b64" in entry:
                        crop = _decode_png(base64.b64decode(entry["crop_b64"]))
                    elif "crop" in entry:
                        crop_path = Path(entry["crop"])
                        if not crop_path.is_absolute():
                            crop_path = path.parent / crop_path
                        crop = _decode_png(crop_path.read_bytes())
                    faces.append(FaceDetection(bbox=tuple(int(v) for v in entry["bbox"]),
                                               crop=crop))
                yield DetectionRecord(frame_index=int(raw["frame_index"]),
                                      participant_id_visible=bool(raw["participant_id_visible"]),
                                      faces=faces)
            except (KeyError, ValueError, TypeError, OSError) as exc:
                raise DataError(f"{path}:{line_no}: malformed detection record ({exc})") from exc


def save_preprocessed(video: PreprocessedVideo, path: Path) -> None:
    """Store a preprocessed video as a compressed .npz archive."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, frame_indices=video.frame_indices, mask=video.mask,
                        faces=video.faces,
                        meta=np.array(json.dumps({"video_id": video.video_id,
                                                  "participant_id": video.participant_id,
                                                  "label": video.label,
                                                  "theme": video.theme})))


def load_preprocessed(path: Path) -> PreprocessedVideo:
    """Load a video written by ``save_preprocessed``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"preprocessed video not found: {path}")
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        return PreprocessedVideo(frame_indices=data["frame_indices"], mask=data["mask"],
                                 faces=data["faces"], **meta)


def load_preprocessed_dir(path: Path) -> list[PreprocessedVideo]:
    """Load every accepted video listed in ``preprocess.json`` of a preprocessing run.

    Raises:
        DataError: If the directory has no ``preprocess.json`` or a listed file is missing
    """
    path = Path(path)
    summary_path = path / "preprocess.json"
    if not summary_path.exists():
        raise DataError(f"no preprocess.json under {path}; run 'preprocess' first")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    return [load_preprocessed(path / "frames" / f"{vid}.npz") for vid in summary["accepted"]]
