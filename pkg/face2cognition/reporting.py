"""Result tables, Pillow-drawn plots and append-only run manifests."""

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image, ImageDraw

from .harness import AblationResult, EvalReport, Metrics
from .utils import canonical_json, file_sha256

METRIC_NAMES = ("Accuracy", "F1", "AUC")

# axis -> (header, column label per grid value, metrics shown)
AXIS_LAYOUTS = {
    "positions": ("positional information",
                  {"none": "no position", "seq": "sequence", "seg": "segment",
                   "both": "sequence and segment"}, METRIC_NAMES),
    "seqlen": ("sequence size", {15: "15", 20: "20", 25: "25"}, METRIC_NAMES),
    "overlap": ("sequence overlapping percentage", {0.0: "0%", 0.2: "20%", 0.4: "40%"},
                ("Accuracy",)),
    "loss": ("loss function", {"wbce": "weighted BCE", "bce": "BCE"}, ("Accuracy",)),
}


@dataclass
class ReportTable:
    """Themes by configuration grid of metrics.

    Attributes:
        axis: Header spanning the configuration columns
        row_labels: Themes
        columns: Configuration labels
        metrics: Metric names shown under every configuration
        cells: (row, column, metric) -> value, None when undefined
    """
    axis: str
    row_labels: list[str]
    columns: list[str]
    metrics: tuple = METRIC_NAMES
    cells: dict = field(default_factory=dict)

    def value(self, row: str, column: str, metric: str) -> Optional[float]:
        return self.cells.get((row, column, metric))

    def header(self) -> list[str]:
        if len(self.metrics) == 1:
            return ["Themes"] + list(self.columns)
        return ["Themes"] + [f"{c} {m}" for c in self.columns for m in self.metrics]

    def rows(self) -> list[list[str]]:
        return [[row] + [format_metric(m, self.value(row, c, m))
                         for c in self.columns for m in self.metrics]
                for row in self.row_labels]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"**{self.axis}**", ""]
        header = self.header()
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "|".join(["---"] + [":---:"] * (len(header) - 1)) + "|")
        lines.extend("| " + " | ".join(r) + " |" for r in self.rows())
        return "\n".join(lines) + "\n"


def format_metric(metric: str, value: Optional[float]) -> str:
    if value is None:
        return "n/a"
    if metric == "Accuracy":
        return f"{100.0 * value:.1f}%"
    return f"{value:.2f}"


def _metric_cells(row: str, column: str, m: Metrics) -> dict:
    return {(row, column, "Accuracy"): m.accuracy, (row, column, "F1"): m.f1,
            (row, column, "AUC"): m.auc}


def table_from_report(report: EvalReport) -> ReportTable:
    """One-column table of a single cross-validation run, labeled by its position mode."""
    positions = report.config.get("model", {}).get("positions", "both")
    column = AXIS_LAYOUTS["positions"][1].get(positions, positions)
    table = ReportTable(axis="positional information",
                        row_labels=[t.theme for t in report.themes], columns=[column])
    for t in report.themes:
        table.cells.update(_metric_cells(t.theme, column, t.pooled))
    return table


def table_from_ablation(result: AblationResult) -> ReportTable:
    """Table laid out like the published table for the ablation's axis."""
    header, labels, shown = AXIS_LAYOUTS[result.axis]
    columns = [labels.get(v, str(v)) for v in result.values]
    themes = sorted({t.theme for r in result.reports for t in r.themes})
    table = ReportTable(axis=header, row_labels=themes, columns=columns, metrics=shown)
    for column, report in zip(columns, result.reports):
        for t in report.themes:
            table.cells.update(_metric_cells(t.theme, column, t.pooled))
    return table


def _published_table(axis: str, rows: dict[str, list[float]]) -> ReportTable:
    header, labels, shown = AXIS_LAYOUTS[axis]
    columns = list(labels.values())
    table = ReportTable(axis=header, row_labels=list(rows), columns=columns, metrics=shown)
    for row, values in rows.items():
        it = iter(values)
        for c in columns:
            for m in shown:
                table.cells[(row, c, m)] = next(it)
    return table


# Published clinical results, used as layout fixtures
PUBLISHED_TABLES = {
    "positions": _published_table("positions", {
        "Summertime": [0.767, 0.77, 0.77, 0.766, 0.79, 0.76, 0.80, 0.81, 0.80, 0.833, 0.85, 0.83],
        "Self-care": [0.70, 0.64, 0.69, 0.633, 0.56, 0.63, 0.60, 0.50, 0.59, 0.667, 0.58, 0.66],
        "Halloween": [0.844, 0.86, 0.84, 0.75, 0.79, 0.74, 0.813, 0.84, 0.80, 0.875, 0.89, 0.87],
        "Cities and Towns": [0.769, 0.77, 0.77, 0.769, 0.76, 0.77, 0.795, 0.79, 0.80, 0.795,
                             0.78, 0.80],
    }),
    "seqlen": _published_table("seqlen", {
        "Summertime": [0.833, 0.85, 0.83, 0.80, 0.82, 0.79, 0.77, 0.80, 0.76],
        "Self-care": [0.667, 0.58, 0.66, 0.70, 0.66, 0.70, 0.60, 0.54, 0.59],
        "Halloween": [0.875, 0.89, 0.87, 0.812, 0.83, 0.81, 0.812, 0.84, 0.80],
        "Cities and Towns": [0.795, 0.78, 0.80, 0.795, 0.78, 0.80, 0.795, 0.76, 0.80],
    }),
    "overlap": _published_table("overlap", {
        "Summertime": [0.833, 0.80, 0.80],
        "Self-care": [0.667, 0.633, 0.60],
        "Halloween": [0.875, 0.844, 0.75],
        "Cities and Towns": [0.795, 0.795, 0.821],
    }),
    "loss": _published_table("loss", {
        "Summertime": [0.833, 0.767],
        "Self-care": [0.667, 0.567],
        "Halloween": [0.875, 0.781],
        "Cities and Towns": [0.795, 0.769],
    }),
}


# --- Plots ---

_PALETTE = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
            (140, 86, 75)]
_PLOT_W, _PLOT_H, _MARGIN = 640, 360, 40


def _save_png(img: Image.Image, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG", optimize=False)
    return path


def _axes(draw: ImageDraw.ImageDraw, title: str) -> None:
    draw.text((_MARGIN, 8), title, fill=(0, 0, 0))
    draw.line([(_MARGIN, _MARGIN), (_MARGIN, _PLOT_H - _MARGIN),
               (_PLOT_W - _MARGIN, _PLOT_H - _MARGIN)], fill=(0, 0, 0), width=1)


def plot_trace(traces: dict[str, list[tuple[int, int, int]]], path: Path) -> Optional[Path]:
    """Stepped sequence-index and segment-index curves over frames, one color per video.

    Args:
        traces: video id -> (frame, sequence index, segment index) per windowed frame
        path: Output PNG

    Returns:
        Written path, or None when there is nothing to draw
    """
    traces = {k: v for k, v in sorted(traces.items()) if v}
    if not traces:
        return None
    max_frame = max(t[-1][0] for t in traces.values()) or 1
    max_index = max(max(max(m, s) for _, m, s in t) for t in traces.values()) or 1
    img = Image.new("RGB", (_PLOT_W, _PLOT_H), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    _axes(draw, "sequence (solid) and segment (thin) index per frame")
    sx = (_PLOT_W - 2 * _MARGIN) / max_frame
    sy = (_PLOT_H - 2 * _MARGIN) / max_index

    def xy(frame, value):
        return _MARGIN + frame * sx, _PLOT_H - _MARGIN - value * sy

    for k, (video_id, trace) in enumerate(traces.items()):
        color = _PALETTE[k % len(_PALETTE)]
        for column, width in ((1, 2), (2, 1)):
            points = _stairs(trace, column, xy)
            if len(points) == 1:
                points = points * 2
            draw.line(points, fill=color, width=width)
        draw.text((_PLOT_W - _MARGIN - 120, _MARGIN + 12 * k), video_id, fill=color)
    return _save_png(img, path)


def _stairs(trace, column, xy):
    points = []
    prev = None
    for row in trace:
        frame, value = row[0], row[column]
        if prev is not None and value != prev:
            points.append(xy(frame, prev))
        points.append(xy(frame, value))
        prev = value
    return points


def plot_metric_bars(report: EvalReport, path: Path) -> Optional[Path]:
    """Grouped Accuracy/F1/AUC bars per theme."""
    if not report.themes:
        return None
    img = Image.new("RGB", (_PLOT_W, _PLOT_H), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    _axes(draw, "video-level metrics per theme")
    group_w = (_PLOT_W - 2 * _MARGIN) / len(report.themes)
    bar_w = group_w / (len(METRIC_NAMES) + 1)
    height = _PLOT_H - 2 * _MARGIN
    for g, theme in enumerate(report.themes):
        values = (theme.pooled.accuracy, theme.pooled.f1, theme.pooled.auc)
        for b, value in enumerate(values):
            if value is None:
                continue
            x0 = _MARGIN + g * group_w + (b + 0.5) * bar_w
            y0 = _PLOT_H - _MARGIN - value * height
            draw.rectangle([x0, y0, x0 + bar_w - 2, _PLOT_H - _MARGIN], fill=_PALETTE[b])
        draw.text((_MARGIN + g * group_w + 4, _PLOT_H - _MARGIN + 6), theme.theme,
                  fill=(0, 0, 0))
    for b, name in enumerate(METRIC_NAMES):
        draw.text((_PLOT_W - _MARGIN - 80, _MARGIN + 12 * b), name, fill=_PALETTE[b])
    return _save_png(img, path)


def plot_similarity(profile: np.ndarray, path: Path) -> Optional[Path]:
    """Bar chart of cosine similarities to a reference frame (zero line in the middle)."""
    profile = np.asarray(profile, dtype=np.float64)
    if profile.size == 0:
        return None
    img = Image.new("RGB", (_PLOT_W, _PLOT_H), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    _axes(draw, "cosine similarity to the reference frame")
    mid = _PLOT_H / 2
    half = (_PLOT_H - 2 * _MARGIN) / 2
    draw.line([(_MARGIN, mid), (_PLOT_W - _MARGIN, mid)], fill=(128, 128, 128))
    w = (_PLOT_W - 2 * _MARGIN) / profile.size
    for i, value in enumerate(profile):
        x0 = _MARGIN + i * w
        y = mid - value * half
        draw.rectangle([x0, min(y, mid), x0 + max(w - 1, 1), max(y, mid)],
                       fill=_PALETTE[0] if value >= 0 else _PALETTE[3])
    return _save_png(img, path)


def emit_plots(report: EvalReport, out_dir: Path,
               traces: Optional[dict[str, list[tuple[int, int, int]]]] = None,
               similarity: Optional[np.ndarray] = None) -> list[Path]:
    """Write metric bars, interaction traces and the similarity profile when available.

    Returns:
        Written files; empty when there is nothing to plot
    """
    out_dir = Path(out_dir)
    written = [plot_metric_bars(report, out_dir / "metrics.png")]
    if traces:
        written.append(plot_trace(traces, out_dir / "interaction_trace.png"))
    if similarity is not None:
        written.append(plot_similarity(similarity, out_dir / "similarity.png"))
    return [p for p in written if p is not None]


def save_reconstruction_grid(originals: np.ndarray, reconstructions: np.ndarray,
                             path: Path) -> Path:
    """Two-row PNG strip: originals on top, reconstructions below."""
    originals = np.asarray(originals)
    reconstructions = np.asarray(reconstructions)
    if originals.shape != reconstructions.shape or originals.ndim != 4:
        raise ValueError(f"expected matching (n, H, W, 3) stacks, got {originals.shape} and "
                         f"{reconstructions.shape}")

    def to_u8(a):
        if np.issubdtype(a.dtype, np.floating):
            return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
        return a.astype(np.uint8)

    top = np.concatenate(list(to_u8(originals)), axis=1)
    bottom = np.concatenate(list(to_u8(reconstructions)), axis=1)
    return _save_png(Image.fromarray(np.concatenate([top, bottom], axis=0)), path)


# --- Run manifests ---

@dataclass
class RunManifest:
    """Provenance line of one command run.

    Attributes:
        command: Subcommand name
        config: Full effective configuration
        seed: Root seed
        dataset_hash: Content hash of the evaluated data, when applicable
        inputs: Input path -> SHA-256
        artifacts: Output paths written by the command
        version: face2cognition version
        duration_s: Wall-clock duration in seconds
    """
    command: str
    config: dict
    seed: int
    dataset_hash: str = ""
    inputs: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    version: str = ""
    duration_s: float = 0.0

    @classmethod
    def start(cls, command: str, config: dict, seed: int, version: str) -> "RunManifest":
        manifest = cls(command=command, config=config, seed=seed, version=version)
        manifest._t0 = time.perf_counter()
        return manifest

    def add_input(self, path: Path) -> None:
        path = Path(path)
        if path.is_file():
            self.inputs[str(path)] = file_sha256(path)
        elif path.is_dir():
            self.inputs[str(path)] = _dir_sha256(path)

    def finish(self, artifacts: Iterable[Path]) -> "RunManifest":
        self.artifacts = [str(p) for p in artifacts]
        self.duration_s = round(time.perf_counter() - getattr(self, "_t0", time.perf_counter()),
                                3)
        return self


def _dir_sha256(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in Path(path).rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode("utf-8"))
        h.update(file_sha256(f).encode("ascii"))
    return h.hexdigest()


def append_manifest(manifest: RunManifest, path: Path) -> None:
    """Append one JSON line to ``manifest.jsonl``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(canonical_json(asdict(manifest)) + "\n")


def read_manifests(path: Path) -> list[RunManifest]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open("r", encoding="utf-8") as fh:
        return [RunManifest(**json.loads(line)) for line in fh if line.strip()]
