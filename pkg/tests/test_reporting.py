import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from face2cognition.harness import AblationResult, EvalReport, Metrics, ThemeResult
from face2cognition.reporting import (
    PUBLISHED_TABLES,
    RunManifest,
    append_manifest,
    emit_plots,
    format_metric,
    plot_similarity,
    plot_trace,
    read_manifests,
    save_reconstruction_grid,
    table_from_ablation,
    table_from_report,
)


def _report(accuracy: float = 0.75, positions: str = "both", themes=("Summertime", "Halloween"),
            auc=0.8) -> EvalReport:
    return EvalReport(
        config={"model": {"positions": positions}}, seed=0, dataset_hash="abc",
        themes=[ThemeResult(theme=t, pooled=Metrics(accuracy, 0.5, auc, 8), folds=[])
                for t in themes])


@pytest.mark.parametrize("metric, value, text", [
    ("Accuracy", 0.8333, "83.3%"), ("F1", 0.847, "0.85"), ("AUC", None, "n/a"),
])
def test_format_metric(metric, value, text):
    assert format_metric(metric, value) == text


def test_table_from_report_labels_position_mode():
    table = table_from_report(_report(positions="seg"))
    assert table.columns == ["segment"]
    assert table.row_labels == ["Summertime", "Halloween"]
    assert table.header() == ["Themes", "segment Accuracy", "segment F1", "segment AUC"]
    assert table.rows()[0] == ["Summertime", "75.0%", "0.50", "0.80"]


def test_ablation_tables_follow_axis_layouts():
    overlap = AblationResult(axis="overlap", values=(0.0, 0.2, 0.4),
                             reports=[_report(a) for a in (0.9, 0.8, 0.7)])
    table = table_from_ablation(overlap)
    assert table.header() == ["Themes", "0%", "20%", "40%"]
    assert table.rows() == [["Halloween", "90.0%", "80.0%", "70.0%"],
                            ["Summertime", "90.0%", "80.0%", "70.0%"]]
    assert table.to_csv().splitlines()[0] == "Themes,0%,20%,40%"

    seqlen = AblationResult(axis="seqlen", values=(15, 20, 25),
                            reports=[_report(auc=None)] * 3)
    table = table_from_ablation(seqlen)
    assert len(table.header()) == 1 + 3 * 3
    assert table.rows()[0][3] == "n/a"

    loss = table_from_ablation(AblationResult(axis="loss", values=("wbce", "bce"),
                                              reports=[_report(), _report(0.5)]))
    assert loss.columns == ["weighted BCE", "BCE"]


def test_published_tables_render_like_generated_ones():
    md = PUBLISHED_TABLES["overlap"].to_markdown()
    assert md.startswith("**sequence overlapping percentage**")
    assert "| Summertime | 83.3% | 80.0% | 80.0% |" in md
    positions = PUBLISHED_TABLES["positions"]
    assert positions.value("Halloween", "sequence and segment", "Accuracy") == 0.875
    assert len(positions.header()) == 13
    assert PUBLISHED_TABLES["loss"].rows()[0] == ["Summertime", "83.3%", "76.7%"]


def test_plots_are_written_and_byte_stable(tmp_path: Path):
    traces = {"p000_summertime": [(0, 0, 0), (1, 0, 0), (2, 1, 0), (3, 1, 0), (7, 2, 1)],
              "p001_summertime": [(4, 0, 0)]}
    paths = emit_plots(_report(), tmp_path / "a", traces=traces,
                       similarity=np.array([1.0, 0.4, -0.2]))
    assert [p.name for p in paths] == ["metrics.png", "interaction_trace.png", "similarity.png"]
    again = emit_plots(_report(), tmp_path / "b", traces=traces,
                       similarity=np.array([1.0, 0.4, -0.2]))
    for a, b in zip(paths, again):
        assert a.read_bytes() == b.read_bytes(), a.name
        assert Image.open(a).size == (640, 360)


def test_empty_inputs_write_nothing(tmp_path: Path):
    empty = EvalReport(config={}, seed=0, dataset_hash="")
    assert emit_plots(empty, tmp_path, traces={}, similarity=None) == []
    assert plot_trace({"v": []}, tmp_path / "t.png") is None
    assert plot_similarity(np.zeros(0), tmp_path / "s.png") is None
    assert list(tmp_path.iterdir()) == []


def test_reconstruction_grid(tmp_path: Path):
    originals = np.zeros((3, 8, 8, 3), dtype=np.float32)
    rebuilt = np.ones((3, 8, 8, 3), dtype=np.float32)
    path = save_reconstruction_grid(originals, rebuilt, tmp_path / "grid.png")
    arr = np.asarray(Image.open(path))
    assert arr.shape == (16, 24, 3)
    assert arr[:8].max() == 0 and arr[8:].min() == 255
    with pytest.raises(ValueError):
        save_reconstruction_grid(originals, rebuilt[:2], tmp_path / "bad.png")


def test_manifest_lines_append(tmp_path: Path):
    data = tmp_path / "latents.tslf"
    data.write_bytes(b"TSLF")
    path = tmp_path / "manifest.jsonl"
    for command in ("encode", "evaluate"):
        manifest = RunManifest.start(command, {"k": 10}, seed=3, version="0.1.0")
        manifest.add_input(data)
        manifest.add_input(tmp_path / "missing")
        append_manifest(manifest.finish([tmp_path / "report.json"]), path)

    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0])["command"] == "encode"
    manifests = read_manifests(path)
    assert [m.command for m in manifests] == ["encode", "evaluate"]
    assert list(manifests[1].inputs) == [str(data)]
    assert manifests[1].artifacts == [str(tmp_path / "report.json")]
    assert manifests[0].duration_s >= 0
    assert read_manifests(tmp_path / "none.jsonl") == []
