import json
import subprocess
import sys
from pathlib import Path

from click.testing import CliRunner

from face2cognition.cli import cli
from face2cognition.temporal import read_sequence_manifest


def _run(*args: str, env=None) -> subprocess.CompletedProcess:
    cmd = [sys.executable, "-m", "face2cognition.cli", *args]
    return subprocess.run(cmd, capture_output=True, text=True, env=env)


def test_help_lists_every_command():
    result = _run("--help")
    assert result.returncode == 0
    for command in ("synth", "preprocess", "train-cae", "encode", "train-transformer",
                    "evaluate", "ablate", "report"):
        assert command in result.stdout


def test_missing_latents_exit_with_data_error(tmp_path: Path):
    result = _run("evaluate", "--latents", str(tmp_path / "none.tslf"), "--in", str(tmp_path),
                  "--out", str(tmp_path / "report.json"))
    assert result.returncode == 3
    assert "not found" in result.stderr


def test_invalid_configuration_exits_with_usage_error(tmp_path: Path):
    result = _run("synth", "--balance", "1.5", "--out", str(tmp_path / "c"))
    assert result.returncode == 2


def test_missing_report_exits_with_data_error(tmp_path: Path):
    assert _run("report", "--in", str(tmp_path / "report.json")).returncode == 3


def test_ts_seed_overrides_seed_flag(tmp_path: Path, monkeypatch):
    monkeypatch.setenv("TS_SEED", "5")
    runner = CliRunner()
    out = tmp_path / "cohort"
    result = runner.invoke(cli, ["synth", "--participants", "2", "--frames", "40",
                                 "--mu-nc", "10", "--mu-mci", "8", "--seq-len", "5",
                                 "--seed", "1", "--out", str(out)])
    assert result.exit_code == 0, result.output
    manifest = json.loads((out / "manifest.jsonl").read_text().splitlines()[-1])
    assert manifest["seed"] == 5
    assert json.loads((out / "cohort.json").read_text())["spec"]["seed"] == 5


def _synth(runner: CliRunner, out: Path) -> Path:
    result = runner.invoke(cli, ["synth", "--participants", "2", "--frames", "40",
                                 "--mu-nc", "10", "--mu-mci", "8", "--seq-len", "5",
                                 "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_preprocess_flags_replace_cohort_settings(tmp_path: Path):
    """A cohort.json holding only videos needs the acquisition settings as flags."""
    from face2cognition.preprocessing import load_preprocessed_dir

    runner = CliRunner()
    cohort = _synth(runner, tmp_path / "cohort")
    index = cohort / "cohort.json"
    index.write_text(json.dumps({"videos": json.loads(index.read_text())["videos"]}))

    bare = _run("preprocess", "--in", str(cohort), "--out", str(tmp_path / "bare"))
    assert bare.returncode == 2
    assert "--fps-original" in bare.stderr

    flags = ["--fps-original", "30", "--roi", "320,0,320,360", "--min-face-area", "1600"]
    for name, extra in (("full", []), ("half", ["--fps-target", "5"]),
                        ("left", ["--roi", "0,0,100,100"]),
                        ("tiny", ["--min-face-area", "1e9"])):
        result = runner.invoke(cli, ["preprocess", "--in", str(cohort),
                                     "--out", str(tmp_path / name), *flags, *extra])
        assert result.exit_code == 0, result.output

    def accepted(name):
        return json.loads((tmp_path / name / "preprocess.json").read_text())["accepted"]

    assert len(accepted("full")) == 2
    config = json.loads((tmp_path / "full" / "preprocess.json").read_text())["config"]
    assert config["fps_original"] == 30.0
    assert config["roi"] == {"region": [320, 0, 320, 360], "min_face_area": 1600.0}
    full = {v.video_id: len(v.mask) for v in load_preprocessed_dir(tmp_path / "full")}
    half = {v.video_id: len(v.mask) for v in load_preprocessed_dir(tmp_path / "half")}
    assert full == {vid: 40 for vid in full}
    assert half == {vid: 20 for vid in full}
    assert accepted("left") == []
    assert accepted("tiny") == []


def test_preprocess_rejects_bad_roi(tmp_path: Path):
    cohort = _synth(CliRunner(), tmp_path / "cohort")
    for roi in ("1,2,3", "a,b,c,d", "600,0,100,100"):
        result = _run("preprocess", "--in", str(cohort), "--out", str(tmp_path / "pre"),
                      "--roi", roi)
        assert result.returncode == 2, roi


def test_latent_and_dim_flags_must_match_the_latent_store(tmp_path: Path):
    from face2cognition.storage import load_checkpoint

    runner = CliRunner()
    cohort, pre, ckpt = tmp_path / "cohort", tmp_path / "pre", tmp_path / "cae64.tsck"
    _synth(runner, cohort)
    assert runner.invoke(cli, ["preprocess", "--in", str(cohort), "--out", str(pre)]).exit_code == 0
    result = runner.invoke(cli, ["train-cae", "--in", str(pre), "--out", str(ckpt), "--latent",
                                 "64", "--epochs", "1", "--max-images", "8",
                                 "--batch-size", "8"])
    assert result.exit_code == 0, result.output
    assert load_checkpoint(ckpt).config["encoder"]["latent_dim"] == 64

    encoded = _run("encode", "--checkpoint", str(ckpt), "--in", str(pre),
                   "--out", str(tmp_path / "latents.tslf"))
    assert encoded.returncode == 3
    assert "--latent 128" in encoded.stderr

    narrow = _run("evaluate", "--latents", str(tmp_path / "latents.tslf"), "--in", str(pre),
                  "--out", str(tmp_path / "report.json"), "--dim", "64")
    assert narrow.returncode == 3
    assert "--dim 64" in narrow.stderr
    assert _run("evaluate", "--latents", str(tmp_path / "latents.tslf"), "--in", str(pre),
                "--out", str(tmp_path / "report.json"), "--dim", "3").returncode == 2
    assert _run("train-cae", "--in", str(pre), "--out", str(ckpt),
                "--latent", "0").returncode == 2


def test_pipeline_end_to_end(tmp_path: Path):
    """synth → preprocess → train-cae → encode → evaluate → report on a tiny cohort."""
    runner = CliRunner()
    cohort, pre = tmp_path / "cohort", tmp_path / "pre"
    ckpt, latents = tmp_path / "cae.tsck", tmp_path / "latents.tslf"
    report, table = tmp_path / "out" / "report.json", tmp_path / "out" / "table.md"
    model = tmp_path / "model" / "transformer.tsck"
    experiment = ["--seq-len", "5", "--folds", "2", "--epochs", "1", "--layers", "1",
                  "--batch-size", "8"]
    steps = [
        ["synth", "--participants", "4", "--frames", "80", "--mu-nc", "20", "--mu-mci", "15",
         "--seq-len", "5", "--out", str(cohort)],
        ["preprocess", "--in", str(cohort), "--out", str(pre)],
        ["train-cae", "--in", str(pre), "--out", str(ckpt), "--epochs", "1",
         "--max-images", "8", "--batch-size", "8", "--preview", str(tmp_path / "grid.png")],
        ["encode", "--checkpoint", str(ckpt), "--in", str(pre), "--out", str(latents)],
        ["train-transformer", "--latents", str(latents), "--in", str(pre), "--out", str(model),
         *experiment],
        ["evaluate", "--latents", str(latents), "--in", str(pre), "--out", str(report),
         *experiment],
        ["report", "--in", str(report), "--out", str(table), "--plots",
         str(tmp_path / "plots"), "--pre", str(pre), "--latents", str(latents)],
    ]
    for args in steps:
        result = runner.invoke(cli, args)
        assert result.exit_code == 0, f"{args[0]} failed:\n{result.output}\n{result.exception}"

    assert len(json.loads((pre / "preprocess.json").read_text())["accepted"]) == 4
    assert (tmp_path / "grid.png").exists()
    data = json.loads(report.read_text())
    assert [t["theme"] for t in data["themes"]] == ["Summertime"]
    assert data["failures"] == []
    accepted = set(json.loads((pre / "preprocess.json").read_text())["accepted"])
    trained = read_sequence_manifest(model.with_suffix(".sequences.jsonl"))
    assert trained and {row["video_id"] for row in trained} <= accepted
    assert all(len(row["frame_indices"]) == 5 and row["label"] in ("MCI", "NC")
               for row in trained)
    evaluated = read_sequence_manifest(report.with_suffix(".sequences.jsonl"))
    assert len(evaluated) == sum(p["num_sequences"] for p in data["predictions"])
    assert {row["video_id"] for row in evaluated} == {p["video_id"] for p in data["predictions"]}
    assert table.read_text().startswith("**positional information**")
    assert sorted(p.name for p in (tmp_path / "plots").iterdir()) == [
        "interaction_trace.png", "metrics.png", "similarity.png"]

    commands = [json.loads(line)["command"]
                for line in (tmp_path / "out" / "manifest.jsonl").read_text().splitlines()]
    assert commands == ["evaluate", "report"]
    assert json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])["command"] \
        == "train-cae"
