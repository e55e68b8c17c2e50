"""Command-line entry point: synth → preprocess → train-cae → encode → evaluate → report.

Exit codes: 0 success, 2 usage or invalid configuration, 3 missing or
invalid data, 4 numerical failure.
"""

import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import click

from . import __version__
from .utils import DataError, NumericError, canonical_json

MANIFEST_NAME = "manifest.jsonl"


def _seed(seed: int) -> int:
    """TS_SEED, when set, wins over --seed."""
    env = os.environ.get("TS_SEED")
    if env is None or env == "":
        return seed
    try:
        return int(env)
    except ValueError:
        raise click.UsageError(f"TS_SEED must be an integer, got '{env}'")


def _banner(title: str) -> None:
    print("=" * 60)
    print(f"🧠✨ FACE2COGNITION: {title} ✨")
    print("=" * 60)


def _record(command: str, config: dict, seed: int, inputs: list, artifacts: list,
            manifest_dir: Path, dataset_hash: str = "", started=None) -> None:
    from .reporting import RunManifest, append_manifest

    manifest = started or RunManifest.start(command, config, seed, __version__)
    manifest.dataset_hash = dataset_hash
    for path in inputs:
        manifest.add_input(Path(path))
    manifest.finish(artifacts)
    append_manifest(manifest, Path(manifest_dir) / MANIFEST_NAME)


def _sequences_path(out) -> Path:
    """``report.json`` -> ``report.sequences.jsonl``, beside the output."""
    return Path(out).with_suffix(".sequences.jsonl")


def _start(command: str, config: dict, seed: int):
    from .reporting import RunManifest

    return RunManifest.start(command, config, seed, __version__)


def experiment_options(f):
    """Packing, model and training flags shared by train-transformer, evaluate and ablate."""
    options = [
        click.option("--seq-len", type=int, default=15, show_default=True,
                     help="Sequence size l in frames"),
        click.option("--overlap", type=float, default=0.0, show_default=True,
                     help="Fraction of a sequence shared with the next one"),
        click.option("--loss", type=click.Choice(["wbce", "bce"]), default="wbce",
                     show_default=True, help="Weighted or plain binary cross-entropy"),
        click.option("--positions", type=click.Choice(["none", "seq", "seg", "both"]),
                     default="both", show_default=True,
                     help="Sequence/segment embeddings added to the input"),
        click.option("--epochs", type=int, default=40, show_default=True,
                     help="Transformer training epochs"),
        click.option("--lr", type=float, default=1e-4, show_default=True,
                     help="Adam learning rate"),
        click.option("--batch-size", type=int, default=32, show_default=True,
                     help="Sequences per update"),
        click.option("--layers", type=int, default=4, show_default=True,
                     help="Encoder layers"),
        click.option("--dim", type=int, default=128, show_default=True,
                     help="Model width; must match the latent size"),
        click.option("--heads", type=int, default=2, show_default=True,
                     help="Attention heads"),
        click.option("--dropout", type=float, default=0.2, show_default=True,
                     help="Dropout rate"),
        click.option("--folds", type=int, default=10, show_default=True,
                     help="Cross-validation folds"),
        click.option("--seed", type=int, default=0, show_default=True,
                     help="Root seed (TS_SEED overrides)"),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _experiment(seq_len, overlap, loss, positions, epochs, lr, batch_size, layers, dim, heads,
                dropout, folds, seed):
    from .harness import ExperimentConfig
    from .temporal import PackingConfig
    from .transformer import TransformerConfig, TransformerTrainConfig

    try:
        return ExperimentConfig(
            packing=PackingConfig(l=seq_len, overlap_fraction=overlap),
            model=TransformerConfig(num_layers=layers, hidden_dim=dim, num_heads=heads,
                                    dropout=dropout, seq_len=seq_len, positions=positions),
            train=TransformerTrainConfig(epochs=epochs, lr=lr, batch_size=batch_size, loss=loss,
                                         seed=seed),
            k=folds, seed=seed)
    except ValueError as exc:
        raise click.UsageError(str(exc))


def _dataset(latents: str, pre: str, dim: int):
    from .harness import dataset_from_videos
    from .preprocessing import load_preprocessed_dir
    from .storage import LATENT_DIM, load_latents

    if dim != LATENT_DIM:
        raise DataError(f"--dim {dim} does not match the {LATENT_DIM}-d vectors of the latent "
                        f"store {latents}")
    store = load_latents(Path(latents))
    return dataset_from_videos(load_preprocessed_dir(Path(pre)), store)


@click.group()
@click.version_option(version=__version__, prog_name="face2cognition")
def cli() -> None:
    """Detect MCI from facial-feature sequences of video interviews.

    Every command appends a provenance line to manifest.jsonl next to its
    output. TS_SEED overrides --seed everywhere.
    """


@cli.command()
@click.option("--participants", type=int, default=30, show_default=True,
              help="Number of participants")
@click.option("--balance", type=float, default=0.5, show_default=True,
              help="Fraction of MCI participants")
@click.option("--mu-nc", type=float, default=60.0, show_default=True,
              help="Mean NC segment length in frames")
@click.option("--mu-mci", type=float, default=25.0, show_default=True,
              help="Mean MCI segment length in frames")
@click.option("--feature-shift", type=float, default=0.1, show_default=True,
              help="Expression offset of MCI faces")
@click.option("--frames", type=int, default=3000, show_default=True,
              help="Selected (10 fps) frames per video")
@click.option("--theme", "themes", multiple=True, default=("Summertime",), show_default=True,
              help="Theme to record (repeatable)")
@click.option("--seq-len", type=int, default=15, show_default=True,
              help="Sequence size the cohort must support")
@click.option("--poor-fraction", type=float, default=0.0, show_default=True,
              help="Fraction of videos rated poor")
@click.option("--inline-images", is_flag=True, help="Embed crops as base64 instead of PNG files")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Root seed (TS_SEED overrides)")
@click.option("--out", type=click.Path(file_okay=False), required=True,
              help="Output cohort directory")
def synth(participants, balance, mu_nc, mu_mci, feature_shift, frames, themes, seq_len,
          poor_fraction, inline_images, seed, out) -> None:
    """Generate a synthetic cohort of detection records and face crops."""
    from .cohort import CohortSpec, describe_cohort, generate_cohort, write_cohort

    seed = _seed(seed)
    try:
        spec = CohortSpec(n_participants=participants, class_balance=balance,
                          frames_per_video=frames,
                          segment_length_means={"NC": mu_nc, "MCI": mu_mci},
                          feature_shift=feature_shift, seed=seed, themes=tuple(themes),
                          seq_len=seq_len, poor_fraction=poor_fraction)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    started = _start("synth", {"spec": spec}, seed)
    _banner("Synthetic Cohort")
    cohort = generate_cohort(spec)
    write_cohort(cohort, Path(out), inline_images=inline_images)
    print()
    print("📊 Cohort summary:")
    for row in describe_cohort(cohort):
        print(f"   {row.label}: {row.participants} participants, {row.videos} videos, "
              f"{row.segments} segments (mean length {row.mean_segment_len:.1f}), "
              f"{row.sequences} sequences")
    out = Path(out)
    _record("synth", {"spec": spec}, seed, [], [out / "cohort.json", out / "quality.json",
                                                  out / "videos"], out, started=started)
    print(f"📁 Cohort written to: {out}")


def _parse_roi(ctx, param, value) -> Optional[tuple[int, int, int, int]]:
    if value is None:
        return None
    try:
        parts = tuple(int(v) for v in value.split(","))
    except ValueError:
        parts = ()
    if len(parts) != 4:
        raise click.BadParameter(f"expected x,y,w,h integers, got '{value}'")
    return parts


def _preprocess_config(index, fps_original, fps_target, roi, min_face_area):
    """Flags win over the values stored in ``cohort.json``."""
    from .preprocessing import PreprocessConfig, RoiFilter

    fps_original = fps_original if fps_original is not None else index.fps_original
    if fps_original is None:
        raise click.UsageError("--fps-original is required when cohort.json has no fps_original")
    if roi is None and index.roi is None:
        raise click.UsageError("--roi is required when cohort.json has no roi")
    region = roi if roi is not None else index.roi.region
    area = min_face_area if min_face_area is not None else (
        index.roi.min_face_area if index.roi is not None else None)
    if area is None:
        raise click.UsageError("--min-face-area is required when cohort.json has no roi")
    try:
        cfg = PreprocessConfig(fps_original=fps_original, roi=RoiFilter(region, area),
                               fps_target=fps_target, frame_size=index.frame_size)
        if cfg.frame_size is not None:
            cfg.roi.validate(*cfg.frame_size)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    return cfg


@cli.command()
@click.option("--in", "in_dir", type=click.Path(), required=True,
              help="Directory holding cohort.json and the detection records")
@click.option("--out", type=click.Path(file_okay=False), required=True,
              help="Output directory for preprocessed videos")
@click.option("--fps-original", type=float, default=None,
              help="Source frame rate [default: from cohort.json]")
@click.option("--fps-target", type=float, default=10.0, show_default=True,
              help="Target frame rate")
@click.option("--roi", callback=_parse_roi, default=None, metavar="X,Y,W,H",
              help="Participant area of interest in pixels [default: from cohort.json]")
@click.option("--min-face-area", type=float, default=None,
              help="Smallest accepted face area in pixels² [default: from cohort.json]")
def preprocess(in_dir, out, fps_original, fps_target, roi, min_face_area) -> None:
    """Rate-normalize, ROI-filter and quality-gate every video of a cohort."""
    from .cohort import read_cohort
    from .preprocessing import (gate_quality, load_quality_ratings, preprocess_video,
                                read_detection_records, save_preprocessed)

    in_dir, out = Path(in_dir), Path(out)
    index = read_cohort(in_dir)
    ratings = load_quality_ratings(in_dir / "quality.json")
    cfg = _preprocess_config(index, fps_original, fps_target, roi, min_face_area)
    config = {"fps_target": cfg.fps_target, "fps_original": cfg.fps_original, "roi": cfg.roi}
    started = _start("preprocess", config, 0)
    _banner("Preprocessing")
    accepted, excluded = [], {}
    for i, entry in enumerate(index.videos, start=1):
        rating = ratings.get(entry.video_id)
        if rating is not None and not gate_quality(rating):
            excluded[entry.video_id] = f"quality rating {rating.name}"
            print(f"⚠️  {entry.video_id} excluded: quality rating {rating.name}")
            continue
        video = preprocess_video(read_detection_records(in_dir / entry.records),
                                 entry.frame_count, cfg, entry.video_id,
                                 entry.participant_id, entry.label, entry.theme)
        if not video.mask.any():
            excluded[entry.video_id] = "no accepted frames"
            print(f"⚠️  {entry.video_id} excluded: no accepted frames")
            continue
        save_preprocessed(video, out / "frames" / f"{entry.video_id}.npz")
        accepted.append(entry.video_id)
        print(f"🧹 [{i}/{len(index.videos)}] {entry.video_id}: {int(video.mask.sum())}/"
              f"{len(video.mask)} frames with the main face")
    out.mkdir(parents=True, exist_ok=True)
    summary = out / "preprocess.json"
    summary.write_text(canonical_json({"accepted": accepted, "excluded": excluded,
                                       "config": config}) + "\n", encoding="utf-8")
    _record("preprocess", config, 0, [in_dir], [summary, out / "frames"], out, started=started)
    print(f"✅ {len(accepted)} videos accepted, {len(excluded)} excluded")


@cli.command("train-cae")
@click.option("--in", "in_dir", type=click.Path(), required=True,
              help="Preprocessed directory")
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Output checkpoint (.tsck)")
@click.option("--profile", type=click.Choice(["desk", "full"]), default="desk",
              show_default=True, help="Encoder width profile")
@click.option("--epochs", type=int, default=32, show_default=True, help="Training epochs")
@click.option("--latent", "latent_dim", type=int, default=128, show_default=True,
              help="Latent vector size")
@click.option("--lr", type=float, default=1e-3, show_default=True, help="Adam learning rate")
@click.option("--batch-size", type=int, default=32, show_default=True, help="Images per update")
@click.option("--max-images", type=int, default=2000, show_default=True,
              help="Random subset of faces to train on (0 = all)")
@click.option("--preview", type=click.Path(dir_okay=False), default=None,
              help="Write an original/reconstruction PNG strip here")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Root seed (TS_SEED overrides)")
def train_cae_cmd(in_dir, out, profile, epochs, latent_dim, lr, batch_size, max_images, preview,
                  seed) -> None:
    """Train the convolutional autoencoder on preprocessed faces."""
    import numpy as np

    from .cae import CaeTrainConfig, EncoderConfig, reconstruct, train_cae
    from .preprocessing import load_preprocessed_dir
    from .reporting import save_reconstruction_grid
    from .storage import save_checkpoint
    from .utils import rng

    seed = _seed(seed)
    encoder = EncoderConfig.desk() if profile == "desk" else EncoderConfig.full()
    try:
        train_cfg = CaeTrainConfig(epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)
        encoder = replace(encoder, latent_dim=latent_dim)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    config = {"encoder": encoder, "train": train_cfg, "max_images": max_images}
    started = _start("train-cae", config, seed)
    _banner("Autoencoder Training")
    videos = load_preprocessed_dir(Path(in_dir))
    faces = np.concatenate([v.faces for v in videos]) if videos else np.zeros((0, 96, 96, 3))
    if max_images and len(faces) > max_images:
        keep = np.sort(rng(seed, "cae", "subset").choice(len(faces), max_images, replace=False))
        faces = faces[keep]
    images = faces.astype(np.float32) / 255.0
    result = train_cae(images, train_cfg, encoder)
    save_checkpoint(result.checkpoint(), Path(out))
    artifacts = [Path(out)]
    if preview:
        sample = images[:8]
        artifacts.append(save_reconstruction_grid(sample, reconstruct(result.model, sample),
                                                  Path(preview)))
    _record("train-cae", config, seed, [in_dir], artifacts, Path(out).parent, started=started)
    print(f"📁 Checkpoint saved to: {out}")


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True,
              help="CAE checkpoint (.tsck)")
@click.option("--in", "in_dir", type=click.Path(), required=True,
              help="Preprocessed directory")
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Output latent store (.tslf)")
def encode(checkpoint, in_dir, out) -> None:
    """Encode every kept face into a 128-d latent vector."""
    from .cae import encode_batch, load_cae
    from .preprocessing import load_preprocessed_dir
    from .storage import LATENT_DIM, LatentStore, load_checkpoint, save_latents

    ckpt = load_checkpoint(Path(checkpoint))
    model = load_cae(ckpt)
    if model.config.latent_dim != LATENT_DIM:
        raise DataError(f"checkpoint {checkpoint} encodes {model.config.latent_dim}-d latents; "
                        f"the latent store holds {LATENT_DIM}-d vectors (train with --latent "
                        f"{LATENT_DIM})")
    started = _start("encode", {"checkpoint": str(checkpoint)}, ckpt.seed)
    _banner("Encoding")
    store = LatentStore()
    videos = load_preprocessed_dir(Path(in_dir))
    for i, video in enumerate(videos, start=1):
        store.add(video.video_id, video.present_positions,
                  encode_batch(model, video.face_images()))
        print(f"🧠 [{i}/{len(videos)}] {video.video_id}: {len(video.faces)} latents")
    save_latents(store, Path(out))
    _record("encode", {"checkpoint": str(checkpoint)}, ckpt.seed, [checkpoint, in_dir],
            [Path(out)], Path(out).parent, started=started)
    print(f"📁 {len(store)} latents saved to: {out}")


@cli.command("train-transformer")
@click.option("--latents", type=click.Path(dir_okay=False), required=True,
              help="Latent store (.tslf)")
@click.option("--in", "in_dir", type=click.Path(), required=True,
              help="Preprocessed directory")
@click.option("--theme", default=None, help="Theme to train on (default: the first theme)")
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Output checkpoint (.tsck)")
@experiment_options
def train_transformer_cmd(latents, in_dir, theme, out, **options) -> None:
    """Train the sequence classifier on every participant of one theme."""
    from .storage import save_checkpoint
    from .temporal import build_batch, structure_video, write_sequence_manifest
    from .transformer import train_transformer

    options["seed"] = _seed(options["seed"])
    config = _experiment(**options)
    dataset = _dataset(latents, in_dir, config.model.hidden_dim)
    themes = dataset.themes()
    if not themes:
        raise DataError("no accepted videos to train on")
    theme = theme or themes[0]
    if theme not in themes:
        raise DataError(f"theme '{theme}' not found; available: {themes}")
    started = _start("train-transformer", {"experiment": config.to_dict(), "theme": theme},
                     config.seed)
    _banner("Transformer Training")
    items = [(structure_video(v.mask, config.packing, v.video_id), p.id, p.label)
             for p in dataset.for_theme(theme) for v in p.videos]
    batch = build_batch(items, dataset.latents.get, config.packing.l, config.model.hidden_dim)
    result = train_transformer(batch, config.model, config.train)
    save_checkpoint(result.checkpoint(), Path(out))
    sequences = _sequences_path(out)
    write_sequence_manifest([(s, label) for s, _, label in items], sequences)
    _record("train-transformer", {"experiment": config.to_dict(), "theme": theme}, config.seed,
            [latents, in_dir], [Path(out), sequences], Path(out).parent,
            dataset_hash=dataset.content_hash(), started=started)
    print(f"📁 Checkpoint saved to: {out}")


@cli.command()
@click.option("--latents", type=click.Path(dir_okay=False), required=True,
              help="Latent store (.tslf)")
@click.option("--in", "in_dir", type=click.Path(), required=True,
              help="Preprocessed directory")
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Output report (.json)")
@experiment_options
def evaluate(latents, in_dir, out, **options) -> None:
    """Cross-validate the classifier and write a JSON report."""
    from .harness import run_cv
    from .temporal import structure_video, write_sequence_manifest

    options["seed"] = _seed(options["seed"])
    config = _experiment(**options)
    dataset = _dataset(latents, in_dir, config.model.hidden_dim)
    started = _start("evaluate", config.to_dict(), config.seed)
    _banner("Cross-Validation")
    report = run_cv(dataset, config)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(report.to_json() + "\n", encoding="utf-8")
    sequences = _sequences_path(out)
    write_sequence_manifest([(structure_video(v.mask, config.packing, v.video_id), p.label)
                             for p in dataset.participants for v in p.videos], sequences)
    if report.failures:
        print(f"⚠️  {len(report.failures)} fold(s) diverged; see 'failures' in {out}")
    _record("evaluate", config.to_dict(), config.seed, [latents, in_dir],
            [Path(out), sequences],
            Path(out).parent, dataset_hash=report.dataset_hash, started=started)
    print(f"📁 Report saved to: {out}")


@cli.command()
@click.option("--latents", type=click.Path(dir_okay=False), required=True,
              help="Latent store (.tslf)")
@click.option("--in", "in_dir", type=click.Path(), required=True,
              help="Preprocessed directory")
@click.option("--axis", type=click.Choice(["seqlen", "overlap", "loss", "positions"]),
              required=True, help="Ablation axis")
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Output table (.csv)")
@experiment_options
def ablate(latents, in_dir, axis, out, **options) -> None:
    """Run one ablation grid and write its table as CSV."""
    from .harness import run_ablations
    from .reporting import table_from_ablation

    options["seed"] = _seed(options["seed"])
    config = _experiment(**options)
    dataset = _dataset(latents, in_dir, config.model.hidden_dim)
    started = _start("ablate", {"experiment": config.to_dict(), "axis": axis}, config.seed)
    _banner(f"Ablation: {axis}")
    result = run_ablations(dataset, config, axes=(axis,))[axis]
    table = table_from_ablation(result)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(table.to_csv(), encoding="utf-8")
    print()
    print(table.to_markdown())
    _record("ablate", {"experiment": config.to_dict(), "axis": axis}, config.seed,
            [latents, in_dir], [Path(out)], Path(out).parent,
            dataset_hash=dataset.content_hash(), started=started)
    print(f"📁 Table saved to: {out}")


@cli.command()
@click.option("--in", "in_file", type=click.Path(dir_okay=False), required=True,
              help="Report written by 'evaluate'")
@click.option("--format", "fmt", type=click.Choice(["md", "csv"]), default="md",
              show_default=True, help="Table format")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write the table here instead of stdout")
@click.option("--plots", type=click.Path(file_okay=False), default=None,
              help="Directory for PNG plots")
@click.option("--pre", type=click.Path(), default=None,
              help="Preprocessed directory, enables interaction-trace plots")
@click.option("--latents", type=click.Path(dir_okay=False), default=None,
              help="Latent store, enables the similarity plot (needs --pre)")
@click.option("--trace-videos", type=int, default=2, show_default=True,
              help="Videos drawn in the interaction-trace plot")
def report(in_file, fmt, out, plots, pre, latents, trace_videos) -> None:
    """Render a report as a Markdown or CSV table, optionally with plots."""
    from .harness import EvalReport, ExperimentConfig
    from .reporting import emit_plots, table_from_report

    path = Path(in_file)
    if not path.exists():
        raise DataError(f"report not found: {path}; run 'evaluate' first")
    try:
        data = EvalReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed report {path}: {exc}") from exc
    started = _start("report", {"format": fmt, "plots": plots}, data.seed)
    table = table_from_report(data)
    text = table.to_markdown() if fmt == "md" else table.to_csv()
    artifacts = []
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
        artifacts.append(Path(out))
    else:
        click.echo(text, nl=False)
    if plots:
        traces, similarity = None, None
        if pre:
            from .preprocessing import load_preprocessed_dir
            from .temporal import interaction_trace, structure_video

            packing = ExperimentConfig.from_dict(data.config).packing
            videos = load_preprocessed_dir(Path(pre))[:max(0, trace_videos)]
            traces = {v.video_id: interaction_trace(structure_video(v.mask, packing, v.video_id))
                      for v in videos}
            if latents and videos:
                from .cae import similarity_profile
                from .storage import load_latents

                store = load_latents(Path(latents))
                similarity = similarity_profile(store.get(videos[0].video_id,
                                                          videos[0].present_positions))
        artifacts.extend(emit_plots(data, Path(plots), traces=traces, similarity=similarity))
    manifest_dir = Path(out).parent if out else (Path(plots) if plots else path.parent)
    _record("report", {"format": fmt, "plots": plots}, data.seed,
            [p for p in (in_file, pre, latents) if p], artifacts, manifest_dir,
            dataset_hash=data.dataset_hash, started=started)


def main(argv: Optional[list[str]] = None) -> None:
    """Run the CLI and map failures to exit codes."""
    try:
        code = cli.main(args=argv, prog_name="face2cognition", standalone_mode=False)
    except click.exceptions.Abort:
        print("Aborted!", file=sys.stderr)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except DataError as exc:
        print(f"❌ Data error: {exc}", file=sys.stderr)
        sys.exit(3)
    except NumericError as exc:
        print(f"❌ Numerical failure: {exc}", file=sys.stderr)
        sys.exit(4)
    except ValueError as exc:
        print(f"❌ Invalid configuration: {exc}", file=sys.stderr)
        sys.exit(2)
    sys.exit(code if isinstance(code, int) else 0)


if __name__ == "__main__":
    main()
