import itertools
from pathlib import Path

import numpy as np
import pytest

from face2cognition.cohort import (
    CohortSpec,
    ProceduralFace,
    SyntheticCohort,
    describe_cohort,
    generate_cohort,
    plant_segments,
    read_cohort,
    render_face,
    theme_slug,
    write_cohort,
)
from face2cognition.preprocessing import (PreprocessConfig, QualityRating, load_quality_ratings,
                                          preprocess_video, read_detection_records)
from face2cognition.temporal import extract_segments
from face2cognition.utils import DataError

SMALL = dict(n_participants=4, frames_per_video=80, crop_size=32,
             segment_length_means={"NC": 20.0, "MCI": 15.0}, seed=7)


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_infeasible_segment_means_are_rejected():
    with pytest.raises(DataError, match="sequence size"):
        generate_cohort(CohortSpec(segment_length_means={"NC": 60, "MCI": 10}), verbose=False)


def test_cohort_spec_validation():
    for bad in ({"class_balance": 0.0}, {"class_balance": 1.0}, {"min_gap": 2},
                {"segment_length_means": {"NC": 60}}, {"themes": ()}, {"n_participants": 1}):
        with pytest.raises(ValueError):
            CohortSpec(**bad)
    spec = CohortSpec.from_dict({"n_participants": 6, "unknown": 1})
    assert spec.n_participants == 6


def test_class_balance_and_describe_counts():
    cohort = generate_cohort(CohortSpec(n_participants=30), verbose=False)
    rows = {r.label: r for r in describe_cohort(cohort)}
    assert (rows["MCI"].participants, rows["NC"].participants) == (15, 15)
    assert describe_cohort(SyntheticCohort(spec=CohortSpec())) == []


def test_planted_segments_are_recovered_exactly():
    """Gaps of at least three frames make segment extraction return the planted runs."""
    cohort = generate_cohort(CohortSpec(n_participants=10, frames_per_video=600), verbose=False)
    for video in cohort.videos:
        segments = extract_segments(video.mask())
        assert [(s.start_frame, s.end_frame) for s in segments] == video.segments
        for (_, end), (start, _) in zip(video.segments, video.segments[1:]):
            assert start - end - 1 >= 3


def test_plant_segments_respects_bounds():
    gen = np.random.default_rng(0)
    for _ in range(50):
        segments = plant_segments(500, 25.0, 10.0, 3, gen)
        assert all(0 <= s <= e < 500 for s, e in segments)


def test_describe_matches_recount():
    cohort = generate_cohort(CohortSpec(n_participants=8, frames_per_video=400), verbose=False)
    for row in describe_cohort(cohort, l=15):
        videos = [v for v in cohort.videos if v.label == row.label]
        lengths = []
        sequences = 0
        for v in videos:
            runs = [len(list(g)) for present, g in itertools.groupby(v.mask()) if present]
            lengths.extend(runs)
            sequences += sum(n // 15 for n in runs)
        assert row.segments == len(lengths)
        assert row.mean_segment_len == pytest.approx(np.mean(lengths))
        assert row.sequences == sequences


def test_mci_videos_have_more_and_shorter_segments():
    cohort = generate_cohort(CohortSpec(n_participants=24, seed=1), verbose=False)
    rows = {r.label: r for r in describe_cohort(cohort)}
    assert rows["MCI"].mean_segments_per_video > rows["NC"].mean_segments_per_video
    assert rows["MCI"].mean_segment_len < rows["NC"].mean_segment_len


def test_feature_shift_moves_only_mci_expression():
    base = generate_cohort(CohortSpec(n_participants=6, feature_shift=0.0), verbose=False)
    shifted = generate_cohort(CohortSpec(n_participants=6, feature_shift=0.1), verbose=False)
    for a, b in zip(base.videos, shifted.videos):
        assert a.segments == b.segments
        delta = b.identity.vector() - a.identity.vector()
        if a.label == "NC":
            assert np.all(delta == 0)
        else:
            assert b.identity.eye_open == pytest.approx(a.identity.eye_open - 0.1)
            assert b.identity.mouth_open == pytest.approx(a.identity.mouth_open + 0.1)


def test_render_face_is_bounded_and_deterministic():
    face = ProceduralFace()
    img = render_face(face, size=48)
    assert img.shape == (48, 48, 3)
    assert img.dtype == np.float32
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert np.array_equal(img, render_face(ProceduralFace(), size=48))


@pytest.mark.parametrize("name", ["mouth_open", "eye_open", "tilt", "offset_x"])
def test_render_face_is_parameter_continuous(name):
    face = ProceduralFace()
    base = render_face(face, size=64)
    small = render_face(ProceduralFace(**{name: getattr(face, name) + 1e-4}), size=64)
    large = render_face(ProceduralFace(**{name: getattr(face, name) + 1e-1}), size=64)
    assert np.abs(small - base).max() < 0.01
    assert np.abs(large - base).max() > np.abs(small - base).max()


def test_records_reproduce_the_planted_mask():
    cohort = generate_cohort(CohortSpec(**SMALL), verbose=False)
    video = cohort.videos[0]
    records = list(video.records())
    assert [r.frame_index for r in records] == [i * 3 for i in range(video.num_selected)]
    for rec in records:
        interviewer = rec.faces[0]
        assert not cohort.roi.contains(interviewer.center)
        assert interviewer.crop is None
    cfg = PreprocessConfig(fps_original=30.0, roi=cohort.roi)
    pre = preprocess_video(iter(records), video.frame_count, cfg, video.video_id)
    assert np.array_equal(pre.mask, video.mask())
    assert pre.faces.shape[0] == int(video.mask().sum())


def test_same_seed_writes_identical_cohorts(tmp_path: Path):
    for name in ("a", "b"):
        write_cohort(generate_cohort(CohortSpec(**SMALL), verbose=False), tmp_path / name,
                     verbose=False)
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a.keys() == b.keys()
    assert all(a[k] == b[k] for k in a), "cohort files differ between identical runs"

    write_cohort(generate_cohort(CohortSpec(**{**SMALL, "seed": 8}), verbose=False),
                 tmp_path / "c", verbose=False)
    assert _files(tmp_path / "c")["cohort.json"] != a["cohort.json"]


def test_cohort_index_round_trip(tmp_path: Path):
    cohort = generate_cohort(CohortSpec(**{**SMALL, "themes": ("Summertime", "Cities and Towns"),
                                           "poor_fraction": 0.5}), verbose=False)
    index = write_cohort(cohort, tmp_path, inline_images=True, verbose=False)
    loaded = read_cohort(tmp_path)
    assert loaded.videos == index.videos
    assert loaded.roi == cohort.roi
    assert {v.video_id for v in loaded.videos} >= {"p000_summertime", "p000_cities-and-towns"}

    ratings = load_quality_ratings(tmp_path / "quality.json")
    assert set(ratings) == {v.video_id for v in cohort.videos}
    assert set(ratings.values()) <= set(QualityRating)

    entry = loaded.videos[0]
    records = list(read_detection_records(tmp_path / entry.records))
    assert len(records) == cohort.videos[0].num_selected
    assert not (tmp_path / "crops").exists()

    with pytest.raises(DataError):
        read_cohort(tmp_path / "missing")


def test_theme_slug():
    assert theme_slug("Cities and Towns") == "cities-and-towns"
    assert theme_slug("Self-care") == "self-care"
