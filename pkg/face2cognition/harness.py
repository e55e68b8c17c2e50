"""Participant-level cross-validation with majority-vote video evaluation.

Each theme is evaluated on its own: participants are split into stratified
folds, the sequence classifier is trained on the other folds, and every
held-out video is labeled by the majority of its sequence predictions.
Metrics are computed over video predictions pooled across folds.
"""

import hashlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Protocol

import numpy as np

from .preprocessing import PreprocessedVideo
from .storage import LatentStore
from .temporal import (LABELS, PackingConfig, VideoStructure, build_batch, label_to_int,
                       structure_video)
from .transformer import TransformerConfig, TransformerTrainConfig, train_transformer
from .utils import DataError, NumericError, canonical_json, config_hash, derive_seed

# Optional dependencies - imported only when needed
try:
    from sklearn.metrics import roc_auc_score
    HAS_SKLEARN = True
except ImportError:
    HAS_SKLEARN = False

ABLATION_AXES = {
    "seqlen": (15, 20, 25),
    "overlap": (0.0, 0.2, 0.4),
    "loss": ("wbce", "bce"),
    "positions": ("none", "seq", "seg", "both"),
}
DEFAULT_ABLATIONS = ("seqlen", "overlap", "loss")


@dataclass
class SegmentedVideo:
    """Presence mask of one participant-theme video.

    Attributes:
        video_id: Unique video id (latent store key)
        mask: Main-face presence per selected frame
    """
    video_id: str
    mask: np.ndarray


@dataclass
class Participant:
    """One participant within one theme.

    Attributes:
        id: Participant id
        label: "MCI" or "NC"
        theme: Conversation theme
        videos: The participant's videos of this theme
    """
    id: str
    label: str
    theme: str
    videos: list[SegmentedVideo] = field(default_factory=list)

    def __post_init__(self):
        label_to_int(self.label)


@dataclass
class Dataset:
    """Participants of every theme plus their per-frame latents."""
    participants: list[Participant]
    latents: LatentStore

    def themes(self) -> list[str]:
        return sorted({p.theme for p in self.participants})

    def for_theme(self, theme: str) -> list[Participant]:
        return sorted((p for p in self.participants if p.theme == theme), key=lambda p: p.id)

    def content_hash(self) -> str:
        """SHA-256 over participants, masks and latents (16 hex chars)."""
        h = hashlib.sha256()
        for p in sorted(self.participants, key=lambda p: (p.theme, p.id)):
            h.update(canonical_json([p.id, p.label, p.theme]).encode("utf-8"))
            for v in sorted(p.videos, key=lambda v: v.video_id):
                h.update(v.video_id.encode("utf-8"))
                h.update(np.packbits(np.asarray(v.mask, dtype=bool)).tobytes())
        for key in sorted(self.latents.entries):
            h.update(np.asarray(key, dtype="<u8").tobytes())
            h.update(np.asarray(self.latents.entries[key], dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def dataset_from_videos(videos: Iterable[PreprocessedVideo], latents: LatentStore) -> Dataset:
    """Group preprocessed videos into per-theme participants.

    Raises:
        DataError: If a participant carries two labels within one theme
    """
    grouped: dict[tuple[str, str], Participant] = {}
    for video in videos:
        key = (video.theme, video.participant_id)
        if key not in grouped:
            grouped[key] = Participant(id=video.participant_id, label=video.label,
                                       theme=video.theme)
        elif grouped[key].label != video.label:
            raise DataError(f"participant {video.participant_id} has labels "
                            f"{grouped[key].label} and {video.label} in theme {video.theme}")
        grouped[key].videos.append(SegmentedVideo(video.video_id, np.asarray(video.mask)))
    return Dataset(participants=[grouped[k] for k in sorted(grouped)], latents=latents)


@dataclass
class FoldPlan:
    """Participant-to-fold assignment.

    Attributes:
        k: Number of folds
        seed: Seed of the within-class shuffle
        assignments: Participant id -> fold index
    """
    k: int
    seed: int
    assignments: dict[str, int]

    def test_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignments.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignments.items() if f != fold)


def make_folds(participants: list[Participant], k: int = 10, seed: int = 0) -> FoldPlan:
    """Stratified fold assignment.

    Each class is shuffled with the seed and dealt round-robin over the folds;
    the NC deal continues from the fold after the last MCI participant so
    fold sizes stay within one of each other.

    Raises:
        DataError: With fewer participants than folds or a missing class
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(participants) < k:
        raise DataError(f"need at least {k} participants for {k} folds, got {len(participants)}")
    ids = [p.id for p in participants]
    if len(set(ids)) != len(ids):
        raise DataError("participant ids must be unique within a fold plan")
    gen = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    counter = 0
    for label in ("MCI", "NC"):
        members = sorted(p.id for p in participants if p.label == label)
        if not members:
            raise DataError(f"no {label} participants; both classes are required")
        for pid in gen.permutation(np.array(members, dtype=object)):
            assignments[str(pid)] = counter % k
            counter += 1
    return FoldPlan(k=k, seed=seed, assignments=assignments)


def check_fold_hygiene(plan: FoldPlan, participants: list[Participant]) -> None:
    """Assert that train/test sets never share a participant and test folds hold both classes.

    The both-classes check applies when each class has at least ``k`` members.

    Raises:
        AssertionError: On any violation
    """
    labels = {p.id: p.label for p in participants}
    counts = {c: sum(1 for lab in labels.values() if lab == c) for c in LABELS}
    for fold in range(plan.k):
        test, train = set(plan.test_ids(fold)), set(plan.train_ids(fold))
        if test & train:
            raise AssertionError(f"fold {fold}: participants {sorted(test & train)} in both sets")
        if min(counts.values()) >= plan.k and {labels[pid] for pid in test} != set(LABELS):
            raise AssertionError(f"fold {fold}: test set lacks a class")


@dataclass
class VideoPrediction:
    """Video-level decision.

    Attributes:
        video_id: Video id
        participant_id: Owner
        label: True label
        predicted: Majority-vote label
        score: Fraction of sequences predicted MCI
        fold: Fold the video was held out in
        num_sequences: Sequences voted over
    """
    video_id: str
    participant_id: str
    label: str
    predicted: str
    score: float
    fold: int
    num_sequences: int


def classify_video(probs: np.ndarray) -> tuple[str, float]:
    """Majority vote over per-sequence argmax labels.

    Args:
        probs: (n, 2) class probabilities, column 1 = MCI

    Returns:
        (video label, fraction of sequences predicted MCI); an even vote goes
        to MCI when the mean MCI probability is at least 0.5

    Raises:
        ValueError: For a video without sequences
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("classify_video needs at least one sequence")
    votes = np.argmax(probs, axis=1)
    n_mci = int(votes.sum())
    n_nc = len(votes) - n_mci
    if n_mci != n_nc:
        label = "MCI" if n_mci > n_nc else "NC"
    else:
        label = "MCI" if probs[:, 1].mean() >= 0.5 else "NC"
    return label, n_mci / len(votes)


def auc(scores, labels, backend: str = "rank") -> Optional[float]:
    """Area under the ROC curve via the rank statistic (average ranks for ties).

    Args:
        scores: Higher means more likely MCI
        labels: 1 = MCI, 0 = NC
        backend: "rank" or "sklearn"

    Returns:
        AUC in [0, 1], or None when only one class is present
    """
    if backend not in ("rank", "sklearn"):
        raise ValueError(f"Invalid backend '{backend}'. Must be 'rank' or 'sklearn'.")
    if backend == "sklearn" and not HAS_SKLEARN:
        raise ValueError("Backend 'sklearn' requires scikit-learn. "
                         "Install with: pip install scikit-learn")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    if backend == "sklearn":
        return float(roc_auc_score(labels, scores))
    values, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    ranks = (starts + (counts + 1) / 2.0)[inverse]
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class Metrics:
    """Video-level accuracy, F1 (positive class MCI) and AUC (None if undefined)."""
    accuracy: float
    f1: float
    auc: Optional[float]
    n: int


def metrics(predictions: Iterable[str], scores: Iterable[float],
            labels: Iterable[str]) -> Metrics:
    """Accuracy, F1 and AUC of video predictions.

    Raises:
        ValueError: For an empty or length-mismatched input
    """
    pred = np.array([label_to_int(p) for p in predictions], dtype=np.int64)
    true = np.array([label_to_int(t) for t in labels], dtype=np.int64)
    score = np.asarray(list(scores), dtype=np.float64)
    if len(pred) == 0:
        raise ValueError("metrics need at least one prediction")
    if not len(pred) == len(true) == len(score):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(score)} scores, "
                         f"{len(true)} labels")
    tp = int(((pred == 1) & (true == 1)).sum())
    fp = int(((pred == 1) & (true == 0)).sum())
    fn = int(((pred == 0) & (true == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(accuracy=float((pred == true).mean()), f1=float(f1), auc=auc(score, true),
                   n=len(pred))


@dataclass
class ExperimentConfig:
    """Everything that defines one cross-validation run.

    ``model.seq_len`` always follows ``packing.l``.
    """
    packing: PackingConfig = field(default_factory=PackingConfig)
    model: TransformerConfig = field(default_factory=TransformerConfig)
    train: TransformerTrainConfig = field(default_factory=TransformerTrainConfig)
    k: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.model.seq_len != self.packing.l:
            self.model = replace(self.model, seq_len=self.packing.l)

    def with_axis(self, axis: str, value) -> "ExperimentConfig":
        """Copy with one ablation axis set to ``value``."""
        if axis == "seqlen":
            return replace(self, packing=replace(self.packing, l=int(value)))
        if axis == "overlap":
            return replace(self, packing=replace(self.packing, overlap_fraction=float(value)))
        if axis == "loss":
            return replace(self, train=replace(self.train, loss=str(value)))
        if axis == "positions":
            return replace(self, model=replace(self.model, positions=str(value)))
        raise ValueError(f"unknown ablation axis '{axis}', expected one of {list(ABLATION_AXES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls(packing=PackingConfig(**data.get("packing", {})),
                   model=TransformerConfig.from_dict(data.get("model", {})),
                   train=TransformerTrainConfig.from_dict(data.get("train", {})),
                   k=data.get("k", 10), seed=data.get("seed", 0))


class SequenceModel(Protocol):
    def predict_proba(self, batch) -> np.ndarray:
        ...


Trainer = Callable[..., SequenceModel]


def default_trainer(batch, model_cfg: TransformerConfig,
                    train_cfg: TransformerTrainConfig) -> SequenceModel:
    return train_transformer(batch, model_cfg, train_cfg, verbose=False).model


@dataclass
class FoldFailure:
    """A fold whose training diverged; it contributes no predictions."""
    theme: str
    fold: int
    message: str


@dataclass
class ThemeResult:
    """Pooled and per-fold metrics of one theme."""
    theme: str
    pooled: Metrics
    folds: list[Optional[Metrics]]


@dataclass
class EvalReport:
    """Cross-validation outcome.

    Attributes:
        config: Experiment configuration as a dict
        seed: Root seed
        dataset_hash: Content hash of the evaluated dataset
        themes: Per-theme results in theme order
        predictions: Every video-level prediction
        excluded: Video ids without any sequence
        failures: Folds aborted by a numerical failure
    """
    config: dict
    seed: int
    dataset_hash: str
    themes: list[ThemeResult] = field(default_factory=list)
    predictions: list[VideoPrediction] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)
    failures: list[FoldFailure] = field(default_factory=list)

    def theme(self, name: str) -> ThemeResult:
        for result in self.themes:
            if result.theme == name:
                return result
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"config": self.config, "config_hash": config_hash(self.config),
                "seed": self.seed, "dataset_hash": self.dataset_hash,
                "themes": [asdict(t) for t in self.themes],
                "predictions": [asdict(p) for p in self.predictions],
                "excluded": list(self.excluded),
                "failures": [asdict(f) for f in self.failures]}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        def _m(d):
            return Metrics(**d) if d is not None else None

        themes = [ThemeResult(theme=t["theme"], pooled=_m(t["pooled"]),
                              folds=[_m(f) for f in t["folds"]]) for t in data.get("themes", [])]
        return cls(config=data["config"], seed=data["seed"], dataset_hash=data["dataset_hash"],
                   themes=themes,
                   predictions=[VideoPrediction(**p) for p in data.get("predictions", [])],
                   excluded=list(data.get("excluded", [])),
                   failures=[FoldFailure(**f) for f in data.get("failures", [])])


def _structures(participants: list[Participant], packing: PackingConfig
                ) -> dict[str, list[VideoStructure]]:
    return {p.id: [structure_video(v.mask, packing, v.video_id) for v in p.videos]
            for p in participants}


def run_cv(dataset: Dataset, config: ExperimentConfig, trainer: Optional[Trainer] = None,
           verbose: bool = True) -> EvalReport:
    """k-fold cross-validation per theme.

    Args:
        dataset: Participants and latents
        config: Packing, model, training and fold settings
        trainer: ``(batch, model_cfg, train_cfg) -> model`` with ``predict_proba``;
            defaults to training the transformer
        verbose: Print per-fold progress

    Returns:
        EvalReport with metrics over predictions pooled across folds
        (a fold whose training diverges is recorded in ``failures`` and skipped)

    Raises:
        DataError: If a theme cannot be split into folds
        NumericError: If training diverges in every fold of a theme
    """
    trainer = trainer or default_trainer
    dim = config.model.hidden_dim
    report = EvalReport(config=config.to_dict(), seed=config.seed,
                        dataset_hash=dataset.content_hash())
    for theme in dataset.themes():
        participants = dataset.for_theme(theme)
        plan = make_folds(participants, config.k, derive_seed(config.seed, "folds", theme))
        check_fold_hygiene(plan, participants)
        by_id = {p.id: p for p in participants}
        structures = _structures(participants, config.packing)
        if verbose:
            print(f"📊 Theme {theme}: {len(participants)} participants, {config.k} folds")
        theme_preds: list[VideoPrediction] = []
        fold_metrics: list[Optional[Metrics]] = []
        diverged = 0
        for fold in range(config.k):
            train_items = [(s, pid, by_id[pid].label) for pid in plan.train_ids(fold)
                           for s in structures[pid]]
            train_batch = build_batch(train_items, dataset.latents.get, config.packing.l, dim)
            train_cfg = replace(config.train,
                                seed=derive_seed(config.seed, "train", theme, fold))
            try:
                model = trainer(train_batch, config.model, train_cfg)
            except NumericError as exc:
                print(f"⚠️  Theme {theme} fold {fold}: training diverged ({exc}); fold skipped")
                report.failures.append(FoldFailure(theme=theme, fold=fold, message=str(exc)))
                fold_metrics.append(None)
                diverged += 1
                continue
            fold_preds = []
            for pid in plan.test_ids(fold):
                for s in structures[pid]:
                    batch = build_batch([(s, pid, by_id[pid].label)], dataset.latents.get,
                                        config.packing.l, dim)
                    if len(batch) == 0:
                        print(f"⚠️  Video {s.video_id} has no sequences of length "
                              f"{config.packing.l}; excluded")
                        report.excluded.append(s.video_id)
                        continue
                    predicted, score = classify_video(model.predict_proba(batch))
                    fold_preds.append(VideoPrediction(
                        video_id=s.video_id, participant_id=pid, label=by_id[pid].label,
                        predicted=predicted, score=score, fold=fold,
                        num_sequences=len(batch)))
            fold_metrics.append(metrics([p.predicted for p in fold_preds],
                                        [p.score for p in fold_preds],
                                        [p.label for p in fold_preds]) if fold_preds else None)
            theme_preds.extend(fold_preds)
            if verbose:
                m = fold_metrics[-1]
                acc = f"{m.accuracy:.3f}" if m else "n/a"
                print(f"   [fold {fold + 1}/{config.k}] {len(train_batch)} train sequences, "
                      f"{len(fold_preds)} test videos, accuracy={acc}")
        if diverged == config.k:
            raise NumericError(f"theme {theme}: training diverged in all {config.k} folds")
        if not theme_preds:
            raise DataError(f"theme {theme}: no video produced a sequence")
        pooled = metrics([p.predicted for p in theme_preds], [p.score for p in theme_preds],
                         [p.label for p in theme_preds])
        report.themes.append(ThemeResult(theme=theme, pooled=pooled, folds=fold_metrics))
        report.predictions.extend(theme_preds)
        if verbose:
            auc_text = f"{pooled.auc:.3f}" if pooled.auc is not None else "n/a"
            print(f"   ✅ {theme}: accuracy={pooled.accuracy:.3f} f1={pooled.f1:.3f} "
                  f"auc={auc_text}")
    return report


@dataclass
class AblationResult:
    """One ablation axis: a report per grid value."""
    axis: str
    values: tuple
    reports: list[EvalReport]


def run_ablations(dataset: Dataset, config: Optional[ExperimentConfig] = None,
                  axes: Iterable[str] = DEFAULT_ABLATIONS, trainer: Optional[Trainer] = None,
                  verbose: bool = True) -> dict[str, AblationResult]:
    """Run ``run_cv`` over each axis's grid with every other setting held at ``config``."""
    config = config or ExperimentConfig()
    results = {}
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis '{axis}', expected one of "
                             f"{list(ABLATION_AXES)}")
        values = ABLATION_AXES[axis]
        if verbose:
            print(f"📊 Ablation over {axis}: {list(values)}")
        reports = [run_cv(dataset, config.with_axis(axis, v), trainer, verbose) for v in values]
        results[axis] = AblationResult(axis=axis, values=values, reports=reports)
    return results
