"""Frame-level ROC AUC / average precision and report assembly."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .feature_store import frame_labels_from_spans
from .temporal import expand_to_frames


class UndefinedMetricError(ValueError):
    pass


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be binary")
    return scores, labels.astype(bool)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(pos > neg) + 0.5 P(pos == neg)."""
    scores, pos = _check(scores, labels)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise AP; ties ordered by index so the ranking is deterministic."""
    scores, pos = _check(scores, labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = pos[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.sum() / n_pos)


@dataclass
class EvalReport:
    frame_auc: float
    frame_map: float
    clip_accuracy: float | None = None
    per_video_auc: dict[str, float] = field(default_factory=dict)
    num_frames: int = 0
    num_positive_frames: int = 0
    split: str = "test"
    checkpoint: str | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["frame_auc", repr(self.frame_auc)])
        w.writerow(["frame_map", repr(self.frame_map)])
        if self.clip_accuracy is not None:
            w.writerow(["clip_accuracy", repr(self.clip_accuracy)])
        w.writerow(["num_frames", self.num_frames])
        w.writerow(["num_positive_frames", self.num_positive_frames])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def frame_scores_and_labels(records, snippet_scores: dict[str, np.ndarray]):
    """Concatenate per-frame scores and labels over ``records`` in order."""
    all_scores, all_labels, per_video = [], [], {}
    for r in records:
        fs = expand_to_frames(snippet_scores[r.video_id], r.snippet_len, r.num_frames)
        fl = frame_labels_from_spans(r)
        all_scores.append(fs)
        all_labels.append(fl)
        if 0 < fl.sum() < fl.size:
            per_video[r.video_id] = roc_auc(fs, fl)
    return np.concatenate(all_scores), np.concatenate(all_labels), per_video


def evaluate_scores(records, snippet_scores: dict[str, np.ndarray], split: str = "test") -> EvalReport:
    scores, labels, per_video = frame_scores_and_labels(records, snippet_scores)
    if labels.sum() == 0:
        raise UndefinedMetricError(f"split {split!r} has no positive frames")
    return EvalReport(
        frame_auc=roc_auc(scores, labels),
        frame_map=average_precision(scores, labels),
        per_video_auc=per_video,
        num_frames=int(labels.size),
        num_positive_frames=int(labels.sum()),
        split=split,
    )


def evaluate_frames(manifest, split: str, scorer) -> EvalReport:
    """Score every video of ``split`` with ``scorer(matrix) -> snippet scores`` and evaluate.

    ``scorer`` may also be a trained model, in which case ``score_video`` is used.
    """
    if not callable(scorer):
        from .mil_trainer import score_video

        model = scorer
        scorer = lambda m: score_video(m, model)  # noqa: E731
    records = manifest.records(split)
    scores = {r.video_id: scorer(manifest.load(r)) for r in records}
    return evaluate_scores(records, scores, split)
