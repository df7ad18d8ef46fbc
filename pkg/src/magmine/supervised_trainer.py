"""Supervised recognition heads trained with plain BCE on explicit samples."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .evaluation import UndefinedMetricError, evaluate_frames
from .mil_trainer import TrainState
from .nn_core import (
    AdamState,
    Model,
    ModelSpec,
    NonFiniteError,
    adam_step,
    backward,
    forward,
    head_forward,
    init_model,
    neck_forward,
    sigmoid,
)
from .temporal import multiset_average, segment_boundaries, snippet_labels

log = logging.getLogger(__name__)

MODES = ("trimmed_gt", "mined_manifest", "whole_video")
SELECTIONS = ("all_snippet_mean", "random_segment", "single_snippet")


@dataclass
class SupConfig:
    mode: str = "trimmed_gt"
    selection: str = "all_snippet_mean"
    use_neck: bool = False
    neck_attention: bool = False
    multiset_sets: int = 1
    num_segments: int = 32
    single_snippet_segments: int = 8
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-5
    weight_decay: float = 5e-4
    dropout: float = 0.7
    hidden: tuple[int, int] = (512, 128)
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.multiset_sets < 1 or self.batch_size < 1:
            raise ValueError("plateau_patience, multiset_sets and batch_size must be >= 1")
        if self.num_segments < 1 or self.single_snippet_segments < 1:
            raise ValueError("segment counts must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "SupConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown SupConfig keys {sorted(unknown)}")
        doc = dict(doc)
        if "hidden" in doc:
            doc["hidden"] = tuple(doc["hidden"])
        return cls(**doc)

    def model_spec(self, dim: int) -> ModelSpec:
        return ModelSpec(dim, tuple(self.hidden), self.use_neck, self.dropout, self.neck_attention)


@dataclass
class SupSample:
    video_id: str
    snippets: np.ndarray
    label: int


def _runs(mask) -> list[tuple[int, int]]:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]]) + 1
    return list(zip(starts.tolist(), ends.tolist()))


def build_supervised_samples(manifest, mode: str, sample_manifest=None, split: str = "train") -> list[SupSample]:
    """Training samples for ``mode``.

    * ``trimmed_gt``: each run of span-covered snippets of an abnormal video is
      a positive; each normal video is one negative.
    * ``whole_video``: every abnormal video is a positive, every normal video a
      negative (video-level labels only).
    * ``mined_manifest``: one single-snippet sample per manifest entry.
    """
    samples = []
    if mode == "mined_manifest":
        if sample_manifest is None:
            raise ValueError("mined_manifest mode needs a SampleManifest")
        for e in sample_manifest.entries:
            samples.append(SupSample(e.video_id, np.array([e.snippet]), e.label))
    elif mode in ("trimmed_gt", "whole_video"):
        for r in manifest.records(split):
            T = manifest.load(r).shape[0]
            if r.label == 0:
                samples.append(SupSample(r.video_id, np.arange(T), 0))
            elif mode == "whole_video":
                samples.append(SupSample(r.video_id, np.arange(T), 1))
            else:
                if not r.spans:
                    raise ValueError(f"{r.video_id}: trimmed_gt needs frame spans on abnormal videos")
                for a, b in _runs(snippet_labels(r, T)):
                    samples.append(SupSample(r.video_id, np.arange(a, b), 1))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    n_pos = sum(s.label for s in samples)
    n_neg = len(samples) - n_pos
    log.info("supervised samples (%s): %d positive, %d negative", mode, n_pos, n_neg)
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"{mode}: need both positive and negative samples, got {n_pos}/{n_neg}")
    return samples


def sample_representation(feats: np.ndarray, cfg: SupConfig, rng) -> np.ndarray:
    """Rows fed to the head for one sample's snippet features ``feats`` (n, D)."""
    if cfg.selection == "all_snippet_mean":
        if cfg.multiset_sets > 1:
            return multiset_average(feats, cfg.multiset_sets, rng)[None]
        return feats.mean(axis=0, keepdims=True)
    if cfg.selection == "random_segment":
        bounds = segment_boundaries(feats.shape[0], cfg.num_segments)
        lo, hi = bounds[int(rng.integers(len(bounds)))]
        seg = feats[lo:hi]
        if cfg.multiset_sets > 1:
            return multiset_average(seg, cfg.multiset_sets, rng)[None]
        return seg.mean(axis=0, keepdims=True)
    bounds = segment_boundaries(feats.shape[0], cfg.single_snippet_segments)
    return np.stack([feats[int(rng.integers(lo, hi))] for lo, hi in bounds])


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the metric has failed to
    improve for more than ``patience`` consecutive epochs (max mode)."""

    def __init__(self, factor: float = 0.1, patience: int = 5, threshold: float = 1e-4):
        self.factor, self.patience, self.threshold = factor, patience, threshold
        self.best = None
        self.bad_epochs = 0

    def step(self, metric: float, opt: AdamState) -> bool:
        if self.best is None or metric > self.best * (1.0 + self.threshold):
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            opt.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False


def _bce_step(model: Model, x, y, dropout_seed):
    cache = forward(model, x, dropout_seed)
    z = cache.logits
    yy = np.broadcast_to(y[:, None], z.shape)
    loss = float(np.mean(np.where(yy == 1, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))))
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite BCE loss {loss}")
    dz = (sigmoid(z) - yy) / z.size
    return loss, backward(model, cache, dz)


def _val_metric(manifest, split, model, clips):
    recs = manifest.records(split)
    if recs:
        try:
            return evaluate_frames(manifest, split, model).frame_auc
        except UndefinedMetricError:
            pass
    if clips:
        return clip_accuracy(model, clips)
    return None


def train_supervised(
    manifest,
    samples: list[SupSample],
    cfg: SupConfig,
    val_split: str = "val",
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainState:
    cfg.validate()
    if not samples:
        raise ValueError("no training samples")
    labels = np.array([s.label for s in samples], dtype=np.float64)
    if labels.min() == labels.max():
        raise ValueError("training samples must contain both classes")
    feats = {}
    for r in manifest.records("train"):
        feats[r.video_id] = manifest.load(r)
    for s in samples:
        if s.video_id not in feats:
            raise ValueError(f"sample references unknown train video {s.video_id}")
    init_ss, order_ss, rep_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    model = init_model(cfg.model_spec(manifest.dim), init_ss)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(order_ss)
    rep_rng = np.random.default_rng(rep_ss)
    drop_rng = np.random.default_rng(drop_ss)
    sched = PlateauScheduler(cfg.plateau_factor, cfg.plateau_patience)
    val_clips = [(manifest.load(r), r.label) for r in manifest.records(val_split)]
    state = TrainState(model, model.copy(), opt, asdict(cfg))

    for epoch in range(1, cfg.epochs + 1):
        reps = [sample_representation(feats[s.video_id][s.snippets], cfg, rep_rng) for s in samples]
        order = order_rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = np.stack([reps[i] for i in idx])
            seed = int(drop_rng.integers(2**63))
            loss, grads = _bce_step(model, x, labels[idx], seed)
            adam_step(opt, model.params, grads)
            losses.append(loss)
            state.step_losses.append({"bce": loss, "total": loss})
        metric = _val_metric(manifest, val_split, model, val_clips)
        record = {"epoch": epoch, "step": opt.step, "lr": opt.lr, "loss_bce": float(np.mean(losses)),
                  "val_metric": metric}
        if metric is not None:
            sched.step(metric, opt)
        improved = metric is not None and (state.best_val_auc is None or metric > state.best_val_auc)
        if improved or (metric is None and state.best_val_auc is None):
            state.best_model = model.copy()
            state.best_epoch = epoch
            state.best_val_auc = metric
        state.epoch = epoch
        state.epoch_records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return state


def clip_score(model: Model, matrix, multiset_sets: int = 1, rng=None) -> float:
    feats = np.asarray(matrix, dtype=np.float64)
    if multiset_sets > 1:
        rep = multiset_average(feats, multiset_sets, rng)
    else:
        rep = feats.mean(axis=0)
    return float(head_forward(model, neck_forward(model, rep[None]))[0])


def clip_accuracy(model: Model, clips, multiset_sets: int = 1, seed=0) -> float:
    """Fraction of clips whose score on the (multi-set) mean feature lands on the right side of 0.5."""
    if not clips:
        raise ValueError("no clips to evaluate")
    rng = np.random.default_rng(seed)
    correct = 0
    for matrix, label in clips:
        pred = int(clip_score(model, matrix, multiset_sets, rng) > 0.5)
        correct += int(pred == label)
    return correct / len(clips)

