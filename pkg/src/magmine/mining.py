"""Turn a trained anomaly detector into supervised training data.

Reliable positives are abnormal-video snippets scored above a high threshold;
hard negatives are normal-video snippets scored above a mid threshold. The two
sets are balanced, then used to train a recognition head, optionally
regenerating features from that head for another round.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .evaluation import EvalReport, evaluate_frames
from .feature_store import DatasetManifest, FeatureMatrix, VideoRecord, save_manifest, write_features
from .mil_trainer import MilConfig, TrainState, score_video, train_mil
from .nn_core import Model, penultimate, save_checkpoint
from .supervised_trainer import SupConfig, build_supervised_samples, train_supervised

log = logging.getLogger(__name__)


@dataclass
class MiningConfig:
    pos_threshold: float = 0.995
    neg_threshold: float = 0.5
    balance_ratio: float = 1.0
    threshold_step: float = 0.005
    threshold_floor: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.neg_threshold < self.pos_threshold < 1.0:
            raise ValueError("need 0 < neg_threshold < pos_threshold < 1")
        if self.balance_ratio <= 0:
            raise ValueError("balance_ratio must be > 0")
        if self.threshold_step <= 0 or not 0.0 < self.threshold_floor <= self.pos_threshold:
            raise ValueError("need threshold_step > 0 and 0 < threshold_floor <= pos_threshold")

    @classmethod
    def from_dict(cls, doc: dict) -> "MiningConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown MiningConfig keys {sorted(unknown)}")
        return cls(**doc)


@dataclass
class SampleEntry:
    video_id: str
    snippet: int
    label: int
    score: float
    hard: bool = True

    def sort_key(self):
        return (-self.score, self.video_id, self.snippet)


@dataclass
class SampleManifest:
    entries: list[SampleEntry]
    provenance: dict = field(default_factory=dict)

    @property
    def positives(self) -> list[SampleEntry]:
        return [e for e in self.entries if e.label == 1]

    @property
    def negatives(self) -> list[SampleEntry]:
        return [e for e in self.entries if e.label == 0]

    def to_json(self) -> dict:
        return {"provenance": self.provenance, "entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_json(cls, doc: dict) -> "SampleManifest":
        entries = [SampleEntry(e["video_id"], int(e["snippet"]), int(e["label"]), float(e["score"]),
                               bool(e.get("hard", True))) for e in doc["entries"]]
        return cls(entries, doc.get("provenance", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SampleManifest":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def score_split(manifest, model: Model, split: str = "train", label: int | None = None) -> dict[str, np.ndarray]:
    """Snippet scores of every video in ``split`` (optionally one label only), keyed by video id."""
    return {
        r.video_id: score_video(manifest.load(r), model)
        for r in manifest.records(split)
        if label is None or r.label == label
    }


def _threshold_entries(scores: dict[str, np.ndarray], threshold: float, label: int) -> list[SampleEntry]:
    out = []
    for vid in sorted(scores):
        for j in np.flatnonzero(scores[vid] > threshold):
            out.append(SampleEntry(vid, int(j), label, float(scores[vid][j]), True))
    return out


def mine_positives(manifest, model: Model, cfg: MiningConfig, threshold: float | None = None,
                   scores: dict | None = None) -> list[SampleEntry]:
    """Abnormal training snippets scored strictly above the positive threshold."""
    if scores is None:
        scores = score_split(manifest, model, "train", label=1)
    thr = cfg.pos_threshold if threshold is None else threshold
    return _threshold_entries(scores, thr, 1)


def mine_positives_with_fallback(manifest, model: Model, cfg: MiningConfig, scores: dict | None = None):
    """Mine positives, lowering the threshold in ``threshold_step`` decrements
    (down to ``threshold_floor``) while fewer than max(10, #abnormal videos)
    are found. Returns ``(entries, threshold_used, warnings)``."""
    if scores is None:
        scores = score_split(manifest, model, "train", label=1)
    target = max(10, len(scores))
    thr = cfg.pos_threshold
    warnings = []
    pos = mine_positives(manifest, model, cfg, thr, scores)
    while len(pos) < target and thr - cfg.threshold_step >= cfg.threshold_floor - 1e-12:
        thr = round(thr - cfg.threshold_step, 10)
        pos = mine_positives(manifest, model, cfg, thr, scores)
    if thr != cfg.pos_threshold:
        warnings.append(f"positive threshold lowered from {cfg.pos_threshold} to {thr}; {len(pos)} positives")
    if not pos:
        warnings.append("no positives mined even at the threshold floor")
    for w in warnings:
        log.warning(w)
    return pos, thr, warnings


def _fill(pool: list[SampleEntry], exclude: set, count: int, rng) -> list[SampleEntry]:
    cand = [e for e in pool if (e.video_id, e.snippet) not in exclude]
    if count <= 0 or not cand:
        return []
    pick = np.sort(rng.choice(len(cand), size=min(count, len(cand)), replace=False))
    return [SampleEntry(cand[i].video_id, cand[i].snippet, 0, cand[i].score, False) for i in pick]


def normal_pool(scores: dict[str, np.ndarray]) -> list[SampleEntry]:
    return [SampleEntry(vid, j, 0, float(scores[vid][j]), False) for vid in sorted(scores) for j in range(scores[vid].size)]


def mine_hard_negatives(manifest, model: Model, cfg: MiningConfig, target: int | None = None,
                        scores: dict | None = None) -> list[SampleEntry]:
    """Normal training snippets scored above ``neg_threshold``.

    When ``target`` is given and too few hard negatives exist, the shortfall
    is filled with uniformly sampled other normal snippets marked ``hard=False``.
    """
    if scores is None:
        scores = score_split(manifest, model, "train", label=0)
    hard = _threshold_entries(scores, cfg.neg_threshold, 0)
    if target is not None and len(hard) < target:
        rng = np.random.default_rng(cfg.seed)
        taken = {(e.video_id, e.snippet) for e in hard}
        hard += _fill(normal_pool(scores), taken, target - len(hard), rng)
    return hard


def balance(pos: list[SampleEntry], neg: list[SampleEntry], cfg: MiningConfig,
            fill_pool: list[SampleEntry] | None = None, provenance: dict | None = None) -> SampleManifest:
    """Trim or fill negatives to ceil(|pos| * balance_ratio).

    Trimming keeps the highest scores (ties: video id, then snippet index),
    which is the same as raising the negative threshold to that quantile.
    """
    if not pos:
        raise ValueError("balance needs at least one positive")
    target = math.ceil(len(pos) * cfg.balance_ratio)
    hard = sorted((e for e in neg if e.hard), key=SampleEntry.sort_key)
    soft = [e for e in neg if not e.hard]
    eff_neg_threshold = cfg.neg_threshold
    if len(hard) >= target:
        kept = hard[:target]
        if len(hard) > target:
            eff_neg_threshold = kept[-1].score
    else:
        kept = hard + soft[: target - len(hard)]
        if len(kept) < target and fill_pool:
            rng = np.random.default_rng(cfg.seed)
            taken = {(e.video_id, e.snippet) for e in kept}
            kept += _fill(fill_pool, taken, target - len(kept), rng)
    prov = dict(provenance or {})
    prov.update({
        "pos_threshold": cfg.pos_threshold if "pos_threshold" not in prov else prov["pos_threshold"],
        "neg_threshold": cfg.neg_threshold,
        "effective_neg_threshold": eff_neg_threshold,
        "balance_ratio": cfg.balance_ratio,
        "num_positive": len(pos),
        "num_negative": len(kept),
        "num_hard_negative": sum(e.hard for e in kept),
    })
    pos_sorted = sorted(pos, key=lambda e: (e.video_id, e.snippet))
    neg_sorted = sorted(kept, key=lambda e: (e.video_id, e.snippet))
    return SampleManifest(pos_sorted + neg_sorted, prov)


def mine(manifest, model: Model, cfg: MiningConfig, provenance: dict | None = None):
    """Full mining pass: positives with threshold fallback, hard negatives, balancing.

    Returns ``(sample_manifest or None, warnings)``; None when no positives survive.
    """
    cfg.validate()
    abn_scores = score_split(manifest, model, "train", label=1)
    nrm_scores = score_split(manifest, model, "train", label=0)
    pos, thr, warnings = mine_positives_with_fallback(manifest, model, cfg, abn_scores)
    if not pos:
        return None, warnings
    target = math.ceil(len(pos) * cfg.balance_ratio)
    neg = mine_hard_negatives(manifest, model, cfg, target, nrm_scores)
    prov = {**(provenance or {}), "pos_threshold": thr, "requested_pos_threshold": cfg.pos_threshold}
    return balance(pos, neg, cfg, normal_pool(nrm_scores), prov), warnings


@dataclass
class IterationResult:
    iter_index: int
    ad_state: TrainState
    sample_manifest: SampleManifest | None
    ar_state: TrainState | None
    reports: dict[str, EvalReport]
    warnings: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"iter": self.iter_index, "warnings": list(self.warnings)}
        for name, rep in self.reports.items():
            out[f"{name}_frame_auc"] = rep.frame_auc
            out[f"{name}_frame_map"] = rep.frame_map
        if self.sample_manifest is not None:
            p = self.sample_manifest.provenance
            out.update({k: p[k] for k in ("num_positive", "num_negative", "num_hard_negative", "pos_threshold")})
        return out


def run_iteration(
    manifest,
    mil_cfg: MilConfig,
    sup_cfg: SupConfig,
    mining_cfg: MiningConfig,
    iter_index: int = 1,
    out_dir=None,
    split: str = "test",
) -> IterationResult:
    """Train AD, mine samples, train AR on them, and evaluate both on ``split``."""
    ad = train_mil(manifest, mil_cfg)
    reports = {"ad": evaluate_frames(manifest, split, ad.best_model)}
    prov = {"iter": iter_index, "ad_seed": mil_cfg.seed, "ad_best_epoch": ad.best_epoch}
    samples, warnings = mine(manifest, ad.best_model, mining_cfg, prov)
    result = IterationResult(iter_index, ad, samples, None, reports, list(warnings))
    if samples is None:
        result.warnings.append("AR stage skipped: no positives")
    else:
        sup = SupConfig.from_dict({**asdict(sup_cfg), "mode": "mined_manifest"})
        ar = train_supervised(manifest, build_supervised_samples(manifest, "mined_manifest", samples), sup)
        result.ar_state = ar
        reports["ar"] = evaluate_frames(manifest, split, ar.best_model)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ad.best_model, out / f"iter{iter_index}_ad", {"iter": iter_index, "best_epoch": ad.best_epoch})
        if samples is not None:
            samples.save(out / f"iter{iter_index}_samples.json")
        if result.ar_state is not None:
            save_checkpoint(result.ar_state.best_model, out / f"iter{iter_index}_ar", {"iter": iter_index})
        for name, rep in reports.items():
            rep.write(out / f"iter{iter_index}_{name}_report.json")
    return result


def regenerate_features(manifest, ar_model: Model, out_dir) -> DatasetManifest:
    """Re-embed every snippet with the AR head's penultimate activations."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    splits = {}
    dim = None
    for split, recs in manifest.splits.items():
        new = []
        for r in recs:
            feats = penultimate(ar_model, manifest.load(r))
            dim = feats.shape[1]
            rel = f"features/{r.video_id}.fvec"
            write_features(FeatureMatrix(r.video_id, feats), out / rel)
            new.append(VideoRecord(r.video_id, r.label, r.num_frames, rel, list(r.spans), r.snippet_len))
        splits[split] = new
    regenerated = DatasetManifest(f"{manifest.name}-regen", dim, manifest.snippet_len, splits, out)
    save_manifest(regenerated, out / "manifest.json")
    return regenerated
