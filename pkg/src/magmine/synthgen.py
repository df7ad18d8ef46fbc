"""Synthetic Gaussian-mixture feature corpora with exact per-frame ground truth.

Normal snippets come from N(0, sigma^2 I); abnormal-span snippets from
N(delta * u, sigma^2 I) for a seed-derived unit vector u; distractor runs in
normal videos sit at the mid-point (delta / 2) * u. Spans and distractor runs
are contiguous and snippet-aligned.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .feature_store import (
    AnnotationSpan,
    DatasetManifest,
    FeatureMatrix,
    VideoRecord,
    save_manifest,
    write_features,
)

TRUTH_FILE = "synth_truth.json"


@dataclass
class SynthConfig:
    num_abnormal: int = 40
    num_normal: int = 160
    num_val_abnormal: int = 10
    num_val_normal: int = 40
    num_test_abnormal: int = 20
    num_test_normal: int = 80
    dim: int = 32
    snippets_min: int = 64
    snippets_max: int = 256
    snippet_len: int = 16
    abnormal_fraction: float = 0.2
    separation: float = 2.0
    noise_sigma: float = 1.0
    distractor_rate: float = 0.05
    max_runs: int = 3
    seed: int = 0

    def validate(self) -> None:
        counts = (self.num_abnormal, self.num_normal, self.num_val_abnormal, self.num_val_normal,
                  self.num_test_abnormal, self.num_test_normal)
        if self.num_abnormal < 1 or self.num_normal < 1 or min(counts) < 0:
            raise ValueError("need num_abnormal >= 1 and num_normal >= 1 (and non-negative split counts)")
        if self.dim < 1 or self.snippet_len < 1 or self.max_runs < 1:
            raise ValueError("dim, snippet_len and max_runs must be >= 1")
        if not 1 <= self.snippets_min <= self.snippets_max:
            raise ValueError("need 1 <= snippets_min <= snippets_max")
        if not 0.0 < self.abnormal_fraction < 1.0:
            raise ValueError("abnormal_fraction must lie in (0, 1)")
        if self.abnormal_fraction * self.snippets_min < 1.0:
            raise ValueError("abnormal_fraction * snippets_min < 1: abnormal spans would be empty")
        if self.separation < 0 or self.noise_sigma <= 0:
            raise ValueError("separation must be >= 0 and noise_sigma > 0")
        if not 0.0 <= self.distractor_rate < 1.0:
            raise ValueError("distractor_rate must lie in [0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig keys {sorted(unknown)}")
        return cls(**doc)


def bayes_snippet_auc(separation: float, noise_sigma: float) -> float:
    """ROC AUC of the optimal single-snippet scorer for abnormal vs. pure-normal snippets.

    Both classes are isotropic Gaussians, so the projection onto the mean
    difference is sufficient and AUC = Phi(delta / (sigma * sqrt(2))).
    """
    return float(norm.cdf(separation / (noise_sigma * math.sqrt(2.0))))


def video_seed(seed: int, video_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{video_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def abnormal_direction(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng(video_seed(cfg.seed, "__direction__"))
    u = rng.standard_normal(cfg.dim)
    return u / np.linalg.norm(u)


def place_runs(rng, T: int, total: int, n_runs: int) -> list[tuple[int, int]]:
    """``n_runs`` disjoint, non-adjacent snippet runs covering ``total`` snippets of ``T``."""
    n_runs = max(1, min(n_runs, total, T - total + 1))
    cuts = np.sort(rng.choice(np.arange(1, total), size=n_runs - 1, replace=False)) if n_runs > 1 else []
    lengths = np.diff(np.concatenate([[0], cuts, [total]])).astype(int)
    free = T - total - (n_runs - 1)
    # distribute spare snippets over n_runs + 1 gaps
    gaps = rng.multinomial(free, np.full(n_runs + 1, 1.0 / (n_runs + 1)))
    runs, pos = [], int(gaps[0])
    for i, length in enumerate(lengths):
        runs.append((pos, pos + int(length)))
        pos += int(length) + 1 + int(gaps[i + 1])
    return runs


def generate_video(cfg: SynthConfig, video_id: str, label: int, direction: np.ndarray):
    """Features, frame spans, and snippet-level truth for one video."""
    rng = np.random.default_rng(video_seed(cfg.seed, video_id))
    T = int(rng.integers(cfg.snippets_min, cfg.snippets_max + 1))
    L = cfg.snippet_len
    num_frames = T * L + int(rng.integers(0, L))
    kind = np.zeros(T, dtype=np.int8)  # 0 normal, 1 abnormal, 2 distractor
    runs: list[tuple[int, int]] = []
    if label == 1:
        total = max(1, int(round(cfg.abnormal_fraction * T)))
        runs = place_runs(rng, T, total, int(rng.integers(1, cfg.max_runs + 1)))
        for a, b in runs:
            kind[a:b] = 1
    else:
        total = int(round(cfg.distractor_rate * T))
        if total > 0:
            for a, b in place_runs(rng, T, total, int(rng.integers(1, cfg.max_runs + 1))):
                kind[a:b] = 2
    means = np.zeros((T, cfg.dim))
    means[kind == 1] = cfg.separation * direction
    means[kind == 2] = 0.5 * cfg.separation * direction
    data = means + cfg.noise_sigma * rng.standard_normal((T, cfg.dim))
    spans = [AnnotationSpan(a * L, num_frames if b == T else b * L) for a, b in runs]
    return data, num_frames, spans, kind


def generate_corpus(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write FVEC files, ``manifest.json`` and ``synth_truth.json`` into ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    direction = abnormal_direction(cfg)
    plan = {
        "train": (cfg.num_abnormal, cfg.num_normal),
        "val": (cfg.num_val_abnormal, cfg.num_val_normal),
        "test": (cfg.num_test_abnormal, cfg.num_test_normal),
    }
    splits, truth = {}, {}
    for split, (n_abn, n_nrm) in plan.items():
        recs = []
        for label, count, tag in ((1, n_abn, "abn"), (0, n_nrm, "nrm")):
            for i in range(count):
                vid = f"{split}_{tag}_{i:04d}"
                data, num_frames, spans, kind = generate_video(cfg, vid, label, direction)
                rel = f"features/{vid}.fvec"
                write_features(FeatureMatrix(vid, data), out / rel)
                recs.append(VideoRecord(vid, label, num_frames, rel, spans, cfg.snippet_len))
                truth[vid] = {
                    "abnormal": np.flatnonzero(kind == 1).tolist(),
                    "distractor": np.flatnonzero(kind == 2).tolist(),
                }
        if recs:
            splits[split] = recs
    manifest = DatasetManifest(f"synth-{cfg.seed}", cfg.dim, cfg.snippet_len, splits, out)
    save_manifest(manifest, out / "manifest.json")
    with open(out / TRUTH_FILE, "w") as fh:
        json.dump({"config": asdict(cfg), "direction": direction.tolist(), "videos": truth}, fh, sort_keys=True)
    return manifest


def load_truth(corpus_dir) -> dict:
    with open(Path(corpus_dir) / TRUTH_FILE) as fh:
        return json.load(fh)
