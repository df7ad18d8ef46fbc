"""Weakly supervised MIL training with the top-k feature-magnitude margin loss."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .evaluation import UndefinedMetricError, evaluate_frames
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
    l2_magnitudes,
    neck_forward,
    sigmoid,
)
from .temporal import aggregate_segments

log = logging.getLogger(__name__)


@dataclass
class MilConfig:
    k: int = 3
    margin: float = 100.0
    lambda_smooth: float = 8e-5
    lambda_sparse: float = 8e-5
    magnitude_weight: float = 1.0
    num_segments: int = 32
    batch_pairs: int = 16
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 5e-4
    dropout: float = 0.7
    use_neck: bool = True
    neck_attention: bool = False
    hidden: tuple[int, int] = (512, 128)
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.k <= self.num_segments:
            raise ValueError(f"need 1 <= k <= num_segments, got k={self.k}, S={self.num_segments}")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.lambda_smooth < 0 or self.lambda_sparse < 0 or self.magnitude_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_pairs < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_pairs >= 1, epochs >= 0 and lr > 0 required")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "MilConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown MilConfig keys {sorted(unknown)}")
        doc = dict(doc)
        if "hidden" in doc:
            doc["hidden"] = tuple(doc["hidden"])
        return cls(**doc)

    def model_spec(self, dim: int) -> ModelSpec:
        return ModelSpec(dim, tuple(self.hidden), self.use_neck, self.dropout, self.neck_attention)


def topk_select(magnitudes, k: int) -> tuple[np.ndarray, float]:
    """Indices of the k largest values (ties go to the lower index) and their mean."""
    mags = np.asarray(magnitudes, dtype=np.float64)
    if not 1 <= k <= mags.size:
        raise ValueError(f"k={k} out of range for {mags.size} values")
    idx = np.argsort(-mags, kind="stable")[:k]
    return idx, float(mags[idx].mean())


def magnitude_loss(mag_abnormal: float, mag_normal: float, y_i: int, y_j: int, m: float) -> float:
    if (y_i, y_j) != (1, 0):
        return 0.0
    return max(0.0, m - (mag_abnormal - mag_normal))


def smoothness_loss(scores) -> float:
    s = np.asarray(scores, dtype=np.float64)
    return float(np.sum(np.diff(s) ** 2))


def sparsity_loss(scores) -> float:
    return float(np.mean(np.asarray(scores, dtype=np.float64)))


def _softplus(x):
    return np.logaddexp(0.0, x)


def batch_loss_and_grad(
    model: Model,
    abnormal,
    normal,
    cfg: MilConfig,
    dropout_seed=None,
    bce_weight: float = 1.0,
    mag_weight: float | None = None,
    need_grad: bool = True,
):
    """Four-term MIL objective on B abnormal and B normal segment stacks.

    ``abnormal`` and ``normal`` are (B, S, D) arrays; row i of one pairs with
    row i of the other for the magnitude margin. Returns ``(total, terms,
    grads)``; ``grads`` is None when ``need_grad`` is false.
    """
    if mag_weight is None:
        mag_weight = cfg.magnitude_weight
    abn = np.asarray(abnormal, dtype=np.float64)
    nrm = np.asarray(normal, dtype=np.float64)
    if abn.shape != nrm.shape:
        raise ValueError(f"abnormal {abn.shape} and normal {nrm.shape} batches differ")
    B, S, D = abn.shape
    k = cfg.k
    cache = forward(model, np.concatenate([abn, nrm]), dropout_seed)
    z = cache.logits
    s = sigmoid(z)
    mags = l2_magnitudes(cache.out)
    sel = np.argsort(-mags, axis=1, kind="stable")[:, :k]
    rows = np.arange(2 * B)[:, None]
    y = np.concatenate([np.ones(B), np.zeros(B)])[:, None]

    zs = z[rows, sel]
    bce = float(np.mean(np.where(y == 1, _softplus(-zs), _softplus(zs))))

    mean_mag = mags[rows, sel].mean(axis=1)
    gap = cfg.margin - (mean_mag[:B] - mean_mag[B:])
    mag = float(np.mean(np.maximum(gap, 0.0)))

    sa = s[:B]
    smooth = float(np.mean(np.sum(np.diff(sa, axis=1) ** 2, axis=1)))
    sparse = float(np.mean(sa))

    total = bce_weight * bce + mag_weight * mag + cfg.lambda_smooth * smooth + cfg.lambda_sparse * sparse
    terms = {"bce": bce, "magnitude": mag, "smooth": smooth, "sparse": sparse, "total": total}
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite MIL loss: {terms}")
    if not need_grad:
        return total, terms, None

    dz = np.zeros_like(z)
    dz[rows, sel] += bce_weight * (s[rows, sel] - y) / (2 * B * k)

    ds = np.zeros_like(sa)
    diff = np.diff(sa, axis=1)
    ds[:, 1:] += 2.0 * diff
    ds[:, :-1] -= 2.0 * diff
    ds *= cfg.lambda_smooth / B
    ds += cfg.lambda_sparse / (B * S)
    dz[:B] += ds * sa * (1.0 - sa)

    d_out = np.zeros_like(cache.out)
    active = (gap > 0).astype(np.float64) * mag_weight / B
    d_mean = np.concatenate([-active, active])
    sel_out = cache.out[rows, sel]
    sel_mag = mags[rows, sel]
    unit = np.divide(sel_out, sel_mag[..., None], out=np.zeros_like(sel_out), where=sel_mag[..., None] > 0)
    d_out[rows, sel] += (d_mean[:, None, None] / k) * unit

    grads = backward(model, cache, dz, d_out)
    return total, terms, grads


def batch_loss(abnormal, normal, model: Model, cfg: MilConfig, **kw):
    total, terms, _ = batch_loss_and_grad(model, abnormal, normal, cfg, need_grad=False, **kw)
    return total, terms


def score_video(matrix, model: Model) -> np.ndarray:
    """Per-snippet anomaly scores for a whole video (neck over all T snippets, no dropout)."""
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.dim:
        raise ValueError(f"feature shape {x.shape} incompatible with model dim {model.spec.dim}")
    return head_forward(model, neck_forward(model, x))


@dataclass
class TrainState:
    model: Model
    best_model: Model
    optimizer: AdamState
    config: dict
    epoch: int = 0
    best_epoch: int = 0
    best_val_auc: float | None = None
    step_losses: list[dict] = field(default_factory=list)
    epoch_records: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


class _BatchStream:
    """Endless shuffled stream of indices, reshuffled each time it is exhausted."""

    def __init__(self, n: int, rng):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, count: int) -> list[int]:
        out = []
        while len(out) < count:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(count - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + take].tolist())
            self.pos += take
        return out


def _validation_auc(manifest, split, model):
    if not manifest.records(split):
        return None
    try:
        return evaluate_frames(manifest, split, model).frame_auc
    except UndefinedMetricError:
        return None


def train_mil(
    manifest,
    cfg: MilConfig,
    val_split: str = "val",
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainState:
    """Adam on the MIL objective with independently shuffled abnormal/normal streams.

    An epoch lasts until the longer stream has been consumed once. The model
    with the best validation frame AUC is kept as ``best_model`` (the last
    model when no usable validation split exists).
    """
    cfg.validate()
    train = manifest.records("train")
    abn = [r for r in train if r.label == 1]
    nrm = [r for r in train if r.label == 0]
    if not abn or not nrm:
        raise ValueError("train split needs abnormal and normal videos")
    state_warnings = []
    B = min(cfg.batch_pairs, len(abn), len(nrm))
    if B < cfg.batch_pairs:
        msg = f"batch_pairs reduced from {cfg.batch_pairs} to {B} (abnormal={len(abn)}, normal={len(nrm)})"
        log.warning(msg)
        state_warnings.append(msg)

    def segs(recs):
        return np.stack([aggregate_segments(manifest.load(r), cfg.num_segments).features for r in recs])

    abn_x, nrm_x = segs(abn), segs(nrm)
    init_ss, abn_ss, nrm_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    model = init_model(cfg.model_spec(manifest.dim), init_ss)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    abn_stream = _BatchStream(len(abn), np.random.default_rng(abn_ss))
    nrm_stream = _BatchStream(len(nrm), np.random.default_rng(nrm_ss))
    drop_rng = np.random.default_rng(drop_ss)
    steps = math.ceil(max(len(abn), len(nrm)) / B)

    state = TrainState(model, model.copy(), opt, asdict(cfg), warnings=state_warnings)
    for epoch in range(1, cfg.epochs + 1):
        sums = {}
        for _ in range(steps):
            ia, inn = abn_stream.take(B), nrm_stream.take(B)
            seed = int(drop_rng.integers(2**63))
            try:
                _, terms, grads = batch_loss_and_grad(model, abn_x[ia], nrm_x[inn], cfg, dropout_seed=seed)
                adam_step(opt, model.params, grads)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, step {opt.step + 1}: {exc}") from exc
            state.step_losses.append(terms)
            for key, val in terms.items():
                sums[key] = sums.get(key, 0.0) + val
        val_auc = _validation_auc(manifest, val_split, model)
        record = {"epoch": epoch, "step": opt.step, **{f"loss_{k}": v / steps for k, v in sums.items()},
                  "val_frame_auc": val_auc}
        state.epoch = epoch
        state.epoch_records.append(record)
        improved = val_auc is not None and (state.best_val_auc is None or val_auc > state.best_val_auc)
        if improved or (val_auc is None and state.best_val_auc is None):
            state.best_model = model.copy()
            state.best_epoch = epoch
            state.best_val_auc = val_auc
        if on_epoch is not None:
            on_epoch(record)
    return state
