"""Scoring model with hand-written gradients.

The model is an optional temporal neck (a width-3 temporal convolution,
optionally followed by a single-scale non-local block, both residual) and a
D -> 512 -> 128 -> 1 MLP head. Everything runs in float64 on batches shaped
``(videos, positions, dim)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .feature_store import HEADER, MAGIC, VERSION

NECK_PARAMS = ("neck.conv_w", "neck.conv_b", "neck.theta", "neck.phi", "neck.g", "neck.w_out", "neck.b_out")
HEAD_PARAMS = ("head.w1", "head.b1", "head.w2", "head.b2", "head.w3", "head.b3")

_SCORE_HI = 1.0 - 2.0**-53
_SCORE_LO = 2.0**-1074


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class ModelSpec:
    dim: int
    hidden: tuple[int, int] = (512, 128)
    use_neck: bool = True
    dropout: float = 0.7
    attention: bool = True

    @property
    def proj_dim(self) -> int:
        return max(1, self.dim // 4)

    def to_json(self) -> dict:
        return {"dim": self.dim, "hidden": list(self.hidden), "use_neck": self.use_neck, "dropout": self.dropout,
                "attention": self.attention}

    @classmethod
    def from_json(cls, doc: dict) -> "ModelSpec":
        return cls(doc["dim"], tuple(doc["hidden"]), doc["use_neck"], doc["dropout"], doc.get("attention", True))


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})

    def param_names(self) -> tuple[str, ...]:
        return tuple(self.params)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def _fan_in_uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(spec: ModelSpec, seed) -> Model:
    """Fresh model: fan-in uniform projections, zero conv kernel and neck output map."""
    rng = np.random.default_rng(seed)
    D, Dp = spec.dim, spec.proj_dim
    h1, h2 = spec.hidden
    p = {}
    if spec.use_neck:
        p["neck.conv_w"] = np.zeros((3, D, D))
        p["neck.conv_b"] = np.zeros(D)
    if spec.use_neck and spec.attention:
        p["neck.theta"] = _fan_in_uniform(rng, D, (D, Dp))
        p["neck.phi"] = _fan_in_uniform(rng, D, (D, Dp))
        p["neck.g"] = _fan_in_uniform(rng, D, (D, Dp))
        p["neck.w_out"] = np.zeros((Dp, D))
        p["neck.b_out"] = np.zeros(D)
    p["head.w1"] = _fan_in_uniform(rng, D, (D, h1))
    p["head.b1"] = np.zeros(h1)
    p["head.w2"] = _fan_in_uniform(rng, h1, (h1, h2))
    p["head.b2"] = np.zeros(h2)
    p["head.w3"] = _fan_in_uniform(rng, h2, (h2, 1))
    p["head.b3"] = np.zeros(1)
    return Model(spec, p)


def zero_model(spec: ModelSpec) -> Model:
    m = init_model(spec, 0)
    for v in m.params.values():
        v[...] = 0.0
    return m


def sigmoid(z):
    return np.clip(0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64))), _SCORE_LO, _SCORE_HI)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (N, D) or (V, N, D) features, got shape {x.shape}")
    return x, False


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _neck(params, x):
    V, N, D = x.shape
    pad = np.zeros((V, N + 2, D))
    pad[:, 1:-1] = x
    w = params["neck.conv_w"]
    conv = pad[:, :-2] @ w[0] + pad[:, 1:-1] @ w[1] + pad[:, 2:] @ w[2] + params["neck.conv_b"]
    X = x + conv
    if "neck.theta" not in params:
        return X, {"pad": pad, "X": X}
    Q = X @ params["neck.theta"]
    K = X @ params["neck.phi"]
    G = X @ params["neck.g"]
    scale = 1.0 / math.sqrt(Q.shape[-1])
    A = _softmax(Q @ K.transpose(0, 2, 1) * scale)
    Z = A @ G
    out = X + Z @ params["neck.w_out"] + params["neck.b_out"]
    cache = {"pad": pad, "X": X, "Q": Q, "K": K, "G": G, "A": A, "Z": Z, "scale": scale}
    return out, cache


def attention_weights(model: Model, features) -> np.ndarray:
    if not (model.spec.use_neck and model.spec.attention):
        raise ValueError("model has no attention block")
    x, single = _as_batch(features)
    _, cache = _neck(model.params, x)
    return cache["A"][0] if single else cache["A"]


def neck_forward(model: Model, features) -> np.ndarray:
    """Neck output, same shape as ``features``; identity when the model has no neck."""
    x, single = _as_batch(features)
    if not model.spec.use_neck:
        out = x.copy()
    else:
        out, _ = _neck(model.params, x)
    return out[0] if single else out


def _dropout_masks(spec: ModelSpec, rows: int, seed):
    if seed is None or spec.dropout <= 0.0:
        return None
    rng = np.random.default_rng(seed)
    keep = 1.0 - spec.dropout
    h1, h2 = spec.hidden
    m1 = (rng.random((rows, h1)) < keep) / keep
    m2 = (rng.random((rows, h2)) < keep) / keep
    return m1, m2


def _head(params, h0, masks):
    a1 = h0 @ params["head.w1"] + params["head.b1"]
    r1 = np.maximum(a1, 0.0)
    h1 = r1 * masks[0] if masks is not None else r1
    a2 = h1 @ params["head.w2"] + params["head.b2"]
    r2 = np.maximum(a2, 0.0)
    h2 = r2 * masks[1] if masks is not None else r2
    z = (h2 @ params["head.w3"] + params["head.b3"])[:, 0]
    return z, {"h0": h0, "a1": a1, "h1": h1, "a2": a2, "h2": h2, "masks": masks}


def head_logits(model: Model, features, train_mode: bool = False, seed=None) -> np.ndarray:
    x, single = _as_batch(features)
    V, N, D = x.shape
    masks = _dropout_masks(model.spec, V * N, seed) if train_mode else None
    z, _ = _head(model.params, x.reshape(V * N, D), masks)
    z = z.reshape(V, N)
    return z[0] if single else z


def head_forward(model: Model, features, train_mode: bool = False, seed=None) -> np.ndarray:
    """Per-row scores in (0, 1). Dropout masks are drawn from ``seed`` in train mode only."""
    return sigmoid(head_logits(model, features, train_mode, seed))


def penultimate(model: Model, features) -> np.ndarray:
    """128-d activations feeding the last head layer (eval mode, neck applied)."""
    out = neck_forward(model, features)
    x, single = _as_batch(out)
    V, N, D = x.shape
    _, cache = _head(model.params, x.reshape(V * N, D), None)
    h2 = cache["h2"].reshape(V, N, -1)
    return h2[0] if single else h2


def l2_magnitudes(features) -> np.ndarray:
    return np.sqrt(np.sum(np.square(np.asarray(features, dtype=np.float64)), axis=-1))


@dataclass
class ForwardCache:
    x: np.ndarray
    out: np.ndarray
    logits: np.ndarray
    neck: dict | None
    head: dict


def forward(model: Model, x, dropout_seed=None) -> ForwardCache:
    """Full forward pass over a (V, N, D) batch, recording what :func:`backward` needs.

    ``dropout_seed=None`` disables dropout.
    """
    x = np.asarray(x, dtype=np.float64)
    V, N, D = x.shape
    if model.spec.use_neck:
        out, ncache = _neck(model.params, x)
    else:
        out, ncache = x, None
    masks = _dropout_masks(model.spec, V * N, dropout_seed)
    z, hcache = _head(model.params, out.reshape(V * N, D), masks)
    return ForwardCache(x, out, z.reshape(V, N), ncache, hcache)


def backward(model: Model, cache: ForwardCache, d_logits, d_out=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every model parameter.

    ``d_logits`` is dL/dz for the pre-sigmoid scores, shape (V, N).
    ``d_out`` is any extra dL/d(neck output) coming from terms that use the
    neck features directly (the magnitude loss), shape (V, N, D).
    """
    p = model.params
    h = cache.head
    V, N, D = cache.out.shape
    dz = np.asarray(d_logits, dtype=np.float64).reshape(V * N, 1)
    g = {}
    g["head.w3"] = h["h2"].T @ dz
    g["head.b3"] = dz.sum(axis=0)
    dh2 = dz @ p["head.w3"].T
    if h["masks"] is not None:
        dh2 = dh2 * h["masks"][1]
    da2 = dh2 * (h["a2"] > 0)
    g["head.w2"] = h["h1"].T @ da2
    g["head.b2"] = da2.sum(axis=0)
    dh1 = da2 @ p["head.w2"].T
    if h["masks"] is not None:
        dh1 = dh1 * h["masks"][0]
    da1 = dh1 * (h["a1"] > 0)
    g["head.w1"] = h["h0"].T @ da1
    g["head.b1"] = da1.sum(axis=0)
    dout = (da1 @ p["head.w1"].T).reshape(V, N, D)
    if d_out is not None:
        dout = dout + d_out

    if model.spec.use_neck:
        c = cache.neck
        if not model.spec.attention:
            dX = dout
        else:
            dX = _attention_backward(p, c, dout, g)
        g["neck.conv_b"] = dX.sum(axis=(0, 1))
        pad = c["pad"]
        g["neck.conv_w"] = np.stack([
            np.einsum("vnd,vne->de", pad[:, :-2], dX),
            np.einsum("vnd,vne->de", pad[:, 1:-1], dX),
            np.einsum("vnd,vne->de", pad[:, 2:], dX),
        ])
    return {k: g[k] for k in model.params}


def _attention_backward(p, c, dout, g):
    g["neck.b_out"] = dout.sum(axis=(0, 1))
    g["neck.w_out"] = np.einsum("vnp,vnd->pd", c["Z"], dout)
    dZ = dout @ p["neck.w_out"].T
    A = c["A"]
    dA = dZ @ c["G"].transpose(0, 2, 1)
    dG = A.transpose(0, 2, 1) @ dZ
    dL = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * c["scale"]
    dQ = dL @ c["K"]
    dK = dL.transpose(0, 2, 1) @ c["Q"]
    X = c["X"]
    g["neck.theta"] = np.einsum("vnd,vnp->dp", X, dQ)
    g["neck.phi"] = np.einsum("vnd,vnp->dp", X, dK)
    g["neck.g"] = np.einsum("vnd,vnp->dp", X, dG)
    return dout + dQ @ p["neck.theta"].T + dK @ p["neck.phi"].T + dG @ p["neck.g"].T


def finite_diff_check(
    loss_and_grad: Callable[[dict], tuple[float, dict]],
    params: dict[str, np.ndarray],
    num_params: int = 200,
    h: float = 1e-5,
    seed=0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(params)`` must be deterministic (no dropout). A random
    sample of ``num_params`` scalar parameters is probed; the error for each is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    loss0, grads = loss_and_grad(params)
    if not np.isfinite(loss0):
        raise NonFiniteError("loss is not finite")
    coords = [(name, i) for name, v in params.items() for i in range(v.size)]
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(coords), size=min(num_params, len(coords)), replace=False)
    worst = 0.0
    for c in sorted(pick):
        name, i = coords[c]
        flat = params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        lp, _ = loss_and_grad(params)
        flat[i] = orig - h
        lm, _ = loss_and_grad(params)
        flat[i] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteError(f"loss not finite when perturbing {name}[{i}]")
        numeric = (lp - lm) / (2 * h)
        analytic = grads[name].reshape(-1)[i]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """One Adam update, in place, with decoupled weight decay applied first."""
    for name, gr in grads.items():
        if gr.shape != params[name].shape:
            raise ValueError(f"gradient shape {gr.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(gr)):
            raise NonFiniteError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, gr in grads.items():
        p = params[name]
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * gr
        v *= state.beta2
        v += (1.0 - state.beta2) * gr * gr
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    """Write ``<path>.json`` (header) and ``<path>.bin`` (FVEC blobs in declared order)."""
    path = Path(path)
    header = {
        "format": "magmine-ckpt",
        "version": 1,
        "spec": model.spec.to_json(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
        "meta": meta or {},
    }
    with open(path.with_suffix(".bin"), "wb") as fh:
        for v in model.params.values():
            rows = v.reshape(-1, v.shape[-1]) if v.ndim >= 2 else v.reshape(1, -1)
            fh.write(HEADER.pack(MAGIC, VERSION, 0, rows.shape[0], rows.shape[1]))
            fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        header = json.load(fh)
    raw = path.with_suffix(".bin").read_bytes()
    params = {}
    off = 0
    for entry in header["params"]:
        if off + HEADER.size > len(raw):
            raise ValueError(f"{path}: truncated blob for {entry['name']}")
        magic, version, _, t, d = HEADER.unpack_from(raw, off)
        if magic != MAGIC or version != VERSION:
            raise ValueError(f"{path}: corrupt blob for {entry['name']}")
        off += HEADER.size
        n = t * d
        if off + 4 * n > len(raw):
            raise ValueError(f"{path}: truncated blob for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += 4 * n
        params[entry["name"]] = arr.reshape(entry["shape"])
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after the last blob")
    return Model(ModelSpec.from_json(header["spec"]), params), header.get("meta", {})


def quantize(model: Model) -> Model:
    """Round parameters through float32, exactly as a checkpoint round trip would."""
    return Model(model.spec, {k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()})

