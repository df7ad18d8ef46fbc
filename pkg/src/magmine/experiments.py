"""Experiment recipes and their deterministic summary tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import RunConfig, content_hash, derive_seed
from .evaluation import evaluate_frames
from .feature_store import load_manifest
from .mil_trainer import train_mil
from .mining import regenerate_features, run_iteration
from .nn_core import save_checkpoint
from .supervised_trainer import build_supervised_samples, train_supervised
from .synthgen import generate_corpus

log = logging.getLogger(__name__)

RECIPES = ("compare_ad_ar", "ablate_neck", "iterate", "single")
SUMMARY_COLUMNS = (
    "recipe", "name", "iter", "frame_auc", "frame_map", "best_epoch", "best_val_auc",
    "num_positive", "num_negative", "num_hard_negative",
)
AR_SELECTIONS = ("all_snippet_mean", "random_segment", "single_snippet")


class StageFailure(RuntimeError):
    pass


@dataclass
class ExperimentResult:
    recipe: str
    config: dict
    input_hash: str
    rows: list[dict] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    # in-memory only: trained models and wall-clock times (never written to the summary)
    models: dict = field(default_factory=dict, repr=False)
    timings: dict[str, float] = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return not self.failures and all(self.checks.values())

    def row(self, name: str, it: int = 0) -> dict:
        for r in self.rows:
            if r["name"] == name and r["iter"] == it:
                return r
        raise KeyError((name, it))

    def to_json(self) -> dict:
        return {
            "recipe": self.recipe,
            "config": self.config,
            "input_hash": self.input_hash,
            "rows": self.rows,
            "checks": self.checks,
            "warnings": self.warnings,
            "failures": self.failures,
            "status": "ok" if self.ok else "failed",
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in self.rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in SUMMARY_COLUMNS])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        (out / "summary.csv").write_text(self.to_csv())


def corpus_hash(manifest) -> str:
    """sha256 over the manifest JSON and every feature file's bytes, in manifest order."""
    parts = [manifest.to_json()]
    for recs in manifest.splits.values():
        for r in recs:
            parts.append(manifest.feature_file(r).read_bytes())
    return content_hash(*parts)


def echo_config(cfg: RunConfig) -> dict:
    """Resolved config as echoed into artifacts; the output location is omitted."""
    doc = cfg.to_json()
    doc.pop("out")
    return doc


def prepare_corpus(cfg: RunConfig, out_dir):
    if cfg.manifest:
        return load_manifest(cfg.manifest)
    return generate_corpus(cfg.synth, Path(out_dir) / "corpus")


def _row(recipe, name, it, report, state=None, samples=None) -> dict:
    row = {c: None for c in SUMMARY_COLUMNS}
    row.update({"recipe": recipe, "name": name, "iter": it, "frame_auc": report.frame_auc,
                "frame_map": report.frame_map})
    if state is not None:
        row["best_epoch"] = state.best_epoch
        row["best_val_auc"] = state.best_val_auc
    if samples is not None:
        p = samples.provenance
        row.update({k: p[k] for k in ("num_positive", "num_negative", "num_hard_negative")})
    return row


class _Runner:
    def __init__(self, recipe: str, cfg: RunConfig, manifest, out_dir):
        self.cfg, self.manifest = cfg, manifest
        self.out = Path(out_dir) if out_dir is not None else None
        self.result = ExperimentResult(recipe, echo_config(cfg), corpus_hash(manifest))

    def stage(self, name, fn):
        """Run one stage; a failure is recorded and re-raised as StageFailure."""
        t0 = time.perf_counter()
        try:
            value = fn()
        except Exception as exc:  # recorded for the summary, then propagated
            msg = f"{name}: {type(exc).__name__}: {exc}"
            log.error(msg)
            self.result.failures.append(msg)
            raise StageFailure(msg) from exc
        self.result.timings[name] = time.perf_counter() - t0
        return value

    def save(self, name, model, meta=None):
        if self.out is not None:
            (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, self.out / "checkpoints" / name, meta)

    def ad(self, name, mil_cfg, manifest=None, it=0):
        man = manifest or self.manifest
        st = self.stage(name, lambda: train_mil(man, mil_cfg))
        rep = evaluate_frames(man, "test", st.best_model)
        self.result.rows.append(_row(self.result.recipe, name, it, rep, st))
        self.result.models[name] = st.best_model
        self.result.warnings.extend(st.warnings)
        self.save(name, st.best_model, {"best_epoch": st.best_epoch})
        return st, rep

    def ar(self, name, sup_cfg, samples=None, it=0, manifest=None):
        man = manifest or self.manifest
        st = self.stage(name, lambda: train_supervised(
            man, build_supervised_samples(man, sup_cfg.mode, samples), sup_cfg))
        rep = evaluate_frames(man, "test", st.best_model)
        self.result.rows.append(_row(self.result.recipe, name, it, rep, st, samples))
        self.result.models[name] = st.best_model
        self.save(name, st.best_model, {"best_epoch": st.best_epoch})
        return st, rep


def _ablate(r: _Runner):
    cfg = r.cfg
    _, with_neck = r.ad("mil_neck", replace(cfg.mil, use_neck=True))
    _, without = r.ad("mil_no_neck", replace(cfg.mil, use_neck=False))
    r.result.checks["mil_neck_ge_no_neck_plus_0.01"] = with_neck.frame_auc >= without.frame_auc + 0.01


def _compare_ad_ar(r: _Runner):
    _ablate(r)
    aucs = {}
    for sel in AR_SELECTIONS:
        _, rep = r.ar(f"ar_trimmed_{sel}", replace(r.cfg.sup, mode="trimmed_gt", selection=sel))
        aucs[sel] = rep.frame_auc
    r.result.checks["ar_mean_ge_single_plus_0.01"] = aucs["all_snippet_mean"] >= aucs["single_snippet"] + 0.01


def _single(r: _Runner):
    r.ad("mil", r.cfg.mil)


def _iterate(r: _Runner):
    cfg = r.cfg
    _, base = r.ar("ar_whole_video", replace(cfg.sup, mode="whole_video"), it=0)
    manifest = r.manifest
    for it in range(1, cfg.iters + 1):
        mil_cfg, sup_cfg = cfg.mil, replace(cfg.sup, mode="mined_manifest")
        if it > 1:
            mil_cfg = replace(mil_cfg, seed=derive_seed(cfg.master_seed, f"mil.iter{it}"))
            sup_cfg = replace(sup_cfg, seed=derive_seed(cfg.master_seed, f"sup.iter{it}"))
        it_dir = None if r.out is None else r.out / f"iter{it}"
        res = r.stage(f"iteration{it}", lambda: run_iteration(manifest, mil_cfg, sup_cfg, cfg.mining, it, it_dir))
        r.result.warnings.extend(res.warnings)
        r.result.rows.append(_row(r.result.recipe, "ad", it, res.reports["ad"], res.ad_state))
        r.result.models[f"ad_iter{it}"] = res.ad_state.best_model
        if res.ar_state is None:
            if it == 1:
                r.result.checks["mined_ar_gt_whole_video_plus_0.02"] = False
            break
        r.result.rows.append(_row(r.result.recipe, "ar_mined", it, res.reports["ar"], res.ar_state,
                                  res.sample_manifest))
        r.result.models[f"ar_iter{it}"] = res.ar_state.best_model
        r.result.models[f"samples_iter{it}"] = res.sample_manifest
        if it == 1:
            r.result.checks["mined_ar_gt_whole_video_plus_0.02"] = (
                res.reports["ar"].frame_auc >= base.frame_auc + 0.02)
        if it < cfg.iters:
            regen_dir = (r.out if r.out is not None else Path(".")) / f"iter{it + 1}_features"
            manifest = r.stage(f"regenerate{it + 1}",
                               lambda: regenerate_features(manifest, res.ar_state.best_model, regen_dir))


_RECIPES = {"compare_ad_ar": _compare_ad_ar, "ablate_neck": _ablate, "iterate": _iterate, "single": _single}


def run_experiment(recipe: str, cfg: RunConfig, out_dir=None, manifest=None) -> ExperimentResult:
    """Run ``recipe`` and write ``summary.json``/``summary.csv`` under ``out_dir`` (if given).

    Stage failures stop the recipe; the partial summary is still written and
    ``result.ok`` is false.
    """
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; choose from {RECIPES}")
    if manifest is None:
        if out_dir is None and not cfg.manifest:
            raise ValueError("need a manifest or an output directory for the generated corpus")
        manifest = prepare_corpus(cfg, out_dir)
    runner = _Runner(recipe, cfg, manifest, out_dir)
    try:
        _RECIPES[recipe](runner)
    except StageFailure:
        pass
    if out_dir is not None:
        runner.result.write(out_dir)
    return runner.result

