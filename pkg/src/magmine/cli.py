"""``magmine`` command-line entry point."""

from __future__ import annotations

import os

_threads = os.environ.get("MAGMINE_THREADS")
if _threads:
    # must happen before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import ConfigError, apply_overrides, content_hash, load_config_doc, resolve, split_override_args  # noqa: E402
from .evaluation import UndefinedMetricError, evaluate_frames  # noqa: E402
from .experiments import RECIPES, corpus_hash, echo_config, run_experiment  # noqa: E402
from .feature_store import FeatureFormatError, ManifestError, load_manifest, read_header  # noqa: E402
from .mil_trainer import train_mil  # noqa: E402
from .mining import SampleManifest, mine  # noqa: E402
from .nn_core import NonFiniteError, load_checkpoint, save_checkpoint  # noqa: E402
from .supervised_trainer import build_supervised_samples, train_supervised  # noqa: E402
from .synthgen import generate_corpus  # noqa: E402

log = logging.getLogger("magmine")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _config(args, overrides, section):
    doc = load_config_doc(args.config, section)
    return resolve(apply_overrides(doc, overrides)), doc


def _ckpt_path(path: str) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_synth(args, overrides) -> int:
    cfg, _ = _config(args, overrides, "synth")
    manifest = generate_corpus(cfg.synth, args.out)
    _emit({"manifest": str(Path(args.out) / "manifest.json"),
           "videos": {k: len(v) for k, v in manifest.splits.items()},
           "input_hash": corpus_hash(manifest)})
    return EXIT_OK


def _train_artifacts(out: Path, state, cfg, input_hash, stage):
    meta = {"config": echo_config(cfg), "input_hash": input_hash, "stage": stage,
            "best_epoch": state.best_epoch, "best_val_auc": state.best_val_auc}
    save_checkpoint(state.best_model, out / "model", meta)
    save_checkpoint(state.model, out / "last", {**meta, "epoch": state.epoch})
    _write_json(out / "run.json", {**meta, "epochs": state.epoch, "warnings": state.warnings})


def cmd_train_ad(args, overrides) -> int:
    cfg, _ = _config(args, overrides, "mil")
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "epochs.jsonl", "w") as log_fh:
        def on_epoch(rec):
            line = json.dumps(rec, sort_keys=True)
            log_fh.write(line + "\n")
            _emit(rec)
        state = train_mil(manifest, cfg.mil, on_epoch=on_epoch)
    _train_artifacts(out, state, cfg, corpus_hash(manifest), "train-ad")
    return EXIT_OK


def cmd_train_ar(args, overrides) -> int:
    cfg, doc = _config(args, overrides, "sup")
    sup = cfg.sup
    samples = None
    if args.samples:
        explicit = doc.get("sup", {}).get("mode") or dict(overrides).get("sup.mode")
        if explicit and explicit != "mined_manifest":
            raise ConfigError(f"--samples given but sup.mode is {explicit!r}")
        sup = replace(sup, mode="mined_manifest")
        samples = SampleManifest.load(args.samples)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "epochs.jsonl", "w") as log_fh:
        def on_epoch(rec):
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            _emit(rec)
        state = train_supervised(manifest, build_supervised_samples(manifest, sup.mode, samples), sup,
                                 on_epoch=on_epoch)
    cfg = replace(cfg, sup=sup)
    extra = [samples.to_json()] if samples is not None else []
    _train_artifacts(out, state, cfg, content_hash(corpus_hash(manifest), *extra), "train-ar")
    return EXIT_OK


def cmd_mine(args, overrides) -> int:
    cfg, _ = _config(args, overrides, "mining")
    manifest = load_manifest(args.manifest)
    model, meta = load_checkpoint(_ckpt_path(args.ckpt))
    prov = {"config": echo_config(cfg), "checkpoint": str(args.ckpt),
            "input_hash": content_hash(corpus_hash(manifest), _ckpt_path(args.ckpt).with_suffix(".bin").read_bytes())}
    samples, warnings = mine(manifest, model, cfg.mining, prov)
    for w in warnings:
        _emit({"warning": w})
    if samples is None:
        log.error("no positives mined; nothing written")
        return EXIT_FAILED
    samples.save(args.out)
    p = samples.provenance
    _emit({k: p[k] for k in ("num_positive", "num_negative", "num_hard_negative", "pos_threshold",
                             "effective_neg_threshold")})
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    cfg, _ = _config(args, overrides, None)
    manifest = load_manifest(args.manifest)
    ckpt = _ckpt_path(args.ckpt)
    model, _ = load_checkpoint(ckpt)
    report = evaluate_frames(manifest, args.split, model)
    report.checkpoint = str(args.ckpt)
    report.config = {"config": echo_config(cfg),
                     "input_hash": content_hash(corpus_hash(manifest), ckpt.with_suffix(".bin").read_bytes())}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    out.with_suffix(".csv").write_text(report.to_csv())
    _emit({"split": args.split, "frame_auc": report.frame_auc, "frame_map": report.frame_map})
    return EXIT_OK


def _run_recipe(recipe, cfg, out, manifest_path=None) -> int:
    manifest = load_manifest(manifest_path) if manifest_path else None
    result = run_experiment(recipe, cfg, out, manifest)
    for row in result.rows:
        _emit(row)
    _emit({"checks": result.checks, "failures": result.failures, "status": "ok" if result.ok else "failed"})
    return EXIT_OK if result.ok else EXIT_FAILED


def cmd_iterate(args, overrides) -> int:
    cfg, _ = _config(args, overrides, None)
    if args.iters is not None:
        cfg = replace(cfg, iters=args.iters)
        cfg.validate()
    return _run_recipe("iterate", cfg, args.out, args.manifest)


def cmd_experiment(args, overrides) -> int:
    cfg, _ = _config(args, overrides, None)
    if args.iters is not None:
        cfg = replace(cfg, iters=args.iters)
        cfg.validate()
    return _run_recipe(args.recipe, cfg, args.out, args.manifest or cfg.manifest)


def _inspect_one(path: Path) -> dict:
    if path.suffix == ".fvec":
        t, d = read_header(path)
        return {"path": str(path), "kind": "fvec", "snippets": t, "dim": d, "bytes": path.stat().st_size}
    doc = json.loads(path.read_text())
    if doc.get("format") == "magmine-ckpt":
        n = sum(math.prod(p["shape"]) for p in doc["params"])
        return {"path": str(path), "kind": "checkpoint", "spec": doc["spec"], "parameters": n, "meta": doc["meta"]}
    if "entries" in doc and "provenance" in doc:
        sm = SampleManifest.from_json(doc)
        return {"path": str(path), "kind": "samples", "positives": len(sm.positives),
                "negatives": len(sm.negatives), "hard_negatives": sum(e.hard for e in sm.negatives)}
    manifest = load_manifest(path)
    stats = {}
    for split, recs in manifest.splits.items():
        stats[split] = {
            "videos": len(recs),
            "abnormal": sum(r.label for r in recs),
            "normal": sum(1 - r.label for r in recs),
            "frames": sum(r.num_frames for r in recs),
            "snippets": sum(read_header(manifest.feature_file(r))[0] for r in recs),
            "spans": sum(len(r.spans) for r in recs),
        }
    return {"path": str(path), "kind": "manifest", "name": manifest.name, "dim": manifest.dim,
            "snippet_len": manifest.snippet_len, "splits": stats}


def cmd_inspect(args, overrides) -> int:
    if overrides:
        raise ConfigError("inspect takes no config overrides")
    for p in args.paths:
        _emit(_inspect_one(Path(p)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magmine",
        description="Weakly supervised anomaly detection, sample mining and recognition-head training "
                    "over precomputed snippet features.",
        epilog="Any config field can be overridden with --<section>.<field> VALUE, e.g. --mil.lr 1e-3 "
               "or --master_seed 7. Sections: synth, mil, sup, mining. MAGMINE_THREADS caps BLAS threads. "
               "Exit status: 0 success, 1 run failed, 2 usage, config or input error.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(fn=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic corpus (FVEC files, manifest.json, synth_truth.json)")
    p.add_argument("--config", help="SynthConfig or run-config JSON")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train-ad", cmd_train_ad, "train the MIL anomaly detector; prints one JSON record per epoch")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="MilConfig or run-config JSON")
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = add("train-ar", cmd_train_ar, "train a supervised recognition head")
    p.add_argument("--manifest", required=True)
    p.add_argument("--samples", help="mined SampleManifest JSON (implies sup.mode=mined_manifest)")
    p.add_argument("--config", help="SupConfig or run-config JSON")
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = add("mine", cmd_mine, "mine positives and hard negatives with a trained detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True, help="detector checkpoint (path without suffix, or its .json)")
    p.add_argument("--config", help="MiningConfig or run-config JSON")
    p.add_argument("--out", required=True, help="output SampleManifest JSON")

    p = add("eval", cmd_eval, "frame-level AUC/AP report for a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--config", help="run-config JSON echoed into the report")
    p.add_argument("--out", required=True, help="report JSON path (a CSV is written next to it)")

    p = add("iterate", cmd_iterate, "run AD -> mine -> AR iterations plus the whole-video baseline")
    p.add_argument("--manifest", help="corpus manifest (default: generate from the synth section)")
    p.add_argument("--iters", type=int)
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--out", required=True)

    p = add("experiment", cmd_experiment, "run a reproduction recipe and write summary.csv/summary.json")
    p.add_argument("recipe", choices=RECIPES)
    p.add_argument("--manifest", help="corpus manifest (default: generate from the synth section)")
    p.add_argument("--iters", type=int, help="iterations for the iterate recipe")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--out", required=True)

    p = add("inspect", cmd_inspect, "print FVEC headers, manifest statistics, checkpoint or sample summaries")
    p.add_argument("paths", nargs="+")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        rest, overrides = split_override_args(argv)
    except ConfigError as exc:
        parser.error(str(exc))
    args = parser.parse_args(rest)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if _threads and not _threads.isdigit():
        parser.error(f"MAGMINE_THREADS must be a positive integer, got {_threads!r}")
    try:
        return args.fn(args, overrides)
    except (ConfigError, ManifestError, FeatureFormatError, FileNotFoundError) as exc:
        print(f"magmine: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, UndefinedMetricError, NonFiniteError, OSError) as exc:
        print(f"magmine: error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
