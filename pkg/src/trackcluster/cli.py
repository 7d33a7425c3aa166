"""Command-line entry points.

Exit codes: 0 on success, 1 on a runtime failure (message tagged with the
failing stage), 2 on a usage error.

Configuration precedence for ``run`` and ``compare``: the named preset is
applied first, then the ``--config`` file, then individual flags.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .clustering import KINDS
from .config import PRESETS, RunConfig
from .data import (DatasetError, SyntheticConfig, generate_synthetic, load_assignment,
                   load_dataset, save_assignment, save_dataset)
from .evaluation import compare_report, evaluate, pca2d, write_pca_csv
from .finetune import write_log
from .coarse import save_matches
from .pipeline import (METHOD_NAMES, PipelineError, PipelineResult, build_methods,
                       cluster_with_model, run_pipeline, student_embeddings)
from .tinynn import load_checkpoint, save_checkpoint

log = logging.getLogger("trackcluster")


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {exc}")


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (UsageError, StageError):
        raise
    except (OSError, ValueError, ArithmeticError, KeyError, RuntimeError,
            np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def _load_data(path):
    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise StageError("load", exc) from exc
    except OSError as exc:
        raise StageError("load", exc) from exc


def _has_truth(ds) -> bool:
    return any(t.truth_identity is not None for t in ds)


def _resolve_config(args) -> RunConfig:
    try:
        cfg = RunConfig.preset(args.preset)
        if args.config:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
            base = cfg.to_dict()
            for section, values in data.items():
                if isinstance(values, dict) and isinstance(base.get(section), dict):
                    base[section].update(values)
                else:
                    base[section] = values
            cfg = RunConfig.from_dict(base)
        if args.seed is not None:
            cfg.train.seed = args.seed
        if args.ssl_iterations is not None:
            cfg.train.ssl_iterations = args.ssl_iterations
        if args.threads is not None:
            cfg.threads = args.threads
        cfg.train.validate()
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if cfg.threads < 1:
        raise UsageError("--threads must be >= 1")
    if cfg.cluster.kind not in KINDS:
        raise UsageError(f"unknown similarity kind {cfg.cluster.kind!r}")
    return cfg


def _read_filtered(path) -> set:
    with open(path, newline="", encoding="utf-8") as fh:
        return {int(r["track_id"]) for r in csv.DictReader(fh) if r["filtered"] == "1"}


def _write_report(ds, assign, out: Path, policy: str) -> dict:
    rep = evaluate(assign, ds.truth(), policy)
    (out / "report.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    (out / "report.csv").write_text(rep.to_csv(), encoding="utf-8")
    return {"wcp": rep.wcp, "pcr": rep.pcr, "pcr_fraction": rep.pcr_fraction}


# commands

def cmd_generate(args) -> int:
    cfg = SyntheticConfig(identities=args.identities, tracks_per_identity=args.tracks_per_id,
                          crops_per_track=args.crops, dim=args.dim,
                          identity_spread=args.identity_spread, track_shift=args.track_shift,
                          crop_noise=args.crop_noise, outlier_tracks=args.outliers,
                          seed=args.seed, name=args.name)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = generate_synthetic(cfg)
    _stage("write", save_dataset, ds, args.out)
    print(f"wrote {len(ds)} tracks (dim {ds.dim}) to {args.out}")
    return 0


def _finetune(ds, cfg) -> PipelineResult:
    return _stage("finetune", run_pipeline, ds, cfg)


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    if args.kind:
        cfg.cluster.kind = args.kind
    ds = _load_data(args.data)
    out = Path(args.out)
    _stage("write", out.mkdir, parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    res = _finetune(ds, cfg)
    write_log(res.log, out / "train_log.jsonl")
    res.quality.to_csv(out / "quality.csv")
    save_matches(res.matches, out / "matches.json")
    save_checkpoint(res.model, out / "model.bin")
    # cluster with the stored float32 weights so `cluster --model` reproduces this run
    res.model = load_checkpoint(out / "model.bin")

    run = _stage("cluster", cluster_with_model, ds, res.model, res.filtered_ids,
                 cfg.cluster.kind, cfg.threads)
    save_assignment(run.assignment, out / "clusters.json")
    (out / "cluster_meta.json").write_text(run.to_json() + "\n", encoding="utf-8")

    kept = [t for t in ds.tracks if t.track_id not in res.filtered_ids]
    if len(kept) >= 2:
        means = np.stack([e.mean(axis=0) for _, e in student_embeddings(res.model, kept)])
        write_pca_csv(out / "pca.csv", pca2d(means), [t.track_id for t in kept],
                      [run.assignment[t.track_id] for t in kept])

    meta = {"version": __version__, "dataset": ds.name, "tracks": len(ds),
            "filtered": sorted(res.filtered_ids), "iterations": res.iterations,
            "clusters": len({c for c in run.assignment.values() if c != -1})}
    if _has_truth(ds):
        meta["report"] = _stage("report", _write_report, ds, run.assignment, out, args.policy)
    _write_json(out / "run_meta.json", meta)
    summary = f"{meta['clusters']} clusters, {len(res.filtered_ids)} unknown"
    if "report" in meta:
        summary += f", wcp {meta['report']['wcp']:.4f}, pcr {meta['report']['pcr']:.3f}"
    print(summary)
    return 0


def cmd_cluster(args) -> int:
    ds = _load_data(args.data)
    model = _stage("load", load_checkpoint, args.model)
    if model.dim != ds.dim:
        raise UsageError(f"model dimension {model.dim} does not match data dimension {ds.dim}")
    filtered = _stage("load", _read_filtered, args.quality) if args.quality else set()
    run = _stage("cluster", cluster_with_model, ds, model, filtered, args.kind, args.threads)
    out = Path(args.out)
    _stage("write", out.mkdir, parents=True, exist_ok=True)
    save_assignment(run.assignment, out / "clusters.json")
    (out / "cluster_meta.json").write_text(run.to_json() + "\n", encoding="utf-8")
    print(f"{len(set(run.assignment.values()) - {-1})} clusters after {run.rounds} rounds")
    return 0


def cmd_eval(args) -> int:
    ds = _load_data(args.data)
    if not _has_truth(ds):
        raise UsageError("dataset has no truth labels")
    assign = _stage("load", load_assignment, args.pred)
    truth = ds.truth()
    missing = sorted(set(assign) - set(truth))
    if missing:
        raise UsageError(f"prediction references unknown track ids {missing[:5]}")
    try:
        rep = evaluate(assign, truth, args.policy)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    out = Path(args.out) if args.out else Path(args.pred).parent
    _stage("write", out.mkdir, parents=True, exist_ok=True)
    (out / "report.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    (out / "report.csv").write_text(rep.to_csv(), encoding="utf-8")
    print(f"wcp {rep.wcp:.4f}  pcr {rep.pcr:.3f} ({rep.pcr_fraction})  policy {rep.unknown_policy}")
    return 0


def _parse_methods(text: str) -> List[str]:
    names = [n.strip() for n in text.split(",") if n.strip()]
    bad = [n for n in names if n not in METHOD_NAMES]
    if bad or not names:
        raise UsageError(f"unknown method(s) {bad}; choose from {','.join(METHOD_NAMES)}")
    return names


def cmd_compare(args) -> int:
    names = _parse_methods(args.methods)
    if any(n.startswith("hac") for n in names) and args.hac_cutoff is None:
        raise UsageError("--hac-cutoff is required when a hac method is requested")
    if args.hac_cutoff is not None and args.hac_cutoff <= 0:
        raise UsageError("--hac-cutoff must be positive")
    cfg = _resolve_config(args)
    ds = _load_data(args.data)
    if not _has_truth(ds):
        raise UsageError("dataset has no truth labels")
    if args.model:
        model = _stage("load", load_checkpoint, args.model)
        filtered = _stage("load", _read_filtered, args.quality) if args.quality else set()
        res = PipelineResult(model, {}, None, filtered)
    else:
        res = _finetune(ds, cfg)
    methods = build_methods(ds, res, names, args.hac_cutoff, cfg.threads)
    table = _stage("compare", compare_report, ds.truth(), methods, args.policy)
    print(table.format())
    if args.out:
        out = Path(args.out)
        _stage("write", out.mkdir, parents=True, exist_ok=True)
        (out / "compare.csv").write_text(table.to_csv(), encoding="utf-8")
        (out / "compare.json").write_text(table.to_json() + "\n", encoding="utf-8")
    return 0


def cmd_inspect(args) -> int:
    ds = _load_data(args.data)
    counts = np.array([t.n_crops for t in ds])
    X = np.concatenate([t.crops for t in ds])
    labelled = [t.truth_identity for t in ds if t.truth_identity is not None]
    stats = {
        "name": ds.name, "tracks": len(ds), "dim": ds.dim, "crops": int(counts.sum()),
        "crops_per_track": {"min": int(counts.min()), "mean": float(counts.mean()),
                            "max": int(counts.max())},
        "identities": len(set(labelled)), "unlabelled_tracks": len(ds) - len(labelled),
        "feature_norm_mean": float(np.linalg.norm(X, axis=1).mean()),
    }
    print(json.dumps(stats, indent=1))
    return 0


# parser

def _add_config_flags(p) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="reference",
                   help="base parameter set (default: reference)")
    p.add_argument("--config", help="JSON file overriding preset values")
    p.add_argument("--seed", type=int)
    p.add_argument("--ssl-iterations", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--policy", choices=("exclude", "count_wrong"), default="exclude")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trackcluster",
                                 description="Self-supervised face-track clustering on embeddings.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset with truth labels")
    d = SyntheticConfig()
    g.add_argument("--out", required=True)
    g.add_argument("--identities", type=int, default=d.identities)
    g.add_argument("--tracks-per-id", type=int, default=d.tracks_per_identity)
    g.add_argument("--crops", type=int, default=d.crops_per_track)
    g.add_argument("--dim", type=int, default=d.dim)
    g.add_argument("--identity-spread", type=float, default=d.identity_spread)
    g.add_argument("--track-shift", type=float, default=d.track_shift)
    g.add_argument("--crop-noise", type=float, default=d.crop_noise)
    g.add_argument("--outliers", type=int, default=d.outlier_tracks)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--name", default=d.name)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="finetune, filter, match and cluster a dataset")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--kind", choices=KINDS)
    _add_config_flags(r)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("cluster", help="cluster a dataset with a saved model")
    c.add_argument("--data", required=True)
    c.add_argument("--model", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--kind", choices=KINDS, default="loss_metric")
    c.add_argument("--quality", help="quality.csv whose filtered tracks become Unknown")
    c.add_argument("--threads", type=int, default=1)
    c.set_defaults(func=cmd_cluster)

    e = sub.add_parser("eval", help="score a cluster assignment against truth labels")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--policy", choices=("exclude", "count_wrong"), default="exclude")
    e.add_argument("--out", help="output directory (default: next to --pred)")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("compare", help="compare clustering methods on one finetuned model")
    m.add_argument("--data", required=True)
    m.add_argument("--methods", default="loss,cosine,euclidean,hac")
    m.add_argument("--hac-cutoff", type=float)
    m.add_argument("--model", help="reuse a saved model instead of finetuning")
    m.add_argument("--quality", help="quality.csv to pair with --model")
    m.add_argument("--out")
    _add_config_flags(m)
    m.set_defaults(func=cmd_compare)

    i = sub.add_parser("inspect", help="print dataset statistics")
    i.add_argument("--data", required=True)
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"trackcluster {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"trackcluster {args.command}: failed {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"trackcluster {args.command}: failed [finetune] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
