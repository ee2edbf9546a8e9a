"""Command-line interface: ``hcpose <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (JSON); explicit flags override
values from the file. Each run writes a ``*.run.json`` file next to its
outputs with the resolved configuration, the seed and the ``git describe``
string of the source tree. Exit codes: 0 success, 1 input error, 2 solver
or numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import subprocess
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .features import NumericalError, PartFeatureExtractor
from .types import DatasetManifest, ImageRecord, InputError

CACHE_ENV = "HCPOSE_CACHE_DIR"


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with status 1 and the usage on stderr."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_run_manifest(path, command: str, config: dict, seed=None) -> None:
    doc = {"command": command, "config": config, "seed": seed,
           "git_describe": git_describe(), "version": __version__}
    Path(path).write_text(_dump(doc), encoding="utf-8")


def _run_path(out) -> Path:
    out = Path(out)
    if out.is_dir():
        return out / "run.json"
    return out.with_name(out.name + ".run.json")


def resolve(args, defaults: Dict[str, object]) -> Dict[str, object]:
    """Merge built-in defaults, the ``--config`` file and explicit flags."""
    conf: Dict[str, object] = dict(defaults)
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: not valid JSON ({exc.msg})") from None
        unknown = set(doc) - set(defaults)
        if unknown:
            raise InputError(f"{args.config}: unknown keys {sorted(unknown)}")
        conf.update(doc)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            conf[key] = value
    return conf


def _load_dataset(conf) -> DatasetManifest:
    from .io import load_manifest, read_parts
    if conf.get("manifest"):
        return load_manifest(conf["manifest"])
    if conf.get("parts"):
        records = read_parts(conf["parts"])
        if not records:
            raise InputError(f"{conf['parts']}: no part realizations")
        return DatasetManifest(n_layers=max(r.n_layers for r in records), records=tuple(records))
    raise InputError("give --manifest or --parts")


def _select(manifest: DatasetManifest, conf, role: str) -> List[ImageRecord]:
    split = conf.get("split")
    if not split:
        return list(manifest.records)
    if split not in manifest.splits:
        raise InputError(f"no split named {split!r} in the manifest")
    return manifest.subset(manifest.splits[split].get(role, ()))


def _cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else Path.home() / ".cache" / "hcpose"


def feature_config(conf, records) -> dict:
    w, h = records[0].image_width, records[0].image_height
    return {"n_layers": int(conf["layers"]), "bsize": float(conf["bsize"]),
            "M": int(conf["M"]), "weight_by_score": bool(conf.get("weight_by_score", False)),
            "width": int(w), "height": int(h)}


def compute_features(records, fcfg: dict, threads: Optional[int]):
    ext = PartFeatureExtractor(n_layers=fcfg["n_layers"], grid_cells=fcfg["M"],
                               bin_size=fcfg["bsize"], weight_by_score=fcfg["weight_by_score"],
                               n_jobs=threads)
    ext.fit(records)
    return ext.transform(records), ext.group_sizes_


def cached_features(records, fcfg: dict, threads: Optional[int], use_cache=True):
    """Feature matrix keyed by (dataset digest, config digest)."""
    from .io import records_digest
    key = hashlib.sha256((records_digest(records) + _dump(fcfg)).encode()).hexdigest()
    path = _cache_dir() / f"features-{key[:32]}.npz"
    if use_cache and path.exists():
        with np.load(path, allow_pickle=False) as data:
            if str(data["key"]) == key:
                return data["X"], [int(s) for s in data["groups"]], key
    X, groups = compute_features(records, fcfg, threads)
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, X=X, groups=np.asarray(groups), key=np.asarray(key))
        os.replace(tmp, path)
    return X, groups, key


# ---------------------------------------------------------------------------
# subcommands

SYNTH_DEFAULTS = {"templates": ["cup", "cow", "car", "duck"], "objects": 5, "noise": 0.5,
                  "seed": 0, "width": 128, "height": 128, "pose_step": 5.0, "layers": 4,
                  "elevation": 20.0, "rasters": False, "out": None}


def cmd_synth(args) -> int:
    from .io import ensure_dir, save_manifest, write_pgm
    from .synth import TurntableSpec, generate_dataset, render_raster
    conf = resolve(args, SYNTH_DEFAULTS)
    if not conf["out"]:
        raise InputError("--out is required")
    out = ensure_dir(conf["out"])
    poses = tuple(float(p) for p in np.arange(0.0, 360.0, float(conf["pose_step"])))
    tt = TurntableSpec(poses=poses, width=int(conf["width"]), height=int(conf["height"]),
                       elevation_deg=float(conf["elevation"]))
    manifest = generate_dataset(list(conf["templates"]), conf["objects"], tt,
                                n_layers=int(conf["layers"]), seed=int(conf["seed"]),
                                noise=float(conf["noise"]))
    rasters = None
    if conf["rasters"]:
        ensure_dir(out / "rasters")
        rasters = {}
        for r in manifest.records:
            rel = f"rasters/{r.image_id}.pgm"
            write_pgm(out / rel, render_raster(r))
            rasters[r.image_id] = rel
    save_manifest(manifest, out / "manifest.json", rasters=rasters)
    write_run_manifest(out / "run.json", "synth", conf, conf["seed"])
    print(f"wrote {len(manifest.records)} records to {out / 'manifest.json'}")
    return 0


DETECT_DEFAULTS = {"images": None, "labels": None, "threshold": 0.1, "orientations": 6,
                   "nms_radius": 3.0, "out": None}


def _read_labels(path) -> Dict[str, dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    need = {"file", "object_id", "category", "pose_deg"}
    if rows and not need <= set(rows[0]):
        raise InputError(f"{path}: label columns must include {sorted(need)}")
    out = {}
    for i, row in enumerate(rows, start=2):
        try:
            out[row["file"]] = {"object_id": row["object_id"], "category": int(row["category"]),
                                "pose": float(row["pose_deg"])}
        except ValueError:
            raise InputError(f"{path}: line {i}: bad category or pose") from None
    return out


def cmd_detect(args) -> int:
    from .detect import EdgeDetectorConfig, detect_layer1
    from .io import read_pgm, write_parts
    conf = resolve(args, DETECT_DEFAULTS)
    if not conf["images"] or not conf["out"]:
        raise InputError("--images and --out are required")
    files = sorted(Path(conf["images"]).glob("*.pgm"))
    if not files:
        raise InputError(f"no .pgm images in {conf['images']}")
    labels = _read_labels(conf["labels"]) if conf["labels"] else {}
    cfg = EdgeDetectorConfig(n_orientations=int(conf["orientations"]),
                             threshold=float(conf["threshold"]),
                             nms_radius=float(conf["nms_radius"]))
    records = []
    for f in files:
        img = read_pgm(f)
        lab = labels.get(f.name, labels.get(f.stem))
        if labels and lab is None:
            raise InputError(f"{f.name} has no row in {conf['labels']}")
        lab = lab or {"object_id": f.stem, "category": 1, "pose": 0.0}
        parts = detect_layer1(img, cfg, image_id=f.stem)
        records.append(ImageRecord(image_id=f.stem, object_id=lab["object_id"],
                                   category=lab["category"], pose=lab["pose"],
                                   parts=tuple(parts), image_width=img.shape[1],
                                   image_height=img.shape[0]))
    write_parts(records, conf["out"])
    write_run_manifest(_run_path(conf["out"]), "detect", conf)
    print(f"detected parts in {len(records)} images")
    return 0


FEATURE_DEFAULTS = {"manifest": None, "parts": None, "split": None, "layers": None,
                    "bsize": 45.0, "M": 8, "weight_by_score": False, "out": None,
                    "no_cache": False}


def _layers(conf, manifest):
    L = conf.get("layers")
    return int(L) if L is not None else manifest.n_layers


def cmd_features(args) -> int:
    conf = resolve(args, FEATURE_DEFAULTS)
    if not conf["out"]:
        raise InputError("--out is required")
    manifest = _load_dataset(conf)
    records = _select(manifest, conf, "train")
    conf["layers"] = _layers(conf, manifest)
    fcfg = feature_config(conf, records)
    X, groups, key = cached_features(records, fcfg, args.threads, not conf["no_cache"])
    np.savez(conf["out"], X=X, groups=np.asarray(groups),
             image_ids=np.asarray([r.image_id for r in records]),
             feature_config=np.asarray(_dump(fcfg)), key=np.asarray(key))
    write_run_manifest(_run_path(conf["out"]), "features", conf)
    print(f"features {X.shape[0]} x {X.shape[1]} -> {conf['out']}")
    return 0


TRAIN_DEFAULTS = {"manifest": None, "parts": None, "split": None, "task": "pose",
                  "layers": None, "bsize": 45.0, "M": 8, "weight_by_score": False,
                  "alpha": 0.01, "lam": None, "rho": 1.0, "max_iter": 1000, "tol": 1e-4,
                  "inner_iter": 500, "phi_loss": "label_weighted", "out": None,
                  "no_cache": False}


def cmd_train(args) -> int:
    from .estimators import SharingGroupLassoRegressor, SharingL1LogisticClassifier
    from .io import save_model
    conf = resolve(args, TRAIN_DEFAULTS)
    if not conf["out"]:
        raise InputError("--out is required")
    if conf["task"] not in ("pose", "category"):
        raise InputError(f"unknown task {conf['task']!r}")
    manifest = _load_dataset(conf)
    records = _select(manifest, conf, "train")
    conf["layers"] = _layers(conf, manifest)
    fcfg = feature_config(conf, records)
    X, groups, _ = cached_features(records, fcfg, args.threads, not conf["no_cache"])
    common = dict(groups=groups, alpha=conf["alpha"], lam=conf["lam"], rho=conf["rho"],
                  max_iter=int(conf["max_iter"]), tol=conf["tol"],
                  inner_iter=int(conf["inner_iter"]))
    if conf["task"] == "pose":
        est = SharingGroupLassoRegressor(**common)
        est.fit(X, np.array([r.pose for r in records]))
    else:
        est = SharingL1LogisticClassifier(phi_loss=conf["phi_loss"], **common)
        est.fit(X, np.array([r.category for r in records]))
    save_model(est.model_, conf["out"], fcfg)
    write_run_manifest(_run_path(conf["out"]), "train", conf)
    print(f"trained {conf['task']} model on {len(records)} images -> {conf['out']}")
    return 0


PREDICT_DEFAULTS = {"model": None, "manifest": None, "parts": None, "split": None,
                    "wrap": False, "out": None, "no_cache": False}


def cmd_predict(args) -> int:
    from .io import load_model
    from .solver import PoseModel, category_scores, predict_pose
    conf = resolve(args, PREDICT_DEFAULTS)
    if not conf["model"] or not conf["out"]:
        raise InputError("--model and --out are required")
    model, fcfg = load_model(conf["model"])
    manifest = _load_dataset(conf)
    records = _select(manifest, conf, "test")
    if not records:
        raise InputError("no records to predict")
    for r in records:
        if (r.image_width, r.image_height) != (fcfg["width"], fcfg["height"]):
            raise InputError(f"image {r.image_id} is {r.image_width}x{r.image_height}, the "
                             f"model expects {fcfg['width']}x{fcfg['height']}")
    X, _, _ = cached_features(records, fcfg, args.threads, not conf["no_cache"])
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["image_id", "object_id", "category", "pose_deg", "prediction"])
    if isinstance(model, PoseModel):
        pred = [repr(float(v)) for v in predict_pose(model, X, wrap=bool(conf["wrap"]))]
    else:
        scores = category_scores(model, X)
        pred = [str(model.classes[i]) for i in np.argmax(np.atleast_2d(scores), axis=1)]
    for r, p in zip(records, pred):
        w.writerow([r.image_id, r.object_id, r.category, repr(float(r.pose)), p])
    with open(conf["out"], "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    write_run_manifest(_run_path(conf["out"]), "predict", conf)
    print(f"wrote {len(records)} predictions to {conf['out']}")
    return 0


EVAL_OVERRIDES = ("protocol", "task", "seed", "repeats")


def cmd_eval(args) -> int:
    from .evaluation import (ExperimentConfig, default_benchmark_path, load_experiment_config,
                             run_experiment, write_artifacts)
    from .io import load_manifest, manifest_rasters, read_pgm
    cfg = load_experiment_config(args.config or default_benchmark_path())
    doc = cfg.to_dict()
    for key in EVAL_OVERRIDES:
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    cfg = ExperimentConfig.from_dict(doc)
    manifest, rasters = None, None
    if args.manifest:
        manifest = load_manifest(args.manifest)
        paths = manifest_rasters(args.manifest)
        if paths:
            rasters = {k: read_pgm(v) for k, v in paths.items()}
    table = run_experiment(cfg, manifest, rasters, n_jobs=args.threads)
    paths = write_artifacts(table, args.out, cfg)
    resolved = cfg.to_dict()
    resolved["manifest"] = args.manifest
    write_run_manifest(Path(args.out) / "run.json", "eval", resolved, cfg.seed)
    for f in table.failures():
        print(f"failed: {f.method} C={f.C} n_train={f.n_train}: {f.value}", file=sys.stderr)
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


# ---------------------------------------------------------------------------
# parser

def _bool_flag(p, name, help):
    p.add_argument(name, action="store_const", const=True, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hcpose", description="Joint pose estimation and categorization "
                     "from layered part realizations.")
    parser.add_argument("--version", action="version", version=f"hcpose {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: available cores)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file with defaults for this command")
        return p

    p = add("synth", "render a synthetic turntable dataset")
    p.add_argument("--templates", nargs="+")
    p.add_argument("--objects", type=int, help="objects per category")
    p.add_argument("--noise", type=float, help="positional jitter std (pixels)")
    p.add_argument("--seed", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--pose-step", dest="pose_step", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--elevation", type=float)
    _bool_flag(p, "--rasters", "also write PGM debug rasters")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = add("detect", "layer-1 parts from PGM images")
    p.add_argument("--images", help="directory of .pgm files")
    p.add_argument("--labels", help="CSV with file,object_id,category,pose_deg")
    p.add_argument("--threshold", type=float)
    p.add_argument("--orientations", type=int)
    p.add_argument("--nms-radius", dest="nms_radius", type=float)
    p.add_argument("--out", help="output part file")
    p.set_defaults(func=cmd_detect)

    def data_flags(p):
        p.add_argument("--manifest")
        p.add_argument("--parts")
        p.add_argument("--split", help="named split of the manifest")
        _bool_flag(p, "--no-cache", "do not read or write the feature cache")

    def feature_flags(p):
        p.add_argument("--layers", type=int)
        p.add_argument("--bsize", type=float, help="HOP bin size in degrees")
        p.add_argument("--M", dest="M", type=int, help="grid cells per axis")
        _bool_flag(p, "--weight-by-score", "weight HOP counts by part score")

    p = add("features", "extract and cache the feature matrix")
    data_flags(p)
    feature_flags(p)
    p.add_argument("--out", help="output .npz file")
    p.set_defaults(func=cmd_features)

    p = add("train", "fit a pose or category model")
    data_flags(p)
    feature_flags(p)
    p.add_argument("--task", choices=("pose", "category"))
    p.add_argument("--alpha", type=float, help="lambda as a fraction of lambda_max")
    p.add_argument("--lambda", dest="lam", type=float, help="absolute lambda")
    p.add_argument("--rho", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--inner-iter", dest="inner_iter", type=int)
    p.add_argument("--phi-loss", dest="phi_loss", choices=("label_weighted", "literal"))
    p.add_argument("--out", help="output model JSON")
    p.set_defaults(func=cmd_train)

    p = add("predict", "apply a model to part realizations")
    data_flags(p)
    p.add_argument("--model")
    _bool_flag(p, "--wrap", "report poses modulo 360")
    p.add_argument("--out", help="output CSV")
    p.set_defaults(func=cmd_predict)

    p = add("eval", "run an experiment protocol")
    p.add_argument("--manifest", help="dataset instead of the synthetic benchmark")
    p.add_argument("--protocol", choices=("object-wise", "category-wise-balanced",
                                          "category-wise-unbalanced"))
    p.add_argument("--task", choices=("pose", "category"))
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is None:
        args.threads = os.cpu_count() or 1
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"hcpose: numerical error: {exc}", file=sys.stderr)
        return 2
    except (InputError, OSError, KeyError) as exc:
        print(f"hcpose: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
