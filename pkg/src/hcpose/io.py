"""File formats: part realizations (JSON Lines), manifests, models, PGM.

Part file: one JSON object per line and per part realization::

    {"image_id": "cup-00-p000", "object_id": "cup-00", "category": 1,
     "pose_deg": 0, "layer": 1, "part_id": 3, "x": -12.5, "y": 4.25,
     "score": 1, "img_w": 128, "img_h": 128}

Coordinates are image-centered with the y-axis up. Floats are written
with 17 significant digits, so reading a written file gives back the same
records. Images without any part realization have no line to live on and
are dropped (with a warning) when writing.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .solver import CategoryModel, PoseModel
from .types import DatasetManifest, ImageRecord, InputError, PartRealization

PART_FIELDS = ("image_id", "object_id", "category", "pose_deg", "layer", "part_id",
               "x", "y", "score", "img_w", "img_h")
_INT_FIELDS = ("category", "layer", "part_id", "img_w", "img_h")
_FLOAT_FIELDS = ("pose_deg", "x", "y", "score")
MODEL_FORMAT_VERSION = 1


def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        raise InputError(f"cannot serialize non-finite value {v}")
    return format(float(v), ".17g")


def _part_line(r: ImageRecord, p: PartRealization) -> str:
    fields = [
        ("image_id", json.dumps(r.image_id)),
        ("object_id", json.dumps(r.object_id)),
        ("category", str(int(r.category))),
        ("pose_deg", _fmt_float(r.pose)),
        ("layer", str(int(p.layer))),
        ("part_id", str(int(p.part_id))),
        ("x", _fmt_float(p.x)),
        ("y", _fmt_float(p.y)),
        ("score", _fmt_float(p.score)),
        ("img_w", str(int(r.image_width))),
        ("img_h", str(int(r.image_height))),
    ]
    return "{" + ", ".join(f'"{k}": {v}' for k, v in fields) + "}"


def dumps_parts(records: Iterable[ImageRecord]) -> str:
    lines = []
    for r in records:
        if not r.parts:
            warnings.warn(f"image {r.image_id} has no parts and is not written")
            continue
        lines.extend(_part_line(r, p) for p in r.parts)
    return "".join(line + "\n" for line in lines)


def write_parts(records: Iterable[ImageRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_parts(records))


def _parse_line(line: str, lineno: int) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise InputError(f"line {lineno}: not valid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise InputError(f"line {lineno}: expected a JSON object")
    missing = [k for k in PART_FIELDS if k not in obj]
    if missing:
        raise InputError(f"line {lineno}: missing fields {missing}")
    unknown = sorted(set(obj) - set(PART_FIELDS))
    if unknown:
        warnings.warn(f"line {lineno}: ignoring unknown fields {unknown}")
    for k in _INT_FIELDS:
        v = obj[k]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
            raise InputError(f"line {lineno}: field {k!r} must be an integer, got {v!r}")
        obj[k] = int(v)
    for k in _FLOAT_FIELDS:
        v = obj[k]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise InputError(f"line {lineno}: field {k!r} must be a finite number, got {v!r}")
        obj[k] = float(v)
    if obj["layer"] < 1:
        raise InputError(f"line {lineno}: layer must be >= 1, got {obj['layer']}")
    return obj


def loads_parts(text: str) -> List[ImageRecord]:
    meta: Dict[str, dict] = {}
    parts: Dict[str, List[PartRealization]] = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        obj = _parse_line(line, lineno)
        key = obj["image_id"]
        head = (obj["object_id"], obj["category"], obj["pose_deg"], obj["img_w"], obj["img_h"])
        if key in meta and meta[key]["head"] != head:
            raise InputError(f"line {lineno}: image {key!r} metadata disagrees with earlier lines")
        meta.setdefault(key, {"head": head, "line": lineno})
        try:
            part = PartRealization(image_id=key, layer=obj["layer"], part_id=obj["part_id"],
                                   x=obj["x"], y=obj["y"], score=obj["score"])
        except InputError as exc:
            raise InputError(f"line {lineno}: {exc}") from None
        parts.setdefault(key, []).append(part)
    records = []
    for key, m in meta.items():
        object_id, category, pose, w, h = m["head"]
        try:
            records.append(ImageRecord(image_id=key, object_id=object_id, category=category,
                                       pose=pose, parts=tuple(parts[key]),
                                       image_width=w, image_height=h))
        except InputError as exc:
            raise InputError(f"line {m['line']}: {exc}") from None
    return records


def read_parts(path) -> List[ImageRecord]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        text = fh.read()
    return loads_parts(text)


def records_digest(records: Iterable[ImageRecord]) -> str:
    return hashlib.sha256(dumps_parts(records).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# manifests

def save_manifest(manifest: DatasetManifest, path, parts_name="parts.jsonl",
                  rasters: Optional[Dict[str, str]] = None) -> None:
    """Write ``manifest.json`` plus its part file next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_parts(manifest.records, path.parent / parts_name)
    doc = {
        "L": manifest.n_layers,
        "categories": list(manifest.categories),
        "records": [parts_name],
        "splits": {name: {k: list(v) for k, v in split.items()}
                   for name, split in manifest.splits.items()},
    }
    if rasters:
        doc["rasters"] = dict(rasters)
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc.msg})") from None
    for key in ("L", "records"):
        if key not in doc:
            raise InputError(f"{path}: manifest lacks {key!r}")
    records: List[ImageRecord] = []
    for rel in doc["records"]:
        records.extend(read_parts(path.parent / rel))
    splits = {name: {k: tuple(v) for k, v in split.items()}
              for name, split in doc.get("splits", {}).items()}
    return DatasetManifest(n_layers=int(doc["L"]), records=tuple(records),
                           categories=tuple(doc.get("categories", ())), splits=splits)


def manifest_rasters(path) -> Dict[str, Path]:
    """Optional ``image_id -> raster path`` map stored in a manifest."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    return {k: path.parent / v for k, v in doc.get("rasters", {}).items()}


# ---------------------------------------------------------------------------
# models

def _per_group(w, sizes):
    out, start = [], 0
    for s in sizes:
        out.append([float(v) for v in w[start:start + s]])
        start += s
    return out


def model_to_dict(model, feature_config: Optional[dict] = None) -> dict:
    doc = {"format": "hcpose-model", "version": MODEL_FORMAT_VERSION}
    if isinstance(model, PoseModel):
        doc["task"] = "pose"
        doc["omega"] = _per_group(model.omega, model.group_sizes)
        doc["z_mean"] = float(model.z_mean)
        doc["lambda"] = float(model.lam)
    elif isinstance(model, CategoryModel):
        doc["task"] = "category"
        doc["classes"] = [int(c) for c in model.classes]
        doc["omega"] = [_per_group(row, model.group_sizes) for row in model.omega]
        doc["lambda"] = [float(v) for v in model.lam]
    else:
        raise TypeError(f"not a model: {type(model).__name__}")
    doc["groups"] = [int(s) for s in model.group_sizes]
    doc["col_means"] = [float(v) for v in model.col_means]
    doc["col_scales"] = [float(v) for v in model.col_scales]
    doc["rho"] = float(model.rho)
    doc["alpha"] = None if model.alpha is None else float(model.alpha)
    doc["feature_config"] = feature_config or {}
    return doc


def model_from_dict(doc: dict):
    if doc.get("format") != "hcpose-model":
        raise InputError("not an hcpose model document")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise InputError(f"unsupported model version {doc.get('version')!r}")
    sizes = [int(s) for s in doc["groups"]]
    common = dict(group_sizes=sizes, col_means=doc["col_means"], col_scales=doc["col_scales"],
                  rho=doc["rho"], alpha=doc.get("alpha"))
    if doc["task"] == "pose":
        omega = np.concatenate([np.asarray(g, dtype=float) for g in doc["omega"]])
        return PoseModel(omega=omega, z_mean=doc["z_mean"], lam=doc["lambda"], **common)
    if doc["task"] == "category":
        omega = np.vstack([np.concatenate([np.asarray(g, dtype=float) for g in row])
                           for row in doc["omega"]])
        return CategoryModel(omega=omega, classes=doc["classes"], lam=doc["lambda"], **common)
    raise InputError(f"unknown model task {doc['task']!r}")


def save_model(model, path, feature_config: Optional[dict] = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, feature_config), indent=1) + "\n",
                          encoding="utf-8")


def load_model(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return model_from_dict(doc), doc.get("feature_config", {})


# ---------------------------------------------------------------------------
# PGM (binary P5) rasters

def _pgm_tokens(data: bytes, count: int):
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise InputError("truncated PGM header")
        tokens.append(data[start:i])
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM as a float array scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise InputError(f"{path}: only binary PGM (P5) is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise InputError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = width * height * dtype.itemsize
    if len(data) - offset < n:
        raise InputError(f"{path}: truncated pixel data")
    img = np.frombuffer(data[offset:offset + n], dtype=dtype).reshape(height, width)
    return img.astype(float) / maxval


def write_pgm(path, image, maxval=255) -> None:
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    h, w = img.shape
    q = np.floor(img * maxval + 0.5)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

