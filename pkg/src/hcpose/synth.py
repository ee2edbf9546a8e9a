"""Deterministic synthetic turntable data with layered part realizations.

An object is a cloud of 3-D anchor points (virtual millimetres) built from
simple primitives, plus optional asymmetry features that are only seen
over an arc of turntable poses (a cup handle, say). Rendering rotates the
object about its vertical axis, projects orthographically with a fixed
camera elevation, and abstracts the projected points into layers: layer
``l`` holds the centroids of consecutive runs of ``2**(l-1)`` layer-1
points, so part counts shrink with depth as in a learned part hierarchy.
Anchors are treated as always visible (a wire-frame object).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .types import DatasetManifest, ImageRecord, InputError, PartRealization, check_disjoint_split

TEMPLATE_NAMES = ("cup", "ball", "box", "car", "cow", "duck")
DEFAULT_POSES = tuple(float(p) for p in range(0, 360, 5))


@dataclass(frozen=True)
class SyntheticObjectSpec:
    category: int
    name: str
    anchors: np.ndarray
    asymmetry: Tuple[Tuple[np.ndarray, Tuple[float, float]], ...] = ()
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        anchors = np.asarray(self.anchors, dtype=float)
        if anchors.ndim != 2 or anchors.shape[1] != 3 or anchors.shape[0] < 4:
            raise InputError("an object needs at least 4 anchors given as 3-D points")
        for _, (a, b) in self.asymmetry:
            if not (0 <= a < 360 and 0 <= b < 360):
                raise InputError(f"visibility arc [{a}, {b}] outside [0, 360)")


@dataclass(frozen=True)
class TurntableSpec:
    poses: Tuple[float, ...] = DEFAULT_POSES
    width: int = 128
    height: int = 128
    elevation_deg: float = 20.0
    scale: float = 1.0

    def __post_init__(self):
        if len(self.poses) < 2:
            raise InputError("a turntable needs at least two poses")
        if any(not 0 <= p < 360 for p in self.poses):
            raise InputError("poses must lie in [0, 360)")


# ---------------------------------------------------------------------------
# templates

def load_template(name: str) -> dict:
    """Template description shipped with the package (see ``templates/``)."""
    if name not in TEMPLATE_NAMES:
        raise InputError(f"unknown template {name!r}; choose from {TEMPLATE_NAMES}")
    text = resources.files("hcpose").joinpath("templates").joinpath(f"{name}.json").read_text("utf-8")
    return json.loads(text)


def _primitive_points(p: dict) -> np.ndarray:
    kind = p["type"]
    c = np.asarray(p.get("center", (0, 0, 0)), dtype=float)
    if kind == "points":
        return np.asarray(p["points"], dtype=float).reshape(-1, 3)
    if kind == "cylinder":
        az = 2 * np.pi * np.arange(p["n_around"]) / p["n_around"]
        ys = np.linspace(-p["height"] / 2, p["height"] / 2, p["n_rings"])
        pts = [(p["radius"] * np.sin(a), y, p["radius"] * np.cos(a)) for y in ys for a in az]
        return np.array(pts) + c
    if kind == "ring":
        t = 2 * np.pi * np.arange(p["n"]) / p["n"]
        u, v = np.cos(t) * p["radius"], np.sin(t) * p["radius"]
        zero = np.zeros_like(t)
        cols = {"x": (zero, u, v), "y": (u, zero, v), "z": (u, v, zero)}[p["axis"]]
        return np.column_stack(cols) + c
    if kind == "ellipsoid":
        rx, ry, rz = p["radii"]
        phase = np.radians(p.get("phase", 0.0))
        az = phase + 2 * np.pi * np.arange(p["n_around"]) / p["n_around"]
        lat = np.linspace(-np.pi / 2, np.pi / 2, p["n_rings"] + 2)[1:-1]
        pts = [(rx * np.cos(b) * np.sin(a), ry * np.sin(b), rz * np.cos(b) * np.cos(a))
               for b in lat for a in az]
        return np.array(pts) + c
    if kind == "box":
        sx, sy, sz = (s / 2 for s in p["size"])
        corners = np.array([(x, y, z) for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
        edges = [(i, j) for i in range(8) for j in range(i + 1, 8)
                 if np.count_nonzero(corners[i] != corners[j]) == 1]
        t = np.linspace(0, 1, p["n_per_edge"] + 2)[:-1]
        pts = [corners[i] + s * (corners[j] - corners[i]) for i, j in edges for s in t]
        return np.unique(np.round(np.array(pts), 12), axis=0) + c
    if kind == "arc":
        # C-shaped loop leaving the body at azimuth ``azimuth``
        a = np.radians(p["azimuth"])
        d = np.array([np.sin(a), 0.0, np.cos(a)])
        t = np.linspace(-np.pi / 2, np.pi / 2, p["n"])
        radial = p["inner_radius"] + p["reach"] * np.cos(t)
        vertical = 0.5 * p["span"] * np.sin(t)
        return radial[:, None] * d + vertical[:, None] * np.array([0.0, 1.0, 0.0]) + c
    raise InputError(f"unknown primitive type {kind!r}")


def template_points(template: dict):
    anchors = np.vstack([_primitive_points(p) for p in template["primitives"]])
    asym = tuple((np.vstack([_primitive_points(p) for p in feat["primitives"]]),
                  tuple(float(v) for v in feat["arc"]))
                 for feat in template.get("asymmetry", ()))
    return anchors, asym


def make_object(template, category: int, index: int, seed: int = 0,
                noise: float = 0.5) -> SyntheticObjectSpec:
    """One object instance: the template with per-object scale and anchor
    perturbations drawn from ``(seed, category, index)``."""
    if isinstance(template, str):
        template = load_template(template)
    anchors, asym = template_points(template)
    var = template.get("variation", {})
    ss = np.random.SeedSequence([int(seed), int(category), int(index)])
    rng = np.random.default_rng(ss)
    scale = 1.0 + var.get("scale", 0.0) * rng.uniform(-1, 1, size=3)
    jitter = var.get("anchor_jitter", 0.0)
    anchors = anchors * scale + jitter * rng.standard_normal(anchors.shape)
    asym = tuple((pts * scale + jitter * rng.standard_normal(pts.shape), arc) for pts, arc in asym)
    return SyntheticObjectSpec(category=category, name=f"{template['name']}-{index:02d}",
                               anchors=anchors, asymmetry=asym, noise=noise,
                               seed=int(ss.generate_state(1)[0]))


# ---------------------------------------------------------------------------
# rendering

def in_arc(pose: float, arc: Tuple[float, float]) -> bool:
    a, b = arc
    pose = pose % 360
    return a <= pose <= b if a <= b else (pose >= a or pose <= b)


def project(points, pose: float, tt: TurntableSpec) -> np.ndarray:
    """Rotate about the vertical axis by ``pose`` and project orthographically.

    Returns image-centered (x, y) pixel coordinates.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    th = np.radians(pose)
    el = np.radians(tt.elevation_deg)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    xr = x * np.cos(th) + z * np.sin(th)
    zr = -x * np.sin(th) + z * np.cos(th)
    u = xr
    v = y * np.cos(el) - zr * np.sin(el)
    return tt.scale * np.column_stack([u, v])


def visible_points(obj: SyntheticObjectSpec, pose: float) -> np.ndarray:
    pts = [np.asarray(obj.anchors, dtype=float)]
    pts.extend(p for p, arc in obj.asymmetry if in_arc(pose, arc))
    return np.vstack(pts)


def layer_positions(projected: np.ndarray, layer: int) -> np.ndarray:
    """Centroids of consecutive runs of ``2**(layer-1)`` points."""
    k = 2 ** (layer - 1)
    n = projected.shape[0]
    return np.array([projected[i:i + k].mean(axis=0) for i in range(0, n, k)]).reshape(-1, 2)


def render_parts(obj: SyntheticObjectSpec, pose: float, tt: TurntableSpec = TurntableSpec(),
                 n_layers: int = 4, object_id: Optional[str] = None) -> ImageRecord:
    if not any(np.isclose(pose, p) for p in tt.poses):
        raise InputError(f"pose {pose} is not on the turntable")
    proj = project(visible_points(obj, pose), pose, tt)
    rng = np.random.default_rng([obj.seed, int(round(pose * 1000))])
    object_id = object_id or obj.name
    image_id = f"{object_id}-p{int(round(pose * 10)):04d}"
    parts = []
    for layer in range(1, n_layers + 1):
        pos = layer_positions(proj, layer)
        if obj.noise > 0:
            pos = pos + obj.noise * rng.standard_normal(pos.shape)
        for k, (x, y) in enumerate(pos):
            parts.append(PartRealization(image_id=image_id, layer=layer, part_id=k,
                                         x=float(x), y=float(y), score=1.0))
    inside = [p for p in parts if -tt.width / 2 <= p.x < tt.width / 2
              and -tt.height / 2 <= p.y < tt.height / 2]
    if not inside:
        raise InputError(f"object {object_id} falls outside the {tt.width}x{tt.height} frame")
    return ImageRecord(image_id=image_id, object_id=object_id, category=obj.category,
                       pose=float(pose), parts=tuple(parts),
                       image_width=tt.width, image_height=tt.height)


def render_raster(record: ImageRecord, sigma: float = 1.2) -> np.ndarray:
    """Debug raster in [0, 1]: Gaussian blobs at layer-1 part positions."""
    H, W = record.image_height, record.image_width
    img = np.zeros((H, W))
    rows, cols = np.mgrid[0:H, 0:W]
    for p in record.layer_parts(1):
        c = p.x + W / 2
        r = (H - 1) / 2 - p.y
        img += np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma ** 2))
    m = img.max()
    return img / m if m > 0 else img


# ---------------------------------------------------------------------------
# datasets

def generate_dataset(categories: Sequence, objects_per_category,
                     tt: TurntableSpec = TurntableSpec(), n_layers: int = 4,
                     seed: int = 0, noise: float = 0.5) -> DatasetManifest:
    """Render every object of every category at every turntable pose.

    ``categories`` holds template names or template dicts; category labels
    follow their order starting at 1. ``objects_per_category`` is one
    count for all categories or one count per category. Records are ordered
    by category, object and pose.
    """
    if not categories:
        raise InputError("need at least one category")
    counts = ([int(objects_per_category)] * len(categories)
              if np.isscalar(objects_per_category) else [int(c) for c in objects_per_category])
    if len(counts) != len(categories) or min(counts) < 1:
        raise InputError(f"bad objects_per_category {objects_per_category!r}")
    records, names = [], []
    for ci, (template, count) in enumerate(zip(categories, counts), start=1):
        if isinstance(template, str):
            template = load_template(template)
        names.append(template["name"])
        for k in range(count):
            obj = make_object(template, ci, k, seed=seed, noise=noise)
            records.extend(render_parts(obj, pose, tt, n_layers) for pose in tt.poses)
    return DatasetManifest(n_layers=n_layers, records=tuple(records), categories=tuple(names))


def object_wise_split(manifest: DatasetManifest, category: int, n_train: int, n_test: int,
                      rng: np.random.Generator) -> Dict[str, Tuple[str, ...]]:
    """Random train/test objects drawn from a single category."""
    objs = manifest.objects_by_category().get(category, [])
    if len(objs) < n_train + n_test:
        raise InputError(
            f"category {category} has {len(objs)} objects, {n_train + n_test} requested")
    pick = rng.permutation(len(objs))
    train = tuple(objs[i] for i in sorted(pick[:n_train]))
    test = tuple(objs[i] for i in sorted(pick[n_train:n_train + n_test]))
    check_disjoint_split(train, test)
    return {"train": train, "test": test}


def category_wise_split(manifest: DatasetManifest, categories: Sequence[int],
                        n_train: Optional[int], n_test: int,
                        rng: np.random.Generator) -> Dict[str, Tuple[str, ...]]:
    """Per category, ``n_test`` random test objects and ``n_train`` train
    objects (``None``: every remaining object, the unbalanced protocol)."""
    by_cat = manifest.objects_by_category()
    train: List[str] = []
    test: List[str] = []
    for c in categories:
        objs = by_cat.get(c, [])
        need = n_test + (n_train if n_train is not None else 1)
        if len(objs) < need:
            raise InputError(f"category {c} has {len(objs)} objects, {need} needed")
        pick = rng.permutation(len(objs))
        test.extend(objs[i] for i in sorted(pick[:n_test]))
        rest = pick[n_test:] if n_train is None else pick[n_test:n_test + n_train]
        train.extend(objs[i] for i in sorted(rest))
    check_disjoint_split(train, test)
    return {"train": tuple(train), "test": tuple(test)}
