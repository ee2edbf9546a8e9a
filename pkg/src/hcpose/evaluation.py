"""Metrics, greedy hyperparameter search and the experiment protocols.

Pose error is the circular absolute difference in degrees; the squared
variant is available through ``squared=True``. Experiments produce a
:class:`ResultTable` that can be written as CSV, JSON and two SVG plots.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from .estimators import (RelativeL1Logistic, RelativeLasso, SharingGroupLassoRegressor,
                         SharingL1LogisticClassifier)
from .features import (HogConfig, HopConfig, hog_descriptor, hop_features, part_graph_weights,
                       part_hog_features, von_neumann_entropy)
from .types import DatasetManifest, ImageRecord, InputError

PROTOCOLS = ("object-wise", "category-wise-balanced", "category-wise-unbalanced")
TASKS = ("pose", "category")
DEFAULT_GRID = (8, 16, 32, 64)
ALPHA_GRID = tuple(10.0 ** k for k in range(-6, 2))
CSV_HEADER = ("protocol", "C", "n_train", "method", "repeat", "metric", "value")
MEAN_METRICS = ("pose_error", "pose_error_sq", "accuracy", "cv_error")


# ---------------------------------------------------------------------------
# metrics

def pose_error(theta, theta_hat, squared=False):
    """Circular absolute error in degrees, in [0, 180].

    ``squared=True`` returns its square instead.
    """
    d = np.abs(np.asarray(theta, dtype=float) - np.asarray(theta_hat, dtype=float)) % 360.0
    e = np.minimum(d, 360.0 - d)
    if squared:
        e = e * e
    return float(e) if np.ndim(e) == 0 else e


def mean_pose_error(theta, theta_hat, squared=False) -> float:
    e = np.atleast_1d(pose_error(theta, theta_hat, squared))
    if e.size == 0:
        raise InputError("no pose predictions to score")
    return float(e.mean())


def accuracy(preds, labels) -> float:
    """Percentage of predictions equal to their labels."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise InputError(f"{preds.shape[0]} predictions for {labels.shape[0]} labels")
    if preds.size == 0:
        raise InputError("accuracy of an empty prediction set")
    return 100.0 * float(np.count_nonzero(preds == labels)) / preds.size


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ExperimentConfig:
    """One experiment protocol with its split schedule and search grids.

    ``dataset`` describes the synthetic benchmark (``templates``,
    ``objects_per_category``, ``noise``, ``width``, ``height``,
    ``pose_step``) and is ignored when a manifest is passed to
    :func:`run_experiment`.
    """

    protocol: str = "category-wise-balanced"
    task: str = "pose"
    n_train: Tuple[int, ...] = (1, 2, 3, 4)
    n_test: int = 1
    c_schedule: Tuple[int, ...] = (2, 3, 4, 5)
    repeats: int = 2
    seed: int = 0
    n_layers: int = 4
    grid_bsize: Tuple[float, ...] = DEFAULT_GRID
    grid_m: Tuple[int, ...] = DEFAULT_GRID
    grid_alpha: Tuple[float, ...] = ALPHA_GRID
    methods: Tuple[str, ...] = ("proposed", "single-layer")
    n_folds: int = 3
    squared_error: bool = False
    solver: Dict[str, float] = field(default_factory=lambda: {
        "rho": 1.0, "max_iter": 1000, "tol": 1e-4, "inner_iter": 500})
    dataset: Dict[str, object] = field(default_factory=lambda: {
        "templates": ["cup", "cow", "car", "duck", "box"], "objects_per_category": 5,
        "noise": 0.5, "width": 128, "height": 128, "pose_step": 5})

    def __post_init__(self):
        for name in ("n_train", "c_schedule", "grid_bsize", "grid_m", "grid_alpha", "methods"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.protocol not in PROTOCOLS:
            raise InputError(f"unknown protocol {self.protocol!r}")
        if self.task not in TASKS:
            raise InputError(f"unknown task {self.task!r}")
        if self.repeats < 1:
            raise InputError("repeats must be >= 1")
        if not (self.grid_bsize and self.grid_m and self.grid_alpha):
            raise InputError("search grids must be non-empty")
        if min(self.grid_bsize) <= 0 or min(self.grid_m) < 1 or min(self.grid_alpha) < 0:
            raise InputError("grid values out of range")
        if self.protocol != "category-wise-unbalanced" and (
                not self.n_train or min(self.n_train) < 1):
            raise InputError("n_train needs positive object counts")
        if self.n_test < 1:
            raise InputError("n_test must be >= 1")
        if self.protocol != "object-wise" and (not self.c_schedule or min(self.c_schedule) < 1):
            raise InputError("c_schedule needs positive category counts")
        if self.n_folds < 2:
            raise InputError("n_folds must be >= 2")
        unknown = set(self.methods) - {"proposed", "single-layer", "hog"}
        if unknown:
            raise InputError(f"unknown methods {sorted(unknown)}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise InputError(f"unknown experiment config keys {sorted(unknown)}")
        doc = dict(doc)
        if "solver" in doc:
            doc["solver"] = {**cls().solver, **doc["solver"]}
        if "dataset" in doc:
            doc["dataset"] = {**cls().dataset, **doc["dataset"]}
        return cls(**doc)


def load_experiment_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc.msg})") from None
    return ExperimentConfig.from_dict(doc)


def default_benchmark_path() -> Path:
    """The shipped synthetic benchmark configuration."""
    from importlib import resources
    return Path(str(resources.files("hcpose").joinpath("configs").joinpath("benchmark.json")))


def synthetic_manifest(cfg: ExperimentConfig) -> DatasetManifest:
    from .synth import TurntableSpec, generate_dataset
    ds = cfg.dataset
    step = float(ds.get("pose_step", 5))
    poses = tuple(float(p) for p in np.arange(0.0, 360.0, step))
    tt = TurntableSpec(poses=poses, width=int(ds.get("width", 128)),
                       height=int(ds.get("height", 128)))
    return generate_dataset(list(ds["templates"]), ds["objects_per_category"], tt,
                            n_layers=cfg.n_layers, seed=cfg.seed,
                            noise=float(ds.get("noise", 0.5)))


# ---------------------------------------------------------------------------
# features

class FeatureBank:
    """Raw features of a fixed record list, cached per hyperparameter.

    HOP depends on ``(bSize, M)``, part-HOG on ``M`` only and the entropy on
    neither, so each piece is computed once. ``rasters`` maps an image id
    to a grayscale array (or is a callable of the record) and enables the
    raster HOG baseline.
    """

    def __init__(self, records: Sequence[ImageRecord], n_layers: int, rasters=None):
        self.records = list(records)
        if not self.records:
            raise InputError("feature bank needs records")
        sizes = {(r.image_width, r.image_height) for r in self.records}
        if len(sizes) != 1:
            raise InputError(f"records mix image sizes {sorted(sizes)}")
        (self.width, self.height), = sizes
        self.n_layers = n_layers
        self.rasters = rasters
        self._pos = [[self._positions(r, l) for l in range(1, n_layers + 1)] for r in self.records]
        self._hop: Dict[Tuple[float, int], np.ndarray] = {}
        self._hog: Dict[int, np.ndarray] = {}
        self._ent: Optional[np.ndarray] = None
        self._raster_hog: Dict[int, np.ndarray] = {}

    @staticmethod
    def _positions(record, layer):
        parts = record.layer_parts(layer)
        pos = np.array([(p.x, p.y) for p in parts], dtype=float).reshape(-1, 2)
        return pos, np.array([p.score for p in parts], dtype=float)

    def _hop_block(self, b_size, M):
        key = (float(b_size), int(M))
        if key not in self._hop:
            cfg = HopConfig(M=int(M), b_size=float(b_size))
            self._hop[key] = np.array([
                [hop_features(pos, self.width, self.height, cfg, s) for pos, s in layers]
                for layers in self._pos])
        return self._hop[key]

    def _hog_block(self, M):
        if int(M) not in self._hog:
            cfg = HogConfig.from_hop(HopConfig(M=int(M)), self.width)
            self._hog[int(M)] = np.array([
                [part_hog_features(pos, self.width, self.height, cfg, s) for pos, s in layers]
                for layers in self._pos])
        return self._hog[int(M)]

    def _ent_block(self):
        if self._ent is None:
            self._ent = np.array([[von_neumann_entropy(part_graph_weights(pos))
                                   for pos, _ in layers] for layers in self._pos])
        return self._ent

    def layers(self, b_size, M) -> Tuple[np.ndarray, List[int]]:
        """``(X, group_sizes)`` with columns ``[hop | hog | ent]`` per layer."""
        hop, hog, ent = self._hop_block(b_size, M), self._hog_block(M), self._ent_block()
        blocks = [np.hstack([hop[:, l], hog[:, l], ent[:, l:l + 1]])
                  for l in range(self.n_layers)]
        return np.hstack(blocks), [b.shape[1] for b in blocks]

    def raster_hog(self, M) -> np.ndarray:
        if self.rasters is None:
            raise InputError("no raster images available")
        if int(M) not in self._raster_hog:
            cfg = HogConfig.from_hop(HopConfig(M=int(M)), self.width)
            get = self.rasters if callable(self.rasters) else (lambda r: self.rasters[r.image_id])
            self._raster_hog[int(M)] = np.array(
                [hog_descriptor(np.asarray(get(r), dtype=float), cfg) for r in self.records])
        return self._raster_hog[int(M)]

    def warm(self, grid_bsize, grid_m, raster=False):
        for M in grid_m:
            self._hog_block(M)
            for b in grid_bsize:
                self._hop_block(b, M)
            if raster and self.rasters is not None:
                self.raster_hog(M)
        self._ent_block()


# ---------------------------------------------------------------------------
# methods

@dataclass(frozen=True)
class Method:
    """A model family: ``kind`` is "proposed", "layer" or "hog"."""

    name: str
    kind: str
    layer: Optional[int] = None

    @property
    def uses_bsize(self) -> bool:
        return self.kind != "hog"


def expand_methods(names: Sequence[str], task: str, n_layers: int) -> List[Method]:
    single = "lasso" if task == "pose" else "logistic"
    out = []
    for name in names:
        if name == "proposed":
            out.append(Method("proposed", "proposed"))
        elif name == "single-layer":
            out.extend(Method(f"{single}-l{l}", "layer", l) for l in range(1, n_layers + 1))
        elif name == "hog":
            out.append(Method(f"hog-{single}", "hog"))
        else:
            raise InputError(f"unknown method {name!r}")
    return out


def _design(method: Method, bank: FeatureBank, b_size, M):
    if method.kind == "hog":
        return bank.raster_hog(M), None
    X, sizes = bank.layers(b_size, M)
    if method.kind == "layer":
        start = sum(sizes[:method.layer - 1])
        return X[:, start:start + sizes[method.layer - 1]], None
    return X, sizes


def _estimator(method: Method, task: str, alpha: float, groups, solver: Mapping):
    if method.kind == "proposed":
        common = dict(groups=groups, alpha=alpha, rho=solver["rho"], max_iter=solver["max_iter"],
                      tol=solver["tol"], inner_iter=solver["inner_iter"])
        if task == "pose":
            return SharingGroupLassoRegressor(**common)
        return SharingL1LogisticClassifier(**common)
    return RelativeLasso(alpha=alpha) if task == "pose" else RelativeL1Logistic(alpha=alpha)


def _fit_predict(method, task, alpha, groups, solver, X_tr, y_tr, X_te, est=None):
    if task == "category" and np.unique(y_tr).size < 2:
        # a training fold with a single class can only predict that class
        return np.full(X_te.shape[0], y_tr[0])
    if est is None:
        est = _estimator(method, task, alpha, groups, solver)
    else:
        est.set_params(alpha=alpha)
    return est.fit(X_tr, y_tr).predict(X_te)


def _error(task, y_true, y_pred, squared=False) -> float:
    if task == "pose":
        return mean_pose_error(y_true, y_pred, squared)
    return 100.0 - accuracy(y_pred, y_true)


# ---------------------------------------------------------------------------
# cross-validation and the greedy search

def object_folds(object_ids: Sequence[str], n_folds: int = 3,
                 rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """Boolean held-out masks over rows, never splitting an object.

    Objects are shuffled and dealt round-robin into ``n_folds`` folds; if a
    fold would get fewer than two objects, every object becomes its own
    fold. With a single object the views are dealt into folds instead.
    """
    ids = np.asarray(object_ids)
    objs = sorted(set(ids.tolist()))
    if len(objs) == 1:
        rows = np.arange(ids.size)
        k = min(n_folds, ids.size)
        if k < 2:
            raise InputError("need at least two training rows for cross-validation")
        return [rows % k == f for f in range(k)]
    if len(objs) < 2 * n_folds:
        return [ids == o for o in objs]
    order = (rng or np.random.default_rng(0)).permutation(len(objs))
    fold_of = {objs[i]: j % n_folds for j, i in enumerate(order)}
    assign = np.array([fold_of[o] for o in ids.tolist()])
    return [assign == f for f in range(n_folds)]


@dataclass
class GridSearchResult:
    b_size: float
    M: int
    alpha: float
    cv_error: float
    history: List[Tuple[float, int, float, float]] = field(default_factory=list)


def _lower_median(values):
    v = sorted(values)
    return v[(len(v) - 1) // 2]


def greedy_search(evaluate: Callable[[float, int, float], float], grid_bsize, grid_m,
                  grid_alpha, sweep_bsize: bool = True) -> GridSearchResult:
    """Coordinate-wise greedy minimization of ``evaluate(bSize, M, alpha)``.

    M and alpha start at their grid medians; bSize is swept first, then M,
    then alpha, each fixed at its best value before the next sweep. Ties go
    to the smaller value. Points are evaluated at most once and a grid with
    a single point everywhere is returned without evaluating anything.
    """
    grid_bsize, grid_m, grid_alpha = sorted(grid_bsize), sorted(grid_m), sorted(grid_alpha)
    point = [grid_bsize[0], _lower_median(grid_m), _lower_median(grid_alpha)]
    if len(grid_bsize) == len(grid_m) == len(grid_alpha) == 1:
        return GridSearchResult(point[0], point[1], point[2], float("nan"))
    seen: Dict[Tuple, float] = {}
    history = []

    def score(p):
        key = tuple(p)
        if key not in seen:
            seen[key] = float(evaluate(*p))
            history.append((p[0], p[1], p[2], seen[key]))
        return seen[key]

    for axis, grid in ((0, grid_bsize if sweep_bsize else grid_bsize[:1]),
                       (1, grid_m), (2, grid_alpha)):
        best_val, best_err = grid[0], math.inf
        for value in grid:
            trial = list(point)
            trial[axis] = value
            err = score(trial)
            if err < best_err:
                best_val, best_err = value, err
        point[axis] = best_val
    return GridSearchResult(point[0], point[1], point[2], score(point), history)


def greedy_grid_search(records: Sequence[ImageRecord], task: str = "pose",
                       grids: Optional[Mapping[str, Sequence]] = None,
                       method: Method = Method("proposed", "proposed"), n_layers: int = 4,
                       solver: Optional[Mapping] = None, n_folds: int = 3, seed: int = 0,
                       bank: Optional[FeatureBank] = None,
                       rows: Optional[np.ndarray] = None) -> GridSearchResult:
    """Pick ``(bSize, M, alpha)`` by object-wise cross-validated error.

    ``grids`` has keys ``"bsize"``, ``"M"`` and ``"alpha"``. When ``bank``
    is given, ``rows`` selects the training records inside it.
    """
    grids = dict(grids or {})
    gb = grids.get("bsize", DEFAULT_GRID)
    gm = grids.get("M", DEFAULT_GRID)
    ga = grids.get("alpha", ALPHA_GRID)
    if not (len(gb) and len(gm) and len(ga)):
        raise InputError("search grids must be non-empty")
    solver = {**ExperimentConfig().solver, **(solver or {})}
    if bank is None:
        bank = FeatureBank(records, n_layers)
        rows = np.arange(len(bank.records))
    elif rows is None:
        rows = np.arange(len(bank.records))
    recs = [bank.records[i] for i in rows]
    y = np.array([r.pose if task == "pose" else r.category for r in recs])
    folds = object_folds([r.object_id for r in recs], n_folds, np.random.default_rng(seed))

    # fold designs and warm estimators for the current (bSize, M) only;
    # the alpha sweep then refits on unchanged matrices
    current: Dict[str, object] = {"key": None}

    def evaluate(b_size, M, alpha):
        key = (b_size if method.uses_bsize else None, M)
        if current["key"] != key:
            X, groups = _design(method, bank, b_size, M)
            X = X[rows]
            warm = method.kind == "proposed" and task == "pose"
            current.update(key=key, groups=groups, data=[
                (X[~held], y[~held], X[held], y[held],
                 _estimator(method, task, alpha, groups, solver).set_params(warm_start=True)
                 if warm else None) for held in folds])
        errs, weights = [], []
        for X_tr, y_tr, X_te, y_te, est in current["data"]:
            pred = _fit_predict(method, task, alpha, current["groups"], solver,
                                X_tr, y_tr, X_te, est)
            errs.append(_error(task, y_te, pred))
            weights.append(y_te.size)
        return float(np.average(errs, weights=weights))

    return greedy_search(evaluate, gb, gm, ga, sweep_bsize=method.uses_bsize)


# ---------------------------------------------------------------------------
# results

@dataclass(frozen=True)
class ResultRow:
    protocol: str
    C: int
    n_train: str
    method: str
    repeat: str
    metric: str
    value: object


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ResultTable:
    """Long-format result rows keyed by (protocol, C, n_train, method)."""

    rows: List[ResultRow] = field(default_factory=list)

    def add(self, protocol, C, n_train, method, repeat, metric, value):
        self.rows.append(ResultRow(protocol, int(C), str(n_train), method, str(repeat),
                                   metric, value))

    def with_means(self) -> "ResultTable":
        """Copy with one ``repeat="mean"`` row per numeric cell."""
        groups: Dict[Tuple, List[float]] = {}
        order = []
        for r in self.rows:
            if r.metric in MEAN_METRICS and r.repeat != "mean":
                key = (r.protocol, r.C, r.n_train, r.method, r.metric)
                if key not in groups:
                    groups[key] = []
                    order.append(key)
                groups[key].append(float(r.value))
        out = ResultTable([r for r in self.rows if r.repeat != "mean"])
        for key in order:
            p, C, n, m, metric = key
            vals = [v for v in groups[key] if math.isfinite(v)]
            if vals:
                out.add(p, C, n, m, "mean", metric, float(np.mean(vals)))
        return out

    def values(self, metric, method=None, **match) -> List[float]:
        out = []
        for r in self.rows:
            if r.metric != metric or r.repeat == "mean":
                continue
            if method is not None and r.method != method:
                continue
            if any(str(getattr(r, k)) != str(v) for k, v in match.items()):
                continue
            out.append(float(r.value))
        return out

    def mean(self, metric, method=None, **match) -> float:
        vals = self.values(metric, method, **match)
        return float(np.mean(vals)) if vals else float("nan")

    def methods(self) -> List[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def failures(self) -> List[ResultRow]:
        return [r for r in self.rows if r.metric == "failed"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.protocol, r.C, r.n_train, r.method, r.repeat, r.metric, _fmt(r.value)])
        return buf.getvalue()

    def to_json(self, config: Optional[dict] = None) -> str:
        doc = {"config": config or {}, "header": list(CSV_HEADER),
               "rows": [[r.protocol, r.C, r.n_train, r.method, r.repeat, r.metric, r.value]
                        for r in self.rows]}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# experiments

@dataclass(frozen=True)
class _Cell:
    C: int
    n_train: str
    repeat: int
    train: Tuple[str, ...]
    test: Tuple[str, ...]


def plan_splits(cfg: ExperimentConfig, manifest: DatasetManifest) -> List[_Cell]:
    """Every (C, n_train, repeat) split of the protocol, drawn up front so
    missing objects fail before any training."""
    from .synth import category_wise_split, object_wise_split
    cells = []
    if cfg.protocol == "object-wise":
        for c in sorted(manifest.objects_by_category()):
            for n in cfg.n_train:
                for r in range(cfg.repeats):
                    rng = np.random.default_rng([cfg.seed, c, n, r])
                    sp = object_wise_split(manifest, c, n, cfg.n_test, rng)
                    cells.append(_Cell(c, str(n), r, sp["train"], sp["test"]))
        return cells
    n_cats = len(manifest.objects_by_category())
    schedule = cfg.n_train if cfg.protocol == "category-wise-balanced" else (None,)
    for C in cfg.c_schedule:
        if C > n_cats:
            raise InputError(f"C={C} requested but the dataset has {n_cats} categories")
        cats = sorted(manifest.objects_by_category())[:C]
        for n in schedule:
            for r in range(cfg.repeats):
                rng = np.random.default_rng([cfg.seed, C, 0 if n is None else n, r])
                sp = category_wise_split(manifest, cats, n, cfg.n_test, rng)
                cells.append(_Cell(C, "rest" if n is None else str(n), r,
                                   sp["train"], sp["test"]))
    return cells


def _run_cell(cfg: ExperimentConfig, cell: _Cell, methods: List[Method], bank: FeatureBank,
              obj_index: np.ndarray):
    """Rows of one split: grid search, refit and test score per method."""
    out = []
    train_rows = np.flatnonzero(np.isin(obj_index, cell.train))
    test_rows = np.flatnonzero(np.isin(obj_index, cell.test))
    y_all = np.array([r.pose if cfg.task == "pose" else r.category for r in bank.records])
    grids = {"bsize": cfg.grid_bsize, "M": cfg.grid_m, "alpha": cfg.grid_alpha}
    metric = ("pose_error_sq" if cfg.squared_error else "pose_error") \
        if cfg.task == "pose" else "accuracy"
    base = (cfg.protocol, cell.C, cell.n_train)
    for m in methods:
        if m.kind == "hog" and bank.rasters is None:
            out.append((*base, m.name, cell.repeat, "failed", "no raster images"))
            continue
        try:
            best = greedy_grid_search(None, cfg.task, grids, m, cfg.n_layers, cfg.solver,
                                      cfg.n_folds, seed=cfg.seed + cell.repeat, bank=bank,
                                      rows=train_rows)
            X, groups = _design(m, bank, best.b_size, best.M)
            pred = _fit_predict(m, cfg.task, best.alpha, groups, cfg.solver,
                                X[train_rows], y_all[train_rows], X[test_rows])
        except InputError as exc:
            out.append((*base, m.name, cell.repeat, "failed", str(exc)))
            continue
        y_te = y_all[test_rows]
        value = (mean_pose_error(y_te, pred, cfg.squared_error) if cfg.task == "pose"
                 else accuracy(pred, y_te))
        out.append((*base, m.name, cell.repeat, metric, value))
        out.append((*base, m.name, cell.repeat, "cv_error", best.cv_error))
        out.append((*base, m.name, cell.repeat, "bsize", float(best.b_size)))
        out.append((*base, m.name, cell.repeat, "M", int(best.M)))
        out.append((*base, m.name, cell.repeat, "alpha", float(best.alpha)))
    return out


def run_experiment(cfg: ExperimentConfig, manifest: Optional[DatasetManifest] = None,
                   rasters=None, n_jobs: Optional[int] = None) -> ResultTable:
    """Run the protocol's split schedule for every method.

    Without ``manifest`` the synthetic benchmark described by
    ``cfg.dataset`` is generated (and, if the "hog" method is requested,
    its debug rasters are rendered). Splits run in parallel threads; rows
    are assembled in schedule order, so the table does not depend on
    ``n_jobs``.
    """
    methods = expand_methods(cfg.methods, cfg.task, cfg.n_layers)
    if manifest is None:
        manifest = synthetic_manifest(cfg)
        if any(m.kind == "hog" for m in methods) and rasters is None:
            from .synth import render_raster
            rasters = render_raster
    if manifest.n_layers < cfg.n_layers:
        raise InputError(f"dataset has {manifest.n_layers} layers, {cfg.n_layers} requested")
    cells = plan_splits(cfg, manifest)
    used = sorted({o for c in cells for o in c.train + c.test})
    records = manifest.subset(used)
    bank = FeatureBank(records, cfg.n_layers, rasters)
    bank.warm(cfg.grid_bsize, cfg.grid_m, raster=any(m.kind == "hog" for m in methods))
    obj_index = np.array([r.object_id for r in records])
    results = Parallel(n_jobs=n_jobs or 1, prefer="threads")(
        delayed(_run_cell)(cfg, c, methods, bank, obj_index) for c in cells)
    table = ResultTable()
    for rows in results:
        for row in rows:
            table.add(*row)
    return table.with_means()


# ---------------------------------------------------------------------------
# artifacts

def _svg(fig, path):
    import matplotlib
    with matplotlib.rc_context({"svg.hashsalt": "hcpose", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_results(table: ResultTable, bar_path, line_path, task="pose") -> None:
    """Bar plot of the mean metric per C and method, and a line plot of the
    metric against the number of training objects."""
    from matplotlib.figure import Figure
    metric = {"pose": None, "category": "accuracy"}[task]
    if metric is None:
        metric = "pose_error_sq" if any(r.metric == "pose_error_sq" for r in table.rows) \
            else "pose_error"
    ylabel = {"pose_error": "pose error (deg)", "pose_error_sq": "squared pose error (deg^2)",
              "accuracy": "accuracy (%)"}[metric]
    methods = [m for m in table.methods() if table.values(metric, m)]
    Cs = sorted({r.C for r in table.rows if r.metric == metric})
    ns = sorted({r.n_train for r in table.rows if r.metric == metric},
                key=lambda s: (not s.isdigit(), int(s) if s.isdigit() else 0))

    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot()
    width = 0.8 / max(len(methods), 1)
    for i, m in enumerate(methods):
        ax.bar(np.arange(len(Cs)) + i * width, [table.mean(metric, m, C=c) for c in Cs],
               width, label=m)
    ax.set_xticks(np.arange(len(Cs)) + 0.4 - width / 2)
    ax.set_xticklabels([str(c) for c in Cs])
    ax.set_xlabel("C")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    _svg(fig, bar_path)

    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot()
    for m in methods:
        ax.plot(range(len(ns)), [table.mean(metric, m, n_train=n) for n in ns],
                marker="o", label=m)
    ax.set_xticks(range(len(ns)))
    ax.set_xticklabels(ns)
    ax.set_xlabel("training objects per category")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    _svg(fig, line_path)


def write_artifacts(table: ResultTable, out_dir, cfg: ExperimentConfig) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "results.csv", "json": out / "results.json",
             "bar": out / "errors_bar.svg", "line": out / "errors_line.svg"}
    with open(paths["csv"], "w", encoding="utf-8", newline="") as fh:
        fh.write(table.to_csv())
    paths["json"].write_text(table.to_json(cfg.to_dict()), encoding="utf-8")
    plot_results(table, paths["bar"], paths["line"], cfg.task)
    return paths


def trend_inversions(means: Sequence[float]) -> List[float]:
    """Sizes of the increases in a sequence that should not increase."""
    return [b - a for a, b in zip(means, means[1:]) if b > a]
