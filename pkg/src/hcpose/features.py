"""Per-layer part features and the layer-blocked design matrix.

Three feature families are computed from the positions of the part
realizations found at one layer of the hierarchy:

* HOP -- per-cell histograms of part orientation angles, measured about
  the image center;
* part-HOG -- a HOG descriptor of a smoothed part-activation map;
* graph entropy -- the von Neumann entropy of the graph whose edge
  weights are the angles between part position vectors.
"""
from __future__ import annotations

import collections
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import StandardScaler

from .types import ImageRecord, InputError


class NumericalError(RuntimeError):
    """A numerical routine failed (non-finite values, no convergence)."""


#: Counts of degenerate inputs seen during extraction (parts at the origin).
DIAGNOSTICS: collections.Counter = collections.Counter()

_MIN_NORM = 1e-9
_TRIANGLE = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


@dataclass(frozen=True)
class HopConfig:
    """Grid and orientation binning of the HOP histograms.

    ``M`` is the number of grid cells along each image axis and
    ``b_size`` the orientation bin width in degrees.
    """

    M: int = 8
    b_size: float = 45.0
    weight_by_score: bool = False

    def __post_init__(self):
        if self.M < 1:
            raise InputError(f"M must be >= 1, got {self.M}")
        if not 0 < self.b_size <= 360:
            raise InputError(f"bin size must lie in (0, 360], got {self.b_size}")

    @property
    def n_bins(self) -> int:
        # round half up, so bSize=16 gives 23 bins rather than banker's 22
        return max(1, int(math.floor(360.0 / self.b_size + 0.5)))

    @property
    def dim(self) -> int:
        return self.M * self.M * self.n_bins


@dataclass(frozen=True)
class HogConfig:
    cell_size: int
    n_bins: int
    clip: float = 0.2

    def __post_init__(self):
        if self.cell_size < 1 or self.n_bins < 1:
            raise InputError("HOG cell size and bin count must be positive")

    @classmethod
    def from_hop(cls, hop: HopConfig, width: int) -> "HogConfig":
        return cls(cell_size=max(1, width // hop.M), n_bins=hop.n_bins)

    def dim(self, width: int, height: int) -> int:
        nx, ny = width // self.cell_size, height // self.cell_size
        if nx < 2 or ny < 2:
            return 0
        return (nx - 1) * (ny - 1) * 4 * self.n_bins


@dataclass(frozen=True)
class PartGraph:
    """Complete graph over part realizations weighted by pairwise angles."""

    W: np.ndarray
    n_excluded: int = 0

    @property
    def K(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True)
class LayerFeatureVector:
    layer: int
    f_hop: np.ndarray
    f_hog: np.ndarray
    f_ent: float

    def concatenate(self) -> np.ndarray:
        return np.concatenate([self.f_hop, self.f_hog, [self.f_ent]])

    @property
    def dim(self) -> int:
        return self.f_hop.size + self.f_hog.size + 1


# ---------------------------------------------------------------------------
# orientation histograms

def part_orientation(x, y):
    """Four-quadrant angle of a part position in degrees, in [0, 360).

    Accepts scalars or arrays. A part exactly at the origin has no
    direction; it gets angle 0 and is counted in ``DIAGNOSTICS``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    at_origin = (x == 0) & (y == 0)
    n_origin = int(np.count_nonzero(at_origin))
    if n_origin:
        DIAGNOSTICS["orientation_at_origin"] += n_origin
    theta = np.mod(np.degrees(np.arctan2(y, x)), 360.0)
    # arctan2 of a tiny negative y rounds up to exactly 360
    theta = np.where(theta >= 360.0, 0.0, theta)
    theta = np.where(at_origin, 0.0, theta)
    return float(theta) if theta.ndim == 0 else theta


def hop_features(positions, width, height, cfg: HopConfig, scores=None):
    """Histogram of orientations of parts, concatenated over an M x M grid.

    The grid covers ``[-W/2, W/2) x [-H/2, H/2)`` in centered coordinates;
    parts outside it are not counted. Cells are ordered row-major starting
    from the top-left cell.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    B, M = cfg.n_bins, cfg.M
    out = np.zeros(M * M * B)
    if pos.shape[0] == 0:
        return out
    x, y = pos[:, 0], pos[:, 1]
    inside = (x >= -width / 2) & (x < width / 2) & (y >= -height / 2) & (y < height / 2)
    col = np.floor((x + width / 2) * M / width).astype(int)
    row_up = np.floor((y + height / 2) * M / height).astype(int)
    # guard against x*M/W rounding onto the far edge
    col = np.clip(col, 0, M - 1)
    row = M - 1 - np.clip(row_up, 0, M - 1)
    theta = np.atleast_1d(part_orientation(x, y))
    bins = np.minimum(np.floor(theta * B / 360.0).astype(int), B - 1)
    weights = None
    if cfg.weight_by_score:
        if scores is None:
            raise InputError("score weighting requested but no scores given")
        weights = np.asarray(scores, dtype=float)[inside]
    idx = ((row * M + col) * B + bins)[inside]
    out += np.bincount(idx, weights=weights, minlength=out.size)
    return out


# ---------------------------------------------------------------------------
# HOG over part-activation maps

def activation_map(positions, width, height, scores=None):
    """Score-valued impulses at part pixels, smoothed by a 3x3 triangle."""
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    img = np.zeros((height, width))
    if pos.shape[0] == 0:
        return img
    s = np.ones(pos.shape[0]) if scores is None else np.asarray(scores, dtype=float)
    col = np.floor(pos[:, 0] + width / 2 + 0.5).astype(int)
    row = np.floor((height - 1) / 2 - pos[:, 1] + 0.5).astype(int)
    ok = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    np.add.at(img, (row[ok], col[ok]), s[ok])
    return ndimage.convolve(img, _TRIANGLE, mode="constant", cval=0.0)


def _normalize_block(v, clip):
    n = np.linalg.norm(v)
    if n == 0:
        return np.zeros_like(v)
    v = np.minimum(v / n, clip)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def hog_descriptor(image, cfg: HogConfig):
    """HOG of a 2-D array: central differences, unsigned orientation,
    per-cell magnitude histograms, 2x2-cell blocks with L2-clip-L2
    normalization. Returns the concatenated block descriptors."""
    img = np.asarray(image, dtype=float)
    H, W = img.shape
    c, B = cfg.cell_size, cfg.n_bins
    ny, nx = H // c, W // c
    if nx < 2 or ny < 2:
        raise InputError(
            f"{W}x{H} image is smaller than one 2x2 block of {c}px cells")
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = img[:, 2:] - img[:, :-2]
    # rows grow downwards; flip so gradients follow the y-up frame
    gy[1:-1, :] = img[:-2, :] - img[2:, :]
    mag = np.hypot(gx, gy)[: ny * c, : nx * c]
    ang = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)[: ny * c, : nx * c]
    bins = np.minimum(np.floor(ang * B / 180.0).astype(int), B - 1)
    cell_r = np.arange(ny * c) // c
    cell_c = np.arange(nx * c) // c
    cell = cell_r[:, None] * nx + cell_c[None, :]
    hist = np.bincount((cell * B + bins).ravel(), weights=mag.ravel(),
                       minlength=ny * nx * B).reshape(ny, nx, B)
    blocks = []
    for i in range(ny - 1):
        for j in range(nx - 1):
            v = hist[i:i + 2, j:j + 2, :].ravel()
            blocks.append(_normalize_block(v, cfg.clip))
    return np.concatenate(blocks)


def part_hog_features(positions, width, height, cfg: HogConfig, scores=None):
    return hog_descriptor(activation_map(positions, width, height, scores), cfg)


# ---------------------------------------------------------------------------
# part graph entropy

def part_graph_weights(positions) -> PartGraph:
    """Edge weights are the angles (radians, in [0, pi]) between position
    vectors. Parts closer than 1e-9 to the origin are left out."""
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    norms = np.hypot(pos[:, 0], pos[:, 1])
    keep = norms >= _MIN_NORM
    n_excluded = int(np.count_nonzero(~keep))
    if n_excluded:
        DIAGNOSTICS["graph_part_at_origin"] += n_excluded
    p = pos[keep]
    # atan2(|cross|, dot) is arccos of the normalized inner product without
    # arccos's loss of precision near 0 and pi
    dot = p @ p.T
    cross = np.abs(p[:, 0][:, None] * p[:, 1][None, :] - p[:, 1][:, None] * p[:, 0][None, :])
    W = np.arctan2(cross, dot)
    W = np.clip(0.5 * (W + W.T), 0.0, np.pi)
    np.fill_diagonal(W, 0.0)
    return PartGraph(W=W, n_excluded=n_excluded)


def normalized_laplacian(g: PartGraph) -> np.ndarray:
    K = g.K
    if K < 2:
        raise InputError("the normalized Laplacian needs at least two parts")
    D = np.diag(g.W.sum(axis=0))
    return (D - g.W) / (K * (K - 1))


def von_neumann_entropy(g: PartGraph) -> float:
    """-sum(nu * log2(nu)) over the Laplacian spectrum, with 0 log 0 = 0."""
    if g.K <= 1:
        return 0.0
    lap = normalized_laplacian(g)
    try:
        nu = np.linalg.eigvalsh(lap)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"eigensolver failed on a {g.K}x{g.K} Laplacian "
            f"(norm {np.linalg.norm(lap):.3g}, finite={np.isfinite(lap).all()})") from exc
    nu = nu[nu > 0]
    return float(-np.sum(nu * np.log2(nu)))


# ---------------------------------------------------------------------------
# assembly

def layer_feature_vector(record: ImageRecord, layer: int, hop: HopConfig,
                         hog: Optional[HogConfig] = None) -> LayerFeatureVector:
    if layer < 1:
        raise InputError(f"layer must be >= 1, got {layer}")
    W, H = record.image_width, record.image_height
    hog = hog or HogConfig.from_hop(hop, W)
    parts = record.layer_parts(layer)
    pos = np.array([(p.x, p.y) for p in parts], dtype=float).reshape(-1, 2)
    scores = np.array([p.score for p in parts], dtype=float)
    return LayerFeatureVector(
        layer=layer,
        f_hop=hop_features(pos, W, H, hop, scores),
        f_hog=part_hog_features(pos, W, H, hog, scores),
        f_ent=von_neumann_entropy(part_graph_weights(pos)),
    )


def record_features(record: ImageRecord, n_layers: int, hop: HopConfig,
                    hog: Optional[HogConfig] = None) -> np.ndarray:
    return np.concatenate([
        layer_feature_vector(record, layer, hop, hog).concatenate()
        for layer in range(1, n_layers + 1)])


def extract_features(records: Sequence[ImageRecord], n_layers: int,
                     hop: HopConfig, hog: Optional[HogConfig] = None,
                     n_jobs: Optional[int] = None) -> np.ndarray:
    """Raw N x (L*D) feature matrix; rows follow ``records``."""
    if not records:
        raise InputError("no records to extract features from")

    def one(r):
        return record_features(r, n_layers, hop, hog)

    if n_jobs is not None and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(one, records))
    else:
        rows = [one(r) for r in records]
    dims = {row.size for row in rows}
    if len(dims) != 1:
        raise InputError(f"records produced inconsistent feature sizes {sorted(dims)}")
    return np.vstack(rows)


@dataclass
class GroupedDesignMatrix:
    """Standardized features with one contiguous column group per layer."""

    F: np.ndarray
    group_index: Dict[int, Tuple[int, int]]
    column_means: np.ndarray
    column_scales: np.ndarray
    train_rows: np.ndarray = field(default=None, repr=False)

    @property
    def group_sizes(self) -> List[int]:
        return [stop - start for start, stop in self.group_index.values()]

    def block(self, layer: int) -> np.ndarray:
        start, stop = self.group_index[layer]
        return self.F[:, start:stop]

    def standardize(self, raw) -> np.ndarray:
        return (np.asarray(raw, dtype=float) - self.column_means) / self.column_scales

    def unstandardize(self, F) -> np.ndarray:
        return np.asarray(F, dtype=float) * self.column_scales + self.column_means


def fit_standardization(raw) -> Tuple[np.ndarray, np.ndarray]:
    """Column means and scales; zero-variance columns keep scale 1."""
    scaler = StandardScaler().fit(np.asarray(raw, dtype=float))
    return scaler.mean_.copy(), scaler.scale_.copy()


def group_index_for(sizes: Sequence[int]) -> Dict[int, Tuple[int, int]]:
    index, start = {}, 0
    for layer, size in enumerate(sizes, start=1):
        index[layer] = (start, start + size)
        start += size
    return index


def build_design_matrix(raw, n_layers: int, train_rows=None) -> GroupedDesignMatrix:
    """Standardize a raw feature matrix over its training rows.

    ``raw`` has L equal column blocks, one per layer (see
    :func:`extract_features`).
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[1] % n_layers:
        raise InputError(
            f"feature matrix of shape {raw.shape} does not split into {n_layers} layers")
    if train_rows is None:
        train_rows = np.arange(raw.shape[0])
    train_rows = np.asarray(train_rows)
    means, scales = fit_standardization(raw[train_rows])
    D = raw.shape[1] // n_layers
    return GroupedDesignMatrix(
        F=(raw - means) / scales,
        group_index=group_index_for([D] * n_layers),
        column_means=means,
        column_scales=scales,
        train_rows=train_rows,
    )


class PartFeatureExtractor(TransformerMixin, BaseEstimator):
    """Turns image records into the raw layer-blocked feature matrix.

    Parameters
    ----------
    n_layers : int
        Number of hierarchy layers L.
    grid_cells : int
        HOP grid size M (the image is split into M x M cells); also sets
        the HOG cell size to ``width // M``.
    bin_size : float
        HOP orientation bin width in degrees; the HOG descriptor uses the
        same number of bins.
    weight_by_score : bool
        Weight HOP counts by part activation instead of counting parts.
    n_jobs : int or None
        Threads used across images.
    """

    def __init__(self, n_layers=4, grid_cells=8, bin_size=45.0,
                 weight_by_score=False, n_jobs=None):
        self.n_layers = n_layers
        self.grid_cells = grid_cells
        self.bin_size = bin_size
        self.weight_by_score = weight_by_score
        self.n_jobs = n_jobs

    @property
    def hop_config(self) -> HopConfig:
        return HopConfig(M=self.grid_cells, b_size=self.bin_size,
                         weight_by_score=self.weight_by_score)

    def fit(self, records, y=None):
        records = list(records)
        if not records:
            raise InputError("cannot fit on an empty record list")
        sizes = {(r.image_width, r.image_height) for r in records}
        if len(sizes) != 1:
            raise InputError(f"records mix image sizes {sorted(sizes)}")
        (self.image_width_, self.image_height_), = sizes
        hop = self.hop_config
        hog = HogConfig.from_hop(hop, self.image_width_)
        d = hop.dim + hog.dim(self.image_width_, self.image_height_) + 1
        self.group_sizes_ = [d] * self.n_layers
        self.n_features_out_ = d * self.n_layers
        return self

    def transform(self, records):
        if not hasattr(self, "group_sizes_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("PartFeatureExtractor is not fitted yet")
        records = list(records)
        for r in records:
            if (r.image_width, r.image_height) != (self.image_width_, self.image_height_):
                raise InputError(
                    f"image {r.image_id} is {r.image_width}x{r.image_height}, "
                    f"fitted on {self.image_width_}x{self.image_height_}")
        return extract_features(records, self.n_layers, self.hop_config,
                                HogConfig.from_hop(self.hop_config, self.image_width_),
                                n_jobs=self.n_jobs)
