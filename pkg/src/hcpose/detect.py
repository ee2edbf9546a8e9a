"""Layer-1 stand-in detector: oriented edge responses on grayscale images.

Only the lowest layer of a part hierarchy can be produced here; higher
layers must come from an external part-hierarchy export in the part-file
format (see :mod:`hcpose.io`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .types import InputError, PartRealization, to_centered_coords

KERNEL_SIZE = 7
SIGMA = 1.5
OFFSET = 1.0


@dataclass(frozen=True)
class EdgeDetectorConfig:
    n_orientations: int = 6
    threshold: float = 0.1
    nms_radius: float = 3.0

    def __post_init__(self):
        if self.n_orientations < 2:
            raise InputError("need at least two orientations")
        if not self.threshold > 0:
            raise InputError("threshold must be > 0")
        if self.nms_radius < 0:
            raise InputError("nms_radius must be >= 0")


def oriented_kernels(n_orientations: int) -> np.ndarray:
    """Odd-symmetric difference-of-offset-Gaussians kernels.

    Kernel ``o`` responds to edges running at ``o * 180 / n`` degrees
    (y-up); the two Gaussians sit one pixel either side of the edge line.
    Each kernel is scaled to unit response on an ideal unit step.
    """
    half = KERNEL_SIZE // 2
    r = np.arange(-half, half + 1, dtype=float)
    xs = r[None, :]          # columns, pointing right
    ys = -r[:, None]         # rows flipped to point up
    out = []
    for o in range(n_orientations):
        phi = np.pi * o / n_orientations
        nx, ny = -np.sin(phi), np.cos(phi)   # unit normal to the edge
        g_pos = np.exp(-((xs - OFFSET * nx) ** 2 + (ys - OFFSET * ny) ** 2) / (2 * SIGMA ** 2))
        g_neg = np.exp(-((xs + OFFSET * nx) ** 2 + (ys + OFFSET * ny) ** 2) / (2 * SIGMA ** 2))
        k = g_pos - g_neg
        k = 0.5 * (k - k[::-1, ::-1])
        side = (xs * nx + ys * ny) > 0
        gain = k[side].sum()
        out.append(k / gain)
    return np.array(out)


def orientation_responses(image, cfg: EdgeDetectorConfig) -> np.ndarray:
    """Absolute filter responses, shape ``(n_orientations, H, W)``."""
    img = np.asarray(image, dtype=float)
    return np.abs(np.array([ndimage.convolve(img, k, mode="nearest")
                            for k in oriented_kernels(cfg.n_orientations)]))


def _disk(radius):
    rr = int(np.floor(radius))
    dy, dx = np.mgrid[-rr:rr + 1, -rr:rr + 1]
    return dy ** 2 + dx ** 2 <= radius ** 2


def _local_maxima(response, radius):
    peak = ndimage.maximum_filter(response, footprint=_disk(radius), mode="nearest")
    return response >= peak


def non_max_suppression(response, candidates, radius) -> List[Tuple[int, int]]:
    """Greedy thinning of candidate pixels: strongest first, ties by
    (row, col); a pixel is kept only if no kept pixel lies within
    ``radius``. :func:`detect_layer1` feeds it local maxima only."""
    rows, cols = candidates
    order = np.lexsort((cols, rows, -response[rows, cols]))
    H, W = response.shape
    blocked = np.zeros((H, W), dtype=bool)
    rr = int(np.floor(radius))
    dy, dx = np.mgrid[-rr:rr + 1, -rr:rr + 1]
    disk = _disk(radius)
    dy, dx = dy[disk], dx[disk]
    kept = []
    for i in order:
        r, c = int(rows[i]), int(cols[i])
        if blocked[r, c]:
            continue
        kept.append((r, c))
        br, bc = r + dy, c + dx
        ok = (br >= 0) & (br < H) & (bc >= 0) & (bc < W)
        blocked[br[ok], bc[ok]] = True
    return kept


def detect_layer1(image, cfg: EdgeDetectorConfig = EdgeDetectorConfig(),
                  image_id: str = "") -> List[PartRealization]:
    """Layer-1 part realizations at thresholded, suppressed edge maxima.

    ``part_id`` is the index of the winning orientation and ``score`` the
    response. Positions are image-centered.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or min(img.shape) < 16:
        raise InputError(f"need a 2-D image of at least 16x16, got shape {img.shape}")
    H, W = img.shape
    resp = orientation_responses(img, cfg)
    best = resp.max(axis=0)
    which = resp.argmax(axis=0)
    candidates = np.nonzero((best > cfg.threshold) & _local_maxima(best, cfg.nms_radius))
    parts = []
    for r, c in non_max_suppression(best, candidates, cfg.nms_radius):
        x, y = to_centered_coords(c, r, W, H)
        parts.append(PartRealization(image_id=image_id, layer=1, part_id=int(which[r, c]),
                                     x=float(x), y=float(y), score=float(best[r, c])))
    return parts
