"""Frame-to-RoI preprocessing: marker crop, grayscale, CLAHE, bicubic resize.

The capture marker is a fixed rectangle expressed in screen fractions; the
crop, BT.601 grayscale conversion, contrast-limited adaptive histogram
equalization and Catmull-Rom resize below turn a raw frame into the square
enhanced RoI consumed by the embedding network. All operations are pure
functions of their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryOutOfBounds, ImageTooSmall, UnsupportedChannelCount
from .raster import RasterImage

DEFAULT_ROI_SIZE = 75


@dataclass
class MarkerGeometry:
    """On-screen marker rectangle in frame-size fractions."""

    left_frac: float = 0.375
    top_frac: float = 0.5
    width_frac: float = 0.5
    height_frac: float = 0.12

    def __post_init__(self) -> None:
        for name in ("left_frac", "top_frac", "width_frac", "height_frac"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.left_frac + self.width_frac > 1.0 + 1e-12:
            raise ValueError("left_frac + width_frac must not exceed 1")
        if self.top_frac + self.height_frac > 1.0 + 1e-12:
            raise ValueError("top_frac + height_frac must not exceed 1")


@dataclass
class ClaheParams:
    """Tile grid, clip limit (multiple of the uniform bin height) and bin count."""

    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self) -> None:
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ValueError("tile counts must be >= 1")
        if self.clip_limit < 1.0:
            raise ValueError("clip_limit must be >= 1.0")
        if not 2 <= self.bins <= 256:
            raise ValueError("bins must lie in [2, 256]")


def round_half_away(x):
    """Round half away from zero (0.5 -> 1, -0.5 -> -1); works on arrays."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def crop_roi(frame: RasterImage, geom: MarkerGeometry | None = None) -> RasterImage:
    """Cut the marker rectangle out of a captured frame.

    Origin and size are the marker fractions times the frame dimensions,
    rounded half away from zero. Raises GeometryOutOfBounds if the rounded
    rectangle leaves the frame or collapses below 1x1.
    """
    geom = geom or MarkerGeometry()
    w, h = frame.width, frame.height
    x0 = int(round_half_away(geom.left_frac * w))
    y0 = int(round_half_away(geom.top_frac * h))
    cw = int(round_half_away(geom.width_frac * w))
    ch = int(round_half_away(geom.height_frac * h))
    if cw < 1 or ch < 1:
        raise GeometryOutOfBounds(f"marker rounds to an empty {cw}x{ch} region")
    if x0 + cw > w or y0 + ch > h:
        raise GeometryOutOfBounds(
            f"marker ({x0},{y0})+{cw}x{ch} exceeds the {w}x{h} frame"
        )
    return RasterImage(frame.data[y0 : y0 + ch, x0 : x0 + cw].copy())


def to_grayscale(frame: RasterImage) -> RasterImage:
    """BT.601 luma conversion; grayscale input is returned unchanged."""
    if frame.channels == 1:
        return frame
    if frame.channels != 3:
        raise UnsupportedChannelCount(f"cannot convert {frame.channels}-channel image")
    rgb = frame.data.astype(np.float64)
    luma = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return RasterImage(np.clip(round_half_away(luma), 0, 255).astype(np.uint8))


# --- CLAHE ------------------------------------------------------------------


def histogram_cap(tile_pixels: int, params: ClaheParams) -> int:
    """Per-bin clip cap: ceil(clip_limit * tile_pixels / bins)."""
    return int(math.ceil(params.clip_limit * tile_pixels / params.bins))


def clip_redistribute(hist: np.ndarray, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Clip bins at ``cap`` and spread the excess uniformly in one pass.

    The remainder that does not divide evenly goes to the lowest-index bins,
    one count each. Returns (clipped, redistributed); total mass is preserved
    exactly in the redistributed histogram.
    """
    hist = np.asarray(hist, dtype=np.int64)
    clipped = np.minimum(hist, cap)
    excess = int(hist.sum() - clipped.sum())
    out = clipped + excess // hist.size
    out[: excess % hist.size] += 1
    return clipped, out


def equalization_lut(hist: np.ndarray, total: int) -> np.ndarray:
    """Cumulative-histogram equalization mapping bin index -> level in [0, 255]."""
    cdf = np.cumsum(np.asarray(hist, dtype=np.int64))
    return round_half_away(255.0 * cdf / total).astype(np.uint8)


def _grid_edges(n: int, tiles: int) -> np.ndarray:
    """Tile boundary offsets along one axis; every tile non-empty when n >= tiles."""
    return (np.arange(tiles + 1) * n) // tiles


def _level_bins(data: np.ndarray, bins: int) -> np.ndarray:
    """Map 8-bit levels onto histogram bin indices (identity when bins == 256)."""
    return (data.astype(np.int64) * bins) >> 8


def tile_luts(image: RasterImage, params: ClaheParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-tile equalization LUTs plus the tile edge offsets.

    Returns ``(luts, y_edges, x_edges)`` with ``luts`` shaped
    ``(tiles_y, tiles_x, bins)``.
    """
    if image.channels != 1:
        raise UnsupportedChannelCount("CLAHE expects a grayscale image")
    h, w = image.height, image.width
    if h < params.tiles_y or w < params.tiles_x:
        raise ImageTooSmall(f"{w}x{h} image cannot hold a {params.tiles_x}x{params.tiles_y} tile grid")
    y_edges = _grid_edges(h, params.tiles_y)
    x_edges = _grid_edges(w, params.tiles_x)
    levels = _level_bins(image.data, params.bins)
    luts = np.zeros((params.tiles_y, params.tiles_x, params.bins), dtype=np.uint8)
    for ty in range(params.tiles_y):
        for tx in range(params.tiles_x):
            tile = levels[y_edges[ty] : y_edges[ty + 1], x_edges[tx] : x_edges[tx + 1]]
            hist = np.bincount(tile.ravel(), minlength=params.bins)
            cap = histogram_cap(tile.size, params)
            _, redistributed = clip_redistribute(hist, cap)
            luts[ty, tx] = equalization_lut(redistributed, tile.size)
    return luts, y_edges, x_edges


def clahe(image: RasterImage, params: ClaheParams | None = None) -> RasterImage:
    """Contrast-limited adaptive histogram equalization.

    Each tile histogram is clipped at ceil(clip_limit * tile_pixels / bins)
    with the excess redistributed uniformly, then equalized to [0, 255]. The
    output pixel blends the four nearest tile mappings bilinearly; edge tiles
    are extended by clamping, so a 1x1 grid degenerates to plain global
    equalization.
    """
    params = params or ClaheParams()
    luts, y_edges, x_edges = tile_luts(image, params)
    h, w = image.height, image.width
    # Tile centers; pixels outside the outer centers clamp to the edge tile.
    cy = (y_edges[:-1] + y_edges[1:] - 1) / 2.0
    cx = (x_edges[:-1] + x_edges[1:] - 1) / 2.0

    def axis_blend(coords: np.ndarray, centers: np.ndarray):
        lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, centers.size - 1)
        hi = np.minimum(lo + 1, centers.size - 1)
        span = centers[hi] - centers[lo]
        t = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
        return lo, hi, np.clip(t, 0.0, 1.0)

    y0, y1, wy = axis_blend(np.arange(h, dtype=np.float64), cy)
    x0, x1, wx = axis_blend(np.arange(w, dtype=np.float64), cx)
    bin_idx = _level_bins(image.data, params.bins)
    y0 = y0[:, None]
    y1 = y1[:, None]
    wy = wy[:, None]
    x0 = x0[None, :]
    x1 = x1[None, :]
    wx = wx[None, :]
    top = (1.0 - wx) * luts[y0, x0, bin_idx] + wx * luts[y0, x1, bin_idx]
    bottom = (1.0 - wx) * luts[y1, x0, bin_idx] + wx * luts[y1, x1, bin_idx]
    blended = (1.0 - wy) * top + wy * bottom
    return RasterImage(np.clip(round_half_away(blended), 0, 255).astype(np.uint8))


# --- Bicubic resize -----------------------------------------------------------


def _catmull_rom(t: np.ndarray) -> np.ndarray:
    """Keys cubic kernel with a = -0.5."""
    at = np.abs(t)
    near = 1.5 * at**3 - 2.5 * at**2 + 1.0
    far = -0.5 * at**3 + 2.5 * at**2 - 4.0 * at + 2.0
    return np.where(at <= 1.0, near, np.where(at < 2.0, far, 0.0))


def _resample_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    # Center-aligned source positions; taps clamp at the borders.
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(pos).astype(np.int64)
    offsets = np.arange(-1, 3)
    idx = np.clip(base[:, None] + offsets[None, :], 0, n_in - 1)
    weights = _catmull_rom(pos[:, None] - (base[:, None] + offsets[None, :]))
    moved = np.moveaxis(arr, axis, 0)
    gathered = moved[idx]  # (n_out, 4, ...)
    out = np.einsum("ok,ok...->o...", weights, gathered)
    return np.moveaxis(out, 0, axis)


def resize_bicubic(image: RasterImage, out_w: int, out_h: int) -> RasterImage:
    """Catmull-Rom bicubic resize with edge clamping, clipped to [0, 255]."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    data = image.data.astype(np.float64)
    data = _resample_axis(data, out_h, 0)
    data = _resample_axis(data, out_w, 1)
    return RasterImage(np.clip(round_half_away(data), 0, 255).astype(np.uint8))


def preprocess(
    frame: RasterImage,
    geom: MarkerGeometry | None = None,
    params: ClaheParams | None = None,
    roi_size: int = DEFAULT_ROI_SIZE,
) -> RasterImage:
    """Full capture-to-RoI chain: crop, grayscale, CLAHE, square resize.

    Enhancement runs at crop resolution (before the resize) so local contrast
    is computed on the un-decimated pixels.
    """
    roi = crop_roi(frame, geom)
    gray = to_grayscale(roi)
    enhanced = clahe(gray, params)
    return resize_bicubic(enhanced, roi_size, roi_size)
