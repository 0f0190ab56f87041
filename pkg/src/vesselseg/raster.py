"""Polygon-to-mask rasterization with an exactly specified fill convention.

Masks are numpy uint8 arrays of shape (height, width) holding only 0 and 1;
``mask[j, i]`` is the pixel whose center sits at (i + 0.5, j + 0.5) in
polygon coordinate space (x right, y down).

Fill convention: a pixel is set iff its center is strictly inside the
polygon under the even-odd rule. Centers exactly on an edge are NOT set.
The arbiter expressions for "crossing" and "on the edge" are fixed so an
independent per-pixel point-in-polygon test reproduces the mask bit for
bit:

    crossing at row center py, for edge (x0,y0)-(x1,y1) with y0 <= py < y1
    or y1 <= py < y0:
        xc = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    parity: pixel center px is inside iff |{xc : xc <= px}| is odd
    (equivalently |{xc : xc > px}| is odd, since the crossing count of a
    closed ring is even)
    on-edge: (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) == 0.0
    and (px, py) within the edge's closed bounding box

The production path below is a scanline sweep (one sorted crossing list per
row) plus an explicit boundary-clearing pass; the brute-force oracle in the
test suite evaluates every pixel center independently.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .annot import AnnotationRecord, ClassLabel, Polygon
from .errors import DataError

Mask = np.ndarray  # (H, W) uint8, values in {0, 1}


def _closed_edges(ring) -> np.ndarray:
    """Edge array of shape (n, 4): columns x0, y0, x1, y1, ring closed."""
    pts = np.asarray(ring, dtype=np.float64)
    nxt = np.roll(pts, -1, axis=0)
    return np.concatenate([pts, nxt], axis=1)


def _signed_area2(ring) -> float:
    """Twice the shoelace area of the closed ring."""
    pts = np.asarray(ring, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return float(np.sum(x * yn - xn * y))


def rasterize_polygon(polygon: Polygon, width: int, height: int) -> Mask:
    """Rasterize one polygon onto a width x height grid per the fill convention."""
    if width <= 0 or height <= 0:
        raise ValueError(f"grid dimensions must be positive, got {width}x{height}")
    if _signed_area2(polygon.ring) == 0.0:
        raise DataError(f"degenerate polygon (zero area): {polygon.ring}")

    edges = _closed_edges(polygon.ring)
    x0, y0, x1, y1 = edges[:, 0], edges[:, 1], edges[:, 2], edges[:, 3]
    mask = np.zeros((height, width), dtype=np.uint8)
    centers_x = np.arange(width, dtype=np.float64) + 0.5

    # Scanline parity fill. Rows with a center outside the polygon's y-range
    # cannot intersect anything, so restrict the sweep to the bounding rows.
    ymin, ymax = float(np.min(edges[:, [1, 3]])), float(np.max(edges[:, [1, 3]]))
    j_lo = max(0, int(np.floor(ymin - 0.5)) - 1)
    j_hi = min(height, int(np.ceil(ymax)) + 1)
    for j in range(j_lo, j_hi):
        py = j + 0.5
        straddles = ((y0 <= py) & (py < y1)) | ((y1 <= py) & (py < y0))
        if not straddles.any():
            continue
        xs0, ys0 = x0[straddles], y0[straddles]
        xs1, ys1 = x1[straddles], y1[straddles]
        xc = xs0 + (py - ys0) * (xs1 - xs0) / (ys1 - ys0)
        xc.sort()
        counts = np.searchsorted(xc, centers_x, side="right")
        mask[j, :] = (counts & 1).astype(np.uint8)

    _clear_boundary_centers(mask, edges)
    return mask


def _clear_boundary_centers(mask: Mask, edges: np.ndarray) -> None:
    """Zero every pixel whose center lies exactly on some polygon edge."""
    height, width = mask.shape
    for ex0, ey0, ex1, ey1 in edges:
        bx_lo, bx_hi = min(ex0, ex1), max(ex0, ex1)
        by_lo, by_hi = min(ey0, ey1), max(ey0, ey1)
        # Candidate index windows, padded one pixel to absorb float floor error;
        # the exact closed-bbox comparison below is the arbiter.
        i_lo = max(0, int(np.floor(bx_lo - 0.5)) - 1)
        i_hi = min(width, int(np.ceil(bx_hi)) + 1)
        j_lo = max(0, int(np.floor(by_lo - 0.5)) - 1)
        j_hi = min(height, int(np.ceil(by_hi)) + 1)
        if i_lo >= i_hi or j_lo >= j_hi:
            continue
        px = np.arange(i_lo, i_hi, dtype=np.float64) + 0.5
        py = np.arange(j_lo, j_hi, dtype=np.float64) + 0.5
        in_bbox = (
            ((px >= bx_lo) & (px <= bx_hi))[None, :]
            & ((py >= by_lo) & (py <= by_hi))[:, None]
        )
        cross = (ex1 - ex0) * (py - ey0)[:, None] - (ey1 - ey0) * (px - ex0)[None, :]
        on_edge = in_bbox & (cross == 0.0)
        if on_edge.any():
            sub = mask[j_lo:j_hi, i_lo:i_hi]
            sub[on_edge] = 0


def build_class_mask(
    record: AnnotationRecord, label: ClassLabel, width: int, height: int
) -> Mask:
    """Pixelwise OR of all polygons of ``label`` in the record."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for poly in record.polygons:
        if poly.label is label:
            mask |= rasterize_polygon(poly, width, height)
    return mask


def downsample_mask(mask: Mask, out_w: int, out_h: int) -> Mask:
    """Nearest-neighbor downsample: output center (o + 0.5) maps to source
    index floor((o + 0.5) * in / out)."""
    in_h, in_w = mask.shape
    if out_w <= 0 or out_h <= 0:
        raise ValueError(f"output dimensions must be positive, got {out_w}x{out_h}")
    if out_w > in_w or out_h > in_h:
        raise ValueError(
            f"downsample target {out_w}x{out_h} exceeds source {in_w}x{in_h}"
        )
    rows = np.minimum(
        ((np.arange(out_h) + 0.5) * in_h / out_h).astype(np.int64), in_h - 1
    )
    cols = np.minimum(
        ((np.arange(out_w) + 0.5) * in_w / out_w).astype(np.int64), in_w - 1
    )
    return mask[np.ix_(rows, cols)]


def save_mask(mask: Mask, path) -> None:
    """Write as 8-bit single-channel PNG, 0 -> 0 and 1 -> 255."""
    img = Image.fromarray((mask.astype(np.uint8) * 255), mode="L")
    img.save(path, format="PNG")


def load_mask(path) -> Mask:
    """Inverse of save_mask; any pixel other than 0 or 255 is an error."""
    with Image.open(path) as img:
        if img.mode != "L":
            raise DataError(f"mask file {path} is not 8-bit grayscale (mode {img.mode})")
        arr = np.asarray(img, dtype=np.uint8)
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        j, i = np.argwhere(bad)[0]
        raise DataError(
            f"mask file {path} has non-binary pixel value {int(arr[j, i])} at ({int(i)}, {int(j)})"
        )
    return (arr == 255).astype(np.uint8)
