"""Binary mask codecs: COCO-style run-length encoding and polygon rasterisation.

RLE convention: the mask is flattened column-major (Fortran order) and the
runs alternate background/foreground starting with background, so a mask
whose first pixel is foreground begins with a zero-length run.  ``counts`` is
either a list of ints or the compact COCO string form.
"""
from __future__ import annotations

import numpy as np


class MaskFormatError(ValueError):
    pass


def rle_encode(mask) -> dict:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.flatten(order="F")
    counts = []
    current = False
    run = 0
    for v in flat:
        if v == current:
            run += 1
        else:
            counts.append(run)
            current = v
            run = 1
    counts.append(run)
    return {"counts": counts, "size": [h, w]}


def rle_decode(rle: dict) -> np.ndarray:
    try:
        h, w = (int(v) for v in rle["size"])
        counts = rle["counts"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MaskFormatError(f"malformed RLE: {exc}") from None
    if isinstance(counts, (str, bytes)):
        counts = counts_from_string(counts.decode() if isinstance(counts, bytes) else counts)
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise MaskFormatError("negative run length")
    if sum(counts) != h * w:
        raise MaskFormatError(f"RLE length mismatch: runs sum to {sum(counts)}, mask has {h * w} pixels")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    for i, c in enumerate(counts):
        if i % 2 == 1:
            flat[pos:pos + c] = True
        pos += c
    return flat.reshape((h, w), order="F")


def counts_from_string(s: str) -> list[int]:
    """Decode the compact COCO counts string (5-bit groups, delta-coded from the 3rd run)."""
    counts = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            if p >= len(s):
                raise MaskFormatError("truncated RLE string")
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def counts_to_string(counts) -> str:
    out = []
    counts = list(counts)
    for i, x in enumerate(counts):
        if i > 2:
            x -= counts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def polygon_to_mask(polygons, height: int, width: int) -> np.ndarray:
    """Union of polygons, each a flat [x0, y0, x1, y1, ...] list in pixel units.

    A pixel is foreground when its centre lies inside a polygon (even-odd
    rule); centres exactly on an edge count as inside.
    """
    if polygons and not isinstance(polygons[0], (list, tuple)):
        polygons = [polygons]
    mask = np.zeros((height, width), dtype=bool)
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    for poly in polygons:
        pts = np.asarray(poly, dtype=float)
        if pts.size % 2 or pts.size < 6:
            raise MaskFormatError(f"polygon needs >= 3 points, got {pts.size / 2:g}")
        pts = pts.reshape(-1, 2)
        inside = np.zeros_like(mask)
        on_edge = np.zeros_like(mask)
        n = len(pts)
        for i in range(n):
            x0, y0 = pts[i]
            x1, y1 = pts[(i + 1) % n]
            crosses = (y0 > py) != (y1 > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            inside ^= crosses & (px < x_at)
            cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
            within = ((px >= min(x0, x1)) & (px <= max(x0, x1))
                      & (py >= min(y0, y1)) & (py <= max(y0, y1)))
            on_edge |= (cross == 0) & within
        mask |= inside | on_edge
    return mask
