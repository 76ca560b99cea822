"""Synthetic referring-shapes dataset.

Each image holds 2-4 non-overlapping coloured shapes.  The expression names
exactly one of them by colour and shape, by shape alone, or by colour and
shape plus a spatial relation to another uniquely described shape.  Shapes
are rasterised on pixel centres with integer arithmetic, so every mask is an
exact raster of its shape.
"""
from __future__ import annotations

import re

import numpy as np
import torch

from .refcoco import ReferSample
from .tokenizer import Vocab

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 230),
    "yellow": (235, 215, 40),
    "purple": (150, 60, 190),
    "orange": (245, 140, 30),
}
SHAPES = ("circle", "square", "triangle")
RELATIONS = ("left of", "right of", "above", "below")
BACKGROUND = (30, 30, 30)
MAX_SCENE_RETRIES = 100


def synth_vocab() -> Vocab:
    return Vocab(["the", "of", "left", "right", "above", "below", *COLORS, *SHAPES])


# Geometry -------------------------------------------------------------------

def raster(obj: dict, size: int) -> np.ndarray:
    """Boolean [size, size] raster of one shape description."""
    kind, (a, b, c, d) = obj["shape"], obj["params"]
    jj, ii = np.mgrid[0:size, 0:size]  # row (y), column (x)
    if kind == "square":
        x0, y0, side = a, b, c
        return (ii >= x0) & (ii < x0 + side) & (jj >= y0) & (jj < y0 + side)
    if kind == "circle":
        cx, cy, r = a, b, c
        return (ii - cx) ** 2 + (jj - cy) ** 2 <= r * r
    if kind == "triangle":
        x0, y0, w, h = a, b, c, d
        X, Y = 2 * ii + 1, 2 * jj + 1
        return (Y <= 2 * (y0 + h)) & (np.abs(X - (2 * x0 + w)) * 2 * h <= w * (Y - 2 * y0))
    raise ValueError(f"unknown shape {kind!r}")


def _make_shape(kind, rng, size):
    lo = max(4, int(round(size * 0.14)))
    hi = max(lo + 1, int(round(size * 0.24)))
    extent = int(rng.integers(lo, hi + 1))
    if kind == "square":
        x0 = int(rng.integers(0, size - extent + 1))
        y0 = int(rng.integers(0, size - extent + 1))
        return [x0, y0, extent, 0], [x0, y0, x0 + extent, y0 + extent]
    if kind == "circle":
        r = max(2, extent // 2)
        cx = int(rng.integers(r, size - r))
        cy = int(rng.integers(r, size - r))
        return [cx, cy, r, 0], [cx - r, cy - r, cx + r + 1, cy + r + 1]
    if kind == "triangle":
        w = extent + (extent % 2)
        h = extent
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        return [x0, y0, w, h], [x0, y0, x0 + w, y0 + h]
    raise ValueError(f"unknown shape {kind!r}")


def _boxes_clear(a, b, gap=1):
    return a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1]


def _center(obj):
    x0, y0, x1, y1 = obj["bbox"]
    return (x0 + x1) / 2.0, (y0 + y1) / 2.0


def relation_holds(rel: str, a: dict, b: dict) -> bool:
    """Strict centre comparison of a against landmark b."""
    (ax, ay), (bx, by) = _center(a), _center(b)
    return {"left of": ax < bx, "right of": ax > bx, "above": ay < by, "below": ay > by}[rel]


# Expressions ----------------------------------------------------------------

def _candidate_expressions(t, objects):
    target = objects[t]
    key = (target["color"], target["shape"])
    same = [i for i, o in enumerate(objects) if (o["color"], o["shape"]) == key]
    out = []
    if len(same) == 1:
        out.append(f"the {target['color']} {target['shape']}")
    if sum(o["shape"] == target["shape"] for o in objects) == 1:
        out.append(f"the {target['shape']}")
    for li, land in enumerate(objects):
        if li == t:
            continue
        lkey = (land["color"], land["shape"])
        if sum((o["color"], o["shape"]) == lkey for o in objects) != 1:
            continue
        for rel in RELATIONS:
            holders = [i for i in same if i != li and relation_holds(rel, objects[i], land)]
            if holders == [t]:
                out.append(f"the {target['color']} {target['shape']} {rel} the {land['color']} {land['shape']}")
    return out


_EXPR = re.compile(
    r"^the (?:(?P<color>\w+) )?(?P<shape>circle|square|triangle)"
    r"(?: (?P<rel>left of|right of|above|below) the (?:(?P<lcolor>\w+) )?(?P<lshape>circle|square|triangle))?$"
)


def resolve_referents(expression: str, objects) -> list[int]:
    """Indices of every object the expression can denote (brute-force enumeration)."""
    m = _EXPR.match(expression.strip().lower())
    if not m:
        raise ValueError(f"expression outside the synthetic grammar: {expression!r}")

    def matches(o, color, shape):
        return o["shape"] == shape and (color is None or o["color"] == color)

    cands = [i for i, o in enumerate(objects) if matches(o, m["color"], m["shape"])]
    if not m["rel"]:
        return cands
    landmarks = [j for j, o in enumerate(objects) if matches(o, m["lcolor"], m["lshape"])]
    return [i for i in cands
            if any(j != i and relation_holds(m["rel"], objects[i], objects[j]) for j in landmarks)]


# Generation -----------------------------------------------------------------

def _scene(rng, size, palette, colors):
    n = int(rng.integers(2, 5))
    objects = []
    for _ in range(n):
        for _attempt in range(50):
            kind = palette[int(rng.integers(len(palette)))]
            params, bbox = _make_shape(kind, rng, size)
            if all(_boxes_clear(bbox, o["bbox"]) for o in objects):
                color = colors[int(rng.integers(len(colors)))]
                objects.append({"shape": kind, "color": color, "params": params, "bbox": bbox})
                break
        else:
            return None
    return objects


def render(objects, size) -> tuple[np.ndarray, list[np.ndarray]]:
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    masks = []
    for o in objects:
        m = raster(o, size)
        img[m] = COLORS[o["color"]]
        masks.append(m)
    return img, masks


def synth_sample(seed: int, index: int, image_size=64, shape_palette=SHAPES, colors=None) -> ReferSample:
    colors = list(colors or COLORS)
    rng = np.random.default_rng([seed, index])
    for _ in range(MAX_SCENE_RETRIES):
        objects = _scene(rng, image_size, list(shape_palette), colors)
        if objects is None:
            continue
        order = rng.permutation(len(objects))
        for t in order:
            options = _candidate_expressions(int(t), objects)
            if options:
                expression = options[int(rng.integers(len(options)))]
                img, masks = render(objects, image_size)
                image = torch.from_numpy(img).permute(2, 0, 1).float() / 255.0
                return ReferSample(image, expression, torch.from_numpy(masks[int(t)]),
                                   f"{seed}-{index:06d}", tuple(objects))
    raise RuntimeError(f"could not build an unambiguous scene for seed={seed} index={index}")


def synth_generate(seed: int, n_samples: int, image_size: int = 64, shape_palette=SHAPES,
                   colors=None) -> list[ReferSample]:
    """Deterministic per seed; sample i only depends on (seed, i)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return [synth_sample(seed, i, image_size, shape_palette, colors) for i in range(n_samples)]
