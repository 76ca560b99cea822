"""RefCOCO-style annotation files.

The file is a JSON array; each entry is::

    {"image_path": "images/0001.png",      # relative to image_dir
     "expression": "the red circle",
     "mask": {"counts": [...], "size": [h, w]}   # or [[x0, y0, x1, y1, ...], ...]
     "sample_id": "0001"}                         # optional

Extra keys are ignored.  Malformed entries are skipped and reported.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .masks import MaskFormatError, polygon_to_mask, rle_decode, rle_encode


@dataclass
class ReferSample:
    image: torch.Tensor  # [3, H, W] float in [0, 1]
    expression: str
    mask: torch.Tensor  # [H, W] bool
    sample_id: str
    objects: tuple = ()

    def __post_init__(self):
        if not self.expression.strip():
            raise ValueError(f"{self.sample_id}: empty expression")
        if not bool(self.mask.any()):
            raise ValueError(f"{self.sample_id}: empty mask")
        if tuple(self.image.shape[-2:]) != tuple(self.mask.shape):
            raise ValueError(f"{self.sample_id}: image and mask sizes differ")


@dataclass
class Malformed:
    index: int
    reason: str


@dataclass
class LoadResult:
    samples: list[ReferSample] = field(default_factory=list)
    malformed: list[Malformed] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("RIS_NUM_THREADS", "1")))
    except ValueError:
        return 1


def resize_pair(image: torch.Tensor, mask: torch.Tensor, size: int | None):
    """Bilinear for the image, nearest for the mask, to a square ``size``."""
    if size is None or tuple(image.shape[-2:]) == (size, size):
        return image, mask
    image = F.interpolate(image[None], size=(size, size), mode="bilinear", align_corners=False)[0].clamp(0, 1)
    mask = F.interpolate(mask[None, None].float(), size=(size, size), mode="nearest")[0, 0] > 0.5
    return image, mask


def read_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def decode_mask(encoded, height: int, width: int) -> np.ndarray:
    if isinstance(encoded, dict):
        mask = rle_decode(encoded)
        if mask.shape != (height, width):
            raise MaskFormatError(f"mask size {mask.shape} != image size {(height, width)}")
        return mask
    if isinstance(encoded, list):
        return polygon_to_mask(encoded, height, width)
    raise MaskFormatError(f"unsupported mask type {type(encoded).__name__}")


def _load_entry(i, entry, image_dir: Path, size):
    if not isinstance(entry, dict):
        raise MaskFormatError("entry is not an object")
    for key in ("image_path", "expression", "mask"):
        if key not in entry:
            raise MaskFormatError(f"missing key {key!r}")
    path = image_dir / entry["image_path"]
    if not path.is_file():
        raise FileNotFoundError(f"missing image file {path}")
    image = read_image(path)
    h, w = image.shape[-2:]
    mask = torch.from_numpy(decode_mask(entry["mask"], h, w))
    image, mask = resize_pair(image, mask, size)
    sample_id = str(entry.get("sample_id", i))
    return ReferSample(image, str(entry["expression"]), mask, sample_id, tuple(entry.get("objects", ())))


def load_refcoco_format(annotation_file, image_dir=None, image_size: int | None = None) -> LoadResult:
    annotation_file = Path(annotation_file)
    image_dir = Path(image_dir) if image_dir is not None else annotation_file.parent
    entries = json.loads(annotation_file.read_text())
    if not isinstance(entries, list):
        raise ValueError("annotation file must hold a JSON array")

    def job(item):
        i, entry = item
        try:
            return _load_entry(i, entry, image_dir, image_size)
        except (MaskFormatError, FileNotFoundError, ValueError, OSError) as exc:
            return Malformed(i, str(exc))

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        results = list(pool.map(job, enumerate(entries)))
    out = LoadResult()
    for r in results:
        (out.malformed if isinstance(r, Malformed) else out.samples).append(r)
    return out


def write_dataset(samples, out_dir, vocab=None) -> Path:
    """Persist samples as PNGs plus ``annotations.json`` (RLE masks) and ``vocab.txt``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        rel = f"images/{s.sample_id}.png"
        arr = (s.image.permute(1, 2, 0).numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out_dir / rel)
        entry = {"image_path": rel, "expression": s.expression,
                 "mask": rle_encode(s.mask.numpy()), "sample_id": s.sample_id}
        if s.objects:
            entry["objects"] = list(s.objects)
        entries.append(entry)
    (out_dir / "annotations.json").write_text(json.dumps(entries, indent=1))
    if vocab is not None:
        vocab.save(out_dir / "vocab.txt")
    return out_dir
