"""COCO 2017 instance ingestion: mask codecs and a sorted record stream.

Segmentations arrive in three encodings (polygon lists, uncompressed RLE,
compressed RLE strings); all are rasterized to binary uint8 masks here so
the benchmark has no dependency on the reference C implementation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image, ImageDraw

from .errors import ImageDecodeError

logger = logging.getLogger(__name__)

# Stuff categories occupy ids 92..183 in the 2017 label map; panoptic-style
# files mark them explicitly with isthing=0 instead.
_STUFF_IDS = range(92, 184)


def _is_stuff(category: dict) -> bool:
    if "isthing" in category:
        return not category["isthing"]
    return category["id"] in _STUFF_IDS


def object_class_names(annotation_file: str | Path) -> list:
    """Sorted names of the non-stuff categories in an annotation file."""
    with open(annotation_file, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return sorted(
        c["name"] for c in payload.get("categories", ()) if not _is_stuff(c)
    )


# --------------------------------------------------------------------------
# RLE codec. Counts are column-major run lengths starting with a run of 0s.
# The compressed form packs each count into 6-bit ASCII chunks (offset 48):
# 5 value bits plus a continuation bit, sign-extended from bit 4 of the last
# chunk, with counts after the second stored as deltas against counts[i-2].


def _string_to_counts(data: str) -> list:
    counts: list = []
    pos = 0
    while pos < len(data):
        value = 0
        shift = 0
        while True:
            if pos >= len(data):
                raise ImageDecodeError("truncated RLE string")
            chunk = ord(data[pos]) - 48
            if not 0 <= chunk <= 63:
                raise ImageDecodeError(f"RLE byte out of range at {pos}")
            value |= (chunk & 0x1F) << shift
            pos += 1
            shift += 5
            if not chunk & 0x20:
                if chunk & 0x10:
                    value |= -1 << shift
                break
        if len(counts) > 2:
            value += counts[-2]
        counts.append(value)
    return counts


def _counts_to_string(counts) -> str:
    chars: list = []
    for i, count in enumerate(counts):
        value = int(count) - (int(counts[i - 2]) if i > 2 else 0)
        while True:
            chunk = value & 0x1F
            value >>= 5
            done = value == -1 if chunk & 0x10 else value == 0
            if not done:
                chunk |= 0x20
            chars.append(chr(chunk + 48))
            if done:
                break
    return "".join(chars)


def decode_rle(rle: dict) -> np.ndarray:
    """Binary HxW mask from an RLE dict with list or string counts."""
    height, width = (int(v) for v in rle["size"])
    counts = rle["counts"]
    if isinstance(counts, bytes):
        counts = counts.decode("ascii")
    if isinstance(counts, str):
        counts = _string_to_counts(counts)
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ImageDecodeError("negative run length")
    if sum(counts) != height * width:
        raise ImageDecodeError(
            f"runs cover {sum(counts)} pixels, mask has {height * width}"
        )
    flat = np.zeros(height * width, dtype=np.uint8)
    pos = 0
    value = 0
    for run in counts:
        if value:
            flat[pos : pos + run] = 1
        pos += run
        value ^= 1
    return flat.reshape((height, width), order="F")


def encode_rle(mask: np.ndarray, *, compress: bool = True) -> dict:
    """RLE dict from a binary mask; inverse of decode_rle."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ImageDecodeError(f"mask must be 2-d, got shape {mask.shape}")
    flat = (mask != 0).astype(np.uint8).reshape(-1, order="F")
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    runs = np.diff(np.concatenate(([0], edges, [flat.size]))).tolist()
    if flat.size and flat[0] == 1:
        runs.insert(0, 0)
    return {
        "size": [int(mask.shape[0]), int(mask.shape[1])],
        "counts": _counts_to_string(runs) if compress else runs,
    }


def rasterize_polygons(polygons, height: int, width: int) -> np.ndarray:
    """Union of filled polygons ([x0, y0, x1, y1, ...] flat lists) as a mask."""
    canvas = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for poly in polygons:
        if len(poly) < 6 or len(poly) % 2:
            raise ImageDecodeError(f"polygon needs >= 3 xy pairs, got {len(poly)} values")
        draw.polygon(list(zip(poly[0::2], poly[1::2])), fill=1, outline=1)
    return np.asarray(canvas, dtype=np.uint8)


def segmentation_to_mask(segmentation, height: int, width: int) -> np.ndarray:
    if isinstance(segmentation, dict):
        mask = decode_rle(segmentation)
        if mask.shape != (height, width):
            raise ImageDecodeError(
                f"RLE size {mask.shape} does not match image {(height, width)}"
            )
        return mask
    if isinstance(segmentation, list):
        return rasterize_polygons(segmentation, height, width)
    raise ImageDecodeError(
        f"unsupported segmentation type {type(segmentation).__name__}"
    )


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CocoInstance:
    image_id: int
    instance_id: int
    class_label: str
    bbox: tuple
    image: np.ndarray
    mask: np.ndarray


@dataclass
class IngestStats:
    """Skip accounting, surfaced in benchmark reports."""

    yielded: int = 0
    skipped_stuff: int = 0
    skipped_missing_image: int = 0
    skipped_malformed: int = 0

    def to_dict(self) -> dict:
        return {
            "yielded": self.yielded,
            "skipped_stuff": self.skipped_stuff,
            "skipped_missing_image": self.skipped_missing_image,
            "skipped_malformed": self.skipped_malformed,
        }


def ingest_coco(
    annotation_file,
    image_dir,
    stats: Optional[IngestStats] = None,
) -> Iterator[CocoInstance]:
    """Stream object instances sorted by (image_id, annotation id).

    Stuff categories are filtered out. A missing image file skips its
    annotations with a logged warning; pass an IngestStats to collect
    the counts.
    """
    image_dir = Path(image_dir)
    with open(annotation_file, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if stats is None:
        stats = IngestStats()

    categories = {c["id"]: c for c in payload.get("categories", ())}
    images = {im["id"]: im for im in payload.get("images", ())}
    annotations = sorted(
        payload.get("annotations", ()), key=lambda a: (a["image_id"], a["id"])
    )

    cached_id = None
    cached_pixels = None
    warned_paths = set()
    for ann in annotations:
        category = categories.get(ann["category_id"])
        info = images.get(ann["image_id"])
        if category is None or info is None:
            stats.skipped_malformed += 1
            logger.warning(
                "annotation %s references unknown %s, skipping",
                ann.get("id"),
                "category" if category is None else "image",
            )
            continue
        if _is_stuff(category):
            stats.skipped_stuff += 1
            continue
        if info["id"] != cached_id:
            path = image_dir / info["file_name"]
            if not path.is_file():
                stats.skipped_missing_image += 1
                if path not in warned_paths:
                    logger.warning("missing image file %s, skipping", path)
                    warned_paths.add(path)
                continue
            with Image.open(path) as im:
                cached_pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
            cached_id = info["id"]
        mask = segmentation_to_mask(
            ann["segmentation"], info["height"], info["width"]
        )
        stats.yielded += 1
        yield CocoInstance(
            image_id=info["id"],
            instance_id=ann["id"],
            class_label=category["name"],
            bbox=tuple(float(v) for v in ann["bbox"]),
            image=cached_pixels,
            mask=mask,
        )
