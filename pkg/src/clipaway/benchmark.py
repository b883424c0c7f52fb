"""Batch evaluation: removal runs over a dataset, aggregated into reports.

Each backend is scored twice, bare (zero conditioning tokens) and with
embedding conditioning, mirroring the base-model-vs-augmented comparison.
Runs are resumable: per-instance results land in a state file as they
complete, full-image features go to an on-disk embedding cache, and a
killed run picks up where it left off.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .backends import BackendKind, DiffusionBackend, create_backend
from .embedding import Embedding, load_embedding, save_embedding
from .errors import ClipawayError
from .metrics import (
    PROMPT_TEMPLATE,
    TOPK_LEVELS,
    ZeroShotClassifier,
    clip_distance,
    cmmd,
    fid,
)
from .pipeline import RemovalRequest, remove_object

logger = logging.getLogger(__name__)

MIN_CROP_SIDE = 8
STATE_VERSION = 1

CSV_COLUMNS = (
    "image_id", "instance_id", "class_label", "backend", "variant",
    "bbox_x", "bbox_y", "bbox_w", "bbox_h", "bbox_expanded",
    "clip_distance", "removed_top1", "removed_top3", "removed_top5", "error",
)


@dataclass
class ModelStack:
    """Everything the evaluation needs besides the diffusion backend."""

    region_encoder: object
    plain_encoder: object
    text_encoder: object
    adapter: object
    token_projection: object
    extractor_id: str = "mock-plain-encoder"


class _ZeroProjection:
    """Conditioning stub for bare-backend runs: every token is zero."""

    def __init__(self, like):
        self.n_tokens = like.n_tokens
        self.token_dim = like.token_dim

    def project(self, embedding: Embedding) -> np.ndarray:
        return np.zeros((self.n_tokens, self.token_dim))


class EmbeddingCache:
    """Content-addressed embedding store so features are computed once.

    Keys hash the extractor identity together with the pixel payload, so
    a different encoder never aliases a cached entry.
    """

    def __init__(self, directory, extractor_id: str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.extractor_id = extractor_id

    def key(self, pixels: np.ndarray) -> str:
        digest = hashlib.sha256()
        digest.update(self.extractor_id.encode())
        digest.update(repr(pixels.shape).encode())
        digest.update(pixels.tobytes())
        return digest.hexdigest()

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.emb"

    def load(self, key: str) -> Optional[Embedding]:
        path = self.path(key)
        if not path.is_file():
            return None
        return load_embedding(path)

    def get_or_compute(self, pixels: np.ndarray, encoder) -> tuple:
        key = self.key(pixels)
        cached = self.load(key)
        if cached is not None:
            return key, cached
        embedding = encoder.encode_plain(pixels)
        save_embedding(embedding, self.path(key))
        return key, embedding


def derive_seed(base_seed: int, image_id: int, instance_id: int) -> int:
    """Stable per-instance seed, independent of iteration order or --limit."""
    digest = hashlib.sha256(
        f"{base_seed}:{image_id}:{instance_id}".encode()
    ).digest()
    return int.from_bytes(digest[:4], "little")


def _expand_span(lo: int, hi: int, size: int, minimum: int) -> tuple:
    if size < minimum:
        return 0, size, True
    if hi - lo >= minimum:
        return lo, hi, False
    lo = max(0, lo - (minimum - (hi - lo)) // 2)
    hi = min(size, lo + minimum)
    lo = max(0, hi - minimum)
    return lo, hi, True


def crop_bbox(image: np.ndarray, bbox) -> tuple:
    """Crop, clipped to bounds and grown to >= 8x8.

    Returns (crop, (x, y, w, h) actually used, expanded flag).
    """
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise ValueError(f"zero-area bbox {bbox}")
    height, width = image.shape[:2]
    x0 = max(0, int(np.floor(x)))
    y0 = max(0, int(np.floor(y)))
    x1 = min(width, int(np.ceil(x + w)))
    y1 = min(height, int(np.ceil(y + h)))
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"bbox {bbox} lies outside the {width}x{height} image")
    x0, x1, grew_x = _expand_span(x0, x1, width, MIN_CROP_SIDE)
    y0, y1, grew_y = _expand_span(y0, y1, height, MIN_CROP_SIDE)
    return (
        image[y0:y1, x0:x1],
        (x0, y0, x1 - x0, y1 - y0),
        grew_x or grew_y,
    )


@dataclass
class EvalRecord:
    image_id: int
    instance_id: int
    class_label: str
    backend: str
    variant: str
    bbox: tuple = (0, 0, 0, 0)
    bbox_expanded: bool = False
    clip_distance: Optional[float] = None
    topk_flags: dict = field(default_factory=dict)
    error: str = ""
    source_key: str = ""
    inpainted_key: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    def to_row(self) -> dict:
        flags = self.topk_flags
        return {
            "image_id": self.image_id,
            "instance_id": self.instance_id,
            "class_label": self.class_label,
            "backend": self.backend,
            "variant": self.variant,
            "bbox_x": self.bbox[0],
            "bbox_y": self.bbox[1],
            "bbox_w": self.bbox[2],
            "bbox_h": self.bbox[3],
            "bbox_expanded": int(self.bbox_expanded),
            "clip_distance": "" if self.clip_distance is None
            else repr(self.clip_distance),
            "removed_top1": "" if not flags else int(flags[1]),
            "removed_top3": "" if not flags else int(flags[3]),
            "removed_top5": "" if not flags else int(flags[5]),
            "error": self.error,
        }

    def to_state(self) -> dict:
        return {
            "image_id": self.image_id,
            "instance_id": self.instance_id,
            "class_label": self.class_label,
            "backend": self.backend,
            "variant": self.variant,
            "bbox": list(self.bbox),
            "bbox_expanded": self.bbox_expanded,
            "clip_distance": self.clip_distance,
            "topk_flags": {str(k): v for k, v in self.topk_flags.items()},
            "error": self.error,
            "source_key": self.source_key,
            "inpainted_key": self.inpainted_key,
        }

    @classmethod
    def from_state(cls, data: dict) -> "EvalRecord":
        return cls(
            image_id=data["image_id"],
            instance_id=data["instance_id"],
            class_label=data["class_label"],
            backend=data["backend"],
            variant=data["variant"],
            bbox=tuple(data["bbox"]),
            bbox_expanded=data["bbox_expanded"],
            clip_distance=data["clip_distance"],
            topk_flags={int(k): v for k, v in data["topk_flags"].items()},
            error=data["error"],
            source_key=data["source_key"],
            inpainted_key=data["inpainted_key"],
        )


@dataclass
class MetricReport:
    backend: str
    variant: str
    n_instances: int
    n_skipped: int
    fid: Optional[float]
    fid_regularized: bool
    cmmd: Optional[float]
    cmmd_negative: bool
    clip_distance_mean: Optional[float]
    clip_acc: dict
    config: dict
    metadata: dict

    def validate(self) -> None:
        acc = self.clip_acc
        if acc and not (acc[1] >= acc[3] >= acc[5]):
            raise ClipawayError(f"accuracy ordering violated: {acc}")
        if self.fid is not None and self.fid < 0:
            raise ClipawayError(f"negative FID {self.fid}")

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "variant": self.variant,
            "n_instances": self.n_instances,
            "n_skipped": self.n_skipped,
            "fid": self.fid,
            "fid_regularized": self.fid_regularized,
            "cmmd": self.cmmd,
            "cmmd_negative": self.cmmd_negative,
            "clip_distance_mean": self.clip_distance_mean,
            "clip_acc": {f"@{k}": v for k, v in sorted(self.clip_acc.items())},
            "config": self.config,
            "metadata": self.metadata,
        }


def _run_label(kind: BackendKind, variant: str) -> str:
    return kind.value if variant == "bare" else f"{kind.value}+clipaway"


def _evaluate_instance(
    instance,
    stack: ModelStack,
    backend: DiffusionBackend,
    projection,
    classifier: ZeroShotClassifier,
    cache: EmbeddingCache,
    settings: dict,
    variant: str,
) -> EvalRecord:
    record = EvalRecord(
        image_id=instance.image_id,
        instance_id=instance.instance_id,
        class_label=instance.class_label,
        backend=backend.kind.value,
        variant=variant,
    )
    try:
        request = RemovalRequest(
            image=instance.image,
            mask=instance.mask,
            dilation_kernel=settings["dilation_kernel"],
            backend=backend.kind,
            steps=settings["steps"],
            guidance_scale=settings["guidance_scale"],
            ip_adapter_scale=settings["ip_adapter_scale"],
            seed=derive_seed(
                settings["base_seed"], instance.image_id, instance.instance_id
            ),
        )
        result = remove_object(
            request, stack.region_encoder, stack.adapter, backend, projection
        )
        source_crop, used_bbox, expanded = crop_bbox(instance.image, instance.bbox)
        inpainted_crop = result.output[
            used_bbox[1] : used_bbox[1] + used_bbox[3],
            used_bbox[0] : used_bbox[0] + used_bbox[2],
        ]
        record.bbox = used_bbox
        record.bbox_expanded = expanded
        record.clip_distance = clip_distance(
            source_crop, inpainted_crop, stack.plain_encoder
        )
        record.topk_flags = classifier.topk_flags(source_crop, inpainted_crop)
        record.source_key, _ = cache.get_or_compute(
            instance.image, stack.plain_encoder
        )
        record.inpainted_key, _ = cache.get_or_compute(
            result.output, stack.plain_encoder
        )
    except (ClipawayError, ValueError) as exc:
        record.error = f"{type(exc).__name__}: {exc}"
        logger.warning(
            "instance %s/%s skipped: %s",
            instance.image_id, instance.instance_id, record.error,
        )
    return record


def _aggregate(
    records: list,
    cache: EmbeddingCache,
    label: tuple,
    settings: dict,
    stack: ModelStack,
    cmmd_sigma: float,
) -> MetricReport:
    kind_value, variant = label
    good = [r for r in records if r.ok]
    n_skipped = len(records) - len(good)

    distance_mean = None
    clip_acc: dict = {}
    if good:
        distance_mean = float(np.mean([r.clip_distance for r in good]))
        clip_acc = {
            k: 100.0 * float(np.mean([r.topk_flags[k] for r in good]))
            for k in TOPK_LEVELS
        }

    fid_value = None
    fid_regularized = False
    cmmd_value = None
    cmmd_negative = False
    if len(good) >= 2:
        source = np.stack([cache.load(r.source_key).values for r in good])
        inpainted = np.stack([cache.load(r.inpainted_key).values for r in good])
        fid_details: dict = {}
        fid_value = fid(source, inpainted, details=fid_details)
        fid_regularized = fid_details["regularized"]
        norms_s = np.linalg.norm(source, axis=1, keepdims=True)
        norms_i = np.linalg.norm(inpainted, axis=1, keepdims=True)
        cmmd_details: dict = {}
        cmmd_value = cmmd(
            source / norms_s, inpainted / norms_i,
            sigma=cmmd_sigma, details=cmmd_details,
        )
        cmmd_negative = cmmd_details["negative"]

    report = MetricReport(
        backend=kind_value,
        variant=variant,
        n_instances=len(good),
        n_skipped=n_skipped,
        fid=fid_value,
        fid_regularized=fid_regularized,
        cmmd=cmmd_value,
        cmmd_negative=cmmd_negative,
        clip_distance_mean=distance_mean,
        clip_acc=clip_acc,
        config=dict(settings),
        metadata={
            "clip_distance": "1 - cosine_similarity",
            "prompt_template": PROMPT_TEMPLATE,
            "cmmd_sigma": cmmd_sigma,
            "cmmd_features": "unit-normalized",
            "fid_features": "raw",
            "feature_extractor": stack.extractor_id,
        },
    )
    report.validate()
    return report


class _RunState:
    """Per-run progress file: completed records keyed by instance."""

    def __init__(self, path: Path, cache: EmbeddingCache):
        self.path = path
        self.cache = cache
        self.records: dict = {}
        if path.is_file():
            payload = json.loads(path.read_text())
            if payload.get("version") != STATE_VERSION:
                logger.warning("discarding state file %s (version mismatch)", path)
            else:
                for key, data in payload["records"].items():
                    record = EvalRecord.from_state(data)
                    if record.ok and (
                        self.cache.load(record.source_key) is None
                        or self.cache.load(record.inpainted_key) is None
                    ):
                        # cache entry vanished; redo this instance
                        continue
                    self.records[key] = record

    @staticmethod
    def key_for(instance) -> str:
        return f"{instance.image_id}:{instance.instance_id}"

    def add(self, instance, record: EvalRecord) -> None:
        self.records[self.key_for(instance)] = record
        self.flush()

    def flush(self) -> None:
        payload = {
            "version": STATE_VERSION,
            "records": {k: r.to_state() for k, r in sorted(self.records.items())},
        }
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload))
        tmp.replace(self.path)


def _write_csv(path: Path, records: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for record in records:
            writer.writerow(record.to_row())


def run_benchmark(
    instances: Iterable,
    class_names,
    stack: ModelStack,
    out_dir,
    *,
    backends=(BackendKind.SD_INPAINT,),
    with_clipaway: bool = True,
    limit: Optional[int] = None,
    dilation_kernel: int = 5,
    steps: int = 50,
    guidance_scale: float = 7.5,
    ip_adapter_scale: float = 1.0,
    base_seed: int = 0,
    cmmd_sigma: float = 10.0,
    backend_factory: Optional[Callable[[BackendKind], DiffusionBackend]] = None,
    ingest_stats: Optional[dict] = None,
) -> dict:
    """Score every (backend, variant) combination over the instance stream.

    Returns {run label: MetricReport}; writes one CSV and one JSON per run
    plus the shared feature cache under out_dir. Failed instances are
    skipped and counted, never fatal.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if backend_factory is None:
        def backend_factory(kind):
            return create_backend(kind, mock_mode=True)

    instances = list(instances if limit is None else islice(instances, limit))
    instances.sort(key=lambda r: (r.image_id, r.instance_id))
    classifier = None
    if instances:
        classifier = ZeroShotClassifier(
            class_names, stack.plain_encoder, stack.text_encoder
        )
    cache = EmbeddingCache(out_dir / "cache", stack.extractor_id)
    settings = {
        "dilation_kernel": dilation_kernel,
        "steps": steps,
        "guidance_scale": guidance_scale,
        "ip_adapter_scale": ip_adapter_scale,
        "base_seed": base_seed,
        "limit": limit,
        "with_clipaway": with_clipaway,
    }
    if ingest_stats is not None:
        settings["ingest"] = dict(ingest_stats)

    variants = ["bare"] + (["clipaway"] if with_clipaway else [])
    reports: dict = {}
    for kind in backends:
        backend = backend_factory(kind)
        for variant in variants:
            label = _run_label(kind, variant)
            slug = label.replace("+", "_")
            projection = (
                stack.token_projection if variant == "clipaway"
                else _ZeroProjection(stack.token_projection)
            )
            state = _RunState(out_dir / f"state_{slug}.json", cache)
            for instance in instances:
                if state.key_for(instance) in state.records:
                    continue
                record = _evaluate_instance(
                    instance, stack, backend, projection, classifier,
                    cache, settings, variant,
                )
                state.add(instance, record)
            ordered = [
                state.records[state.key_for(inst)] for inst in instances
            ]
            report = _aggregate(
                ordered, cache, (kind.value, variant), settings, stack, cmmd_sigma
            )
            _write_csv(out_dir / f"instances_{slug}.csv", ordered)
            report_path = out_dir / f"report_{slug}.json"
            report_path.write_text(
                json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
            )
            reports[label] = report
            logger.info("finished %s: %d scored, %d skipped",
                        label, report.n_instances, report.n_skipped)
    return reports


