"""Encoder interfaces plus deterministic mock implementations.

Two encoder families feed the pipeline: a region-aware encoder that
takes an extra alpha channel marking the region of interest (768-d
output), and a plain image encoder emitting the 1024-d space the
image-prompt conditioning was trained against. Real checkpoints are
wrapped behind the same small protocol as the mocks, so every
downstream module runs without weights.

The mock region encoder is deliberately simple but alpha-sensitive: it
projects the concatenated 64-bin grayscale histograms of pixels*alpha
and pixels*(1-alpha) through a fixed seeded random matrix. Distinct
(image, alpha) pairs produce distinct embeddings with overwhelming
probability, which is the only property the pipeline tests rely on.
"""

from __future__ import annotations

import hashlib
import io
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image, PngImagePlugin

from .embedding import Embedding, EmbeddingSpace
from .errors import EmptyMaskWarning, ImageDecodeError, WeightsNotLoadedError

_HIST_BINS = 64
_LUMA = np.array([0.299, 0.587, 0.114])


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass(frozen=True)
class RegionImage:
    """An RGB image paired with a soft region-of-interest map."""

    pixels: np.ndarray
    alpha: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ImageDecodeError(
                f"pixels must be HxWx3 uint8, got shape {px.shape} dtype {px.dtype}"
            )
        al = np.asarray(self.alpha, dtype=np.float32)
        if al.shape != px.shape[:2]:
            raise ImageDecodeError(
                f"alpha shape {al.shape} does not match image shape {px.shape[:2]}"
            )
        if al.size and (float(al.min()) < 0.0 or float(al.max()) > 1.0):
            raise ImageDecodeError("alpha values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "alpha", al)


@runtime_checkable
class RegionEncoder(Protocol):
    input_resolution: int
    output_space: EmbeddingSpace

    def encode_region(self, img: RegionImage) -> Embedding: ...


@runtime_checkable
class PlainEncoder(Protocol):
    input_resolution: int
    output_space: EmbeddingSpace

    def encode_plain(self, pixels: np.ndarray) -> Embedding: ...


def preprocess_alpha(mask: np.ndarray, target_resolution: int) -> np.ndarray:
    """Resample a binary mask to the encoder's square input resolution.

    Area-weighted (box) resampling, so downscaled boundaries go soft
    while a constant mask stays exactly constant. An empty mask is
    processed normally but raises an EmptyMaskWarning.
    """
    mask = np.asarray(mask)
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise ImageDecodeError("mask must be binary {0, 1}")
    if mask.sum() == 0:
        warnings.warn("mask selects no pixels", EmptyMaskWarning, stacklevel=2)
    m = mask.astype(np.float32)
    if mask.shape == (target_resolution, target_resolution):
        return m
    if vals.size == 1:
        # Constant input: resampling must not disturb it (an all-ones
        # mask is the whole-image training convention).
        return np.full((target_resolution, target_resolution), m.flat[0], dtype=np.float32)
    img = Image.fromarray(m, mode="F")
    out = img.resize((target_resolution, target_resolution), resample=Image.Resampling.BOX)
    return np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0)


def _gray(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) @ _LUMA


def _norm_hist(values: np.ndarray) -> np.ndarray:
    hist, _ = np.histogram(values, bins=_HIST_BINS, range=(0.0, 256.0))
    return hist.astype(np.float64) / max(values.size, 1)


class MockRegionEncoder:
    """Weight-free region encoder: seeded random projection of the
    region/complement grayscale histograms. Alpha-sensitive and
    deterministic; not semantically meaningful."""

    input_resolution = 224
    output_space = EmbeddingSpace.ALPHA_CLIP_768

    def __init__(self, seed: int = 768):
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((768, 2 * _HIST_BINS))

    def encode_region(self, img: RegionImage) -> Embedding:
        gray = _gray(img.pixels)
        alpha = img.alpha.astype(np.float64)
        feats = np.concatenate(
            [_norm_hist(gray * alpha), _norm_hist(gray * (1.0 - alpha))]
        )
        out = self._proj @ feats
        return Embedding(values=out.astype(np.float32), space=self.output_space)


class MockPlainEncoder:
    """Weight-free plain encoder: grayscale histogram plus a content-hash
    fingerprint, projected to 1024-d. The fingerprint guarantees that
    byte-distinct images get distinct embeddings."""

    input_resolution = 224
    output_space = EmbeddingSpace.ADAPTER_1024

    def __init__(self, seed: int = 1024):
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((1024, _HIST_BINS + 16))

    def encode_plain(self, pixels: np.ndarray) -> Embedding:
        px = np.asarray(pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ImageDecodeError(
                f"pixels must be HxWx3 uint8, got shape {px.shape} dtype {px.dtype}"
            )
        digest = hashlib.sha256(px.tobytes() + str(px.shape).encode()).digest()
        finger = np.frombuffer(digest, dtype="<u2").astype(np.float64) / 65535.0
        feats = np.concatenate([_norm_hist(_gray(px)), finger])
        out = self._proj @ feats
        return Embedding(values=out.astype(np.float32), space=self.output_space)


class MockTextEncoder:
    """Weight-free text encoder for zero-shot label ranking: the text's
    content hash seeds a unit-norm 1024-d draw."""

    output_space = EmbeddingSpace.ADAPTER_1024

    def encode_text(self, text: str) -> Embedding:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(1024)
        v /= np.linalg.norm(v)
        return Embedding(values=v.astype(np.float32), space=self.output_space)


# -- image/mask decoding ------------------------------------------------------


def decode_image_bytes(blob: bytes) -> np.ndarray:
    """PNG/JPEG bytes to an HxWx3 uint8 array."""
    try:
        with Image.open(io.BytesIO(blob)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise ImageDecodeError(f"cannot decode image: {exc}") from exc


def decode_mask_bytes(blob: bytes) -> np.ndarray:
    """Single-channel PNG bytes to a binary {0,1} mask; value > 127 is
    foreground."""
    try:
        with Image.open(io.BytesIO(blob)) as img:
            gray = np.asarray(img.convert("L"))
    except Exception as exc:
        raise ImageDecodeError(f"cannot decode mask: {exc}") from exc
    return (gray > 127).astype(np.uint8)


def encode_image_png(pixels: np.ndarray, *, text_metadata: dict = None) -> bytes:
    """PNG bytes; text_metadata entries become tEXt chunks (str -> str)."""
    buf = io.BytesIO()
    info = None
    if text_metadata:
        info = PngImagePlugin.PngInfo()
        for key, value in text_metadata.items():
            info.add_text(key, value)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(
        buf, format="PNG", pnginfo=info
    )
    return buf.getvalue()


# -- real-checkpoint wrappers -------------------------------------------------

# CLIP-style channel statistics used by the released region encoder; the
# alpha channel is mapped to zero-mean unit-ish range with its own pair.
_CLIP_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
_CLIP_STD = np.array([0.26862954, 0.26130258, 0.27577711])
_ALPHA_MEAN = 0.5
_ALPHA_STD = 0.26


def _prepare_pixels(pixels: np.ndarray, resolution: int) -> np.ndarray:
    img = Image.fromarray(pixels).resize((resolution, resolution), Image.Resampling.BICUBIC)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return ((arr - _CLIP_MEAN) / _CLIP_STD).astype(np.float32)


class TorchScriptRegionEncoder:
    """Region encoder backed by a scripted module on disk.

    The module is expected to map (1,3,R,R) pixels plus a (1,1,R,R)
    normalized alpha to a (1,768) embedding. Loading is explicit and
    content-hash checked; encode before load is an error.
    """

    output_space = EmbeddingSpace.ALPHA_CLIP_768

    def __init__(self, path: str | Path, *, sha256: str | None = None,
                 input_resolution: int = 224):
        self.path = Path(path)
        self.expected_sha = sha256
        self.input_resolution = input_resolution
        self._module = None

    def load(self) -> None:
        import torch

        if not self.path.exists():
            raise WeightsNotLoadedError(f"no encoder checkpoint at {self.path}")
        if self.expected_sha is not None:
            actual = sha256_file(self.path)
            if actual != self.expected_sha:
                raise WeightsNotLoadedError(
                    f"checkpoint hash mismatch for {self.path}: {actual}"
                )
        self._module = torch.jit.load(str(self.path), map_location="cpu").eval()

    def encode_region(self, img: RegionImage) -> Embedding:
        if self._module is None:
            raise WeightsNotLoadedError("encoder used before load()")
        import torch

        res = self.input_resolution
        px = _prepare_pixels(img.pixels, res)
        alpha = preprocess_alpha((img.alpha > 0.5).astype(np.uint8), res)
        alpha = (alpha - _ALPHA_MEAN) / _ALPHA_STD
        with torch.no_grad():
            out = self._module(
                torch.from_numpy(px.transpose(2, 0, 1)[None]),
                torch.from_numpy(alpha.astype(np.float32)[None, None]),
            )
        return Embedding(values=out.numpy().reshape(-1).astype(np.float32),
                         space=self.output_space)


class TorchScriptPlainEncoder:
    """Plain encoder backed by a scripted module mapping (1,3,R,R) pixels
    to a (1,1024) embedding."""

    output_space = EmbeddingSpace.ADAPTER_1024

    def __init__(self, path: str | Path, *, sha256: str | None = None,
                 input_resolution: int = 224):
        self.path = Path(path)
        self.expected_sha = sha256
        self.input_resolution = input_resolution
        self._module = None

    def load(self) -> None:
        import torch

        if not self.path.exists():
            raise WeightsNotLoadedError(f"no encoder checkpoint at {self.path}")
        if self.expected_sha is not None:
            actual = sha256_file(self.path)
            if actual != self.expected_sha:
                raise WeightsNotLoadedError(
                    f"checkpoint hash mismatch for {self.path}: {actual}"
                )
        self._module = torch.jit.load(str(self.path), map_location="cpu").eval()

    def encode_plain(self, pixels: np.ndarray) -> Embedding:
        if self._module is None:
            raise WeightsNotLoadedError("encoder used before load()")
        import torch

        px = _prepare_pixels(np.asarray(pixels, dtype=np.uint8), self.input_resolution)
        with torch.no_grad():
            out = self._module(torch.from_numpy(px.transpose(2, 0, 1)[None]))
        return Embedding(values=out.numpy().reshape(-1).astype(np.float32),
                         space=self.output_space)
