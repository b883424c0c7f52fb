"""End-to-end object removal.

The inference path: dilate the mask, encode the region and its
complement, project both through the adapter, reject the foreground
direction from the background embedding, turn the result into
image-prompt tokens, and drive a mask-conditioned diffusion backend
from seeded noise. Optionally composite the generation back over the
source so pixels outside the dilated mask are untouched.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.ndimage import maximum_filter

from .adapter import ProjectionAdapter
from .backends import BackendKind, DiffusionBackend, TokenProjection
from .embedding import Embedding, cosine_similarity, project_away
from .encoders import RegionEncoder, RegionImage
from .errors import (
    BackendMismatchError,
    DegenerateForegroundError,
    DimensionMismatchError,
    EmptyMaskWarning,
    NonFiniteLatentError,
    OutOfMemoryError,
)

# e_final shorter than this fraction of ||e_bg|| means the projected
# embeddings were (numerically) parallel and no background direction
# survives; conditioning on a zero vector is undefined backend behavior.
PARALLEL_RTOL = 1e-6


def _check_binary_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.all(np.isin(np.unique(mask), (0, 1))):
        raise DimensionMismatchError("mask must be binary {0, 1}")
    return mask.astype(np.uint8)


def dilate_mask(mask: np.ndarray, kernel: int) -> np.ndarray:
    """Morphological dilation with a kernel x kernel square structuring
    element. kernel must be odd so the element is centered; 1 is the
    identity."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"dilation kernel must be odd and >= 1, got {kernel}")
    mask = _check_binary_mask(mask)
    if kernel == 1:
        return mask.copy()
    return maximum_filter(mask, size=kernel, mode="constant", cval=0)


def downscale_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool the mask over factor x factor blocks (ceil at the edges)
    so any partially-masked latent cell counts as masked; nothing under
    the mask ever leaks into the known-context region."""
    mask = _check_binary_mask(mask)
    h, w = mask.shape
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        mask = np.pad(mask, ((0, ph), (0, pw)))
    hh, ww = mask.shape
    return mask.reshape(hh // factor, factor, ww // factor, factor).max(axis=(1, 3))


@dataclass
class RemovalRequest:
    image: np.ndarray
    mask: np.ndarray
    dilation_kernel: int = 5
    backend: BackendKind = BackendKind.SD_INPAINT
    steps: int = 50
    guidance_scale: float = 7.5
    ip_adapter_scale: float = 1.0
    seed: int = 0
    composite_unmasked: bool = True

    def __post_init__(self) -> None:
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise DimensionMismatchError(
                f"image must be HxWx3 uint8, got shape {img.shape} dtype {img.dtype}"
            )
        mask = _check_binary_mask(self.mask)
        if mask.shape != img.shape[:2]:
            raise DimensionMismatchError(
                f"mask shape {mask.shape} does not match image shape {img.shape[:2]}"
            )
        if self.dilation_kernel < 1 or self.dilation_kernel % 2 == 0:
            raise ValueError("dilation_kernel must be odd and >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        self.image = img
        self.mask = mask

    def config_echo(self) -> dict[str, Any]:
        return {
            "dilation_kernel": self.dilation_kernel,
            "backend": self.backend.value,
            "steps": self.steps,
            "guidance_scale": self.guidance_scale,
            "ip_adapter_scale": self.ip_adapter_scale,
            "seed": self.seed,
            "composite_unmasked": self.composite_unmasked,
            "text_prompt": "",
        }


@dataclass
class RemovalResult:
    output: np.ndarray
    diagnostics: dict[str, Any]
    e_fg: Embedding
    e_bg: Embedding
    e_final: Embedding


def compute_final_embedding(
    image: np.ndarray,
    mask: np.ndarray,
    region_encoder: RegionEncoder,
    adapter: ProjectionAdapter,
) -> tuple[Embedding, dict[str, Any]]:
    """Foreground-free conditioning embedding for an (already dilated)
    mask, plus diagnostics. Returns (e_final, diagnostics); the
    intermediate projected embeddings ride along in the diagnostics
    under non-serializable keys prefixed with an underscore."""
    mask = _check_binary_mask(mask)
    warn_tags: list[str] = []
    if mask.sum() == 0:
        warnings.warn("removal mask selects no pixels", EmptyMaskWarning, stacklevel=2)
        warn_tags.append("empty_mask")

    alpha = mask.astype(np.float32)
    e_fg = adapter.forward(region_encoder.encode_region(RegionImage(image, alpha)))
    e_bg = adapter.forward(region_encoder.encode_region(RegionImage(image, 1.0 - alpha)))
    e_final = project_away(e_bg, e_fg)
    if e_final.norm() <= PARALLEL_RTOL * e_bg.norm():
        raise DegenerateForegroundError(
            "foreground and background embeddings are parallel; "
            "no background direction survives the rejection"
        )
    diagnostics = {
        "e_fg_norm": e_fg.norm(),
        "e_bg_norm": e_bg.norm(),
        "e_final_norm": e_final.norm(),
        "cos_final_fg": cosine_similarity(e_final, e_fg),
        "warnings": warn_tags,
        "_e_fg": e_fg,
        "_e_bg": e_bg,
    }
    return e_final, diagnostics


def unipaint_condition(
    e_final: Embedding,
    mask: np.ndarray,
    projection: TokenProjection,
    backend: BackendKind,
    ip_adapter_scale: float = 1.0,
) -> np.ndarray:
    """Image-prompt tokens with the mask-coverage gating applied to the
    projected embedding tokens. An all-ones mask reduces to the plain
    (ungated) conditioning path; an all-zero mask suppresses the tokens
    entirely."""
    if backend is not BackendKind.UNIPAINT:
        raise BackendMismatchError(
            f"unipaint conditioning requested for backend {backend.value}"
        )
    mask = _check_binary_mask(mask)
    gate = float(mask.mean()) if mask.size else 0.0
    return projection.project(e_final) * ip_adapter_scale * gate


def remove_object(
    req: RemovalRequest,
    region_encoder: RegionEncoder,
    adapter: ProjectionAdapter,
    backend: DiffusionBackend,
    token_projection: TokenProjection,
) -> RemovalResult:
    """Run the full removal for one request. Deterministic: the output
    is a pure function of (request, weights)."""
    t0 = time.monotonic()
    dilated = dilate_mask(req.mask, req.dilation_kernel)
    e_final, diagnostics = compute_final_embedding(
        req.image, dilated, region_encoder, adapter
    )
    e_fg = diagnostics.pop("_e_fg")
    e_bg = diagnostics.pop("_e_bg")

    if req.backend is BackendKind.UNIPAINT:
        tokens = unipaint_condition(
            e_final, dilated, token_projection, req.backend, req.ip_adapter_scale
        )
    else:
        tokens = token_projection.project(e_final) * req.ip_adapter_scale

    h, w = req.image.shape[:2]
    d = backend.latent_downscale
    latent_mask = downscale_mask(dilated, d)
    rng = np.random.default_rng(req.seed)
    noise = rng.standard_normal((4, latent_mask.shape[0], latent_mask.shape[1]))

    try:
        generated = backend.generate(
            noise=noise,
            latent_mask=latent_mask,
            tokens=tokens,
            text_prompt="",
            steps=req.steps,
            guidance_scale=req.guidance_scale,
            source=req.image,
        )
    except MemoryError as exc:
        raise OutOfMemoryError(f"generation ran out of memory at {w}x{h}") from exc
    generated = np.asarray(generated, dtype=np.uint8)
    if generated.shape != req.image.shape:
        raise NonFiniteLatentError(
            f"backend returned shape {generated.shape}, expected {req.image.shape}"
        )

    if req.composite_unmasked:
        sel = dilated.astype(bool)
        output = req.image.copy()
        output[sel] = generated[sel]
    else:
        output = generated

    diagnostics.update(
        backend=req.backend.value,
        unipaint_token_gating=req.backend is BackendKind.UNIPAINT,
        mask_area=int(req.mask.sum()),
        dilated_mask_area=int(dilated.sum()),
        latent_mask_shape=list(latent_mask.shape),
        elapsed_seconds=time.monotonic() - t0,
        config=req.config_echo(),
    )
    return RemovalResult(
        output=output, diagnostics=diagnostics, e_fg=e_fg, e_bg=e_bg, e_final=e_final
    )
