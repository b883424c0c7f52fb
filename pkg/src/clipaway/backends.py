"""Diffusion backend interface, token projection, and mock backends.

A backend is an opaque pretrained inpainter: it takes seeded initial
noise, the mask downscaled to latent resolution, image-prompt
conditioning tokens, an (empty) text prompt, and sampler settings, and
returns an image of the source's dimensions. Three backend families are
supported behind one enum, and real implementations plug in through a
registry. The mock backend is a cheap deterministic stand-in whose
output visibly depends on the conditioning tokens, which is what the
differential tests need.
"""

from __future__ import annotations

import enum
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from .embedding import Embedding, EmbeddingSpace
from .errors import (
    BackendUnavailableError,
    DimensionMismatchError,
    NonFiniteLatentError,
)

LATENT_DOWNSCALE = 8


class BackendKind(enum.Enum):
    SD_INPAINT = "sd_inpaint"
    BLENDED_LATENT = "blended_latent"
    UNIPAINT = "unipaint"

    @classmethod
    def parse(cls, name: str) -> "BackendKind":
        aliases = {
            "sd": cls.SD_INPAINT,
            "sd_inpaint": cls.SD_INPAINT,
            "blended": cls.BLENDED_LATENT,
            "blended_latent": cls.BLENDED_LATENT,
            "unipaint": cls.UNIPAINT,
        }
        try:
            return aliases[name.strip().lower()]
        except KeyError:
            raise BackendUnavailableError(f"unknown backend {name!r}") from None


@runtime_checkable
class DiffusionBackend(Protocol):
    kind: BackendKind
    latent_downscale: int

    def generate(
        self,
        noise: np.ndarray,
        latent_mask: np.ndarray,
        tokens: np.ndarray,
        text_prompt: str,
        steps: int,
        guidance_scale: float,
        source: np.ndarray,
    ) -> np.ndarray: ...


class TokenProjection(Protocol):
    n_tokens: int
    token_dim: int

    def project(self, e: Embedding) -> np.ndarray: ...


class MockTokenProjection:
    """Fixed seeded linear map from the 1024-d conditioning embedding to
    a 4x768 image-prompt token block."""

    n_tokens = 4
    token_dim = 768

    def __init__(self, seed: int = 4096):
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal(
            (self.n_tokens * self.token_dim, 1024)
        ) / np.sqrt(1024.0)

    def project(self, e: Embedding) -> np.ndarray:
        if e.space is not EmbeddingSpace.ADAPTER_1024:
            raise DimensionMismatchError(
                f"token projection expects ADAPTER_1024, got {e.space.name}"
            )
        flat = self._proj @ e.values.astype(np.float64)
        return flat.reshape(self.n_tokens, self.token_dim)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


class MockInpaintBackend:
    """Deterministic stand-in for a latent diffusion inpainter.

    The "generation" mixes the upsampled initial noise with a color
    field derived from the conditioning tokens, so different embeddings
    produce different pixels (the property the conditioning-path tests
    rely on) while staying pure and instant. Each backend kind gets a
    distinct flavor:

    - SD_INPAINT paints the token-driven texture everywhere.
    - BLENDED_LATENT re-imposes the source outside the (latent) mask at
      every step; mocked as exact source passthrough outside the
      upsampled latent mask even before pixel compositing.
    - UNIPAINT is the SD texture; its token gating happens upstream.
    """

    latent_downscale = LATENT_DOWNSCALE

    def __init__(self, kind: BackendKind):
        self.kind = kind
        rng = np.random.default_rng(90210)
        self._mix = rng.standard_normal((3, 4, 768)) / np.sqrt(4 * 768.0)

    def generate(self, noise, latent_mask, tokens, text_prompt, steps,
                 guidance_scale, source) -> np.ndarray:
        noise = np.asarray(noise, dtype=np.float64)
        tokens = np.asarray(tokens, dtype=np.float64)
        if not (np.all(np.isfinite(noise)) and np.all(np.isfinite(tokens))):
            raise NonFiniteLatentError("non-finite values in noise or conditioning")
        h, w = source.shape[:2]
        d = self.latent_downscale

        # One latent channel upsampled back to pixel space.
        up = np.repeat(np.repeat(noise[0], d, axis=0), d, axis=1)[:h, :w]
        pix_mask = np.repeat(np.repeat(latent_mask, d, axis=0), d, axis=1)[:h, :w]

        tok = np.zeros((4, 768))
        tok[: min(4, tokens.shape[0]), : min(768, tokens.shape[1])] = tokens[:4, :768]
        color = _sigmoid(np.einsum("ctd,td->c", self._mix, tok))
        # Guidance and step count nudge the texture so sampler settings
        # are observable in the output.
        sharp = np.tanh(up * (0.5 + guidance_scale / 15.0) + steps / 200.0)
        gen = np.empty((h, w, 3), dtype=np.float64)
        for c in range(3):
            gen[:, :, c] = 255.0 * _sigmoid(1.5 * sharp + 4.0 * (color[c] - 0.5))

        if not np.all(np.isfinite(gen)):
            raise NonFiniteLatentError("generated pixels became non-finite")
        out = np.clip(gen, 0, 255).astype(np.uint8)

        if self.kind is BackendKind.BLENDED_LATENT:
            keep = pix_mask < 0.5
            out[keep] = source[keep]
        return out


class IdentityBackend:
    """No-op backend: returns the source unchanged. Exists as the eval
    harness's tripwire — a pipeline that fails every removal metric and
    passes every realism metric."""

    kind = BackendKind.SD_INPAINT
    latent_downscale = LATENT_DOWNSCALE

    def generate(self, noise, latent_mask, tokens, text_prompt, steps,
                 guidance_scale, source) -> np.ndarray:
        return np.asarray(source, dtype=np.uint8).copy()


_REGISTRY: dict[BackendKind, Callable[..., DiffusionBackend]] = {}


def register_backend(kind: BackendKind, factory: Callable[..., DiffusionBackend]) -> None:
    """Install a real backend implementation (weights-backed); the mock
    path never consults the registry."""
    _REGISTRY[kind] = factory


def create_backend(kind: BackendKind, *, mock_mode: bool, **kwargs) -> DiffusionBackend:
    if mock_mode:
        return MockInpaintBackend(kind)
    factory = _REGISTRY.get(kind)
    if factory is None:
        raise BackendUnavailableError(
            f"no real implementation registered for {kind.value}; "
            "install one via register_backend() or run in mock mode"
        )
    return factory(**kwargs)
