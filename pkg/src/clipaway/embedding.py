"""Vector math for region-focused embeddings.

The central operation is the orthogonal rejection that strips the
foreground direction out of a background-focused embedding:

    reject(b, f) = b - ((b . f) / ||f||^2) * f

The result has zero component along ``f``, so conditioning an inpainting
model on it cannot re-introduce the foreground content. Everything here
is dependency-free math over immutable inputs; all intermediate
computation runs in float64 and results are stored as float32 at the
module boundary.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateEmbeddingError,
    DegenerateForegroundError,
    DimensionMismatchError,
    FormatVersionMismatchError,
)

# Norms at or below this are treated as zero vectors. Real encoders never
# emit them, so hitting this threshold means an upstream bug.
EPS_NORM = 1e-8

_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sHH")  # magic, space tag, reserved


class EmbeddingSpace(enum.Enum):
    """The two encoder output spaces the toolkit moves between."""

    ALPHA_CLIP_768 = (1, 768)
    ADAPTER_1024 = (2, 1024)

    @property
    def tag(self) -> int:
        return self.value[0]

    @property
    def dim(self) -> int:
        return self.value[1]

    @classmethod
    def from_tag(cls, tag: int) -> "EmbeddingSpace":
        for space in cls:
            if space.tag == tag:
                return space
        raise FormatVersionMismatchError(f"unknown embedding space tag {tag}")


@dataclass(frozen=True)
class Embedding:
    """A fixed-dimension real vector in a named encoder space.

    ``values`` is stored as a read-only float32 array whose length must
    equal the space's dimension; NaN/Inf entries are rejected.
    """

    values: np.ndarray
    space: EmbeddingSpace = field(default=EmbeddingSpace.ADAPTER_1024)

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float32).reshape(-1).copy()
        if arr.shape[0] != self.space.dim:
            raise DimensionMismatchError(
                f"{self.space.name} requires {self.space.dim} values, got {arr.shape[0]}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding contains NaN or Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.space.dim

    def norm(self) -> float:
        return float(np.linalg.norm(self.values.astype(np.float64)))

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(_MAGIC, self.space.tag, 0)
        return header + self.values.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Embedding":
        if len(blob) < _HEADER.size:
            raise FormatVersionMismatchError("embedding blob shorter than header")
        magic, tag, _reserved = _HEADER.unpack_from(blob)
        if magic != _MAGIC:
            raise FormatVersionMismatchError(f"bad embedding magic {magic!r}")
        space = EmbeddingSpace.from_tag(tag)
        payload = blob[_HEADER.size :]
        if len(payload) != 4 * space.dim:
            raise FormatVersionMismatchError(
                f"payload holds {len(payload) // 4} floats, {space.name} needs {space.dim}"
            )
        values = np.frombuffer(payload, dtype="<f4")
        return cls(values=values, space=space)


def save_embedding(emb: Embedding, path: str | Path) -> None:
    Path(path).write_bytes(emb.to_bytes())


def load_embedding(path: str | Path) -> Embedding:
    return Embedding.from_bytes(Path(path).read_bytes())


def _check_same_space(a: Embedding, b: Embedding) -> None:
    if a.space is not b.space:
        raise DimensionMismatchError(
            f"embeddings live in different spaces: {a.space.name} vs {b.space.name}"
        )


def project_away(background: Embedding, foreground: Embedding) -> Embedding:
    """Remove the foreground direction from the background embedding.

    Returns the component of ``background`` orthogonal to ``foreground``:
    b - ((b . f) / ||f||^2) f. Raises DegenerateForegroundError when the
    foreground norm is at or below EPS_NORM, because a zero vector
    defines no direction to reject.
    """
    _check_same_space(background, foreground)
    b = background.values.astype(np.float64)
    f = foreground.values.astype(np.float64)
    f_sq = float(np.dot(f, f))
    if f_sq <= EPS_NORM * EPS_NORM:
        raise DegenerateForegroundError(
            f"foreground norm {np.sqrt(f_sq):.3e} <= {EPS_NORM:.0e}"
        )
    coeff = float(np.dot(b, f)) / f_sq
    result = b - coeff * f
    return Embedding(values=result.astype(np.float32), space=background.space)


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    """Cosine of the angle between two embeddings, clamped to [-1, 1].

    Bit-identical inputs short-circuit to exactly 1.0 so that derived
    distances are exactly zero for unchanged content.
    """
    _check_same_space(a, b)
    if a.values.tobytes() == b.values.tobytes():
        return 1.0
    av = a.values.astype(np.float64)
    bv = b.values.astype(np.float64)
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise DegenerateEmbeddingError(
            f"cosine undefined for near-zero norms ({na:.3e}, {nb:.3e})"
        )
    return float(np.clip(np.dot(av, bv) / (na * nb), -1.0, 1.0))
