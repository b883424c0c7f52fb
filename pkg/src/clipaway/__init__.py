"""Background-focused object removal toolkit.

Splits an image into foreground and background region embeddings,
projects the foreground direction out of the background embedding, and
conditions a mask-based diffusion inpainter on the result so the hole is
filled with scene content instead of a replacement object. Ships with a
projection-adapter trainer, a four-metric evaluation harness, an HTTP
service, and a CLI.
"""

from .embedding import Embedding, EmbeddingSpace, cosine_similarity, project_away
from .errors import ClipawayError

__version__ = "0.1.0"

__all__ = [
    "Embedding",
    "EmbeddingSpace",
    "ClipawayError",
    "cosine_similarity",
    "project_away",
    "__version__",
]
