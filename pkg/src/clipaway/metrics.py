"""Removal-quality metrics: FID, CMMD, CLIP distance, zero-shot accuracy."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .embedding import cosine_similarity

PROMPT_TEMPLATE = "a photo of a {}"
TOPK_LEVELS = (1, 3, 5)
_FID_EPS = 1e-6


def _feature_matrix(features, name: str) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-d (n_samples, dim), got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError(f"{name} needs at least 2 samples, got {x.shape[0]}")
    return x


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    # eigendecomposition route; tiny negative eigenvalues are rounding noise
    vals, vecs = np.linalg.eigh(matrix)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(features_a, features_b, *, details: Optional[dict] = None) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the matrix
    square root computed on the symmetric product sqrt(S_a) S_b sqrt(S_a).
    Near-singular covariances get a 1e-6 ridge on both sides; pass a dict
    as `details` to learn whether that happened.
    """
    a = _feature_matrix(features_a, "features_a")
    b = _feature_matrix(features_b, "features_b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if details is not None:
        details["regularized"] = False
    if a.shape == b.shape and a.tobytes() == b.tobytes():
        return 0.0

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))

    min_eig = min(np.linalg.eigvalsh(cov_a)[0], np.linalg.eigvalsh(cov_b)[0])
    if min_eig < _FID_EPS:
        ridge = _FID_EPS * np.eye(cov_a.shape[0])
        cov_a = cov_a + ridge
        cov_b = cov_b + ridge
        if details is not None:
            details["regularized"] = True

    sqrt_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(sqrt_a @ cov_b @ sqrt_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(0.0, value)


def _rbf_kernel(x: np.ndarray, y: np.ndarray, sigma: float) -> np.ndarray:
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        + np.sum(y * y, axis=1)[None, :]
        - 2.0 * (x @ y.T)
    )
    np.clip(d2, 0.0, None, out=d2)
    return np.exp(d2 / (-2.0 * sigma * sigma))


def cmmd(
    features_a,
    features_b,
    *,
    sigma: float = 10.0,
    biased: bool = False,
    details: Optional[dict] = None,
) -> float:
    """Squared maximum mean discrepancy under a Gaussian RBF kernel.

    The default is the unbiased estimator, which can go slightly negative
    on matching distributions; the value is returned as-is and flagged in
    `details`. Bandwidth sigma is meant for unit-normalized features.
    """
    a = _feature_matrix(features_a, "features_a")
    b = _feature_matrix(features_b, "features_b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")

    k_aa = _rbf_kernel(a, a, sigma)
    k_bb = _rbf_kernel(b, b, sigma)
    k_ab = _rbf_kernel(a, b, sigma)
    if biased:
        value = float(k_aa.mean() + k_bb.mean() - 2.0 * k_ab.mean())
    else:
        m, n = a.shape[0], b.shape[0]
        term_a = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
        term_b = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
        value = float(term_a + term_b - 2.0 * k_ab.mean())
    if details is not None:
        details["sigma"] = sigma
        details["estimator"] = "biased" if biased else "unbiased"
        details["negative"] = value < 0.0
    return value


def clip_distance(source_crop, inpainted_crop, plain_encoder) -> float:
    """1 - cosine similarity between crop embeddings; 0 iff crops encode identically."""
    source_crop = np.asarray(source_crop)
    inpainted_crop = np.asarray(inpainted_crop)
    if source_crop.size == 0 or inpainted_crop.size == 0:
        raise ValueError("zero-area crop")
    e_src = plain_encoder.encode_plain(source_crop)
    e_inp = plain_encoder.encode_plain(inpainted_crop)
    return float(1.0 - cosine_similarity(e_src, e_inp))


class ZeroShotClassifier:
    """Class ranking by image-text embedding similarity.

    Text embeddings are computed once per class set so per-instance calls
    only pay for the image side.
    """

    def __init__(self, class_names, plain_encoder, text_encoder,
                 template: str = PROMPT_TEMPLATE):
        self.class_names = list(class_names)
        if not self.class_names:
            raise ValueError("class set is empty")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")
        self.template = template
        self._plain = plain_encoder
        self._text: list = [
            text_encoder.encode_text(template.format(name))
            for name in self.class_names
        ]

    def rank(self, crop) -> list:
        """Class names, most likely first. Ties break by class-list order."""
        e_img = self._plain.encode_plain(np.asarray(crop))
        sims = np.array([cosine_similarity(e_img, e_txt) for e_txt in self._text])
        order = np.argsort(-sims, kind="stable")
        return [self.class_names[i] for i in order]

    def topk_flags(self, source_crop, inpainted_crop) -> dict:
        """flag@k = source crop's predicted class absent from inpainted top-k."""
        source_class = self.rank(source_crop)[0]
        ranking = self.rank(inpainted_crop)
        return {k: source_class not in ranking[:k] for k in TOPK_LEVELS}


def clip_accuracy(source_crop, inpainted_crop, class_set, plain_encoder,
                  text_encoder, *, template: str = PROMPT_TEMPLATE) -> dict:
    """Removal-success flags at k = 1, 3, 5 for a single instance."""
    clf = ZeroShotClassifier(class_set, plain_encoder, text_encoder, template)
    return clf.topk_flags(source_crop, inpainted_crop)
