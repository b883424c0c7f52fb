"""Trainable MLP projecting region embeddings into the inpainting
conditioning space.

Seven affine layers with widths 768-768-768-1024-1024-1024-1024-1024;
layers 1 through 6 are each followed by layer normalization and GELU,
layer 7 is a bare affine map. Training aligns adapter(region_encoder(x,
alpha=ones)) with plain_encoder(x) under mean squared error using Adam
with decoupled weight decay.

Everything is plain numpy in float64. Parameters live in one flat vector
with per-layer views, so the optimizer update is a handful of whole-array
operations instead of a Python loop over matrices.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

from .embedding import Embedding, EmbeddingSpace
from .errors import (
    DimensionMismatchError,
    EncoderSpaceMismatchError,
    FormatVersionMismatchError,
    LayerShapeMismatchError,
    NonFiniteLossError,
    NonFiniteParametersError,
)

CANONICAL_WIDTHS = (
    (768, 768),
    (768, 768),
    (768, 1024),
    (1024, 1024),
    (1024, 1024),
    (1024, 1024),
    (1024, 1024),
)

LN_EPS = 1e-5
CHECKPOINT_FORMAT_VERSION = 1

# Plain Python floats on purpose: numpy scalar constants would promote
# float32 activations to float64 mid-network.
_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass
class _LayerView:
    """Window into the flat parameter vector for one layer."""

    w: np.ndarray
    b: np.ndarray
    gamma: np.ndarray | None
    beta: np.ndarray | None
    norm_act: bool


class ProjectionAdapter:
    """The 7-layer projection MLP.

    ``widths`` defaults to the canonical table; smaller widths are only
    meant for numerical tests (gradient checks on a full-size network
    would be pointlessly slow).
    """

    def __init__(self, widths: Sequence[tuple[int, int]] = CANONICAL_WIDTHS, *, seed: int = 0,
                 dtype: type = np.float64):
        widths = tuple((int(i), int(o)) for i, o in widths)
        for (_, prev_out), (nxt_in, _) in zip(widths, widths[1:]):
            if prev_out != nxt_in:
                raise LayerShapeMismatchError(f"layer widths do not chain: {widths}")
        if dtype not in (np.float32, np.float64):
            raise ValueError("dtype must be float32 or float64")
        self.widths = widths
        self.dtype = dtype
        self.theta = np.zeros(self._param_count(widths), dtype=dtype)
        self.layers = self._build_views(self.theta, widths)
        self._init_params(seed)
        # Parameter finiteness is rescanned only when this counter moves.
        self._version = 0
        self._checked_version = -1

    # -- layout ----------------------------------------------------------

    @staticmethod
    def _param_count(widths) -> int:
        total = 0
        last = len(widths) - 1
        for i, (d_in, d_out) in enumerate(widths):
            total += d_in * d_out + d_out
            if i != last:
                total += 2 * d_out  # layernorm gamma, beta
        return total

    @staticmethod
    def _build_views(theta: np.ndarray, widths) -> list[_LayerView]:
        views = []
        off = 0
        last = len(widths) - 1
        for i, (d_in, d_out) in enumerate(widths):
            w = theta[off : off + d_in * d_out].reshape(d_out, d_in)
            off += d_in * d_out
            b = theta[off : off + d_out]
            off += d_out
            if i != last:
                gamma = theta[off : off + d_out]
                off += d_out
                beta = theta[off : off + d_out]
                off += d_out
                views.append(_LayerView(w, b, gamma, beta, True))
            else:
                views.append(_LayerView(w, b, None, None, False))
        return views

    def _init_params(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            bound = 1.0 / np.sqrt(layer.w.shape[1])
            layer.w[:] = rng.uniform(-bound, bound, size=layer.w.shape)
            layer.b[:] = rng.uniform(-bound, bound, size=layer.b.shape)
            if layer.norm_act:
                layer.gamma[:] = 1.0
                layer.beta[:] = 0.0

    # -- introspection -----------------------------------------------------

    @property
    def in_dim(self) -> int:
        return self.widths[0][0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1][1]

    def layer_table(self) -> list[tuple[int, int, bool]]:
        """(in_dim, out_dim, followed_by_norm_and_gelu) per layer."""
        return [(l.w.shape[1], l.w.shape[0], l.norm_act) for l in self.layers]

    def mark_updated(self) -> None:
        self._version += 1

    def _ensure_finite(self) -> None:
        if self._checked_version == self._version:
            return
        if not np.all(np.isfinite(self.theta)):
            raise NonFiniteParametersError("adapter parameters contain NaN or Inf")
        self._checked_version = self._version

    # -- forward -----------------------------------------------------------

    def _forward_vec(self, x: np.ndarray) -> np.ndarray:
        h = x
        for layer in self.layers:
            h = layer.w @ h + layer.b
            if layer.norm_act:
                mu = h.mean()
                sigma = np.sqrt(h.var() + LN_EPS)
                h = layer.gamma * ((h - mu) / sigma) + layer.beta
                h = gelu(h)
        return h

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        """Raw single-vector forward in float64."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.in_dim:
            raise DimensionMismatchError(
                f"adapter expects {self.in_dim}-d input, got {x.shape[0]}"
            )
        self._ensure_finite()
        return self._forward_vec(x)

    def forward(self, e: Embedding) -> Embedding:
        if e.dim != self.in_dim:
            raise DimensionMismatchError(
                f"adapter expects {self.in_dim}-d input, got {e.dim}"
            )
        out = self.forward_array(e.values)
        return Embedding(values=out.astype(np.float32), space=EmbeddingSpace.ADAPTER_1024)

    def forward_batch(self, xs: np.ndarray) -> np.ndarray:
        """Row-wise forward; bit-identical to per-item forward_array calls."""
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 2 or xs.shape[1] != self.in_dim:
            raise DimensionMismatchError(f"expected (n, {self.in_dim}) batch, got {xs.shape}")
        self._ensure_finite()
        return np.stack([self._forward_vec(x) for x in xs])

    # -- training internals -------------------------------------------------

    def _forward_cached(self, xs: np.ndarray) -> tuple[np.ndarray, list[dict]]:
        caches = []
        h = xs
        for layer in self.layers:
            cache: dict = {"x": h}
            h = h @ layer.w.T + layer.b
            if layer.norm_act:
                mu = h.mean(axis=1, keepdims=True)
                sigma = np.sqrt(h.var(axis=1, keepdims=True) + LN_EPS)
                xhat = (h - mu) / sigma
                a = layer.gamma * xhat + layer.beta
                cache.update(xhat=xhat, sigma=sigma, a=a)
                h = gelu(a)
            caches.append(cache)
        return h, caches

    def _backward(self, grad_out: np.ndarray, caches: list[dict], grad_theta: np.ndarray) -> None:
        grads = self._build_views(grad_theta, self.widths)
        g = grad_out
        for layer, gview, cache in zip(
            reversed(self.layers), reversed(grads), reversed(caches)
        ):
            if layer.norm_act:
                g = g * gelu_grad(cache["a"])
                xhat = cache["xhat"]
                np.einsum("bi,bi->i", g, xhat, out=gview.gamma)
                g.sum(axis=0, out=gview.beta)
                gx = g * layer.gamma
                m1 = gx.mean(axis=1, keepdims=True)
                m2 = (gx * xhat).mean(axis=1, keepdims=True)
                g = (gx - m1 - xhat * m2) / cache["sigma"]
            np.matmul(g.T, cache["x"], out=gview.w)
            g.sum(axis=0, out=gview.b)
            g = g @ layer.w


@dataclass
class AdapterTrainingConfig:
    """Training knobs; defaults follow the published recipe."""

    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 8
    total_steps: int = 300_000
    seed: int = 0
    checkpoint_interval: int = 0
    checkpoint_path: str | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        # Zero lr is allowed so a no-op training run can serve as a
        # determinism probe; negative is always a mistake.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "total_steps": self.total_steps,
            "seed": self.seed,
            "checkpoint_interval": self.checkpoint_interval,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "weight_decay_form": "decoupled",
        }


@dataclass
class TrainingResult:
    adapter: ProjectionAdapter
    losses: np.ndarray
    config: AdapterTrainingConfig

    def save_loss_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for step, loss in enumerate(self.losses, start=1):
                writer.writerow([step, repr(float(loss))])


try:  # optional: fuses the optimizer update into one pass over memory
    from numba import njit as _njit

    @_njit(cache=True)
    def _fused_adam_step(theta, grad, m, v, b1, b2, eps, lr_over_bc1, inv_sqrt_bc2, decay):
        for i in range(theta.size):
            gi = grad[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            theta[i] = decay * theta[i] - lr_over_bc1 * mi / (
                np.sqrt(vi) * inv_sqrt_bc2 + eps
            )

except ImportError:
    _fused_adam_step = None


class _Adam:
    """Adam with decoupled weight decay over the flat parameter vector."""

    def __init__(self, n_params: int, cfg: AdapterTrainingConfig, dtype: type = np.float64):
        self.cfg = cfg
        self.m = np.zeros(n_params, dtype=dtype)
        self.v = np.zeros(n_params, dtype=dtype)
        self.t = 0
        self._s1 = np.empty(n_params, dtype=dtype)
        self._s2 = np.empty(n_params, dtype=dtype)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.adam_beta1**self.t
        bc2 = 1.0 - cfg.adam_beta2**self.t
        decay = 1.0 - cfg.learning_rate * cfg.weight_decay
        if _fused_adam_step is not None:
            _fused_adam_step(
                theta, grad, self.m, self.v,
                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                cfg.learning_rate / bc1, 1.0 / np.sqrt(bc2), decay,
            )
            return
        self.m *= cfg.adam_beta1
        np.multiply(grad, 1.0 - cfg.adam_beta1, out=self._s1)
        self.m += self._s1
        self.v *= cfg.adam_beta2
        np.multiply(grad, grad, out=self._s1)
        self._s1 *= 1.0 - cfg.adam_beta2
        self.v += self._s1
        np.divide(self.v, bc2, out=self._s2)
        np.sqrt(self._s2, out=self._s2)
        self._s2 += cfg.adam_eps
        np.divide(self.m, self._s2, out=self._s1)
        self._s1 *= cfg.learning_rate / bc1
        theta *= decay
        theta -= self._s1


def compute_loss_and_grad(
    adapter: ProjectionAdapter,
    xs: np.ndarray,
    ys: np.ndarray,
    out_grad: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """MSE loss averaged over batch and dimension, plus the analytic
    gradient with respect to every parameter, flattened in layout order."""
    pred, caches = adapter._forward_cached(np.asarray(xs, dtype=adapter.dtype))
    ys = np.asarray(ys, dtype=adapter.dtype)
    diff = pred - ys
    loss = float(np.mean(diff * diff))
    # The backward pass assigns every slot, so an uninitialized buffer is fine.
    grad_theta = np.empty_like(adapter.theta) if out_grad is None else out_grad
    grad_out = (2.0 / diff.size) * diff
    adapter._backward(grad_out, caches, grad_theta)
    return loss, grad_theta


def train_projection_adapter(
    images: Sequence[np.ndarray],
    alpha_encoder,
    target_encoder,
    cfg: AdapterTrainingConfig,
    adapter: ProjectionAdapter | None = None,
) -> TrainingResult:
    """Fit the adapter so that, with the alpha channel fixed to ones, its
    output matches the plain encoder on the same image.

    Both encoders are used frozen; their embeddings are computed once up
    front. Checkpoints (when configured) are written atomically every
    checkpoint_interval steps.
    """
    from .encoders import RegionImage  # local import, avoids a cycle

    if len(images) == 0:
        raise ValueError("training dataset is empty")
    if alpha_encoder.output_space is not EmbeddingSpace.ALPHA_CLIP_768:
        raise EncoderSpaceMismatchError(
            f"region encoder emits {alpha_encoder.output_space.name}, need ALPHA_CLIP_768"
        )
    if target_encoder.output_space is not EmbeddingSpace.ADAPTER_1024:
        raise EncoderSpaceMismatchError(
            f"target encoder emits {target_encoder.output_space.name}, need ADAPTER_1024"
        )

    if adapter is None:
        adapter = ProjectionAdapter(seed=cfg.seed)

    xs = np.empty((len(images), adapter.in_dim), dtype=adapter.dtype)
    ys = np.empty((len(images), adapter.out_dim), dtype=adapter.dtype)
    for i, img in enumerate(images):
        ones = np.ones(img.shape[:2], dtype=np.float32)
        region = RegionImage(pixels=img, alpha=ones)
        xs[i] = alpha_encoder.encode_region(region).values
        ys[i] = target_encoder.encode_plain(img).values

    rng = np.random.default_rng(cfg.seed)
    optimizer = _Adam(adapter.theta.size, cfg, dtype=adapter.dtype)
    losses = np.empty(cfg.total_steps, dtype=np.float64)
    grad = np.empty_like(adapter.theta)

    for step in range(1, cfg.total_steps + 1):
        idx = rng.integers(0, len(images), size=cfg.batch_size)
        loss, _ = compute_loss_and_grad(adapter, xs[idx], ys[idx], out_grad=grad)
        if not np.isfinite(loss):
            raise NonFiniteLossError(f"loss became non-finite at step {step}")
        optimizer.step(adapter.theta, grad)
        adapter.mark_updated()
        losses[step - 1] = loss
        if (
            cfg.checkpoint_interval
            and cfg.checkpoint_path
            and step % cfg.checkpoint_interval == 0
        ):
            save_adapter(adapter, cfg.checkpoint_path, step=step, optimizer=optimizer,
                         config=cfg, rng=rng)

    return TrainingResult(adapter=adapter, losses=losses, config=cfg)


# -- persistence -------------------------------------------------------------


def save_adapter(
    adapter: ProjectionAdapter,
    path: str | Path,
    *,
    step: int = 0,
    optimizer: _Adam | None = None,
    config: AdapterTrainingConfig | None = None,
    rng: np.random.Generator | None = None,
) -> None:
    """Write a self-describing checkpoint; the write is atomic."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "widths": [list(w) for w in adapter.widths],
        "dtype": np.dtype(adapter.dtype).name,
        "step": int(step),
        "ln_eps": LN_EPS,
        "config": config.to_dict() if config is not None else None,
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    path = Path(path)
    arrays = {"theta": adapter.theta}
    if optimizer is not None:
        arrays["adam_m"] = optimizer.m
        arrays["adam_v"] = optimizer.v
        meta["adam_t"] = optimizer.t
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                     **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_adapter(
    path: str | Path,
    expected_widths: Sequence[tuple[int, int]] | None = CANONICAL_WIDTHS,
) -> ProjectionAdapter:
    """Restore parameters bit-exactly. ``expected_widths=None`` accepts
    whatever width table the file declares (test-sized networks)."""
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]))
            theta = data["theta"]
    except (OSError, zipfile.BadZipFile, EOFError, KeyError, ValueError,
            json.JSONDecodeError) as exc:
        raise FormatVersionMismatchError(f"unreadable adapter checkpoint: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatVersionMismatchError(
            f"checkpoint format {meta.get('format_version')!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    widths = tuple(tuple(w) for w in meta["widths"])
    if expected_widths is not None and widths != tuple(tuple(w) for w in expected_widths):
        raise LayerShapeMismatchError(
            f"checkpoint layer widths {widths} do not match expected {tuple(expected_widths)}"
        )
    dtype = np.float32 if meta.get("dtype") == "float32" else np.float64
    adapter = ProjectionAdapter(widths=widths, dtype=dtype)
    if theta.shape != adapter.theta.shape:
        raise FormatVersionMismatchError(
            f"parameter vector has {theta.size} entries, layout needs {adapter.theta.size}"
        )
    adapter.theta[:] = theta
    adapter.mark_updated()
    return adapter
