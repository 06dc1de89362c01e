"""Losses over augmented sketch renders via a pluggable embedding backend.

The semantic loss pulls the sketch toward the prompt's text embedding,
the visual loss toward the embedding of the provider's reference image;
both sum negative cosine similarities over the raw render plus M
augmented views (random perspective warp followed by a random resized
crop, both differentiable with respect to the input pixels).

A deterministic fake backend, a fixed random linear projection of the
flattened pixels, makes the full pipeline testable without model
weights.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
import torch

from .errors import DomainError, ProviderError

DEFAULT_AUGMENT_COUNT = 4


@dataclass
class Embedding:
    """A single encoder output vector."""

    vector: torch.Tensor

    def __post_init__(self):
        vec = torch.as_tensor(self.vector, dtype=torch.float64)
        if vec.ndim != 1:
            raise DomainError(f"embedding must be 1-D, got shape {tuple(vec.shape)}")
        if not torch.all(torch.isfinite(vec)):
            raise DomainError("embedding contains non-finite entries")
        self.vector = vec

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@runtime_checkable
class EmbeddingBackend(Protocol):
    """Text/image encoder pair.

    `encode_image` takes a (B, H, W, 3) float tensor in [0, 1] and must
    keep autograd flowing from its output back to the input pixels;
    both encoders are deterministic for fixed inputs.
    """

    identifier: str

    def encode_text(self, text: str) -> "Embedding": ...

    def encode_image(self, images: torch.Tensor) -> torch.Tensor: ...


@dataclass
class AugmentConfig:
    m: int = DEFAULT_AUGMENT_COUNT
    perspective_distortion: float = 0.5
    crop_scale: tuple[float, float] = (0.7, 0.9)
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise DomainError(f"augment count must be >= 1, got {self.m}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise DomainError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0.0 <= self.perspective_distortion < 1.0:
            raise DomainError(
                f"perspective_distortion must be in [0, 1), got {self.perspective_distortion}"
            )


@dataclass
class LossWeights:
    lambda_sem: float = 0.6
    lambda_vis: float = 0.9

    def __post_init__(self):
        if self.lambda_sem < 0 or self.lambda_vis < 0:
            raise DomainError("loss weights must be non-negative")
        if self.lambda_sem == 0 and self.lambda_vis == 0:
            raise DomainError("at least one loss weight must be positive")


def as_raster_tensor(raster) -> torch.Tensor:
    """Coerce a Raster / array / tensor to a float64 (H, W, 3) tensor."""
    pixels = getattr(raster, "pixels", raster)
    t = torch.as_tensor(np.asarray(pixels) if not torch.is_tensor(pixels) else pixels,
                        dtype=torch.float64)
    if t.ndim != 3 or t.shape[2] != 3:
        raise DomainError(f"raster must be HxWx3, got shape {tuple(t.shape)}")
    return t


def _cosine_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.norm(a)
    nb = torch.linalg.norm(b)
    if float(na) == 0.0 or float(nb) == 0.0:
        raise DomainError("cosine similarity undefined for zero vectors")
    return (a @ b) / (na * nb)


def cosine_sim(a, b) -> float:
    """Cosine similarity of two embeddings (normalization happens here)."""
    va = a.vector if isinstance(a, Embedding) else torch.as_tensor(a, dtype=torch.float64)
    vb = b.vector if isinstance(b, Embedding) else torch.as_tensor(b, dtype=torch.float64)
    if va.shape != vb.shape:
        raise DomainError(f"embedding dimensions differ: {va.shape[0]} vs {vb.shape[0]}")
    return float(_cosine_t(va, vb))


# ---------------------------------------------------------------------------
# Differentiable augmentation
# ---------------------------------------------------------------------------


def _perspective_matrix(endpoints: np.ndarray, width: int, height: int) -> np.ndarray:
    """Homography sending each warped corner position back to its source corner."""
    corners = np.array([[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]])
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((u, v), (x, y)) in enumerate(zip(endpoints, corners)):
        a[2 * i] = [u, v, 1, 0, 0, 0, -x * u, -x * v]
        a[2 * i + 1] = [0, 0, 0, u, v, 1, -y * u, -y * v]
        b[2 * i] = x
        b[2 * i + 1] = y
    coeffs = np.linalg.solve(a, b)
    return np.append(coeffs, 1.0).reshape(3, 3)


def _view_grid(width: int, height: int, cfg: AugmentConfig,
               rng: np.random.Generator) -> np.ndarray | None:
    """Sampling grid (source coords per output pixel) for one view.

    None means the sampled transform is the exact identity, so callers
    can skip resampling entirely.
    """
    delta = cfg.perspective_distortion
    lo, hi = cfg.crop_scale
    identity = delta == 0.0 and lo == hi == 1.0

    if delta > 0.0:
        mx, my = delta * width / 2.0, delta * height / 2.0
        shift = rng.uniform(0.0, 1.0, size=(4, 2)) * (mx, my)
        endpoints = np.array([
            [shift[0, 0], shift[0, 1]],
            [width - shift[1, 0], shift[1, 1]],
            [width - shift[2, 0], height - shift[2, 1]],
            [shift[3, 0], height - shift[3, 1]],
        ])
        homography = _perspective_matrix(endpoints, width, height)
    else:
        homography = np.eye(3)

    area = rng.uniform(lo, hi)
    side_w = width * np.sqrt(area)
    side_h = height * np.sqrt(area)
    x0 = rng.uniform(0.0, width - side_w)
    y0 = rng.uniform(0.0, height - side_h)
    if identity:
        return None

    xs = x0 + (np.arange(width) + 0.5) * side_w / width
    ys = y0 + (np.arange(height) + 0.5) * side_h / height
    gx, gy = np.meshgrid(xs, ys)
    ones = np.ones_like(gx)
    q = np.stack([gx, gy, ones], axis=-1) @ homography.T
    src = q[..., :2] / q[..., 2:3]
    grid = np.empty((height, width, 2))
    grid[..., 0] = 2.0 * src[..., 0] / width - 1.0
    grid[..., 1] = 2.0 * src[..., 1] / height - 1.0
    return grid


def augment(raster, cfg: AugmentConfig,
            rng: np.random.Generator | None = None) -> torch.Tensor:
    """M independently warped-and-cropped views of a raster, same resolution.

    Views are sampled as ink (1 - image) with zero padding, so regions
    warped in from outside the canvas read as white. Gradients flow to the
    input pixels; the warp parameters themselves are draws from `rng`.
    """
    t = as_raster_tensor(raster)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    height, width = t.shape[0], t.shape[1]
    ink = (1.0 - t).permute(2, 0, 1)[None]  # (1, 3, H, W)
    views = []
    for _ in range(cfg.m):
        grid_np = _view_grid(width, height, cfg, rng)
        if grid_np is None:
            views.append(t.clone())
            continue
        grid = torch.as_tensor(grid_np, dtype=t.dtype)[None]
        warped = torch.nn.functional.grid_sample(
            ink, grid, mode="bilinear", padding_mode="zeros", align_corners=False
        )
        views.append(1.0 - warped[0].permute(1, 2, 0))
    return torch.stack(views, dim=0)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _encode_views(backend, views: torch.Tensor) -> torch.Tensor:
    try:
        return backend.encode_image(views)
    except (DomainError, ProviderError):
        raise
    except Exception as exc:
        raise ProviderError(
            f"embedding backend {getattr(backend, 'identifier', backend)!r} "
            f"failed on {views.shape[0]} views: {exc}"
        ) from exc


def _view_stack(raster, cfg: AugmentConfig, rng) -> torch.Tensor:
    t = as_raster_tensor(raster)
    return torch.cat([t[None], augment(t, cfg, rng)], dim=0)


def _similarity_sum(embs: torch.Tensor, anchor: Embedding) -> torch.Tensor:
    anchor_unit = anchor.vector / torch.linalg.norm(anchor.vector)
    norms = torch.linalg.norm(embs, dim=1).clamp_min(1e-300)
    return ((embs / norms[:, None]) @ anchor_unit).sum()


def semantic_loss(prompt_emb: Embedding, sketch_raster, cfg: AugmentConfig,
                  backend, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Negative summed similarity between the prompt embedding and the
    raw render plus its M augmented views (M + 1 terms)."""
    views = _view_stack(sketch_raster, cfg, rng)
    return -_similarity_sum(_encode_views(backend, views), prompt_emb)


def visual_loss(ref_image_emb: Embedding, sketch_raster, cfg: AugmentConfig,
                backend, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Same shape as the semantic loss but anchored at the reference image."""
    views = _view_stack(sketch_raster, cfg, rng)
    return -_similarity_sum(_encode_views(backend, views), ref_image_emb)


def total_loss(sem, vis, w: LossWeights):
    """Weighted sum of the two losses (works on floats and tensors)."""
    for name, value in (("semantic", sem), ("visual", vis)):
        scalar = float(value) if not torch.is_tensor(value) else float(value.detach())
        if not np.isfinite(scalar):
            raise DomainError(f"{name} loss is non-finite: {scalar}")
    return w.lambda_sem * sem + w.lambda_vis * vis


# ---------------------------------------------------------------------------
# Backends and scorers
# ---------------------------------------------------------------------------


class FakeEmbeddingBackend:
    """Fixed random linear projection of flattened pixels.

    Deterministic given (dim, seed); text embeddings are seeded from a
    hash of the text. Vectors are left unnormalized; cosine similarity
    normalizes.
    """

    def __init__(self, dim: int = 32, seed: int = 0, width: int = 224,
                 height: int = 224):
        self.dim = dim
        self.seed = seed
        self.width = width
        self.height = height
        self.identifier = f"fake:dim={dim},seed={seed}"
        rng = np.random.default_rng(seed)
        n = width * height * 3
        self._projection = torch.as_tensor(
            rng.standard_normal((dim, n)) / np.sqrt(n), dtype=torch.float64
        )

    def encode_text(self, text: str) -> Embedding:
        digest = hashlib.sha256(f"{self.seed}:{text}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(self.dim)
        return Embedding(torch.as_tensor(vec / np.linalg.norm(vec)))

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            images = images[None]
        b, h, w, c = images.shape
        if (h, w, c) != (self.height, self.width, 3):
            raise ProviderError(
                f"fake backend expects {self.height}x{self.width}x3 rasters, "
                f"got {h}x{w}x{c}"
            )
        flat = images.to(torch.float64).reshape(b, -1)
        return flat @ self._projection.T


class PromptScorer:
    """Bundles backend, prompt and reference embeddings, augmentation and
    weights into the per-iteration loss evaluation.

    Both losses share one augmented view batch per call, so the backend
    is invoked once per iteration with M + 1 views.
    """

    def __init__(self, backend, prompt: str, ref_image, cfg: AugmentConfig,
                 weights: LossWeights, rng: np.random.Generator | None = None):
        self.backend = backend
        self.cfg = cfg
        self.weights = weights
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.prompt_embedding = backend.encode_text(prompt)
        ref_t = as_raster_tensor(ref_image)
        with torch.no_grad():
            self.ref_embedding = Embedding(backend.encode_image(ref_t[None])[0])

    def losses(self, raster) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        views = _view_stack(raster, self.cfg, self.rng)
        embs = _encode_views(self.backend, views)
        sem = -_similarity_sum(embs, self.prompt_embedding)
        vis = -_similarity_sum(embs, self.ref_embedding)
        return sem, vis, total_loss(sem, vis, self.weights)


class RasterTargetScorer:
    """Pixel-space objective: mean squared distance to a fixed target raster.

    Used for synthetic convergence checks and debugging; the 'semantic'
    slot carries the L2 value and the visual slot is zero.
    """

    def __init__(self, target):
        self.target = as_raster_tensor(target)

    def losses(self, raster) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        t = as_raster_tensor(raster)
        if t.shape != self.target.shape:
            raise DomainError(
                f"raster shape {tuple(t.shape)} != target {tuple(self.target.shape)}"
            )
        l2 = ((t - self.target) ** 2).mean()
        return l2, torch.zeros((), dtype=l2.dtype), l2
