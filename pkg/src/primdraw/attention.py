"""Saliency maps for canvas initialization.

Raw cross-attention activations (from any provider) are resized to the
canvas, summed, and softmax-normalized into a probability map; landmark
positions are then drawn from that map, weighted by saliency. File and
uniform providers make the whole pipeline runnable offline; the live
diffusion-backed provider lives in `primdraw.live`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import DomainError, InputError
from .geometry import Point2

ATTN_MAGIC = b"ATTN"


@dataclass
class AttentionMap:
    """A probability distribution over canvas pixels.

    The constructor accepts any non-negative weight map and normalizes it
    linearly; use `from_raw` to softmax raw activations instead.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DomainError(f"attention map must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError("attention map contains non-finite values")
        if np.any(values < 0):
            raise DomainError("attention map contains negative values")
        total = values.sum()
        if total <= 0:
            raise DomainError("attention map has no positive mass")
        self.values = values / total

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> AttentionMap:
        """Clamp raw activations to >= 0 and softmax them over all pixels."""
        raw = np.clip(np.asarray(raw, dtype=np.float64), 0.0, None)
        return cls(values=_softmax(raw))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class LandmarkSet:
    """k sampled canvas positions with their saliency weights."""

    points: list[Point2]
    weights: list[float]

    def __post_init__(self):
        if len(self.points) != len(self.weights):
            raise DomainError("landmark points and weights differ in length")
        if any(w <= 0 for w in self.weights):
            raise DomainError("landmark weights must be positive")

    def __len__(self) -> int:
        return len(self.points)


@runtime_checkable
class AttentionProvider(Protocol):
    """Source of raw attention maps and a reference image for a prompt.

    `fetch` returns a list of non-negative matrices (possibly at mixed
    resolutions) for the focus token, plus an RGB reference image in
    [0, 1] at canvas resolution, or None when the provider has no image.
    """

    identifier: str

    def fetch(self, prompt: str, focus_token: str, seed: int
              ) -> tuple[list[np.ndarray], np.ndarray | None]: ...


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max()
    e = np.exp(shifted)
    return e / e.sum()


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D array with half-pixel-centre bilinear interpolation."""
    arr = np.asarray(arr, dtype=np.float64)
    in_h, in_w = arr.shape
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()
    ys = np.maximum((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0.0)
    xs = np.maximum((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = arr[y0][:, x0] * (1 - wx) + arr[y0][:, x1] * wx
    bot = arr[y1][:, x0] * (1 - wx) + arr[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def aggregate(raw_maps: list[np.ndarray], width: int = 224,
              height: int = 224) -> AttentionMap:
    """Merge mixed-resolution raw maps into one normalized distribution.

    Each map is resized to the canvas, the maps are summed element-wise,
    and the sum is softmax-normalized.
    """
    if not raw_maps:
        raise DomainError("aggregate needs at least one raw attention map")
    total = np.zeros((height, width), dtype=np.float64)
    for i, raw in enumerate(raw_maps):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2:
            raise DomainError(f"raw map {i} must be 2-D, got shape {raw.shape}")
        if np.any(raw < 0):
            raise DomainError(f"raw map {i} contains negative entries")
        total += bilinear_resize(raw, height, width)
    return AttentionMap.from_raw(total)


def sample_landmarks(amap: AttentionMap, k: int,
                     rng: np.random.Generator) -> LandmarkSet:
    """Draw k distinct pixel positions, probability proportional to mass.

    Sequential weighted sampling without replacement: after each draw the
    chosen pixel's mass is removed and the rest renormalized.
    """
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    probs = amap.values.flatten().copy()
    support = int(np.count_nonzero(probs))
    if k > support:
        raise DomainError(
            f"cannot sample {k} distinct landmarks from {support} pixels "
            "with positive mass"
        )
    points: list[Point2] = []
    weights: list[float] = []
    for _ in range(k):
        idx = int(rng.choice(probs.size, p=probs / probs.sum()))
        row, col = divmod(idx, amap.width)
        points.append(Point2(float(col), float(row)))
        weights.append(float(amap.values[row, col]))
        probs[idx] = 0.0
    return LandmarkSet(points=points, weights=weights)


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------


def _read_png_map(path: FsPath) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        if img.mode in ("I", "I;16", "I;16B", "I;16L"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return arr


def read_map_values(path: str | FsPath) -> np.ndarray:
    """Raw (un-normalized) map values from a grayscale image or ATTN file.

    Image pixel values are scaled to [0, 1]; the binary ATTN format
    (magic "ATTN", u32 height, u32 width, row-major float32, all
    little-endian) is read as-is.
    """
    path = FsPath(path)
    if not path.is_file():
        raise InputError(f"attention map file not found: {path}")
    data = path.read_bytes()
    if data[:4] == ATTN_MAGIC:
        if len(data) < 12:
            raise InputError(f"truncated ATTN header in {path}")
        h, w = struct.unpack("<II", data[4:12])
        try:
            body = np.frombuffer(data, dtype="<f4", offset=12)
        except ValueError as exc:
            raise InputError(f"truncated ATTN payload in {path}: {exc}") from exc
        if body.size != h * w:
            raise InputError(
                f"ATTN file {path} declares {h}x{w} but holds {body.size} floats"
            )
        return body.reshape(h, w).astype(np.float64)
    try:
        return _read_png_map(path)
    except Exception as exc:
        raise InputError(
            f"cannot read attention map {path}: expected grayscale PNG or "
            f'"ATTN" float32 matrix ({exc})'
        ) from exc


def write_attn_file(path: str | FsPath, values: np.ndarray) -> None:
    """Write a raw float32 matrix in the ATTN container format."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise InputError(f"ATTN payload must be 2-D, got shape {values.shape}")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(ATTN_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(values.astype("<f4").tobytes())


def load_map_from_file(path: str | FsPath, width: int = 224,
                       height: int = 224) -> AttentionMap:
    """Read a map file, resize it to the canvas, and softmax-normalize."""
    raw = read_map_values(path)
    raw = np.clip(raw, 0.0, None)
    if raw.shape != (height, width):
        raw = bilinear_resize(raw, height, width)
    return AttentionMap.from_raw(raw)


def load_reference_image(path: str | FsPath, width: int = 224,
                         height: int = 224) -> np.ndarray:
    """RGB reference image as float64 in [0, 1] at canvas resolution."""
    from PIL import Image

    path = FsPath(path)
    if not path.is_file():
        raise InputError(f"reference image not found: {path}")
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (width, height):
                img = img.resize((width, height), Image.BILINEAR)
            return np.asarray(img, dtype=np.float64) / 255.0
    except InputError:
        raise
    except Exception as exc:
        raise InputError(f"cannot read reference image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Offline providers
# ---------------------------------------------------------------------------


class UniformAttentionProvider:
    """Constant attention everywhere; no reference image."""

    identifier = "attention:uniform"

    def __init__(self, width: int = 224, height: int = 224):
        self.width = width
        self.height = height

    def fetch(self, prompt: str, focus_token: str, seed: int
              ) -> tuple[list[np.ndarray], np.ndarray | None]:
        return [np.ones((self.height, self.width), dtype=np.float64)], None


class FileAttentionProvider:
    """Serves a map (and optionally a reference image) from disk."""

    def __init__(self, map_path: str | FsPath,
                 ref_image_path: str | FsPath | None = None,
                 width: int = 224, height: int = 224):
        self.map_path = FsPath(map_path)
        self.ref_image_path = FsPath(ref_image_path) if ref_image_path else None
        self.width = width
        self.height = height
        self.identifier = f"attention:file:{self.map_path}"

    def fetch(self, prompt: str, focus_token: str, seed: int
              ) -> tuple[list[np.ndarray], np.ndarray | None]:
        raw = np.clip(read_map_values(self.map_path), 0.0, None)
        ref = None
        if self.ref_image_path is not None:
            ref = load_reference_image(self.ref_image_path, self.width, self.height)
        return [raw], ref
