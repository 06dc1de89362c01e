"""Rasterization and export.

The default backend draws each primitive as a soft-edged stroke: pixel
coverage falls off smoothly (a C2 smootherstep) across an anti-aliasing
band around the stroke centerline, which is what makes coverage, and
therefore every downstream loss, differentiable with respect to the
control points and opacities. Curved primitives are flattened to
polylines sampled from the cubic chains through their on-curve points.

A deliberately independent scanline rasterizer (supersampled hard
coverage, numpy) ships alongside as the oracle for backend tests, plus a
finite-difference gradient checker for the differentiability contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np
import torch

from .canvas import Canvas
from .errors import DomainError, ProviderError
from .geometry import (
    HANDLE_PER_CHORD,
    Primitive,
    PrimitiveKind,
    cubic_chain,
    svg_path,
)

DEFAULT_STROKE_WIDTH = 1.5
DEFAULT_ANTIALIAS = 1.0

# Per-kind layer colors for evolution tracking.
KIND_COLORS = {
    PrimitiveKind.CIRCLE: "blue",
    PrimitiveKind.LINE: "red",
    PrimitiveKind.SEMICIRCLE: "green",
}

LAYER_NAMES = ("composite", "circles", "lines", "semicircles", "overlay")


@dataclass
class Raster:
    """H x W x 3 float image in [0, 1]; white background, dark strokes."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DomainError(f"raster must be HxWx3, got shape {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise DomainError("raster values outside [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@runtime_checkable
class RasterizerBackend(Protocol):
    """Differentiable stroke renderer contract.

    `render_tensor` composites the given strokes over a white canvas and
    must expose gradients of any downstream scalar with respect to every
    entry of the point tensors and opacities. Stroke width stays constant
    across a run.
    """

    identifier: str
    stroke_width: float

    def render_tensor(self, kinds: Sequence[PrimitiveKind],
                      points: Sequence[torch.Tensor],
                      opacities: Sequence[torch.Tensor],
                      width: int, height: int) -> torch.Tensor: ...


def _smootherstep(t: torch.Tensor) -> torch.Tensor:
    t = torch.clamp(t, 0.0, 1.0)
    # The polynomial can overshoot 1.0 by one ulp at the upper clamp, which
    # would push composited pixels just below 0; clamp the output too.
    return (t * t * t * (t * (6.0 * t - 15.0) + 10.0)).clamp(0.0, 1.0)


def _closed_chain_polyline(pts: torch.Tensor, samples: int) -> torch.Tensor:
    """Polyline along the closed cubic chain through 4 on-curve points."""
    nxt = torch.roll(pts, -1, dims=0)
    prv = torch.roll(pts, 1, dims=0)
    tang = nxt - prv
    tang = tang / torch.linalg.norm(tang, dim=1, keepdim=True).clamp_min(1e-12)
    return _sample_segments(pts, nxt, tang, tang.roll(-1, dims=0), samples)


def _open_chain_polyline(pts: torch.Tensor, samples: int) -> torch.Tensor:
    """Polyline along the open 2-segment chain through 3 on-curve points."""
    p0, p1, p2 = pts[0], pts[1], pts[2]
    d = 2.0 * (p0[0] * (p1[1] - p2[1]) + p1[0] * (p2[1] - p0[1])
               + p2[0] * (p0[1] - p1[1]))
    travel = torch.stack([p1 - p0, p2 - p0, p2 - p1])
    if torch.abs(d).item() < 1e-9:
        tang = travel / torch.linalg.norm(travel, dim=1, keepdim=True).clamp_min(1e-12)
    else:
        sq = torch.stack([(p * p).sum() for p in (p0, p1, p2)])
        ux = (sq[0] * (p1[1] - p2[1]) + sq[1] * (p2[1] - p0[1])
              + sq[2] * (p0[1] - p1[1])) / d
        uy = (sq[0] * (p2[0] - p1[0]) + sq[1] * (p0[0] - p2[0])
              + sq[2] * (p1[0] - p0[0])) / d
        center = torch.stack([ux, uy])
        radial = pts - center
        perp = torch.stack([-radial[:, 1], radial[:, 0]], dim=1)
        sign = torch.sign((perp * travel).sum(dim=1)).clamp_min(-1.0)
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        perp = perp * sign[:, None]
        tang = perp / torch.linalg.norm(perp, dim=1, keepdim=True).clamp_min(1e-12)
    starts = pts[:2]
    ends = pts[1:]
    return _sample_segments(starts, ends, tang[:2], tang[1:], samples)


def _sample_segments(p0: torch.Tensor, p1: torch.Tensor, t0: torch.Tensor,
                     t1: torch.Tensor, samples: int) -> torch.Tensor:
    """Evaluate each cubic (rows of p0/p1 with tangents) at `samples`+1 ts."""
    chord = torch.linalg.norm(p1 - p0, dim=1, keepdim=True)
    h0 = p0 + HANDLE_PER_CHORD * chord * t0
    h1 = p1 - HANDLE_PER_CHORD * chord * t1
    ts = torch.linspace(0.0, 1.0, samples + 1, dtype=p0.dtype)[None, :, None]
    omt = 1.0 - ts
    pts = (omt**3 * p0[:, None, :] + 3 * omt**2 * ts * h0[:, None, :]
           + 3 * omt * ts**2 * h1[:, None, :] + ts**3 * p1[:, None, :])
    return pts.reshape(-1, 2)


class SoftRasterizer:
    """Default differentiable backend (CPU torch, float64)."""

    def __init__(self, stroke_width: float = DEFAULT_STROKE_WIDTH,
                 antialias: float = DEFAULT_ANTIALIAS,
                 samples_per_segment: int = 8,
                 dtype: torch.dtype = torch.float64):
        if stroke_width <= 0:
            raise DomainError(f"stroke_width must be positive, got {stroke_width}")
        self.stroke_width = float(stroke_width)
        self.antialias = float(antialias)
        self.samples_per_segment = int(samples_per_segment)
        self.dtype = dtype
        self.identifier = f"soft:w={self.stroke_width},aa={self.antialias}"

    @property
    def falloff_radius(self) -> float:
        """Coverage is exactly zero beyond this distance from the centerline."""
        return self.stroke_width / 2.0 + self.antialias

    def _polyline(self, kind: PrimitiveKind, pts: torch.Tensor) -> torch.Tensor:
        if kind is PrimitiveKind.LINE:
            return pts
        if kind is PrimitiveKind.CIRCLE:
            return _closed_chain_polyline(pts, self.samples_per_segment)
        return _open_chain_polyline(pts, self.samples_per_segment)

    def _coverage_window(self, poly: torch.Tensor, width: int, height: int):
        """Soft coverage on the primitive's bounding window, or None."""
        margin = self.falloff_radius + 1.0
        with torch.no_grad():
            x0 = max(int(math.floor(poly[:, 0].min().item() - margin)), 0)
            x1 = min(int(math.ceil(poly[:, 0].max().item() + margin)), width)
            y0 = max(int(math.floor(poly[:, 1].min().item() - margin)), 0)
            y1 = min(int(math.ceil(poly[:, 1].max().item() + margin)), height)
        if x0 >= x1 or y0 >= y1:
            return None
        xs = torch.arange(x0, x1, dtype=poly.dtype) + 0.5
        ys = torch.arange(y0, y1, dtype=poly.dtype) + 0.5
        grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij"), dim=-1)  # (h,w,2) as (y,x)
        grid = grid.flip(-1)  # -> (x, y)
        a = poly[:-1]
        ab = poly[1:] - a
        ap = grid[:, :, None, :] - a
        denom = (ab * ab).sum(dim=-1).clamp_min(1e-12)
        t = torch.clamp((ap * ab).sum(dim=-1) / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        dist = torch.linalg.norm(grid[:, :, None, :] - closest, dim=-1).amin(dim=-1)
        r_out = self.falloff_radius
        r_in = max(self.stroke_width / 2.0 - self.antialias, 0.0)
        cov = _smootherstep((r_out - dist) / max(r_out - r_in, 1e-9))
        return cov, (y0, y1, x0, x1)

    def render_tensor(self, kinds: Sequence[PrimitiveKind],
                      points: Sequence[torch.Tensor],
                      opacities: Sequence[torch.Tensor],
                      width: int, height: int) -> torch.Tensor:
        light = torch.ones((height, width), dtype=self.dtype)
        for kind, pts, alpha in zip(kinds, points, opacities):
            window = self._coverage_window(self._polyline(kind, pts), width, height)
            if window is None:
                continue
            cov, (y0, y1, x0, x1) = window
            alpha_full = torch.nn.functional.pad(
                cov * alpha, (x0, width - x1, y0, height - y1), value=0.0
            )
            light = light * (1.0 - alpha_full)
        return light[:, :, None].expand(height, width, 3)


class ScanlineRasterizer:
    """Reference backend: supersampled hard coverage, no gradients.

    Everything is recomputed from scratch in numpy (De Casteljau
    flattening, point-segment distances, subsample counting) so it can
    serve as an independent oracle for the soft backend.
    """

    identifier = "scanline"

    def __init__(self, stroke_width: float = DEFAULT_STROKE_WIDTH,
                 subsamples: int = 4):
        self.stroke_width = float(stroke_width)
        self.subsamples = int(subsamples)

    @staticmethod
    def _flatten_cubic(seg: np.ndarray, n: int = 16) -> np.ndarray:
        out = [seg[0]]
        for t in np.linspace(0.0, 1.0, n + 1)[1:]:
            a = seg[:3] * (1 - t) + seg[1:] * t
            b = a[:2] * (1 - t) + a[1:] * t
            out.append(b[0] * (1 - t) + b[1] * t)
        return np.array(out)

    def _polyline(self, prim: Primitive) -> np.ndarray:
        if prim.kind is PrimitiveKind.LINE:
            return prim.points_array()
        segs = [self._flatten_cubic(seg) for seg in cubic_chain(prim)]
        return np.vstack([segs[0]] + [s[1:] for s in segs[1:]])

    def _coverage(self, prim: Primitive, width: int, height: int) -> np.ndarray:
        poly = self._polyline(prim)
        ss = self.subsamples
        offs = (np.arange(ss) + 0.5) / ss
        xs = (np.arange(width)[:, None] + offs[None, :]).reshape(-1)
        ys = (np.arange(height)[:, None] + offs[None, :]).reshape(-1)
        gx, gy = np.meshgrid(xs, ys)
        pts = np.stack([gx, gy], axis=-1)  # (H*ss, W*ss, 2)
        a = poly[:-1]
        ab = poly[1:] - a
        denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
        best = np.full(pts.shape[:2], np.inf)
        for i in range(a.shape[0]):
            ap = pts - a[i]
            t = np.clip((ap @ ab[i]) / denom[i], 0.0, 1.0)
            closest = a[i] + t[..., None] * ab[i]
            d = np.linalg.norm(pts - closest, axis=-1)
            best = np.minimum(best, d)
        hit = (best <= self.stroke_width / 2.0).astype(np.float64)
        return hit.reshape(height, ss, width, ss).mean(axis=(1, 3))

    def render(self, primitives: Sequence[Primitive], width: int,
               height: int) -> np.ndarray:
        light = np.ones((height, width), dtype=np.float64)
        for prim in primitives:
            cov = self._coverage(prim, width, height)
            light *= 1.0 - prim.opacity * cov
        return np.repeat(light[:, :, None], 3, axis=2)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def _active_primitives(canvas: Canvas, mask) -> list[Primitive]:
    prims = canvas.primitives
    if mask is None:
        return [p for p in prims if not p.pruned]
    bits = getattr(mask, "bits", mask)
    if len(bits) != len(prims):
        raise DomainError(
            f"mask length {len(bits)} != primitive count {len(prims)}"
        )
    return [p for p, b in zip(prims, bits) if b and not p.pruned]


def primitive_tensors(prims: Sequence[Primitive], dtype=torch.float64,
                      requires_grad: bool = False):
    """(kinds, point tensors, opacity tensors) for a primitive sequence."""
    kinds = [p.kind for p in prims]
    points = [torch.tensor(p.points_array(), dtype=dtype,
                           requires_grad=requires_grad) for p in prims]
    opacities = [torch.tensor(float(p.opacity), dtype=dtype,
                              requires_grad=requires_grad) for p in prims]
    return kinds, points, opacities


def rasterize(canvas: Canvas, mask, backend: RasterizerBackend) -> Raster:
    """Composite the active (masked-in, unpruned) primitives over white."""
    active = _active_primitives(canvas, mask)
    kinds, points, opacities = primitive_tensors(active)
    try:
        img = backend.render_tensor(kinds, points, opacities,
                                    canvas.width, canvas.height)
    except DomainError:
        raise
    except Exception as exc:
        raise ProviderError(
            f"rasterizer {getattr(backend, 'identifier', backend)!r} failed on "
            f"{len(active)} primitives at {canvas.width}x{canvas.height}: {exc}"
        ) from exc
    return Raster(pixels=img.detach().cpu().contiguous().numpy())


def grad_check(backend: RasterizerBackend, canvas: Canvas,
               objective: Callable[[torch.Tensor], torch.Tensor],
               coord_step: float = 1e-2, opacity_step: float = 1e-3,
               atol: float = 1e-3) -> float:
    """Worst relative error of backend gradients vs central differences.

    Intended for small canvases and few primitives; the objective must be
    a smooth scalar of the rendered raster. `atol` floors the error
    denominator so near-zero gradient pairs (where the relative measure
    is pure noise) do not dominate the result.
    """
    live = canvas.live_primitives()
    kinds, points, opacities = primitive_tensors(live, requires_grad=True)
    value = objective(backend.render_tensor(kinds, points, opacities,
                                            canvas.width, canvas.height))
    grads = torch.autograd.grad(value, [*points, *opacities],
                                allow_unused=True)
    point_grads = grads[:len(points)]
    opacity_grads = grads[len(points):]

    def eval_at(pts_list, ops_list) -> float:
        with torch.no_grad():
            return float(objective(backend.render_tensor(
                kinds, pts_list, ops_list, canvas.width, canvas.height)))

    worst = 0.0

    def compare(analytic: float, plus: float, minus: float, step: float) -> None:
        nonlocal worst
        fd = (plus - minus) / (2.0 * step)
        denom = max(abs(analytic), abs(fd), atol)
        worst = max(worst, abs(analytic - fd) / denom)

    base_pts = [p.detach().clone() for p in points]
    base_ops = [o.detach().clone() for o in opacities]
    for i, pts in enumerate(base_pts):
        g = point_grads[i]
        for r in range(pts.shape[0]):
            for c in range(2):
                hi = [p.clone() for p in base_pts]
                lo = [p.clone() for p in base_pts]
                hi[i][r, c] += coord_step
                lo[i][r, c] -= coord_step
                analytic = 0.0 if g is None else float(g[r, c])
                compare(analytic, eval_at(hi, base_ops), eval_at(lo, base_ops),
                        coord_step)
    for i in range(len(base_ops)):
        g = opacity_grads[i]
        hi = [o.clone() for o in base_ops]
        lo = [o.clone() for o in base_ops]
        hi[i] += opacity_step
        lo[i] -= opacity_step
        analytic = 0.0 if g is None else float(g)
        compare(analytic, eval_at(base_pts, hi), eval_at(base_pts, lo),
                opacity_step)
    return worst


# ---------------------------------------------------------------------------
# SVG / PNG export
# ---------------------------------------------------------------------------


def _svg_document(primitives: Sequence[Primitive], width: int, height: int,
                  stroke_width: float,
                  color_of: Callable[[Primitive], str]) -> str:
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
    ]
    for prim in primitives:
        lines.append(
            f'  <path d="{svg_path(prim)}" fill="none" stroke="{color_of(prim)}" '
            f'stroke-opacity="{prim.opacity!r}" stroke-width="{stroke_width!r}" '
            f'stroke-linecap="round"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def export_svg(canvas: Canvas, path: str | FsPath,
               stroke_width: float = DEFAULT_STROKE_WIDTH,
               tracking_colors: bool = False) -> None:
    """Write the unpruned primitives as a standalone SVG document."""
    color = (lambda p: KIND_COLORS[p.kind]) if tracking_colors else (lambda p: "black")
    doc = _svg_document(canvas.live_primitives(), canvas.width, canvas.height,
                        stroke_width, color)
    FsPath(path).write_text(doc)


def write_png(pixels: np.ndarray | Raster, path: str | FsPath) -> None:
    """8-bit RGB PNG of a float raster."""
    from PIL import Image

    if isinstance(pixels, Raster):
        pixels = pixels.pixels
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="RGB").save(path)


def _layer_documents(primitives: list[Primitive], width: int, height: int,
                     stroke_width: float) -> dict[str, str]:
    def only(kind: PrimitiveKind) -> list[Primitive]:
        return [p for p in primitives if p.kind is kind]

    return {
        "composite": _svg_document(primitives, width, height, stroke_width,
                                   lambda p: "black"),
        "circles": _svg_document(only(PrimitiveKind.CIRCLE), width, height,
                                 stroke_width, lambda p: KIND_COLORS[p.kind]),
        "lines": _svg_document(only(PrimitiveKind.LINE), width, height,
                               stroke_width, lambda p: KIND_COLORS[p.kind]),
        "semicircles": _svg_document(only(PrimitiveKind.SEMICIRCLE), width,
                                     height, stroke_width,
                                     lambda p: KIND_COLORS[p.kind]),
        "overlay": _svg_document(primitives, width, height, stroke_width,
                                 lambda p: KIND_COLORS[p.kind]),
    }


def export_layers(log, out_dir: str | FsPath,
                  stroke_width: float | None = None) -> list[FsPath]:
    """Per-snapshot evolution layers, five SVGs per snapshot group.

    Layout: `<out_dir>/iter_<t>/{composite,circles,lines,semicircles,
    overlay}.svg`; pruned primitives are omitted everywhere.
    """
    records = getattr(log, "records", log)
    if not records:
        raise DomainError("trajectory log has no snapshots to export")
    out_dir = FsPath(out_dir)
    written: list[FsPath] = []
    for rec in records:
        meta = rec["canvas"]
        width, height = int(meta["width"]), int(meta["height"])
        sw = stroke_width if stroke_width is not None else float(
            meta.get("stroke_width", DEFAULT_STROKE_WIDTH))
        prims = [Primitive.from_record(p) for p in rec["primitives"]]
        prims = [p for p in prims if not p.pruned]
        group = out_dir / f"iter_{rec['iter']}"
        group.mkdir(parents=True, exist_ok=True)
        for name, doc in _layer_documents(prims, width, height, sw).items():
            target = group / f"{name}.svg"
            target.write_text(doc)
            written.append(target)
    return written
