"""Canvas initialization: landmarks -> selected patches -> primitives.

Every patch containing at least one sampled landmark receives
`per_type_count` primitives of each kind (line, circle, semi-circle) at
the diminished initial opacity; patches without landmarks stay empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import LandmarkSet
from .errors import DomainError, InputError
from .geometry import (
    Patch,
    Point2,
    Primitive,
    PrimitiveKind,
    make_circle,
    make_line,
    make_semicircle,
    patch_at,
    patch_of,
)

DEFAULT_CANVAS_SIDE = 224

_FACTORIES = (
    (PrimitiveKind.LINE, make_line),
    (PrimitiveKind.CIRCLE, make_circle),
    (PrimitiveKind.SEMICIRCLE, make_semicircle),
)


@dataclass
class InitConfig:
    k: int = 32
    patch_size: int = 32
    per_type_count: int = 1
    alpha_init: float = 0.3

    def __post_init__(self):
        if self.k < 1:
            raise InputError(f"landmark count k must be >= 1, got {self.k}")
        if self.patch_size < 4:
            raise InputError(f"patch_size must be >= 4, got {self.patch_size}")
        if self.per_type_count < 1:
            raise InputError(f"per_type_count must be >= 1, got {self.per_type_count}")
        if not 0.0 < self.alpha_init <= 1.0:
            raise InputError(f"alpha_init must be in (0, 1], got {self.alpha_init}")


@dataclass
class Canvas:
    """The ordered composition of primitives being optimized."""

    width: int = DEFAULT_CANVAS_SIDE
    height: int = DEFAULT_CANVAS_SIDE
    patch_size: int = 32
    primitives: list[Primitive] = field(default_factory=list)
    seed: int = 0

    def live_primitives(self) -> list[Primitive]:
        return [p for p in self.primitives if not p.pruned]

    def kind_counts(self) -> dict[PrimitiveKind, int]:
        counts = {kind: 0 for kind in PrimitiveKind}
        for p in self.primitives:
            counts[p.kind] += 1
        return counts

    def to_record(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "patch_size": self.patch_size,
            "seed": self.seed,
        }

    @classmethod
    def from_record(cls, meta: dict, primitives: list[dict]) -> Canvas:
        return cls(
            width=int(meta["width"]),
            height=int(meta["height"]),
            patch_size=int(meta.get("patch_size", 32)),
            seed=int(meta.get("seed", 0)),
            primitives=[Primitive.from_record(rec) for rec in primitives],
        )


def _check_grid(width: int, height: int, patch_size: int) -> None:
    # A non-divisible canvas truncates the last row/column of patches; a
    # sliver thinner than 4 px cannot host a circle, so reject it early.
    for side, name in ((width, "width"), (height, "height")):
        rem = side % patch_size
        if rem != 0 and rem < 4:
            raise InputError(
                f"canvas {name} {side} leaves a {rem} px sliver with "
                f"patch_size {patch_size}; use a divisible size"
            )


def select_patches(landmarks: LandmarkSet, patch_size: int,
                   width: int = DEFAULT_CANVAS_SIDE,
                   height: int = DEFAULT_CANVAS_SIDE) -> list[Patch]:
    """Deduplicated patches containing at least one landmark, row-major order."""
    _check_grid(width, height, patch_size)
    indices = set()
    for p in landmarks.points:
        indices.add(patch_of(p, patch_size, width=width, height=height))
    return [
        patch_at(row, col, patch_size, width, height)
        for row, col in sorted(indices)
    ]


def init_canvas(cfg: InitConfig, landmarks: LandmarkSet,
                rng: np.random.Generator, *,
                width: int = DEFAULT_CANVAS_SIDE,
                height: int = DEFAULT_CANVAS_SIDE,
                seed: int = 0) -> Canvas:
    """Place per_type_count primitives of each kind in every selected patch.

    Creation order is patch scan order (row-major), then line, circle,
    semi-circle within a patch; all primitives start at alpha_init.
    """
    if len(landmarks) == 0:
        raise DomainError("attention map produced no landmarks")
    patches = select_patches(landmarks, cfg.patch_size, width, height)
    if not patches:
        raise DomainError("attention map produced no landmarks inside the canvas")
    primitives: list[Primitive] = []
    for patch in patches:
        for _, factory in _FACTORIES:
            for _ in range(cfg.per_type_count):
                primitives.append(
                    factory(patch, rng, prim_id=len(primitives),
                            opacity=cfg.alpha_init)
                )
    return Canvas(width=width, height=height, patch_size=cfg.patch_size,
                  primitives=primitives, seed=seed)


def init_canvas_points(cfg: InitConfig, landmarks: LandmarkSet,
                       rng: np.random.Generator, *,
                       width: int = DEFAULT_CANVAS_SIDE,
                       height: int = DEFAULT_CANVAS_SIDE,
                       seed: int = 0) -> Canvas:
    """Ablation mode: one primitive triple per landmark, centred on it.

    Kept for comparison experiments only; patch-based init is the
    supported mode.
    """
    if len(landmarks) == 0:
        raise DomainError("attention map produced no landmarks")
    primitives: list[Primitive] = []
    half = cfg.patch_size // 2
    for lm in landmarks.points:
        x0 = int(min(max(lm.x - half, 0), width - cfg.patch_size))
        y0 = int(min(max(lm.y - half, 0), height - cfg.patch_size))
        patch = Patch(
            row=0, col=0,
            start=Point2(float(x0), float(y0)),
            end=Point2(float(x0 + cfg.patch_size), float(y0 + cfg.patch_size)),
            size=cfg.patch_size,
        )
        for _, factory in _FACTORIES:
            for _ in range(cfg.per_type_count):
                primitives.append(
                    factory(patch, rng, prim_id=len(primitives),
                            opacity=cfg.alpha_init)
                )
    return Canvas(width=width, height=height, patch_size=cfg.patch_size,
                  primitives=primitives, seed=seed)
