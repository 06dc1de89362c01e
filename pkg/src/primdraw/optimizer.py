"""The synthesis loop.

Each iteration: draw a primitive-level dropout mask, render the active
primitives, score the render, backpropagate, and apply a masked Adam
step. Masked primitives keep their parameters, moments, and bias-
correction counters untouched and rejoin on the next iteration. Opacity
gating periodically removes primitives whose opacity has collapsed, and
the trajectory log records snapshots of every primitive for evolution
tracking and replay.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np
import torch

from .canvas import Canvas
from .errors import DomainError, InputError, NumericsError
from .render import RasterizerBackend

SCHEMA_VERSION = 1

_RECORD_KEYS = {"v", "iter", "loss_sem", "loss_vis", "loss_total", "lr",
                "mask", "canvas", "primitives"}


@dataclass
class OptimConfig:
    num_iter: int = 1000
    lr0: float = 1.0
    lr_milestones: tuple[tuple[float, float], ...] = ((0.5, 0.4), (0.75, 0.1))
    pld_prob: float = 0.05
    opacity_threshold: float = 0.05
    gate_every: int = 50
    snapshot_every: int = 100
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.num_iter < 0:
            raise InputError(f"num_iter must be >= 0, got {self.num_iter}")
        if not 0.0 <= self.pld_prob < 1.0:
            raise InputError(f"pld_prob must be in [0, 1), got {self.pld_prob}")
        if not 0.0 <= self.opacity_threshold < 1.0:
            raise InputError(
                f"opacity_threshold must be in [0, 1), got {self.opacity_threshold}"
            )
        if self.lr0 <= 0:
            raise InputError(f"lr0 must be positive, got {self.lr0}")
        if self.gate_every < 0 or self.snapshot_every < 1:
            raise InputError("gate_every must be >= 0 and snapshot_every >= 1")
        fracs = [f for f, _ in self.lr_milestones]
        if any(not 0.0 < f < 1.0 for f in fracs) or sorted(fracs) != fracs or \
                len(set(fracs)) != len(fracs):
            raise InputError(
                f"milestone fractions must be strictly increasing in (0, 1): {fracs}"
            )
        rates = [self.lr0] + [lr for _, lr in self.lr_milestones]
        if any(b > a for a, b in zip(rates, rates[1:])) or any(r <= 0 for r in rates):
            raise InputError(f"milestone rates must be positive and non-increasing: {rates}")


@dataclass
class DropoutMask:
    """Per-primitive activity bits for one iteration (True = rendered)."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    def active_count(self) -> int:
        return int(self.bits.sum())

    def __len__(self) -> int:
        return len(self.bits)


def pld_mask(n: int, p: float, rng: np.random.Generator) -> DropoutMask:
    """Independent Bernoulli(1 - p) bits; an all-false draw is resampled
    because an empty canvas yields no gradient signal."""
    if n < 1:
        raise DomainError(f"mask needs at least one primitive, got n={n}")
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    bits = rng.random(n) >= p
    while not bits.any():
        bits = rng.random(n) >= p
    return DropoutMask(bits=bits)


def schedule_lr(t: int, cfg: OptimConfig) -> float:
    """Step schedule: lr0 until the first milestone fraction of num_iter,
    then each milestone's rate from int(num_iter * fraction) onward."""
    lr = cfg.lr0
    for frac, rate in cfg.lr_milestones:
        if t >= int(cfg.num_iter * frac):
            lr = rate
    return lr


def gate_opacity(canvas: Canvas, threshold: float) -> Canvas:
    """Permanently prune primitives whose opacity is at or below threshold."""
    if not 0.0 <= threshold < 1.0:
        raise DomainError(f"opacity threshold must be in [0, 1), got {threshold}")
    survivors = 0
    for prim in canvas.primitives:
        if prim.pruned:
            continue
        if prim.opacity <= threshold:
            prim.pruned = True
        else:
            survivors += 1
    if survivors == 0:
        raise DomainError(
            f"opacity gating at threshold {threshold} pruned every primitive"
        )
    return canvas


def adam_update(value: torch.Tensor, grad: torch.Tensor, m: torch.Tensor,
                v: torch.Tensor, step: int, lr: float,
                betas: tuple[float, float] = (0.9, 0.999),
                eps: float = 1e-8) -> None:
    """One Adam step in place; `step` is the 1-based count for bias correction."""
    b1, b2 = betas
    m.mul_(b1).add_(grad, alpha=1.0 - b1)
    v.mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    value.add_(m_hat / (v_hat.sqrt() + eps), alpha=-lr)


class TrajectoryLog:
    """Snapshots of every primitive across the run.

    Records land at iteration 0, every snapshot_every-th iteration, and
    the final iteration. When given a sink path, each record is written
    as one JSON line and flushed immediately, so an aborted run leaves a
    valid partial log. The mask stored in a record is the dropout mask of
    the iteration that produced that state (all-true at iteration 0).
    """

    def __init__(self, sink: str | FsPath | None = None):
        self.records: list[dict] = []
        self._fh = open(sink, "w") if sink is not None else None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @property
    def final_record(self) -> dict:
        return self.records[-1]

    @classmethod
    def load(cls, path: str | FsPath, lenient_tail: bool = False
             ) -> tuple[TrajectoryLog, bool]:
        """Read a JSONL trajectory; returns (log, tail_was_truncated).

        With lenient_tail, an unparseable final line (a run crashed while
        writing it) is dropped instead of raising.
        """
        path = FsPath(path)
        if not path.is_file():
            raise InputError(f"trajectory log not found: {path}")
        lines = path.read_text().splitlines()
        lines = [ln for ln in lines if ln.strip()]
        if not lines:
            raise InputError(f"trajectory log {path} is empty")
        log = cls()
        truncated = False
        for i, line in enumerate(lines):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                if lenient_tail and i == len(lines) - 1:
                    truncated = True
                    break
                raise InputError(f"{path}:{i + 1}: malformed JSON: {exc}") from exc
            if not isinstance(rec, dict) or rec.get("v") != SCHEMA_VERSION:
                raise InputError(
                    f"{path}:{i + 1}: unsupported trajectory schema "
                    f"(expected v={SCHEMA_VERSION}, got {rec.get('v')!r})"
                )
            missing = _RECORD_KEYS - rec.keys()
            if missing:
                raise InputError(f"{path}:{i + 1}: record missing {sorted(missing)}")
            log.records.append(rec)
        if not log.records:
            raise InputError(f"trajectory log {path} has no readable records")
        return log, truncated


@dataclass
class PrimState:
    """Optimizer view of one primitive: leaf tensors plus Adam moments.

    `steps` counts only iterations in which this primitive was active;
    masked iterations advance neither the moments nor the bias-correction
    counter.
    """

    points: torch.Tensor
    opacity: torch.Tensor
    m_pts: torch.Tensor = field(init=False)
    v_pts: torch.Tensor = field(init=False)
    m_op: torch.Tensor = field(init=False)
    v_op: torch.Tensor = field(init=False)
    steps: int = 0

    def __post_init__(self):
        self.m_pts = torch.zeros_like(self.points)
        self.v_pts = torch.zeros_like(self.points)
        self.m_op = torch.zeros_like(self.opacity)
        self.v_op = torch.zeros_like(self.opacity)


def build_states(canvas: Canvas, dtype=torch.float64) -> list[PrimState]:
    return [
        PrimState(
            points=torch.tensor(p.points_array(), dtype=dtype, requires_grad=True),
            opacity=torch.tensor(float(p.opacity), dtype=dtype, requires_grad=True),
        )
        for p in canvas.primitives
    ]


def step(canvas: Canvas, states: list[PrimState], active_idx: list[int],
         grads, lr: float, cfg: OptimConfig, iteration: int = 0) -> None:
    """Apply the masked Adam step for one iteration.

    `grads` holds (point_grad, opacity_grad) pairs flattened in
    active_idx order, as produced by torch.autograd.grad; None entries
    count as zero. Only active primitives are updated; everything else
    (parameters, moments, step counters) is untouched. Coordinates are
    clamped to the canvas and opacities to [0, 1], then written back into
    the canvas primitives.
    """
    for slot, i in enumerate(active_idx):
        st = states[i]
        g_pts = grads[2 * slot]
        g_op = grads[2 * slot + 1]
        if g_pts is None:
            g_pts = torch.zeros_like(st.points)
        if g_op is None:
            g_op = torch.zeros_like(st.opacity)
        if not (torch.all(torch.isfinite(g_pts)) and torch.isfinite(g_op)):
            raise NumericsError(
                f"non-finite gradient for primitive "
                f"{canvas.primitives[i].id} at iteration {iteration}"
            )
        st.steps += 1
        with torch.no_grad():
            adam_update(st.points, g_pts, st.m_pts, st.v_pts, st.steps,
                        lr, cfg.adam_betas, cfg.adam_eps)
            adam_update(st.opacity, g_op, st.m_op, st.v_op, st.steps,
                        lr, cfg.adam_betas, cfg.adam_eps)
            st.points[:, 0].clamp_(0.0, float(canvas.width))
            st.points[:, 1].clamp_(0.0, float(canvas.height))
            st.opacity.clamp_(0.0, 1.0)
        prim = canvas.primitives[i]
        prim.set_points(st.points.detach().numpy())
        prim.opacity = float(st.opacity.detach())


def _snapshot(canvas: Canvas, iteration: int, losses, lr: float,
              mask_bits: np.ndarray, stroke_width: float) -> dict:
    sem, vis, total = losses
    meta = canvas.to_record()
    meta["stroke_width"] = stroke_width
    return {
        "v": SCHEMA_VERSION,
        "iter": iteration,
        "loss_sem": float(sem),
        "loss_vis": float(vis),
        "loss_total": float(total),
        "lr": lr,
        "mask": [bool(b) for b in mask_bits],
        "canvas": meta,
        "primitives": [p.to_record() for p in canvas.primitives],
    }


def run(canvas: Canvas, scorer, rasterizer: RasterizerBackend,
        cfg: OptimConfig, log_path: str | FsPath | None = None
        ) -> tuple[Canvas, TrajectoryLog]:
    """Execute the full synthesis loop on a canvas.

    `scorer.losses(raster)` must return (semantic, visual, total) scalars
    with `total` differentiable w.r.t. the raster. Returns the mutated
    canvas and the trajectory log; on failure the log holds every
    snapshot completed so far.
    """
    if not canvas.primitives:
        raise DomainError("cannot optimize an empty canvas")
    rng = np.random.default_rng(cfg.seed)
    states = build_states(canvas)
    log = TrajectoryLog(sink=log_path)

    def live_flags() -> np.ndarray:
        return np.array([not p.pruned for p in canvas.primitives], dtype=bool)

    def render_active(active_idx: list[int]) -> torch.Tensor:
        kinds = [canvas.primitives[i].kind for i in active_idx]
        pts = [states[i].points for i in active_idx]
        ops = [states[i].opacity for i in active_idx]
        return rasterizer.render_tensor(kinds, pts, ops, canvas.width, canvas.height)

    try:
        with torch.no_grad():
            initial = scorer.losses(render_active(list(np.flatnonzero(live_flags()))))
        log.append(_snapshot(canvas, 0, [float(x) for x in initial],
                             schedule_lr(0, cfg), live_flags(),
                             rasterizer.stroke_width))

        n = len(canvas.primitives)
        for t in range(cfg.num_iter):
            lr = schedule_lr(t, cfg)
            live = live_flags()
            mask = pld_mask(n, cfg.pld_prob, rng)
            while not (mask.bits & live).any():
                mask = pld_mask(n, cfg.pld_prob, rng)
            active_idx = [int(i) for i in np.flatnonzero(mask.bits & live)]

            raster = render_active(active_idx)
            sem, vis, total = scorer.losses(raster)
            params: list[torch.Tensor] = []
            for i in active_idx:
                params.extend((states[i].points, states[i].opacity))
            grads = torch.autograd.grad(total, params, allow_unused=True)
            step(canvas, states, active_idx, grads, lr, cfg, iteration=t)

            if cfg.gate_every > 0 and (t + 1) % cfg.gate_every == 0:
                gate_opacity(canvas, cfg.opacity_threshold)

            if (t + 1) % cfg.snapshot_every == 0 or (t + 1) == cfg.num_iter:
                log.append(_snapshot(
                    canvas, t + 1,
                    [float(sem.detach()), float(vis.detach()), float(total.detach())],
                    lr, mask.bits, rasterizer.stroke_width,
                ))
    finally:
        log.close()
    return canvas, log
