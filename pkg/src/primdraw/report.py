"""Output-tree assembly shared by synthesize and replay.

A finished (or replayed) run directory holds:

    final.svg, final.png      the last snapshot's sketch
    trajectory.jsonl          the streamed snapshot log
    loss_curve.png            matplotlib figure of the loss history
    layers/iter_<t>/*.svg     per-kind evolution layers (5 per snapshot)
    metrics.json              synthesize only (needs a backend)

Replay reuses the exact same code paths so its files are byte-identical
to the ones synthesize wrote.
"""

from __future__ import annotations

from pathlib import Path as FsPath

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .canvas import Canvas
from .render import (
    DEFAULT_STROKE_WIDTH,
    SoftRasterizer,
    export_layers,
    export_svg,
    rasterize,
    write_png,
)

# Fixed PNG metadata keeps repeated runs byte-identical.
_PNG_META = {"Software": "primdraw"}


def canvas_from_record(record: dict) -> Canvas:
    return Canvas.from_record(record["canvas"], record["primitives"])


def loss_curve_figure(records: list[dict], path: str | FsPath) -> None:
    """Loss history across snapshots as a PNG figure."""
    iters = [r["iter"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(iters, [r["loss_total"] for r in records], label="total", lw=2)
    ax.plot(iters, [r["loss_sem"] for r in records], label="semantic", ls="--")
    ax.plot(iters, [r["loss_vis"] for r in records], label="visual", ls=":")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def write_sketch_outputs(out_dir: str | FsPath, records: list[dict]) -> FsPath:
    """final.svg/final.png, evolution layers, and the loss figure."""
    out_dir = FsPath(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    last = records[-1]
    stroke_width = float(last["canvas"].get("stroke_width", DEFAULT_STROKE_WIDTH))
    final_canvas = canvas_from_record(last)

    export_svg(final_canvas, out_dir / "final.svg", stroke_width=stroke_width)
    raster = rasterize(final_canvas, None, SoftRasterizer(stroke_width=stroke_width))
    write_png(raster, out_dir / "final.png")
    export_layers(records, out_dir / "layers", stroke_width=stroke_width)
    loss_curve_figure(records, out_dir / "loss_curve.png")
    return out_dir
