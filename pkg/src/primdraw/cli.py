"""Command-line pipeline: prompt in, sketch plus provenance out.

`synthesize` drives attention -> landmarks -> canvas -> optimization ->
exports; `replay` regenerates every layer file from a trajectory log
without touching any backend. Exit codes: 0 success, 2 bad
configuration, 3 provider/runtime failure (partial trajectory kept).
"""

from __future__ import annotations

import ast
import hashlib
import re
import time
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path as FsPath

import click
import numpy as np

from .attention import (
    FileAttentionProvider,
    UniformAttentionProvider,
    aggregate,
    load_reference_image,
    sample_landmarks,
)
from .canvas import DEFAULT_CANVAS_SIDE, InitConfig, init_canvas, init_canvas_points
from .errors import InputError, PrimdrawError
from .metrics import evaluate, write_metrics_json
from .optimizer import OptimConfig, TrajectoryLog, run
from .render import DEFAULT_STROKE_WIDTH, SoftRasterizer, rasterize
from .report import write_sketch_outputs
from .scoring import AugmentConfig, FakeEmbeddingBackend, LossWeights, PromptScorer


def child_seed(seed: int, label: str) -> int:
    """Stable per-subsystem seed derivation from the master seed."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def default_focus_token(prompt: str) -> str:
    words = re.findall(r"[A-Za-z]+", prompt)
    if not words:
        raise InputError(f"prompt {prompt!r} has no alphabetic token to focus on")
    return words[-1]


@dataclass
class RunConfig:
    prompt: str
    focus_token: str | None = None
    seed: int = 0
    width: int = DEFAULT_CANVAS_SIDE
    height: int = DEFAULT_CANVAS_SIDE
    stroke_width: float = DEFAULT_STROKE_WIDTH
    init: InitConfig = field(default_factory=InitConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    backend: str = "fake"
    attention: str = "uniform"
    ref_image: str | None = None
    init_mode: str = "patch"
    out_dir: str = "out"

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise InputError("prompt must be non-empty")
        if self.backend not in ("live", "fake"):
            raise InputError(f"backend must be 'live' or 'fake', got {self.backend!r}")
        if not (self.attention in ("live", "uniform")
                or self.attention.startswith("file:")):
            raise InputError(
                f"attention must be 'live', 'uniform', or 'file:<path>', "
                f"got {self.attention!r}"
            )
        if self.init_mode not in ("patch", "point"):
            raise InputError(f"init_mode must be 'patch' or 'point', got {self.init_mode!r}")
        if self.focus_token is not None:
            words = {w.lower() for w in re.findall(r"[A-Za-z]+", self.prompt)}
            if self.focus_token.lower() not in words:
                raise InputError(
                    f"focus token {self.focus_token!r} does not appear in the prompt"
                )
        else:
            self.focus_token = default_focus_token(self.prompt)


def _make_attention_provider(cfg: RunConfig):
    if cfg.attention == "uniform":
        return UniformAttentionProvider(cfg.width, cfg.height)
    if cfg.attention.startswith("file:"):
        return FileAttentionProvider(cfg.attention[len("file:"):],
                                     ref_image_path=cfg.ref_image,
                                     width=cfg.width, height=cfg.height)
    from .live import DiffusionAttentionProvider

    return DiffusionAttentionProvider()


def _make_backend(cfg: RunConfig):
    if cfg.backend == "fake":
        return FakeEmbeddingBackend(seed=child_seed(cfg.seed, "backend"),
                                    width=cfg.width, height=cfg.height)
    from .live import TransformersClipBackend

    return TransformersClipBackend()


def synthesize_run(cfg: RunConfig) -> FsPath:
    """Execute one full synthesis; returns the output directory."""
    started = time.monotonic()
    out_dir = FsPath(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    provider = _make_attention_provider(cfg)
    raw_maps, ref_image = provider.fetch(cfg.prompt, cfg.focus_token,
                                         child_seed(cfg.seed, "attention"))
    amap = aggregate(raw_maps, cfg.width, cfg.height)
    landmarks = sample_landmarks(
        amap, cfg.init.k, np.random.default_rng(child_seed(cfg.seed, "landmarks")))

    init_fn = init_canvas if cfg.init_mode == "patch" else init_canvas_points
    canvas = init_fn(cfg.init, landmarks,
                     np.random.default_rng(child_seed(cfg.seed, "init")),
                     width=cfg.width, height=cfg.height, seed=cfg.seed)

    backend = _make_backend(cfg)
    if ref_image is None and cfg.ref_image:
        ref_image = load_reference_image(cfg.ref_image, cfg.width, cfg.height)
    if ref_image is None:
        ref_image = np.ones((cfg.height, cfg.width, 3), dtype=np.float64)
    scorer = PromptScorer(
        backend, cfg.prompt, ref_image, cfg.augment, cfg.weights,
        rng=np.random.default_rng(child_seed(cfg.seed, "augment")))
    rasterizer = SoftRasterizer(stroke_width=cfg.stroke_width)
    optim_cfg = replace(cfg.optim, seed=child_seed(cfg.seed, "optim"))

    canvas, log = run(canvas, scorer, rasterizer, optim_cfg,
                      log_path=out_dir / "trajectory.jsonl")

    raster = rasterize(canvas, None, rasterizer)
    report = evaluate(raster, cfg.prompt, backend, ref_image)
    write_sketch_outputs(out_dir, log.records)
    write_metrics_json(report, out_dir / "metrics.json", seed=cfg.seed,
                       iterations=cfg.optim.num_iter,
                       wallclock_seconds=time.monotonic() - started)
    return out_dir


# ---------------------------------------------------------------------------
# Config file and option plumbing
# ---------------------------------------------------------------------------


def parse_config_file(path: str | FsPath) -> dict:
    """Flat `key = value` pairs; values are Python literals or bare strings."""
    path = FsPath(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    values: dict = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        value = value.strip()
        try:
            values[key.strip()] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            values[key.strip()] = value
    return values


def build_run_config(values: dict) -> RunConfig:
    """RunConfig from a flat dict of CLI/config-file keys."""
    try:
        init = InitConfig(
            k=int(values.get("k_landmarks", 32)),
            patch_size=int(values.get("patch_size", 32)),
            per_type_count=int(values.get("per_type_count", 1)),
            alpha_init=float(values.get("alpha_init", 0.3)),
        )
        augment = AugmentConfig(
            m=int(values.get("aug_m", 4)),
            perspective_distortion=float(values.get("perspective_distortion", 0.5)),
            crop_scale=tuple(values.get("crop_scale", (0.7, 0.9))),
            seed=int(values.get("seed", 0)),
        )
        weights = LossWeights(
            lambda_sem=float(values.get("lambda_sem", 0.6)),
            lambda_vis=float(values.get("lambda_vis", 0.9)),
        )
        milestones = values.get("lr_milestones", ((0.5, 0.4), (0.75, 0.1)))
        optim = OptimConfig(
            num_iter=int(values.get("num_iter", 1000)),
            lr0=float(values.get("lr0", 1.0)),
            lr_milestones=tuple(tuple(m) for m in milestones),
            pld_prob=float(values.get("pld", 0.05)),
            opacity_threshold=float(values.get("opacity_k", 0.05)),
            gate_every=int(values.get("gate_every", 50)),
            snapshot_every=int(values.get("snapshot_every", 100)),
            seed=int(values.get("seed", 0)),
        )
        return RunConfig(
            prompt=values["prompt"],
            focus_token=values.get("focus"),
            seed=int(values.get("seed", 0)),
            width=int(values.get("width", DEFAULT_CANVAS_SIDE)),
            height=int(values.get("height", DEFAULT_CANVAS_SIDE)),
            stroke_width=float(values.get("stroke_width", DEFAULT_STROKE_WIDTH)),
            init=init, augment=augment, weights=weights, optim=optim,
            backend=str(values.get("backend", "fake")),
            attention=str(values.get("attention", "uniform")),
            ref_image=values.get("ref_image"),
            init_mode=str(values.get("init_mode", "patch")),
            out_dir=str(values.get("out", "out")),
        )
    except KeyError as exc:
        raise InputError(f"missing required config key: {exc.args[0]}") from exc
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad config value: {exc}") from exc


def _slug(text: str, index: int) -> str:
    words = re.findall(r"[A-Za-z0-9]+", text.lower())
    return f"{index:02d}_" + "-".join(words)[:40]


def _worker(cfg: RunConfig) -> str:
    return str(synthesize_run(cfg))


_OPTION_KEYS = (
    "focus", "seed", "num_iter", "pld", "alpha_init", "opacity_k",
    "patch_size", "k_landmarks", "per_type_count", "lambda_sem", "lambda_vis",
    "aug_m", "backend", "attention", "ref_image", "out", "stroke_width",
    "init_mode",
)


@click.group()
def main():
    """Sketch synthesis from text via optimized geometric primitives."""


@main.command()
@click.option("--prompt", "prompts", multiple=True, required=True,
              help="Text prompt (repeat for a batch).")
@click.option("--focus", default=None, help="Highlighted word for attention maps.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--num-iter", type=int, default=1000, show_default=True)
@click.option("--pld", type=float, default=0.05, show_default=True,
              help="Primitive-level dropout probability.")
@click.option("--alpha-init", type=float, default=0.3, show_default=True)
@click.option("--opacity-k", type=float, default=0.05, show_default=True,
              help="Opacity gating threshold.")
@click.option("--patch-size", type=int, default=32, show_default=True)
@click.option("--k-landmarks", type=int, default=32, show_default=True)
@click.option("--per-type-count", type=int, default=1, show_default=True)
@click.option("--lambda-sem", type=float, default=0.6, show_default=True)
@click.option("--lambda-vis", type=float, default=0.9, show_default=True)
@click.option("--aug-m", type=int, default=4, show_default=True)
@click.option("--backend", type=click.Choice(["live", "fake"]), default="fake",
              show_default=True)
@click.option("--attention", default="uniform", show_default=True,
              help="'live', 'uniform', or 'file:<path>'.")
@click.option("--ref-image", default=None, help="Reference image for the visual loss.")
@click.option("--out", default="out", show_default=True)
@click.option("--stroke-width", type=float, default=DEFAULT_STROKE_WIDTH,
              show_default=True)
@click.option("--init-mode", type=click.Choice(["patch", "point"]),
              default="patch", show_default=True,
              help="'point' is an ablation mode.")
@click.option("--config", "config_path", default=None,
              help="Key = value config file; flags given explicitly win.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Worker processes for batch prompts.")
@click.pass_context
def synthesize(ctx, prompts, config_path, jobs, **flags):
    """Synthesize sketches for one or more prompts."""
    try:
        file_values = parse_config_file(config_path) if config_path else {}
        values = dict(file_values)
        for key in _OPTION_KEYS:
            source = ctx.get_parameter_source(key)
            explicit = source is not None and source.name in (
                "COMMANDLINE", "ENVIRONMENT")
            if explicit or key not in values:
                values[key] = flags[key]
        base_out = FsPath(str(values.get("out", "out")))
        prompt_list = list(prompts) or (
            [file_values["prompt"]] if "prompt" in file_values else [])
        if not prompt_list:
            raise InputError("no prompt given (flag --prompt or config key)")

        configs = []
        for i, prompt in enumerate(prompt_list):
            v = dict(values)
            v["prompt"] = prompt
            if len(prompt_list) > 1:
                v["out"] = str(base_out / _slug(prompt, i))
                v["seed"] = int(values.get("seed", 0)) + i
            configs.append(build_run_config(v))
    except InputError as exc:
        click.echo(f"error: {exc}", err=True)
        ctx.exit(2)

    try:
        if len(configs) == 1:
            out = synthesize_run(configs[0])
            click.echo(f"wrote {out}")
        elif jobs <= 1:
            for cfg in configs:
                click.echo(f"wrote {synthesize_run(cfg)}")
        else:
            with get_context("spawn").Pool(processes=jobs) as pool:
                for out in pool.map(_worker, configs):
                    click.echo(f"wrote {out}")
    except InputError as exc:
        click.echo(f"error: {exc}", err=True)
        ctx.exit(2)
    except PrimdrawError as exc:
        click.echo(f"error: {exc}", err=True)
        ctx.exit(3)


@main.command()
@click.argument("trajectory_path", type=click.Path())
@click.option("--out", "out_dir", required=True, help="Directory for regenerated files.")
@click.pass_context
def replay(ctx, trajectory_path, out_dir):
    """Regenerate sketch and layer files from a trajectory log (no backend)."""
    try:
        log, truncated = TrajectoryLog.load(trajectory_path, lenient_tail=True)
    except InputError as exc:
        click.echo(f"error: {exc}", err=True)
        ctx.exit(2)
    if truncated:
        click.echo("warning: trajectory ends mid-record; replaying the "
                   "complete snapshots only", err=True)
    try:
        write_sketch_outputs(out_dir, log.records)
    except PrimdrawError as exc:
        click.echo(f"error: {exc}", err=True)
        ctx.exit(3)
    click.echo(f"wrote {out_dir} ({len(log.records)} snapshot groups)")


if __name__ == "__main__":
    main()
