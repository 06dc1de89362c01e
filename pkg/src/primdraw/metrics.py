"""Evaluation metrics for a finished sketch: CS, CLIP-T, and PSNR.

CS and CLIP-T are both prompt-sketch cosine similarities; CS encodes the
raw prompt while CLIP-T wraps it in a caption template first. PSNR is
computed between the sketch raster and the attention provider's
reference image (the only image pair the pipeline possesses).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np
import torch

from .errors import DomainError
from .scoring import Embedding, cosine_sim, as_raster_tensor

CAPTION_TEMPLATE = "a photo of {}."


@dataclass
class MetricsReport:
    cs: float
    clip_t: float
    psnr: float
    prompt: str
    backend_ids: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in (("cs", self.cs), ("clip_t", self.clip_t)):
            if not -1.0 - 1e-9 <= value <= 1.0 + 1e-9:
                raise DomainError(f"{name}={value} outside [-1, 1]")
        if self.psnr < 0:
            raise DomainError(f"psnr={self.psnr} must be non-negative")


def _sketch_similarity(sketch_raster, text: str, backend) -> float:
    raster = as_raster_tensor(sketch_raster)
    with torch.no_grad():
        img_emb = Embedding(backend.encode_image(raster[None])[0])
    return cosine_sim(img_emb, backend.encode_text(text))


def clip_t(sketch_raster, prompt: str, backend,
           template: str = CAPTION_TEMPLATE) -> float:
    """Cosine similarity of the sketch embedding and the templated prompt."""
    return _sketch_similarity(sketch_raster, template.format(prompt), backend)


def cs(sketch_raster, prompt: str, backend) -> float:
    """Cosine similarity of the sketch embedding and the raw prompt."""
    return _sketch_similarity(sketch_raster, prompt, backend)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB (MAX = 1.0); inf for identical images."""
    pa = np.asarray(getattr(a, "pixels", a), dtype=np.float64)
    pb = np.asarray(getattr(b, "pixels", b), dtype=np.float64)
    if pa.shape != pb.shape:
        raise DomainError(f"psnr shapes differ: {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def evaluate(sketch_raster, prompt: str, backend, ref_image) -> MetricsReport:
    """Full metric sweep for one finished sketch."""
    return MetricsReport(
        cs=cs(sketch_raster, prompt, backend),
        clip_t=clip_t(sketch_raster, prompt, backend),
        psnr=psnr(sketch_raster, np.asarray(getattr(ref_image, "pixels", ref_image))),
        prompt=prompt,
        backend_ids={
            "cs": getattr(backend, "identifier", str(backend)),
            "clip_t": getattr(backend, "identifier", str(backend)),
            "psnr": "reference-image",
        },
    )


def write_metrics_json(report: MetricsReport, path: str | FsPath, *,
                       seed: int, iterations: int,
                       wallclock_seconds: float) -> None:
    """metrics.json for a run; an infinite PSNR is stored as null."""
    payload = {
        "prompt": report.prompt,
        "seed": seed,
        "cs": report.cs,
        "clip_t": report.clip_t,
        "psnr": None if math.isinf(report.psnr) else report.psnr,
        "iter": iterations,
        "wallclock_seconds": wallclock_seconds,
        "backend_ids": report.backend_ids,
    }
    FsPath(path).write_text(json.dumps(payload, indent=2) + "\n")
