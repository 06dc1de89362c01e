from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from primdraw.errors import DomainError
from primdraw.metrics import (
    MetricsReport,
    clip_t,
    cs,
    evaluate,
    psnr,
    write_metrics_json,
)
from primdraw.scoring import Embedding


class FixedBackend:
    identifier = "stub:fixed"

    def __init__(self, text_vec, image_vec):
        self._t = torch.tensor(text_vec, dtype=torch.float64)
        self._i = torch.tensor(image_vec, dtype=torch.float64)

    def encode_text(self, text):
        return Embedding(self._t.clone())

    def encode_image(self, images):
        if images.ndim == 3:
            images = images[None]
        return self._i[None].expand(images.shape[0], -1).clone()


def raster(value=0.5, h=8, w=8):
    return np.full((h, w, 3), value, dtype=np.float64)


class TestClipT:
    def test_identical_embeddings(self):
        backend = FixedBackend([1.0, 2.0], [1.0, 2.0])
        assert clip_t(raster(), "a cat", backend) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_embeddings(self):
        backend = FixedBackend([1.0, 0.0], [0.0, 1.0])
        assert clip_t(raster(), "a cat", backend) == pytest.approx(0.0, abs=1e-12)

    def test_template_changes_the_text(self):
        seen = []

        class Spy(FixedBackend):
            def encode_text(self, text):
                seen.append(text)
                return super().encode_text(text)

        backend = Spy([1.0, 0.0], [1.0, 0.0])
        clip_t(raster(), "a cat", backend)
        cs(raster(), "a cat", backend)
        assert seen == ["a photo of a cat.", "a cat"]


class TestPsnr:
    def test_identical_is_infinite(self):
        a = raster(0.3)
        assert math.isinf(psnr(a, a.copy()))

    def test_known_mse(self):
        a = raster(0.0)
        b = raster(0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.random((16, 16, 3))
        b = rng.random((16, 16, 3))
        acc = 0.0
        for i in range(16):
            for j in range(16):
                for c in range(3):
                    acc += (a[i, j, c] - b[i, j, c]) ** 2
        expected = 10.0 * math.log10(1.0 / (acc / a.size))
        assert psnr(a, b) == pytest.approx(expected, abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 8, 8, 3))
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)

    @given(scale=st.floats(1.1, 4.0))
    @settings(max_examples=50, deadline=None)
    def test_strictly_decreasing_in_mse(self, scale):
        a = raster(0.0)
        d = np.full_like(a, 0.05)
        assert psnr(a, a + d * scale) < psnr(a, a + d)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            psnr(raster(h=8), raster(h=9))


class TestReportAndJson:
    def test_evaluate_populates_backend_ids(self):
        backend = FixedBackend([1.0, 0.0], [1.0, 0.0])
        report = evaluate(raster(0.2), "a dog", backend, raster(0.9))
        assert report.cs == pytest.approx(1.0)
        assert report.backend_ids["cs"] == "stub:fixed"
        assert report.psnr > 0

    def test_report_validation(self):
        with pytest.raises(DomainError):
            MetricsReport(cs=2.0, clip_t=0.0, psnr=10.0, prompt="x")
        with pytest.raises(DomainError):
            MetricsReport(cs=0.0, clip_t=0.0, psnr=-1.0, prompt="x")

    def test_json_round_trip_with_infinite_psnr(self, tmp_path):
        report = MetricsReport(cs=0.5, clip_t=0.4, psnr=math.inf, prompt="x",
                               backend_ids={"cs": "stub"})
        out = tmp_path / "metrics.json"
        write_metrics_json(report, out, seed=7, iterations=100,
                           wallclock_seconds=1.25)
        data = json.loads(out.read_text())
        assert data["psnr"] is None
        assert data["seed"] == 7 and data["iter"] == 100
        assert data["prompt"] == "x"
