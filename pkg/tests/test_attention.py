from __future__ import annotations

import itertools

import numpy as np
import pytest

from primdraw.attention import (
    AttentionMap,
    FileAttentionProvider,
    LandmarkSet,
    UniformAttentionProvider,
    aggregate,
    bilinear_resize,
    load_map_from_file,
    read_map_values,
    sample_landmarks,
    write_attn_file,
)
from primdraw.errors import DomainError, InputError
from primdraw.geometry import Point2


def softmax(values: np.ndarray) -> np.ndarray:
    e = np.exp(values - values.max())
    return e / e.sum()


class TestAggregate:
    def test_uniform_map_gives_uniform_distribution(self):
        amap = aggregate([np.ones((8, 8))], width=16, height=16)
        assert np.allclose(amap.values, 1.0 / 256)
        assert abs(amap.values.sum() - 1.0) <= 1e-6

    def test_one_hot_saturation(self):
        raw = np.zeros((8, 8))
        raw[3, 5] = 10.0
        amap = aggregate([raw], width=8, height=8)
        assert amap.values[3, 5] > 0.99

    def test_matches_dense_oracle_for_mixed_resolutions(self):
        import torch
        import torch.nn.functional as F

        rng = np.random.default_rng(0)
        maps = [rng.random((8, 8)), rng.random((16, 16))]
        amap = aggregate(maps, width=32, height=32)

        total = np.zeros((32, 32))
        for m in maps:
            total += F.interpolate(torch.tensor(m)[None, None], size=(32, 32),
                                   mode="bilinear", align_corners=False)[0, 0].numpy()
        assert np.allclose(amap.values, softmax(total), atol=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        maps = [rng.random((4, 4)), rng.random((8, 8)), rng.random((16, 16))]
        a = aggregate(maps, 32, 32)
        b = aggregate(maps[::-1], 32, 32)
        assert np.allclose(a.values, b.values)

    def test_sums_to_one_for_random_stacks(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            k = int(rng.integers(1, 4))
            maps = [rng.random((int(rng.integers(4, 40)),) * 2) * 10 for _ in range(k)]
            amap = aggregate(maps, 64, 64)
            assert abs(amap.values.sum() - 1.0) <= 1e-6
            assert amap.values.min() >= 0

    def test_empty_list_rejected(self):
        with pytest.raises(DomainError):
            aggregate([], 16, 16)

    def test_negative_entries_rejected(self):
        with pytest.raises(DomainError):
            aggregate([np.array([[1.0, -0.5], [0.0, 2.0]])], 16, 16)


class TestAttentionMapType:
    def test_linear_normalization(self):
        amap = AttentionMap(values=np.array([[1.0, 3.0], [0.0, 0.0]]))
        assert np.allclose(amap.values, [[0.25, 0.75], [0.0, 0.0]])

    def test_rejects_negative_and_nan(self):
        with pytest.raises(DomainError):
            AttentionMap(values=np.array([[1.0, -1.0]]))
        with pytest.raises(DomainError):
            AttentionMap(values=np.array([[np.nan, 1.0]]))

    def test_rejects_zero_mass(self):
        with pytest.raises(DomainError):
            AttentionMap(values=np.zeros((4, 4)))


def enumerate_inclusion_probs(weights: np.ndarray, k: int) -> np.ndarray:
    """Exact inclusion probability of each cell under sequential weighted
    sampling without replacement, by enumerating all ordered draws."""
    n = weights.size
    flat = weights.flatten() / weights.sum()
    probs = np.zeros(n)
    for seq in itertools.permutations(range(n), k):
        p = 1.0
        remaining = 1.0
        for idx in seq:
            p *= flat[idx] / remaining
            remaining -= flat[idx]
        for idx in seq:
            probs[idx] += p
    return probs


class TestSampleLandmarks:
    def test_standard_count_is_32_distinct(self):
        rng = np.random.default_rng(3)
        amap = AttentionMap(values=np.random.default_rng(0).random((224, 224)))
        lm = sample_landmarks(amap, 32, rng)
        assert len(lm) == 32
        assert len({p.as_tuple() for p in lm.points}) == 32
        assert all(0 <= p.x < 224 and 0 <= p.y < 224 for p in lm.points)

    def test_deterministic_given_seed(self):
        amap = AttentionMap(values=np.random.default_rng(1).random((16, 16)))
        a = sample_landmarks(amap, 8, np.random.default_rng(42))
        b = sample_landmarks(amap, 8, np.random.default_rng(42))
        assert [p.as_tuple() for p in a.points] == [p.as_tuple() for p in b.points]

    def test_support_exhaustion(self):
        values = np.zeros((4, 4))
        hot = [(0, 1), (1, 3), (2, 0), (3, 3), (2, 2)]
        for r, c in hot:
            values[r, c] = 0.2
        amap = AttentionMap(values=values)
        lm = sample_landmarks(amap, 5, np.random.default_rng(4))
        assert {(p.y, p.x) for p in lm.points} == set(hot)

    def test_k_exceeding_support_rejected(self):
        values = np.zeros((4, 4))
        values[0, 0] = values[1, 1] = 1.0
        amap = AttentionMap(values=values)
        with pytest.raises(DomainError):
            sample_landmarks(amap, 3, np.random.default_rng(0))
        with pytest.raises(DomainError):
            sample_landmarks(amap, 0, np.random.default_rng(0))

    def test_matches_enumerated_inclusion_probabilities(self):
        # 2x2 map, k=2: small enough to enumerate draws exactly.
        weights = np.array([[4.0, 3.0], [2.0, 1.0]])
        amap = AttentionMap(values=weights)
        expected = enumerate_inclusion_probs(weights, k=2)
        rng = np.random.default_rng(5)
        trials = 20000
        counts = np.zeros(4)
        for _ in range(trials):
            lm = sample_landmarks(amap, 2, rng)
            for p in lm.points:
                counts[int(p.y) * 2 + int(p.x)] += 1
        freq = counts / trials
        sigma = np.sqrt(expected * (1 - expected) / trials)
        assert np.all(np.abs(freq - expected) < 5 * sigma + 1e-3)

    def test_weights_are_saliency_values(self):
        amap = AttentionMap(values=np.random.default_rng(2).random((8, 8)))
        lm = sample_landmarks(amap, 4, np.random.default_rng(6))
        for p, w in zip(lm.points, lm.weights):
            assert w == amap.values[int(p.y), int(p.x)]

    def test_landmark_set_validation(self):
        with pytest.raises(DomainError):
            LandmarkSet(points=[Point2(0, 0)], weights=[0.5, 0.5])
        with pytest.raises(DomainError):
            LandmarkSet(points=[Point2(0, 0)], weights=[0.0])


class TestBilinearResize:
    def test_matches_torch_both_directions(self):
        import torch
        import torch.nn.functional as F

        rng = np.random.default_rng(7)
        for shape, out in [((8, 8), (224, 224)), ((100, 100), (224, 224)),
                           ((50, 30), (7, 9))]:
            a = rng.random(shape)
            mine = bilinear_resize(a, *out)
            ref = F.interpolate(torch.tensor(a)[None, None], size=out,
                                mode="bilinear", align_corners=False)[0, 0].numpy()
            assert np.abs(mine - ref).max() < 1e-12

    def test_identity_when_sizes_match(self):
        a = np.random.default_rng(8).random((5, 5))
        assert np.array_equal(bilinear_resize(a, 5, 5), a)


class TestFileIO:
    def test_constant_gray_png_is_uniform(self, tmp_path):
        from PIL import Image

        path = tmp_path / "gray.png"
        Image.fromarray(np.full((224, 224), 130, dtype=np.uint8), "L").save(path)
        amap = load_map_from_file(path)
        assert np.allclose(amap.values, 1.0 / (224 * 224))

    def test_mismatched_size_is_resized(self, tmp_path):
        import torch
        import torch.nn.functional as F
        from PIL import Image

        rng = np.random.default_rng(9)
        raw = rng.integers(0, 256, size=(100, 100)).astype(np.uint8)
        path = tmp_path / "small.png"
        Image.fromarray(raw, "L").save(path)
        amap = load_map_from_file(path, width=224, height=224)

        resized = F.interpolate(torch.tensor(raw / 255.0)[None, None],
                                size=(224, 224), mode="bilinear",
                                align_corners=False)[0, 0].numpy()
        assert np.allclose(amap.values, softmax(resized), atol=1e-12)

    def test_sixteen_bit_png(self, tmp_path):
        from PIL import Image

        raw = (np.random.default_rng(10).random((32, 32)) * 65535).astype(np.uint16)
        path = tmp_path / "deep.png"
        Image.fromarray(raw).save(path)
        values = read_map_values(path)
        assert np.allclose(values, raw / 65535.0)

    def test_attn_container_round_trip(self, tmp_path):
        raw = np.random.default_rng(11).random((17, 23)).astype(np.float32)
        path = tmp_path / "map.attn"
        write_attn_file(path, raw)
        back = read_map_values(path)
        assert back.shape == (17, 23)
        assert np.allclose(back, raw)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"this is not an image at all")
        with pytest.raises(InputError):
            load_map_from_file(path)

    def test_truncated_attn_rejected(self, tmp_path):
        path = tmp_path / "short.attn"
        path.write_bytes(b"ATTN\x05\x00\x00\x00\x05\x00\x00\x00\x00\x00")
        with pytest.raises(InputError):
            read_map_values(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(InputError):
            load_map_from_file(tmp_path / "absent.png")


class TestProviders:
    def test_uniform_provider(self):
        provider = UniformAttentionProvider(64, 64)
        maps, ref = provider.fetch("a cat", "cat", seed=0)
        assert len(maps) == 1 and maps[0].shape == (64, 64)
        assert ref is None

    def test_file_provider_with_reference(self, tmp_path):
        from PIL import Image

        raw = np.random.default_rng(12).random((16, 16)).astype(np.float32)
        map_path = tmp_path / "m.attn"
        write_attn_file(map_path, raw)
        img_path = tmp_path / "ref.png"
        Image.fromarray(np.full((64, 64, 3), 128, dtype=np.uint8), "RGB").save(img_path)

        provider = FileAttentionProvider(map_path, ref_image_path=img_path,
                                         width=64, height=64)
        maps, ref = provider.fetch("a cat", "cat", seed=0)
        assert np.allclose(maps[0], raw)
        assert ref.shape == (64, 64, 3)
        assert np.allclose(ref, 128 / 255.0)
