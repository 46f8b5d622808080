"""
Tests for coded aperture generation, tiling and files.
"""
import logging

import numpy as np
import pytest

from core.coded_aperture import (
    aperture_difference, aperture_entry, bluenoise_full, bluenoise_set, clamp_blocks, full_pattern,
    gather_block_indices, load_apertures, low_frequency_energy, mean_transmittance, random_aperture_set,
    random_block, random_full, save_apertures, tile, uniform_aperture_set, underdetermined_warning,
)
from core.errors import FormatError, InvalidArgumentError
from models.aperture_models import ApertureMode, BasicBlock, CodedApertureSet


class TestPeriodicIndexing:

    def test_negative_offsets_wrap(self):
        block = np.arange(9.0).reshape(3, 3)
        apertures = CodedApertureSet.from_stack(block[None])
        assert aperture_entry(apertures, 0, -1, -1) == block[2, 2]
        assert aperture_entry(apertures, 0, 4, -4) == block[1, 2]

    def test_worked_example(self):
        block = np.arange(16.0).reshape(4, 4)
        apertures = CodedApertureSet.from_stack(block[None])
        assert aperture_entry(apertures, 0, 5, 9) == block[1, 1]

    def test_periodic_in_both_axes(self, rng):
        b = 4
        apertures = CodedApertureSet.from_stack(rng.random((2, b, b)))
        for k, m, c, i, j in zip(rng.integers(0, 2, 1000), rng.integers(-50, 50, 1000), rng.integers(-50, 50, 1000),
                                 rng.integers(-5, 5, 1000), rng.integers(-5, 5, 1000)):
            assert aperture_entry(apertures, k, m + i * b, c + j * b) == aperture_entry(apertures, k, m, c)

    def test_tile_repeats_block(self):
        block = BasicBlock(np.array([[0.0, 1.0], [1.0, 0.5]]))
        pattern = tile(block, 5, 7)
        assert pattern.shape == (5, 7)
        for i in range(5):
            for j in range(7):
                assert pattern[i, j] == block.values[i % 2, j % 2]

    def test_full_pattern_checks_stored_shape(self):
        apertures = CodedApertureSet(mode=ApertureMode.FULL, pattern=np.ones((1, 4, 6)))
        assert full_pattern(apertures, 0, 4, 6).shape == (4, 6)
        with pytest.raises(InvalidArgumentError):
            full_pattern(apertures, 0, 4, 7)

    def test_blocks_must_share_size(self):
        with pytest.raises(InvalidArgumentError):
            CodedApertureSet(blocks=[BasicBlock(np.ones((2, 2))), BasicBlock(np.ones((3, 3)))])

    def test_blocks_are_read_only(self):
        block = BasicBlock(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            block.values[0, 0] = 1.0

    def test_gather_matches_enumeration(self):
        x0, y0, p, l, b, k = 5, 2, 3, 3, 4, 2
        q = p // 2
        expected = set()
        for snap in range(k):
            for a in range(p):
                for c in range(p):
                    for band in range(l):
                        expected.add((snap, (x0 + a - q) % b, (y0 + c - q + band) % b))
        assert gather_block_indices(x0, y0, p, l, b, k) == expected


class TestGenerators:

    def test_random_block_is_binary_and_seeded(self):
        a = random_block(8, 0.5, seed=3)
        assert set(np.unique(a.values)) <= {0.0, 1.0}
        assert np.array_equal(a.values, random_block(8, 0.5, seed=3).values)

    def test_random_full_transmittance(self):
        pattern = random_full(64, 64, 0.5, seed=11)
        assert set(np.unique(pattern)) == {0.0, 1.0}
        assert 0.4 <= pattern.mean() <= 0.6

    def test_random_set_snapshots_differ(self):
        apertures = random_aperture_set(3, 8, 0.5, seed=1)
        blocks = apertures.stack()
        assert apertures.k == 3
        assert not np.array_equal(blocks[0], blocks[1])

    def test_uniform_set_range(self):
        blocks = uniform_aperture_set(4, 5, seed=2).stack()
        assert blocks.shape == (4, 5, 5)
        assert blocks.min() >= 0.0 and blocks.max() <= 1.0

    @pytest.mark.parametrize("transmittance", [0.0, 1.0, 1.5])
    def test_transmittance_range(self, transmittance):
        with pytest.raises(InvalidArgumentError):
            random_block(4, transmittance, seed=0)

    def test_mean_transmittance(self):
        apertures = CodedApertureSet.from_stack(np.array([[[0.0, 1.0], [1.0, 1.0]]]))
        assert mean_transmittance(apertures) == 0.75


class TestBlueNoise:

    @pytest.mark.parametrize("density", [0.25, 0.5, 0.7])
    def test_exact_ones_count(self, density):
        pattern = bluenoise_full(16, 20, density, seed=4)
        assert set(np.unique(pattern)) <= {0.0, 1.0}
        assert pattern.sum() == np.floor(density * 320 + 0.5)

    def test_seeded(self):
        assert np.array_equal(bluenoise_full(12, 12, 0.5, seed=1), bluenoise_full(12, 12, 0.5, seed=1))

    def test_less_low_frequency_energy_than_random(self):
        blue = [low_frequency_energy(bluenoise_full(32, 32, 0.5, seed=s)) for s in range(5)]
        white = [low_frequency_energy(random_full(32, 32, 0.5, seed=s)) for s in range(5)]
        assert np.mean(blue) < np.mean(white)

    def test_set_is_full_mode(self):
        apertures = bluenoise_set(2, 8, 10, 0.5, seed=0)
        assert apertures.mode == ApertureMode.FULL
        assert apertures.pattern.shape == (2, 8, 10)


class TestAnalysis:

    def test_clamp(self):
        apertures = CodedApertureSet.from_stack(np.array([[[-0.5, 0.3], [1.7, 1.0]]]))
        clamped = clamp_blocks(apertures).stack()
        assert np.array_equal(clamped, [[[0.0, 0.3], [1.0, 1.0]]])

    def test_difference(self):
        before = CodedApertureSet.from_stack(np.zeros((2, 2, 2)))
        after = CodedApertureSet.from_stack(np.full((2, 2, 2), 0.25))
        assert np.array_equal(aperture_difference(before, after), np.full((2, 2, 2), 0.25))

    def test_underdetermined_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert underdetermined_warning(2, 4, 32)
        assert "underdetermined" in caplog.text
        assert not underdetermined_warning(2, 4, 33)


class TestApertureFiles:

    def test_periodic_round_trip(self, tmp_path, rng):
        apertures = CodedApertureSet.from_stack(rng.random((3, 4, 4)))
        path = tmp_path / "a.apt.json"
        save_apertures(apertures, path)
        assert np.array_equal(load_apertures(path).stack(), apertures.stack())

    def test_full_round_trip(self, tmp_path):
        apertures = bluenoise_set(2, 6, 8, 0.5, seed=3)
        path = tmp_path / "b.apt.json"
        save_apertures(apertures, path)
        loaded = load_apertures(path)
        assert loaded.mode == ApertureMode.FULL
        assert np.array_equal(loaded.pattern, apertures.pattern)

    def test_shape_mismatch(self, tmp_path):
        path = tmp_path / "c.apt.json"
        path.write_text('{"k": 2, "b": 2, "mode": "periodic", "blocks": [[[1, 0], [0, 1]]]}')
        with pytest.raises(FormatError):
            load_apertures(path)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "d.apt.json"
        path.write_text('{"k": 1, "mode": "periodic"}')
        with pytest.raises(FormatError):
            load_apertures(path)
