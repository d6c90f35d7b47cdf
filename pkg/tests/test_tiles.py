"""Tests for tiling and prompt-source construction."""

import numpy as np
import pytest

from promptsurv.errors import EmptySlideError
from promptsurv.tiles import (
    build_scale_prompt,
    build_scale_prompt_source,
    build_structure_prompt,
    build_structure_prompt_source,
    filter_tissue_tiles,
    pad_to_multiple,
    stitch_tiles,
    tile_image,
)


class TestTileImage:
    def test_exact_division(self):
        grid = tile_image(np.ones((512, 512)), 256, patch_size=16)
        assert grid.n_tiles == 4
        assert grid.grid_shape == (2, 2)

    def test_padding_case(self):
        grid = tile_image(np.ones((300, 300)), 256, patch_size=16)
        assert grid.grid_shape == (2, 2)
        # Padded region is zero.
        assert grid.tiles[3][200:, 200:].sum() == 0.0

    def test_ceil_division_per_axis(self):
        grid = tile_image(np.ones((1024, 768)), 256, patch_size=16)
        assert grid.grid_shape == (4, 3)
        assert grid.n_tiles == 12

    def test_indivisible_tile_size_rejected(self):
        with pytest.raises(ValueError):
            tile_image(np.ones((64, 64)), 30, patch_size=8)

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError):
            tile_image(np.zeros((0, 0)), 32)

    def test_roundtrip_reconstruction(self):
        rng = np.random.default_rng(7)
        image = rng.uniform(size=(70, 90))
        grid = tile_image(image, 32, patch_size=8)
        np.testing.assert_array_equal(stitch_tiles(grid), pad_to_multiple(image, 32))

    def test_row_major_order(self):
        grid = tile_image(np.zeros((64, 96)), 32)
        np.testing.assert_array_equal(grid.coords[:3], [[0, 0], [0, 1], [0, 2]])


class TestFilterTissueTiles:
    def test_all_constant_tiles_rejected(self):
        grid = tile_image(np.full((64, 64), 0.5), 32)
        with pytest.raises(EmptySlideError):
            filter_tissue_tiles(grid, variance_threshold=1e-6)

    def test_zero_threshold_keeps_all(self):
        grid = tile_image(np.zeros((64, 64)), 32)
        assert filter_tissue_tiles(grid, 0.0).n_tiles == grid.n_tiles

    def test_textured_half_retained(self):
        rng = np.random.default_rng(0)
        image = np.zeros((64, 128))
        image[:, 64:] = rng.uniform(size=(64, 64))  # textured right half
        grid = tile_image(image, 32)
        kept = filter_tissue_tiles(grid, variance_threshold=1e-4)
        assert kept.n_tiles == 4
        assert np.all(kept.coords[:, 1] >= 2)

    def test_negative_threshold_rejected(self):
        grid = tile_image(np.zeros((64, 64)), 32)
        with pytest.raises(ValueError):
            filter_tissue_tiles(grid, -1.0)


class TestScalePrompt:
    def test_constant_neighborhood_stays_constant(self):
        grid = tile_image(np.full((64, 64), 3.25), 32)
        out = build_scale_prompt(grid, (0, 0))
        np.testing.assert_array_equal(out, np.full((32, 32), 3.25))

    def test_corner_clamps_to_edge_tiles(self):
        image = np.zeros((64, 64))
        image[32:, 32:] = 7.0  # bottom-right tile constant 7
        grid = tile_image(image, 32)
        out = build_scale_prompt(grid, (1, 1))
        np.testing.assert_array_equal(out, np.full((32, 32), 7.0))

    def test_quadrants_average_exactly(self):
        image = np.zeros((64, 64))
        image[:32, :32] = 10.0
        image[:32, 32:] = 20.0
        image[32:, :32] = 30.0
        image[32:, 32:] = 40.0
        grid = tile_image(image, 32)
        out = build_scale_prompt(grid, (0, 0))
        np.testing.assert_array_equal(out[:16, :16], np.full((16, 16), 10.0))
        np.testing.assert_array_equal(out[:16, 16:], np.full((16, 16), 20.0))
        np.testing.assert_array_equal(out[16:, :16], np.full((16, 16), 30.0))
        np.testing.assert_array_equal(out[16:, 16:], np.full((16, 16), 40.0))

    def test_out_of_grid_coord_rejected(self):
        grid = tile_image(np.zeros((64, 64)), 32)
        with pytest.raises(ValueError):
            build_scale_prompt(grid, (5, 0))

    def test_depends_only_on_neighborhood(self):
        rng = np.random.default_rng(3)
        image = rng.uniform(size=(96, 96))
        grid = tile_image(image, 32)
        before = build_scale_prompt(grid, (0, 0))
        # Mutate a tile outside the 2x2 block anchored at (0, 0).
        far = grid.index_of(2, 2)
        grid.tiles[far] += 100.0
        after = build_scale_prompt(grid, (0, 0))
        np.testing.assert_array_equal(before, after)

    def test_source_alignment(self):
        grid = tile_image(np.arange(64 * 96, dtype=float).reshape(64, 96), 32)
        source = build_scale_prompt_source(grid)
        assert source.kind == "scale"
        assert source.images.shape == (6, 32, 32)


class TestStructurePrompt:
    def test_constant_image_maps_to_zero(self):
        out = build_structure_prompt(np.full((64, 64), 0.7), 0.1)
        assert np.linalg.norm(out) < 1e-6

    def test_high_frequency_cosine_passes_through(self):
        n = 64
        y, x = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        image = np.cos(2 * np.pi * 16 * x / n)  # frequency 16/64 = 0.5 Nyquist
        out = build_structure_prompt(image, 0.1)
        assert np.linalg.norm(out - image) < 1e-6 * np.linalg.norm(image)

    def test_low_frequency_cosine_removed(self):
        n = 64
        y, x = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        image = np.cos(2 * np.pi * 1 * x / n)  # frequency 1/64, far below 0.1 cutoff
        out = build_structure_prompt(image, 0.1)
        assert np.linalg.norm(out) < 1e-9 * np.linalg.norm(image)

    def test_idempotent(self):
        rng = np.random.default_rng(11)
        image = rng.uniform(size=(48, 48))
        once = build_structure_prompt(image, 0.1)
        twice = build_structure_prompt(once, 0.1)
        assert np.linalg.norm(twice - once) <= 1e-6 * max(np.linalg.norm(once), 1.0)

    def test_linear(self):
        rng = np.random.default_rng(12)
        x = rng.uniform(size=(40, 40))
        y = rng.uniform(size=(40, 40))
        a, b = 2.5, -1.25
        lhs = build_structure_prompt(a * x + b * y, 0.1)
        rhs = a * build_structure_prompt(x, 0.1) + b * build_structure_prompt(y, 0.1)
        assert np.linalg.norm(lhs - rhs) <= 1e-6 * max(np.linalg.norm(lhs), 1.0)

    def test_parseval_energy_bound(self):
        rng = np.random.default_rng(13)
        image = rng.uniform(size=(32, 32))
        out = build_structure_prompt(image, 0.1)
        assert np.sum(out**2) <= np.sum(image**2) + 1e-9
        # Equality iff nothing fell inside the zeroed region: feed a pure
        # high-frequency input back through.
        again = build_structure_prompt(out, 0.1)
        assert np.sum(again**2) == pytest.approx(np.sum(out**2), rel=1e-9)

    def test_cutoff_validation(self):
        with pytest.raises(ValueError):
            build_structure_prompt(np.zeros((8, 8)), 0.0)
        with pytest.raises(ValueError):
            build_structure_prompt(np.zeros((8, 8)), 1.0)

    def test_channel_images_supported(self):
        rng = np.random.default_rng(14)
        image = rng.uniform(size=(32, 32, 3))
        out = build_structure_prompt(image, 0.1)
        assert out.shape == image.shape

    def test_grid_crops_align(self):
        rng = np.random.default_rng(15)
        image = rng.uniform(size=(70, 70))
        grid = tile_image(image, 32)
        source = build_structure_prompt_source(grid, image, 0.1)
        assert source.kind == "structure"
        assert source.images.shape == (9, 32, 32)
        highpass = build_structure_prompt(pad_to_multiple(image, 32), 0.1)
        np.testing.assert_array_equal(source.images[0], highpass[:32, :32])
