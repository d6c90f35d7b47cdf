"""Slide tiling and prompt-source construction.

Images are numpy arrays of shape (H, W) or (H, W, C) with float values;
tiling pads the right/bottom edge with zeros so the grid covers the image.
Two auxiliary token streams are built per tile: a scale prompt (area-averaged
2x2 tile neighborhood) and a structure prompt (global FFT high-pass, cropped
per tile).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySlideError


@dataclass
class TileGrid:
    """Square tiles cut from one slide, with their (row, col) grid coordinates."""

    tiles: np.ndarray  # [n_tiles, tile_size, tile_size(, C)]
    coords: np.ndarray  # [n_tiles, 2] int (row, col)
    tile_size: int
    grid_shape: tuple[int, int]  # (n_rows, n_cols) of the full grid
    magnification: str = "20x"

    def __post_init__(self) -> None:
        if len(self.tiles) != len(self.coords):
            raise ValueError("tiles and coords must align one-to-one")

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    def index_of(self, row: int, col: int) -> int | None:
        matches = np.nonzero((self.coords[:, 0] == row) & (self.coords[:, 1] == col))[0]
        return int(matches[0]) if len(matches) else None


@dataclass
class PromptSource:
    """A named auxiliary image stream aligned one-to-one with a TileGrid."""

    kind: str  # "scale" or "structure"
    images: np.ndarray  # [n_tiles, tile_size, tile_size(, C)]

    KINDS = ("scale", "structure")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown prompt source kind {self.kind!r}; expected one of {self.KINDS}")


def pad_to_multiple(image: np.ndarray, tile_size: int) -> np.ndarray:
    """Zero-pad the right/bottom edges so both spatial dims divide tile_size."""
    h, w = image.shape[:2]
    ph = (-h) % tile_size
    pw = (-w) % tile_size
    if ph == 0 and pw == 0:
        return image
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="constant")


def tile_image(image: np.ndarray, tile_size: int, patch_size: int = 8, magnification: str = "20x") -> TileGrid:
    """Cut an image into a row-major grid of square tiles.

    The image is zero-padded on the right/bottom to a multiple of tile_size.
    tile_size must be >= 8 and a multiple of the encoder patch size.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("image must be non-empty")
    if tile_size < 8:
        raise ValueError(f"tile_size must be >= 8, got {tile_size}")
    if tile_size % patch_size != 0:
        raise ValueError(f"tile_size {tile_size} must be a multiple of patch size {patch_size}")

    padded = pad_to_multiple(image, tile_size)
    n_rows = padded.shape[0] // tile_size
    n_cols = padded.shape[1] // tile_size
    tiles = []
    coords = []
    for r in range(n_rows):
        for c in range(n_cols):
            tiles.append(padded[r * tile_size : (r + 1) * tile_size, c * tile_size : (c + 1) * tile_size])
            coords.append((r, c))
    return TileGrid(
        tiles=np.stack(tiles),
        coords=np.asarray(coords, dtype=int),
        tile_size=tile_size,
        grid_shape=(n_rows, n_cols),
        magnification=magnification,
    )


def stitch_tiles(grid: TileGrid) -> np.ndarray:
    """Reassemble a full (dense) grid back into the padded source image."""
    n_rows, n_cols = grid.grid_shape
    ts = grid.tile_size
    out = np.zeros((n_rows * ts, n_cols * ts) + grid.tiles.shape[3:], dtype=grid.tiles.dtype)
    for tile, (r, c) in zip(grid.tiles, grid.coords):
        out[r * ts : (r + 1) * ts, c * ts : (c + 1) * ts] = tile
    return out


def filter_tissue_tiles(grid: TileGrid, variance_threshold: float = 0.0) -> TileGrid:
    """Keep tiles whose per-tile intensity variance is >= the threshold."""
    if variance_threshold < 0:
        raise ValueError("variance_threshold must be >= 0")
    axes = tuple(range(1, grid.tiles.ndim))
    variances = grid.tiles.astype(float).var(axis=axes)
    keep = variances >= variance_threshold
    if not keep.any():
        raise EmptySlideError("all tiles fell below the tissue variance threshold")
    return TileGrid(
        tiles=grid.tiles[keep],
        coords=grid.coords[keep],
        tile_size=grid.tile_size,
        grid_shape=grid.grid_shape,
        magnification=grid.magnification,
    )


def _area_downsample_2x(image: np.ndarray) -> np.ndarray:
    return 0.25 * (image[0::2, 0::2] + image[1::2, 0::2] + image[0::2, 1::2] + image[1::2, 1::2])


def build_scale_prompt(grid: TileGrid, coord: tuple[int, int]) -> np.ndarray:
    """Scale-context image for one tile: its 2x2 neighborhood, resampled back down.

    The block is anchored at (row, col) and extends right/down; a missing
    neighbor (grid edge, or a tile dropped by filtering) is replaced by the
    nearest tile toward the anchor. The 2*tile_size square is area-averaged
    back to tile_size.
    """
    row, col = int(coord[0]), int(coord[1])
    anchor = grid.index_of(row, col)
    if anchor is None:
        raise ValueError(f"coordinate {(row, col)} is not in the grid")

    def lookup(r: int, c: int) -> np.ndarray:
        idx = grid.index_of(r, c)
        if idx is None:
            idx = grid.index_of(row, c)  # clamp row back to the anchor
        if idx is None:
            idx = grid.index_of(r, col)  # clamp col back to the anchor
        if idx is None:
            idx = anchor
        return grid.tiles[idx]

    ts = grid.tile_size
    block = np.zeros((2 * ts, 2 * ts) + grid.tiles.shape[3:], dtype=float)
    block[:ts, :ts] = lookup(row, col)
    block[:ts, ts:] = lookup(row, col + 1)
    block[ts:, :ts] = lookup(row + 1, col)
    block[ts:, ts:] = lookup(row + 1, col + 1)
    return _area_downsample_2x(block)


def build_scale_prompt_source(grid: TileGrid) -> PromptSource:
    """Scale prompts for every tile in the grid, aligned by coordinate."""
    images = np.stack([build_scale_prompt(grid, (r, c)) for r, c in grid.coords])
    return PromptSource(kind="scale", images=images)


def build_structure_prompt(image: np.ndarray, cutoff_fraction: float = 0.1) -> np.ndarray:
    """High-pass the image in the frequency domain, keeping only structure detail.

    Frequency coefficients within cutoff_fraction of the Nyquist radius
    (per-axis normalized, so the DC bin is always removed) are zeroed; the
    inverse transform's imaginary residue is checked to be negligible and
    dropped.
    """
    if not 0.0 < cutoff_fraction < 1.0:
        raise ValueError(f"cutoff_fraction must be in (0, 1), got {cutoff_fraction}")
    image = np.asarray(image, dtype=float)
    if image.ndim == 3:
        return np.stack([build_structure_prompt(image[..., c], cutoff_fraction) for c in range(image.shape[2])], axis=-1)

    h, w = image.shape
    fy = np.fft.fftfreq(h) * 2.0  # per-axis frequency in units of the Nyquist
    fx = np.fft.fftfreq(w) * 2.0
    dist = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    mask = (dist > cutoff_fraction).astype(float)

    spectrum = np.fft.fft2(image) * mask
    out = np.fft.ifft2(spectrum)
    signal_norm = np.linalg.norm(image)
    if signal_norm > 0 and np.linalg.norm(out.imag) > 1e-6 * signal_norm:
        raise RuntimeError("imaginary residue after inverse FFT exceeds 1e-6 of signal norm")
    return out.real


def build_structure_prompt_source(grid: TileGrid, slide_image: np.ndarray, cutoff_fraction: float = 0.1) -> PromptSource:
    """Structure prompts for a grid: high-pass the padded slide, crop per tile.

    The filter runs on the whole (padded) slide so each crop carries global
    structure context rather than per-tile detail alone.
    """
    padded = pad_to_multiple(np.asarray(slide_image, dtype=float), grid.tile_size)
    highpass = build_structure_prompt(padded, cutoff_fraction)
    ts = grid.tile_size
    crops = np.stack([highpass[r * ts : (r + 1) * ts, c * ts : (c + 1) * ts] for r, c in grid.coords])
    return PromptSource(kind="structure", images=crops)
