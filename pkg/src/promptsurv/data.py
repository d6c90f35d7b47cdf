"""Cohort storage: JSONL manifests, per-slide tile archives, latent sidecars.

On-disk layout under a cohort directory:

    manifest.jsonl   one record per WSI:
                     {"patient_id", "wsi_id", "tiles", "time_days", "censored", "split"}
    latents.jsonl    {"patient_id", "latent_risk"}  (test-only oracle sidecar)
    meta.json        generator spec echo
    tiles/<wsi_id>/r{row}_c{col}.png            lossless grayscale tiles
    tiles/<wsi_id>/r{row}_c{col}_scale.png      scale prompt, same encoding
    tiles/<wsi_id>/r{row}_c{col}_structure.png  signed high-pass, affine-coded

Tiles hold values in [0, 1] and are stored as 8-bit PNG; structure prompts are
signed, clipped to [-1, 1] and mapped onto the 8-bit range.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")
PROMPT_KINDS = ("scale", "structure")

_TILE_RE = re.compile(r"^r(\d+)_c(\d+)\.png$")


@dataclass
class CohortRecord:
    patient_id: str
    wsi_id: str
    tiles: str  # tile-archive path relative to the cohort root
    time_days: float
    censored: int
    split: str

    def __post_init__(self) -> None:
        if self.time_days < 0:
            raise ValueError("time_days must be non-negative")
        if self.censored not in (0, 1):
            raise ValueError("censored must be 0 or 1")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")


@dataclass
class LoadedWsi:
    """One slide fully loaded into memory: tiles, prompt images, outcome."""

    patient_id: str
    wsi_id: str
    tiles: np.ndarray  # float32 [J, 1, ts, ts] in [0, 1]
    prompts: dict[str, np.ndarray]  # kind -> float32 [J, 1, ts, ts]
    coords: np.ndarray  # [J, 2]
    time_days: float
    censored: int
    bin: int | None = None

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)


def encode_tile_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def decode_tile_u8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / 255.0


def encode_signed_u8(image: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(image, dtype=float), -1.0, 1.0)
    return np.rint((clipped + 1.0) * 127.5).astype(np.uint8)


def decode_signed_u8(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 127.5) - 1.0


def _save_png(path: Path, data: np.ndarray) -> None:
    Image.fromarray(data, mode="L").save(path, format="PNG")


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


def write_wsi_archive(
    root: Path,
    wsi_id: str,
    tiles: np.ndarray,
    coords: np.ndarray,
    prompts: dict[str, np.ndarray],
) -> str:
    """Write one slide's tiles and prompt images; returns the relative archive path."""
    rel = f"tiles/{wsi_id}"
    out = Path(root) / rel
    out.mkdir(parents=True, exist_ok=True)
    for tile, (r, c) in zip(tiles, coords):
        _save_png(out / f"r{r}_c{c}.png", encode_tile_u8(tile))
    for kind, images in prompts.items():
        if kind not in PROMPT_KINDS:
            raise ValueError(f"unknown prompt kind {kind!r}")
        codec = encode_signed_u8 if kind == "structure" else encode_tile_u8
        for image, (r, c) in zip(images, coords):
            _save_png(out / f"r{r}_c{c}_{kind}.png", codec(image))
    return rel


def read_wsi_archive(root: Path, rel: str) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Load tiles, coords and prompt images back from an archive directory."""
    folder = Path(root) / rel
    entries = []
    for path in folder.iterdir():
        m = _TILE_RE.match(path.name)
        if m:
            entries.append((int(m.group(1)), int(m.group(2))))
    if not entries:
        raise FileNotFoundError(f"no tiles found under {folder}")
    entries.sort()

    tiles, prompt_stack = [], {k: [] for k in PROMPT_KINDS}
    for r, c in entries:
        tiles.append(decode_tile_u8(_load_png(folder / f"r{r}_c{c}.png")))
        for kind in PROMPT_KINDS:
            ppath = folder / f"r{r}_c{c}_{kind}.png"
            if ppath.exists():
                raw = _load_png(ppath)
                prompt_stack[kind].append(
                    decode_signed_u8(raw) if kind == "structure" else decode_tile_u8(raw)
                )
    coords = np.asarray(entries, dtype=int)
    tiles_arr = np.stack(tiles)[:, None, :, :].astype(np.float32)
    prompts = {
        kind: np.stack(stack)[:, None, :, :].astype(np.float32)
        for kind, stack in prompt_stack.items()
        if len(stack) == len(tiles)
    }
    return tiles_arr, coords, prompts


def write_manifest(root: Path, records: list[CohortRecord]) -> None:
    with open(Path(root) / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def read_manifest(root: Path) -> list[CohortRecord]:
    path = Path(root) / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(CohortRecord(**json.loads(line)))
    return records


def write_latent_sidecar(root: Path, latents: dict[str, float]) -> None:
    with open(Path(root) / "latents.jsonl", "w") as fh:
        for pid, risk in latents.items():
            fh.write(json.dumps({"patient_id": pid, "latent_risk": risk}, sort_keys=True) + "\n")


def read_latent_sidecar(root: Path) -> dict[str, float]:
    path = Path(root) / "latents.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no latent sidecar at {path}")
    latents = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                latents[row["patient_id"]] = float(row["latent_risk"])
    return latents


def load_cohort(root: Path, split: str | None = None) -> list[LoadedWsi]:
    """Load every WSI of a cohort (optionally one split) into memory."""
    root = Path(root)
    records = read_manifest(root)
    if split is not None:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        records = [r for r in records if r.split == split]
        if not records:
            raise ValueError(f"split {split!r} is empty")
    loaded = []
    for rec in records:
        tiles, coords, prompts = read_wsi_archive(root, rec.tiles)
        loaded.append(
            LoadedWsi(
                patient_id=rec.patient_id,
                wsi_id=rec.wsi_id,
                tiles=tiles,
                prompts=prompts,
                coords=coords,
                time_days=rec.time_days,
                censored=rec.censored,
            )
        )
    return loaded
