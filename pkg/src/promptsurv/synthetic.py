"""Seeded synthetic cohort generator with a planted, recoverable survival signal.

Each patient gets a latent risk r in [0, 1]. Appearance encodes r through a
texture statistic reachable by the encoder's receptive field: the fraction of
"lesion" tiles grows monotonically with r. Lesion tiles carry near-vertical
stripes at the signal period; all other tiles carry stripes at other
orientations and periods. Every tile draws its stripe amplitude from the same
distribution, so total high-frequency energy is risk-independent and only the
orientation/period mix encodes risk. Brightness, contrast, stripe phase and
pixel noise are risk-independent nuisance. Event times shrink monotonically
with r under lognormal noise; censoring is applied independently per record at
a configured rate.

The generator is a pure function of its spec: identical spec (including the
seed) yields byte-identical archives.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import (
    CohortRecord,
    write_latent_sidecar,
    write_manifest,
    write_wsi_archive,
    read_latent_sidecar,
    read_manifest,
)
from .survival import SurvivalLabel, concordance_index
from .tiles import build_scale_prompt_source, build_structure_prompt_source, tile_image


@dataclass
class SyntheticSpec:
    seed: int = 7
    n_patients: int = 200
    tiles_per_wsi: int = 64  # must be a perfect square (square tile grid)
    tile_size: int = 32
    # survival link: time = base * exp(-coef * (r - 0.5) + sigma * eps)
    base_time_days: float = 365.0
    hazard_link_coef: float = 2.0
    time_noise_sigma: float = 0.35
    censoring_rate: float = 0.3
    # appearance
    background_level: float = 0.5
    background_noise: float = 0.03
    brightness_jitter: float = 0.08
    contrast_jitter: float = 0.20
    stripe_amp_lo: float = 0.05
    stripe_amp_hi: float = 0.22
    signal_period: float = 4.0
    signal_theta_deg: float = 90.0
    signal_theta_jitter_deg: float = 15.0
    nuisance_periods: tuple[float, ...] = (3.0, 5.0, 7.0)
    nuisance_theta_exclusion_deg: float = 25.0
    lesion_fraction_base: float = 0.10
    lesion_fraction_gain: float = 0.70
    # prompt construction
    structure_cutoff: float = 0.1
    # splits
    train_fraction: float = 0.70
    val_fraction: float = 0.15

    def __post_init__(self) -> None:
        if self.n_patients < 3:
            raise ValueError("need at least 3 patients to form splits")
        side = math.isqrt(self.tiles_per_wsi)
        if side * side != self.tiles_per_wsi:
            raise ValueError("tiles_per_wsi must be a perfect square")
        if not 0.0 <= self.censoring_rate < 1.0:
            raise ValueError(f"censoring_rate must be in [0, 1), got {self.censoring_rate}")
        if self.tile_size < 8:
            raise ValueError("tile_size must be >= 8")
        if not 0.0 < self.structure_cutoff < 1.0:
            raise ValueError("structure_cutoff must be in (0, 1)")
        if not 0.0 < self.train_fraction + self.val_fraction < 1.0:
            raise ValueError("train and val fractions must leave room for a test split")

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.tiles_per_wsi)


def _stripe_wave(spec: SyntheticSpec, theta: float, period: float, phase: float) -> np.ndarray:
    ts = spec.tile_size
    yy, xx = np.meshgrid(np.arange(ts), np.arange(ts), indexing="ij")
    return np.sin(2.0 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period + phase)


def _nuisance_theta(spec: SyntheticSpec, rng: np.random.Generator) -> float:
    """Orientation uniform over [0, pi) minus a band around the signal direction."""
    signal = math.radians(spec.signal_theta_deg) % math.pi
    excl = math.radians(spec.nuisance_theta_exclusion_deg)
    while True:
        theta = rng.uniform(0.0, math.pi)
        gap = abs(theta - signal)
        if min(gap, math.pi - gap) > excl:
            return theta


def _render_slide(spec: SyntheticSpec, risk: float, rng: np.random.Generator) -> np.ndarray:
    """Compose one slide image in [0, 1] whose tile-orientation mix encodes risk."""
    side = spec.grid_side
    ts = spec.tile_size
    size = side * ts

    slide = np.zeros((size, size))
    lesion_fraction = min(spec.lesion_fraction_base + spec.lesion_fraction_gain * risk, 1.0)
    for r in range(side):
        for c in range(side):
            brightness = spec.background_level + spec.brightness_jitter * rng.normal()
            tile = brightness + spec.background_noise * rng.normal(size=(ts, ts))

            # Same amplitude law for every tile: energy carries no risk signal.
            amplitude = rng.uniform(spec.stripe_amp_lo, spec.stripe_amp_hi)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            if rng.uniform() < lesion_fraction:
                theta = math.radians(
                    spec.signal_theta_deg + spec.signal_theta_jitter_deg * rng.uniform(-1.0, 1.0)
                )
                period = spec.signal_period
            else:
                theta = _nuisance_theta(spec, rng)
                period = float(rng.choice(np.asarray(spec.nuisance_periods)))
            tile = tile + amplitude * _stripe_wave(spec, theta, period, phase)

            contrast = 1.0 + spec.contrast_jitter * rng.normal()
            tile = brightness + contrast * (tile - brightness)
            slide[r * ts : (r + 1) * ts, c * ts : (c + 1) * ts] = tile

    return np.clip(slide, 0.0, 1.0)


def _draw_label(spec: SyntheticSpec, risk: float, rng: np.random.Generator) -> tuple[float, int]:
    event_time = spec.base_time_days * math.exp(
        -spec.hazard_link_coef * (risk - 0.5) + spec.time_noise_sigma * rng.normal()
    )
    if rng.uniform() < spec.censoring_rate:
        return event_time * rng.uniform(0.15, 0.95), 1
    return event_time, 0


def synthesize_cohort(spec: SyntheticSpec, out_dir: Path) -> list[CohortRecord]:
    """Generate a cohort on disk: manifest, tile archives, prompts, latent sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.PCG64(spec.seed))

    n = spec.n_patients
    order = rng.permutation(n)
    n_train = int(round(spec.train_fraction * n))
    n_val = int(round(spec.val_fraction * n))
    split_of = {}
    for idx, patient in enumerate(order):
        if idx < n_train:
            split_of[patient] = "train"
        elif idx < n_train + n_val:
            split_of[patient] = "val"
        else:
            split_of[patient] = "test"

    records = []
    latents = {}
    for i in range(n):
        patient_id = f"P{i:04d}"
        wsi_id = f"W{i:04d}"
        risk = float(rng.uniform())
        slide = _render_slide(spec, risk, rng)
        grid = tile_image(slide, spec.tile_size)
        scale = build_scale_prompt_source(grid)
        structure = build_structure_prompt_source(grid, slide, spec.structure_cutoff)

        rel = write_wsi_archive(
            out_dir, wsi_id, grid.tiles, grid.coords,
            {"scale": scale.images, "structure": structure.images},
        )
        time_days, censored = _draw_label(spec, risk, rng)
        records.append(
            CohortRecord(
                patient_id=patient_id,
                wsi_id=wsi_id,
                tiles=rel,
                time_days=time_days,
                censored=censored,
                split=split_of[i],
            )
        )
        latents[patient_id] = risk

    write_manifest(out_dir, records)
    write_latent_sidecar(out_dir, latents)
    with open(out_dir / "meta.json", "w") as fh:
        json.dump({"spec": asdict(spec)}, fh, indent=2, sort_keys=True)
    return records


def oracle_ci(manifest_dir: Path, split: str | None = None) -> float:
    """Concordance of the latent risks against the generated labels.

    This is the cohort's reference ceiling: the concordance a perfect model
    of the planted signal would reach.
    """
    records = read_manifest(manifest_dir)
    latents = read_latent_sidecar(manifest_dir)
    if split is not None:
        records = [r for r in records if r.split == split]
    missing = [r.patient_id for r in records if r.patient_id not in latents]
    if missing:
        raise ValueError(f"latent sidecar does not cover patients: {missing[:5]}")
    risks = [latents[r.patient_id] for r in records]
    labels = [SurvivalLabel(time=r.time_days, censored=r.censored) for r in records]
    return concordance_index(risks, labels)
