"""Training loops (end-to-end and two-stage), evaluation, and verification.

One trainer thread owns parameter updates; all sampling randomness is derived
from the config seed through per-(purpose, wsi, epoch) numpy streams, so runs
are reproducible and the two modes see identical tile samples at step 0.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import LoadedWsi, load_cohort
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import EmptySlideError, StaleCacheError
from .model import SurvivalModel, build_model, parameter_audit, save_checkpoint
from .survival import (
    SurvivalCurveEstimate,
    SurvivalLabel,
    TimeBinning,
    concordance_index,
    discretize_time,
    hazard_to_survival,
    kaplan_meier,
    nll_from_hazards,
    risk_from_survival,
    stratify_by_median_risk,
)

MODES = ("end_to_end", "two_stage")


@dataclass
class TrainConfig:
    mode: str = "end_to_end"
    train_tiles_per_wsi: int = 200
    eval_tiles_per_wsi: int = 1000
    learning_rate: float = 5e-5
    epochs: int = 15
    batch_size: int = 4
    seed: int = 0
    prompt_sources: tuple[str, ...] = ("structure", "scale")
    n_bins: int = 4

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.train_tiles_per_wsi < 1 or self.eval_tiles_per_wsi < 1:
            raise ValueError("tile counts must be >= 1")
        self.prompt_sources = tuple(self.prompt_sources)
        for kind in self.prompt_sources:
            if kind not in ("scale", "structure"):
                raise ValueError(f"unknown prompt source {kind!r}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_ci: float
    lr: float


@dataclass
class RunReport:
    mode: str
    prompt_sources: list[str]
    seed: int
    epochs: list[EpochStats]
    selected_epoch: int
    val_ci: float
    test_ci: float | None
    n_trainable: int
    n_frozen: int
    wall_time_sec: float

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "prompt_sources": list(self.prompt_sources),
            "seed": self.seed,
            "epochs": [asdict(e) for e in self.epochs],
            "selected_epoch": self.selected_epoch,
            "val_ci": self.val_ci,
            "test_ci": self.test_ci,
            "n_trainable": self.n_trainable,
            "n_frozen": self.n_frozen,
            "wall_time_sec": self.wall_time_sec,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            mode=d["mode"],
            prompt_sources=list(d["prompt_sources"]),
            seed=d["seed"],
            epochs=[EpochStats(**e) for e in d["epochs"]],
            selected_epoch=d["selected_epoch"],
            val_ci=d["val_ci"],
            test_ci=d.get("test_ci"),
            n_trainable=d["n_trainable"],
            n_frozen=d["n_frozen"],
            wall_time_sec=d["wall_time_sec"],
        )


def _stream(seed: int, purpose: str, wsi_id: str = "", epoch: int = 0) -> np.random.Generator:
    """Stable per-(purpose, wsi, epoch) random stream derived from the run seed."""
    digest = hashlib.sha256(f"{purpose}|{wsi_id}|{epoch}".encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, key)))


def sample_tile_indices(n_available: int, n_requested: int, rng: np.random.Generator) -> np.ndarray:
    """Sample without replacement, using all tiles when fewer are available."""
    if n_available < 1:
        raise EmptySlideError("slide has no tiles to sample")
    k = min(n_requested, n_available)
    return rng.choice(n_available, size=k, replace=False)


def _wsi_tensors(
    wsi: LoadedWsi, indices: np.ndarray, prompt_sources: tuple[str, ...], dtype: torch.dtype
) -> tuple[torch.Tensor, dict[str, torch.Tensor] | None]:
    tiles = torch.as_tensor(wsi.tiles[indices], dtype=dtype)
    sources = None
    if prompt_sources:
        sources = {}
        for kind in prompt_sources:
            if kind not in wsi.prompts:
                raise ValueError(f"WSI {wsi.wsi_id} has no stored {kind!r} prompt images")
            sources[kind] = torch.as_tensor(wsi.prompts[kind][indices], dtype=dtype)
    return tiles, sources


def predict_risk(
    model: SurvivalModel,
    wsi: LoadedWsi,
    n_tiles: int,
    seed: int,
    prompt_sources: tuple[str, ...] = (),
    chunk_size: int | None = 256,
):
    """Seeded tile subsample -> encoder -> decoder -> (risk scalar, prediction)."""
    if wsi.n_tiles < 1:
        raise EmptySlideError(f"WSI {wsi.wsi_id} has no retained tiles")
    rng = _stream(seed, "eval-tiles", wsi.wsi_id)
    idx = sample_tile_indices(wsi.n_tiles, n_tiles, rng)
    dtype = next(model.parameters()).dtype
    tiles, sources = _wsi_tensors(wsi, idx, prompt_sources, dtype)
    pred = model.predict(tiles, sources, chunk_size=chunk_size)
    return pred.risk(), pred


@dataclass
class EvalReport:
    ci: float
    n_tiles: int
    predictions: list[dict]
    patient_risks: dict[str, float]
    groups: dict[str, str]
    km_curves: dict[str, SurvivalCurveEstimate]

    def to_dict(self) -> dict:
        return {
            "ci": self.ci,
            "n_tiles": self.n_tiles,
            "predictions": self.predictions,
            "patient_risks": self.patient_risks,
            "groups": self.groups,
            "km_curves": {
                name: {
                    "time": curve.event_times.tolist(),
                    "survival_prob": curve.survival_probs.tolist(),
                }
                for name, curve in self.km_curves.items()
            },
        }


def evaluate_split(
    model: SurvivalModel,
    wsis: list[LoadedWsi],
    n_tiles: int,
    seed: int,
    prompt_sources: tuple[str, ...] = (),
) -> EvalReport:
    """Per-WSI risks, patient-level CI, median-risk groups and KM curves."""
    if not wsis:
        raise ValueError("evaluation split is empty")
    predictions = []
    by_patient: dict[str, list[float]] = {}
    label_of: dict[str, SurvivalLabel] = {}
    for wsi in wsis:
        risk, pred = predict_risk(model, wsi, n_tiles, seed, prompt_sources)
        predictions.append(
            {
                "patient_id": wsi.patient_id,
                "wsi_id": wsi.wsi_id,
                "risk": risk,
                "hazards": np.asarray(pred.hazards, dtype=float).tolist(),
                "survival": np.asarray(pred.survival, dtype=float).tolist(),
            }
        )
        by_patient.setdefault(wsi.patient_id, []).append(risk)
        label_of.setdefault(wsi.patient_id, SurvivalLabel(time=wsi.time_days, censored=wsi.censored))

    patients = sorted(by_patient)
    patient_risks = {pid: float(np.mean(by_patient[pid])) for pid in patients}
    risks = [patient_risks[pid] for pid in patients]
    labels = [label_of[pid] for pid in patients]
    ci = concordance_index(risks, labels)

    group_names = stratify_by_median_risk(risks)
    groups = dict(zip(patients, group_names))
    km_curves = {}
    for name in ("low", "high"):
        members = [lab for pid, lab in zip(patients, labels) if groups[pid] == name]
        if members:
            km_curves[name] = kaplan_meier(members)
    return EvalReport(
        ci=ci,
        n_tiles=n_tiles,
        predictions=predictions,
        patient_risks=patient_risks,
        groups=groups,
        km_curves=km_curves,
    )


def encoder_fingerprint(model: SurvivalModel) -> str:
    """Digest of the frozen backbone parameters and encoder config."""
    h = hashlib.sha256()
    h.update(json.dumps(asdict(model.encoder_config), sort_keys=True, default=list).encode())
    for name, param in sorted(model.encoder.patch_embed.named_parameters()):
        h.update(name.encode())
        h.update(param.detach().cpu().numpy().tobytes())
    for name, param in sorted(model.encoder.layers.named_parameters()):
        h.update(name.encode())
        h.update(param.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _tile_hash(wsi: LoadedWsi) -> str:
    return hashlib.sha256(wsi.tiles.tobytes()).hexdigest()


def build_feature_cache(model: SurvivalModel, wsis: list[LoadedWsi], cache_dir: Path) -> dict[str, np.ndarray]:
    """Precompute pooled frozen-encoder tokens for every tile of every WSI."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    features = {}
    meta = {"fingerprint": encoder_fingerprint(model), "tile_hashes": {}}
    with torch.no_grad():
        for wsi in wsis:
            tiles = torch.as_tensor(wsi.tiles, dtype=dtype)
            pooled = model.encode_tiles(tiles, use_adaptors=False, chunk_size=256)
            arr = pooled.cpu().numpy()
            np.save(cache_dir / f"{wsi.wsi_id}.npy", arr)
            features[wsi.wsi_id] = arr
            meta["tile_hashes"][wsi.wsi_id] = _tile_hash(wsi)
    with open(cache_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True)
    return features


def load_feature_cache(model: SurvivalModel, wsis: list[LoadedWsi], cache_dir: Path) -> dict[str, np.ndarray]:
    """Load a feature cache, refusing anything built by a different encoder."""
    cache_dir = Path(cache_dir)
    meta_path = cache_dir / "meta.json"
    if not meta_path.exists():
        raise StaleCacheError(f"no cache metadata at {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("fingerprint") != encoder_fingerprint(model):
        raise StaleCacheError("feature cache was built with a different encoder or config")
    features = {}
    for wsi in wsis:
        if meta["tile_hashes"].get(wsi.wsi_id) != _tile_hash(wsi):
            raise StaleCacheError(f"tile content changed for {wsi.wsi_id}")
        path = cache_dir / f"{wsi.wsi_id}.npy"
        if not path.exists():
            raise StaleCacheError(f"cache entry missing for {wsi.wsi_id}")
        features[wsi.wsi_id] = np.load(path)
    return features


def _assign_bins(wsis: list[LoadedWsi], binning: TimeBinning) -> None:
    for wsi in wsis:
        wsi.bin = binning.bin_of(wsi.time_days)


def train_model(
    data_dir: Path,
    encoder_config: EncoderConfig,
    decoder_config: DecoderConfig,
    train_config: TrainConfig,
    out_dir: Path | None = None,
    cache_dir: Path | None = None,
) -> tuple[SurvivalModel, RunReport, TimeBinning]:
    """Train in the configured mode and return the best-validation-CI model.

    End-to-end mode optimizes adaptors + decoder through the frozen backbone;
    two-stage mode precomputes pooled frozen features once and trains only the
    decoder on the cache. Best epoch = argmax validation CI, earliest on ties.
    """
    t_start = time.time()
    torch.set_num_threads(1)  # order-stable reductions; tiny ops gain nothing from threads
    cfg = train_config
    if cfg.prompt_sources and cfg.mode == "two_stage":
        raise ValueError("two_stage mode extracts frozen features and cannot use prompt sources")

    train_wsis = load_cohort(data_dir, "train")
    val_wsis = load_cohort(data_dir, "val")
    if not train_wsis or not val_wsis:
        raise ValueError("manifest must provide non-empty train and val splits")

    labels = [SurvivalLabel(time=w.time_days, censored=w.censored) for w in train_wsis]
    binning, _ = discretize_time(labels, cfg.n_bins)
    _assign_bins(train_wsis, binning)
    _assign_bins(val_wsis, binning)

    decoder_config = DecoderConfig(**{**asdict(decoder_config), "n_bins": cfg.n_bins})
    model = build_model(encoder_config, decoder_config, seed=cfg.seed)

    features: dict[str, np.ndarray] | None = None
    if cfg.mode == "two_stage":
        cache_dir = Path(cache_dir) if cache_dir else (Path(out_dir or data_dir) / "feature_cache")
        all_wsis = train_wsis + val_wsis
        if (cache_dir / "meta.json").exists():
            features = load_feature_cache(model, all_wsis, cache_dir)
        else:
            features = build_feature_cache(model, all_wsis, cache_dir)
        params = [p for n, p in model.named_parameters() if p.requires_grad and not n.startswith("encoder.adaptors.")]
    else:
        params = [p for p in model.parameters() if p.requires_grad]

    optimizer = torch.optim.AdamW(params, lr=cfg.learning_rate)
    steps_per_epoch = math.ceil(len(train_wsis) / cfg.batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs * steps_per_epoch)

    def forward_wsi(wsi: LoadedWsi, epoch: int) -> torch.Tensor:
        rng = _stream(cfg.seed, "train-tiles", wsi.wsi_id, epoch)
        idx = sample_tile_indices(wsi.n_tiles, cfg.train_tiles_per_wsi, rng)
        if cfg.mode == "two_stage":
            pooled = torch.as_tensor(features[wsi.wsi_id][idx])
            return model.decoder(pooled)
        tiles, sources = _wsi_tensors(wsi, idx, cfg.prompt_sources, torch.float32)
        return model(tiles, sources)

    def val_ci(epoch_tag: int) -> float:
        model.eval()
        if cfg.mode == "two_stage":
            risks, labs = [], []
            with torch.no_grad():
                for wsi in val_wsis:
                    rng = _stream(cfg.seed, "eval-tiles", wsi.wsi_id)
                    idx = sample_tile_indices(wsi.n_tiles, cfg.eval_tiles_per_wsi, rng)
                    pooled = torch.as_tensor(features[wsi.wsi_id][idx])
                    hazards = model.decoder(pooled)
                    risks.append(risk_from_survival(hazard_to_survival(hazards)))
                    labs.append(SurvivalLabel(time=wsi.time_days, censored=wsi.censored))
            result = concordance_index(risks, labs)
        else:
            result = evaluate_split(model, val_wsis, cfg.eval_tiles_per_wsi, cfg.seed, cfg.prompt_sources).ci
        model.train()
        return result

    history: list[EpochStats] = []
    best_ci = -math.inf
    best_epoch = -1
    best_state = None
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        order = _stream(cfg.seed, "order", epoch=epoch).permutation(len(train_wsis))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_wsis[i] for i in order[start : start + cfg.batch_size]]
            hazards = torch.stack([forward_wsi(w, epoch) for w in batch])
            bins = torch.tensor([w.bin for w in batch])
            cens = torch.tensor([w.censored for w in batch])
            loss = nll_from_hazards(hazards, bins, cens)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            losses.append(float(loss.detach()))
            step += 1

        ci = val_ci(epoch)
        history.append(EpochStats(epoch=epoch, train_loss=float(np.mean(losses)), val_ci=ci, lr=scheduler.get_last_lr()[0]))
        if ci > best_ci:
            best_ci = ci
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    audit = parameter_audit(model)
    report = RunReport(
        mode=cfg.mode,
        prompt_sources=list(cfg.prompt_sources),
        seed=cfg.seed,
        epochs=history,
        selected_epoch=best_epoch,
        val_ci=best_ci,
        test_ci=None,
        n_trainable=audit.trainable,
        n_frozen=audit.frozen,
        wall_time_sec=time.time() - t_start,
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metadata = {
            "binning_edges": binning.edges.tolist(),
            "n_bins": cfg.n_bins,
            "train_config": asdict(cfg),
            "encoder_fingerprint": encoder_fingerprint(model),
        }
        save_checkpoint(out_dir / "checkpoint.pt", model, metadata)
    return model, report, binning


@dataclass
class GradientCheckResult:
    max_relative_error: float
    n_coordinates: int
    passed: bool
    frozen_grads_zero: bool


def gradient_check(
    model: SurvivalModel,
    wsis: list[LoadedWsi],
    prompt_sources: tuple[str, ...] = (),
    n_coordinates: int = 200,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    n_tiles: int = 16,
    seed: int = 0,
) -> GradientCheckResult:
    """Analytic gradients of the batch NLL vs central finite differences.

    Runs at double precision on a copy of the model; samples at least one
    coordinate from every trainable parameter tensor (adaptors, decoder,
    queries, head) and also verifies frozen parameters receive no gradient.
    """
    model = copy.deepcopy(model).double()
    model.train()
    rng = np.random.default_rng(seed)

    batches = []
    for wsi in wsis:
        if wsi.bin is None:
            raise ValueError("gradient check needs binned labels; apply a TimeBinning first")
        idx = sample_tile_indices(wsi.n_tiles, n_tiles, rng)
        tiles, sources = _wsi_tensors(wsi, idx, prompt_sources, torch.float64)
        batches.append((tiles, sources, wsi.bin, wsi.censored))

    def total_loss() -> torch.Tensor:
        hazards = torch.stack([model(tiles, sources) for tiles, sources, _, _ in batches])
        bins = torch.tensor([b for _, _, b, _ in batches])
        cens = torch.tensor([c for _, _, _, c in batches])
        return nll_from_hazards(hazards, bins, cens)

    loss = total_loss()
    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in trainable])

    # Freeze-mask semantics: backward never populates grads on frozen tensors.
    model.zero_grad()
    total_loss().backward()
    frozen_ok = all(
        p.grad is None or bool((p.grad == 0).all())
        for p in model.parameters()
        if not p.requires_grad
    )
    model.zero_grad()

    sizes = np.array([p.numel() for _, p in trainable])
    extra = max(n_coordinates - len(trainable), 0)
    alloc = np.ones(len(trainable), dtype=int)
    if extra:
        weights = sizes / sizes.sum()
        alloc += rng.multinomial(extra, weights)
    alloc = np.minimum(alloc, sizes)

    max_err = 0.0
    n_checked = 0
    with torch.no_grad():
        for (name, param), grad, k in zip(trainable, grads, alloc):
            flat = param.data.view(-1)
            for idx in rng.choice(param.numel(), size=int(k), replace=False):
                orig = flat[idx].item()
                flat[idx] = orig + step
                lp = float(total_loss())
                flat[idx] = orig - step
                lm = float(total_loss())
                flat[idx] = orig
                fd = (lp - lm) / (2 * step)
                an = float(grad.view(-1)[idx])
                denom = max(abs(fd), abs(an))
                err = 0.0 if denom < 1e-8 else abs(fd - an) / denom
                max_err = max(max_err, err)
                n_checked += 1

    return GradientCheckResult(
        max_relative_error=max_err,
        n_coordinates=n_checked,
        passed=max_err < tolerance and frozen_ok,
        frozen_grads_zero=frozen_ok,
    )
