"""Discrete-time survival mathematics.

Hazard/survival conversion, censored negative log-likelihood, concordance
index, Kaplan-Meier estimation, time discretization and risk stratification.
All functions here are pure; the differentiable pieces (hazard-to-survival,
NLL loss) accept torch tensors and preserve gradients, everything else works
on plain sequences or numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import UndefinedMetricError

# Hazards are clamped into [EPS, 1 - EPS] before any log or product so that
# losses stay bounded and gradients finite.
EPS = 1e-7


@dataclass
class SurvivalLabel:
    """One observed outcome: follow-up time in days and right-censor flag.

    ``censored == 1`` means the event was not observed (only a lower bound on
    the survival time is known); ``censored == 0`` means the event occurred at
    ``time``. ``bin`` is filled in once a :class:`TimeBinning` is applied.
    """

    time: float
    censored: int
    bin: int | None = None

    def __post_init__(self) -> None:
        if self.time < 0:
            raise ValueError(f"survival time must be non-negative, got {self.time}")
        if self.censored not in (0, 1):
            raise ValueError(f"censored flag must be 0 or 1, got {self.censored}")


@dataclass
class TimeBinning:
    """Partition of [0, inf) into ``n_bins`` intervals via sorted edges.

    Bin k (1-based) covers (edges[k-2], edges[k-1]]; bin 1 is (-inf, edges[0]]
    and the last bin is open to the right.
    """

    edges: np.ndarray
    n_bins: int

    def __post_init__(self) -> None:
        self.edges = np.asarray(self.edges, dtype=float)
        if len(self.edges) != self.n_bins - 1:
            raise ValueError("need exactly n_bins - 1 edges")
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")

    def bin_of(self, time: float) -> int:
        """Map a non-negative time to its 1-based bin index."""
        if time < 0:
            raise ValueError(f"time must be non-negative, got {time}")
        return int(np.searchsorted(self.edges, time, side="left")) + 1


@dataclass
class HazardPrediction:
    """Per-bin hazards h(t) and the derived survival curve S(t) for one sample."""

    hazards: np.ndarray
    survival: np.ndarray

    @classmethod
    def from_hazards(cls, hazards) -> "HazardPrediction":
        hazards = np.asarray(hazards, dtype=float)
        survival = hazard_to_survival(hazards)
        return cls(hazards=np.clip(hazards, EPS, 1.0 - EPS), survival=survival)

    @property
    def n_bins(self) -> int:
        return len(self.hazards)

    def risk(self) -> float:
        """Scalar risk score: expected cumulative incidence sum_t (1 - S(t))."""
        return float(np.sum(1.0 - np.asarray(self.survival, dtype=float)))


@dataclass
class SurvivalCurveEstimate:
    """Step-function survival estimate: S(t) drops at each event time."""

    event_times: np.ndarray
    survival_probs: np.ndarray

    def evaluate(self, time: float) -> float:
        """Right-continuous step evaluation; 1.0 before the first event."""
        idx = int(np.searchsorted(self.event_times, time, side="right")) - 1
        if idx < 0:
            return 1.0
        return float(self.survival_probs[idx])


def hazard_to_survival(hazards):
    """Convert per-bin hazards to the survival curve S(t) = prod_{u<=t} (1 - h(u)).

    Accepts a torch tensor (gradients preserved, last dim is the bin axis) or
    any 1-D array-like; values must lie in [0, 1] before clamping.
    """
    if isinstance(hazards, torch.Tensor):
        if hazards.numel() == 0:
            raise ValueError("hazards must be non-empty")
        if bool((hazards < 0).any()) or bool((hazards > 1).any()):
            raise ValueError("hazards must lie in [0, 1] before clamping")
        clamped = hazards.clamp(EPS, 1.0 - EPS)
        return torch.cumprod(1.0 - clamped, dim=-1)
    arr = np.asarray(hazards, dtype=float)
    if arr.size == 0:
        raise ValueError("hazards must be non-empty")
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError("hazards must lie in [0, 1] before clamping")
    return np.cumprod(1.0 - np.clip(arr, EPS, 1.0 - EPS), axis=-1)


def nll_from_hazards(hazards: torch.Tensor, bins: torch.Tensor, censored: torch.Tensor) -> torch.Tensor:
    """Censored negative log-likelihood of a batch, differentiable in hazards.

    ``hazards`` is [B, T] (or [T] for a single sample), ``bins`` holds 1-based
    bin indices and ``censored`` the right-censor flags. With S(0) = 1, a
    censored sample contributes -log S(bin); an event contributes
    -log S(bin - 1) - log h(bin). Returns the mean over the batch.
    """
    if hazards.dim() == 1:
        hazards = hazards.unsqueeze(0)
    bins = torch.as_tensor(bins, dtype=torch.long, device=hazards.device).reshape(-1)
    censored = torch.as_tensor(censored, dtype=torch.long, device=hazards.device).reshape(-1)
    n, t = hazards.shape
    if bins.numel() != n or censored.numel() != n:
        raise ValueError("hazards, bins and censored must agree in batch size")
    if bool((bins < 1).any()) or bool((bins > t).any()):
        raise ValueError(f"bin indices must lie in [1, {t}]")

    clamped = hazards.clamp(EPS, 1.0 - EPS)
    log_one_minus = torch.log1p(-clamped)
    # log S(k) as cumulative sums, prepended with log S(0) = 0.
    log_surv = torch.cat(
        [torch.zeros(n, 1, dtype=hazards.dtype, device=hazards.device), torch.cumsum(log_one_minus, dim=1)],
        dim=1,
    )
    idx = bins.unsqueeze(1)
    log_s_bin = log_surv.gather(1, idx).squeeze(1)
    log_s_prev = log_surv.gather(1, idx - 1).squeeze(1)
    log_h_bin = torch.log(clamped).gather(1, idx - 1).squeeze(1)

    cens = censored.to(hazards.dtype)
    per_sample = -(cens * log_s_bin + (1.0 - cens) * (log_s_prev + log_h_bin))
    return per_sample.mean()


def nll_survival_loss(pred: HazardPrediction, label: SurvivalLabel) -> float:
    """Single-sample censored NLL; see :func:`nll_from_hazards` for the batch form."""
    if label.bin is None:
        raise ValueError("label has no bin index; apply a TimeBinning first")
    hazards = torch.as_tensor(np.asarray(pred.hazards, dtype=float))
    loss = nll_from_hazards(hazards, torch.tensor([label.bin]), torch.tensor([label.censored]))
    return float(loss)


def _label_arrays(labels: Sequence[SurvivalLabel]) -> tuple[np.ndarray, np.ndarray]:
    times = np.asarray([lab.time for lab in labels], dtype=float)
    events = np.asarray([1 - lab.censored for lab in labels], dtype=int)
    return times, events


def concordance_index(risks: Sequence[float], labels: Sequence[SurvivalLabel]) -> float:
    """Harrell's concordance index of risk scores against censored outcomes.

    A pair (i, j) is comparable when time_i < time_j and sample i is
    uncensored; it scores 1 if risk_i > risk_j, 0.5 on a risk tie, else 0.
    Pairs with equal times are never comparable.
    """
    risks = np.asarray(risks, dtype=float)
    if len(risks) != len(labels):
        raise ValueError("risks and labels must have equal length")
    if len(risks) < 2:
        raise ValueError("need at least two samples")
    times, events = _label_arrays(labels)

    earlier = times[:, None] < times[None, :]
    comparable = earlier & (events[:, None] == 1)
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise UndefinedMetricError("no comparable pair: concordance index is undefined")

    higher = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    score = (higher & comparable).sum() + 0.5 * (tied & comparable).sum()
    return float(score / n_pairs)


def kaplan_meier(labels: Sequence[SurvivalLabel]) -> SurvivalCurveEstimate:
    """Product-limit survival estimate from censored observations.

    At each distinct event time t_k with d_k events and n_k subjects still at
    risk (time >= t_k), S is multiplied by (1 - d_k / n_k). Censored subjects
    leave the risk set after their censoring time without causing a drop.
    """
    if not labels:
        raise ValueError("labels must be non-empty")
    times, events = _label_arrays(labels)
    event_times = np.unique(times[events == 1])

    surv = 1.0
    probs = []
    for t_k in event_times:
        n_at_risk = int(np.sum(times >= t_k))
        d_k = int(np.sum((times == t_k) & (events == 1)))
        surv *= 1.0 - d_k / n_at_risk
        probs.append(surv)
    return SurvivalCurveEstimate(event_times=event_times, survival_probs=np.asarray(probs, dtype=float))


def discretize_time(labels: Sequence[SurvivalLabel], n_bins: int) -> tuple[TimeBinning, list[int]]:
    """Quantile time binning: edges at the k/T nearest-rank quantiles of
    uncensored event times (k = 1..T-1); returns the binning and each label's
    1-based bin index.
    """
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    times, events = _label_arrays(labels)
    uncensored = np.sort(times[events == 1])
    n = len(uncensored)
    if n < n_bins:
        raise ValueError(f"need at least {n_bins} uncensored events, found {n}")

    # Nearest-rank quantile: the ceil(q * n)-th order statistic (1-based).
    ranks = [int(np.ceil(k * n / n_bins)) for k in range(1, n_bins)]
    edges = np.asarray([uncensored[r - 1] for r in ranks], dtype=float)
    binning = TimeBinning(edges=edges, n_bins=n_bins)
    bins = [binning.bin_of(t) for t in times]
    for lab, b in zip(labels, bins):
        lab.bin = b
    return binning, bins


def stratify_by_median_risk(risks: Sequence[float]) -> list[str]:
    """Split samples into 'high' (risk > median) and 'low' (risk <= median)."""
    risks = np.asarray(risks, dtype=float)
    if len(risks) < 2:
        raise ValueError("need at least two samples to stratify")
    median = float(np.median(risks))
    return ["high" if r > median else "low" for r in risks]


def risk_from_survival(survival) -> float:
    """Expected cumulative incidence sum_t (1 - S(t)); monotone in the hazards."""
    if isinstance(survival, torch.Tensor):
        return float((1.0 - survival).sum())
    return float(np.sum(1.0 - np.asarray(survival, dtype=float)))
