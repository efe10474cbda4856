"""Hyperparameter schedules: fan-out multipliers, one-cycle base curve, and
the gradient-free base-value controller.

A run assigns each rank a multiple of a shared base value.  Multipliers are
evenly spaced around 1 with half-width ``alpha``::

    rho_r = 1 + alpha * (r - (N-1)/2) / max((N-1)/2, 0.5)

so they always average to exactly 1 across ranks (the fan-out never moves
the replica-mean hyperparameter), are symmetric in pairs
(rho_r + rho_{N-1-r} = 2), and span [1-alpha, 1+alpha].

The controller turns per-rank end-of-interval losses into softmax weights
(lower loss, higher weight), compares the weighted mean of the per-rank
values against their plain mean, and nudges the base value toward the
better-performing ranks through a momentum velocity, while a fixed decay
per interval replaces the annealing the base schedule would have applied::

    score_r = (mean(L) - L_r) / temperature          w = softmax(score)
    delta   = sum(w_r * value_r) - mean(value)
    v      <- momentum * v + (1 - momentum) * delta
    base   <- base * (1 - decay) + v * step_scale    (clamped at 1e-9)

The decay is derived from the one-cycle factors so that pure decay over
the controller's K intervals matches the schedule's overall anneal ratio:
``decay = 1 - exp(-ln(div_factor / final_div_factor) / K)``.  Factor pairs
that put this outside [0, 1) are rejected up front.

After every controller update each channel independently redraws the
rank -> multiplier permutation, which decorrelates channels and spreads
exploration across ranks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

__all__ = [
    "AutoLRConfig",
    "ConfigError",
    "ControllerState",
    "HyperparamChannel",
    "LR_FLOOR",
    "OneCycleConfig",
    "SpreadAssignment",
    "SyncStats",
    "decay_gamma",
    "hypergradient_delta",
    "one_cycle_lr",
    "reassign",
    "softmax_weights",
    "spread_multipliers",
    "sync_stats",
    "velocity_update",
]

LR_FLOOR = 1e-9


class ConfigError(ValueError):
    """A configuration violated a stated invariant; message names it."""


def spread_multipliers(world_size: int, alpha: float) -> np.ndarray:
    """Per-rank multipliers around 1; see module docstring for properties."""
    if world_size < 1:
        raise ConfigError(f"world_size must be >= 1, got {world_size}")
    if alpha < 0:
        raise ConfigError(f"spread alpha must be >= 0, got {alpha}")
    n = world_size
    center = (n - 1) / 2.0
    half_width = max(center, 0.5)  # guards the single-rank case
    ranks = np.arange(n, dtype=np.float64)
    return 1.0 + alpha * (ranks - center) / half_width


@dataclass(frozen=True)
class OneCycleConfig:
    """Cosine ramp to ``eta_max`` then cosine anneal to the final floor.

    The curve starts at ``eta_max / div_factor``, peaks at step
    ``round(warmup_fraction * total_steps)``, and ends at
    ``eta_max / final_div_factor`` on step ``total_steps``.
    """

    eta_max: float
    div_factor: float
    final_div_factor: float
    warmup_fraction: float
    total_steps: int

    def __post_init__(self) -> None:
        if self.eta_max <= 0:
            raise ConfigError(f"eta_max must be > 0, got {self.eta_max}")
        if self.div_factor <= 0 or self.final_div_factor <= 0:
            raise ConfigError(
                f"div factors must be > 0, got div_factor={self.div_factor} "
                f"final_div_factor={self.final_div_factor}"
            )
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ConfigError(
                f"warmup_fraction must lie strictly in (0, 1), got {self.warmup_fraction}"
            )
        if self.total_steps < 2:
            raise ConfigError(f"total_steps must be >= 2, got {self.total_steps}")
        peak = self.peak_step
        if not (1 <= peak <= self.total_steps - 1):
            raise ConfigError(
                f"warmup_fraction {self.warmup_fraction} puts the peak at step {peak}, "
                f"outside [1, {self.total_steps - 1}]"
            )

    @property
    def peak_step(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))


def one_cycle_lr(step: int, cfg: OneCycleConfig) -> float:
    """Schedule value at an integer step in [0, total_steps]."""
    if not (0 <= step <= cfg.total_steps):
        raise ConfigError(
            f"step {step} outside schedule range [0, {cfg.total_steps}]"
        )
    start = cfg.eta_max / cfg.div_factor
    floor = cfg.eta_max / cfg.final_div_factor
    peak = cfg.peak_step
    if step <= peak:
        frac = step / peak
        return start + (cfg.eta_max - start) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = (step - peak) / (cfg.total_steps - peak)
    return floor + (cfg.eta_max - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


def softmax_weights(rank_losses: Sequence[float], temperature: float) -> np.ndarray:
    """Softmax over (mean - loss) / temperature; lower loss, larger weight.

    Scores are shifted by their max before exponentiation, so extreme loss
    gaps saturate cleanly instead of overflowing.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    losses = np.asarray(rank_losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size < 1:
        raise ValueError("rank_losses must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(losses)):
        raise ValueError("rank_losses must be finite; callers skip non-finite syncs")
    scores = (losses.mean() - losses) / temperature
    scores -= scores.max()
    expd = np.exp(scores)
    return expd / expd.sum()


def hypergradient_delta(weights: Sequence[float], values: Sequence[float]) -> tuple[float, float, float]:
    """(weighted mean, unweighted mean, their difference) of per-rank values."""
    w = np.asarray(weights, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if w.shape != v.shape:
        raise ValueError(f"weights shape {w.shape} != values shape {v.shape}")
    weighted = float(w @ v)
    unweighted = float(v.mean())
    return weighted, unweighted, weighted - unweighted


@dataclass(frozen=True)
class SyncStats:
    """Everything the controller computed for one channel at one sync."""

    rank_losses: tuple[float, ...]
    mean_loss: float
    scores: tuple[float, ...]
    weights: tuple[float, ...]
    weighted_value: float
    unweighted_mean: float
    delta: float


def sync_stats(rank_losses: Sequence[float], values: Sequence[float],
               temperature: float) -> SyncStats:
    """Score losses, weight them, and compare weighted vs plain value mean."""
    losses = np.asarray(rank_losses, dtype=np.float64)
    weights = softmax_weights(losses, temperature)
    scores = (losses.mean() - losses) / temperature
    weighted, unweighted, delta = hypergradient_delta(weights, values)
    return SyncStats(
        rank_losses=tuple(float(x) for x in losses),
        mean_loss=float(losses.mean()),
        scores=tuple(float(x) for x in scores),
        weights=tuple(float(x) for x in weights),
        weighted_value=weighted,
        unweighted_mean=unweighted,
        delta=delta,
    )


def decay_gamma(div_factor: float, final_div_factor: float, interval_count: float) -> float:
    """Per-interval decay whose compounding over K intervals matches the
    one-cycle anneal ratio.  Rejects factor pairs outside [0, 1)."""
    if div_factor <= 0 or final_div_factor <= 0:
        raise ConfigError(
            f"div factors must be > 0, got div_factor={div_factor} "
            f"final_div_factor={final_div_factor}"
        )
    if interval_count <= 0:
        raise ConfigError(f"interval_count must be > 0, got {interval_count}")
    gamma = 1.0 - math.exp(-math.log(div_factor / final_div_factor) / interval_count)
    if not (0.0 <= gamma < 1.0):
        raise ConfigError(
            f"decay outside [0, 1): div_factor={div_factor}, "
            f"final_div_factor={final_div_factor} give gamma={gamma}; "
            "the start factor must be >= the final factor"
        )
    return gamma


@dataclass(frozen=True)
class AutoLRConfig:
    """Controller knobs: momentum, score temperature, update scale, cadence."""

    momentum: float
    temperature: float
    step_scale: float
    warmup_steps: int
    sync_interval: int
    interval_count: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.step_scale <= 0:
            raise ConfigError(f"step_scale must be > 0, got {self.step_scale}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.sync_interval < 1:
            raise ConfigError(f"sync_interval must be >= 1, got {self.sync_interval}")
        if self.interval_count < 1:
            raise ConfigError(
                f"controller needs at least one interval after warmup, "
                f"got interval_count={self.interval_count}"
            )


@dataclass(frozen=True)
class ControllerState:
    """Per-channel controller memory between syncs."""

    base_value: float = 0.0
    velocity: float = 0.0
    decay: float = 0.0
    engaged: bool = False


def velocity_update(state: ControllerState, delta: float,
                    cfg: AutoLRConfig) -> ControllerState:
    """One controller step: fold delta into the velocity, decay the base."""
    velocity = cfg.momentum * state.velocity + (1.0 - cfg.momentum) * delta
    base = state.base_value * (1.0 - state.decay) + velocity * cfg.step_scale
    return replace(state, base_value=max(base, LR_FLOOR), velocity=velocity,
                   engaged=True)


@dataclass(frozen=True)
class SpreadAssignment:
    """Multiplier ladder plus the current rank -> rung permutation."""

    alpha: float
    multipliers: np.ndarray
    half_width: float
    permutation: np.ndarray

    @classmethod
    def build(cls, world_size: int, alpha: float) -> "SpreadAssignment":
        mult = spread_multipliers(world_size, alpha)
        center = (world_size - 1) / 2.0
        return cls(alpha=float(alpha), multipliers=mult,
                   half_width=max(center, 0.5),
                   permutation=np.arange(world_size))

    @property
    def world_size(self) -> int:
        return self.multipliers.shape[0]

    def values(self, base: float) -> np.ndarray:
        """Per-rank values: rank r receives base * multipliers[perm[r]]."""
        return base * self.multipliers[self.permutation]

    def value_for_rank(self, base: float, rank: int) -> float:
        return float(base * self.multipliers[self.permutation[rank]])


def reassign(spread: SpreadAssignment, rng: np.random.Generator) -> SpreadAssignment:
    """Fresh uniform rank -> multiplier permutation; the multiset of values
    (and hence their mean) is unchanged."""
    return replace(spread, permutation=rng.permutation(spread.world_size))


@dataclass
class HyperparamChannel:
    """One named scalar hyperparameter ("lr:transformer", "weight_decay", ...)
    with its spread assignment, controller state, and private permutation RNG.

    Every rank holds an identical replica of each channel: inputs to channel
    updates arrive via all-gather and the RNG is seeded identically, so the
    replicas evolve in lockstep without extra communication.
    """

    name: str
    spread: SpreadAssignment
    controller: ControllerState
    rng: np.random.Generator

    def rank_value(self, base: float, rank: int) -> float:
        return self.spread.value_for_rank(base, rank)

    def reassign(self) -> None:
        self.spread = reassign(self.spread, self.rng)
