"""Multi-replica training loop: divergent per-rank steps on a shared reduced
gradient, periodic parameter averaging, and the gradient-free base-LR
controller.

Structure of one run:

* every rank holds a full parameter copy and its own batch stream;
* each step all ranks reduce their local gradients to one shared mean
  gradient, then apply it under rank-specific learning rates drawn from the
  spread ladder;
* every ``sync_interval`` steps parameters are averaged across ranks;
  when the controller is active it gathers interval losses and per-rank
  hyperparameter values, reweights them by softmax score, nudges each
  channel's base value along the weighted-minus-unweighted deviation, and
  redraws every channel's rank permutation.

The controller is replicated on every rank: its inputs arrive via
all-gather and its permutation RNGs are seeded identically, so all replicas
of the controller state evolve in lockstep with no broadcast step.

Divergence never aborts a run.  Non-finite losses enter the metrics as a
capped sentinel, non-finite gradients contribute zeros to the reduction,
and the controller skips any sync whose gathered losses are not all finite,
applying only its decay factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .collectives import RankComm, RankGroup, mean_reduce
from .objectives import (
    STREAM_REASSIGN,
    STREAM_WARM_NOISE,
    Batch,
    Objective,
    ObjectiveSpec,
    ParamGroupSet,
    build_objective,
    sample_batch,
    seeded_rng,
)
from .schedule import (
    LR_FLOOR,
    AutoLRConfig,
    ConfigError,
    ControllerState,
    HyperparamChannel,
    OneCycleConfig,
    SpreadAssignment,
    decay_gamma,
    one_cycle_lr,
    sync_stats,
    velocity_update,
)

# Value recorded in metrics when a rank's loss is not finite.  The run keeps
# going; only the metrics stream is clamped.
LOSS_CAP = 1e30

LR_SCOPES = ("global", "per_group")
OPTIMIZERS = ("sgd", "adam")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class OptimizerConfig:
    """Plain SGD by default; adaptive moments behind a flag.

    With the gradient shared across ranks the moment buffers are identical
    on every rank, so ``average_moments`` changes the collective schedule
    (two extra reductions per sync) but not the trajectory.
    """

    kind: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    average_moments: bool = False

    def __post_init__(self) -> None:
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer kind must be one of {OPTIMIZERS}, got {self.kind!r}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"optimizer {name} must be in [0, 1), got {b}")
        if self.eps <= 0.0:
            raise ConfigError(f"optimizer eps must be > 0, got {self.eps}")


@dataclass(frozen=True, eq=False)
class WarmInitConfig:
    """Start every rank at a checkpoint plus independent Gaussian noise."""

    checkpoint: ParamGroupSet
    nu: float = 0.01

    def __post_init__(self) -> None:
        if self.nu < 0.0:
            raise ConfigError(f"warm-init noise scale must be >= 0, got {self.nu}")


@dataclass(frozen=True)
class ControllerSettings:
    """User-facing controller knobs; the decay factor is derived at run
    start from the one-cycle div factors and the remaining sync count."""

    momentum: float = 0.9
    temperature: float = 0.1
    step_scale: float = 0.5
    warmup_steps: int = 0


@dataclass(frozen=True)
class EnsembleConfig:
    """Fan-out/converge settings.  Absent entirely for plain data-parallel
    runs: no spread, no parameter averaging, no controller."""

    alpha: float
    sync_interval: int
    auto_lr: ControllerSettings | None = None


@dataclass(frozen=True, eq=False)
class RunConfig:
    objective: ObjectiveSpec
    world_size: int
    cycle: OneCycleConfig
    ensemble: EnsembleConfig | None = None
    warm_init: WarmInitConfig | None = None
    lr_scope: str = "global"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    global_seed: int = 0
    execution_mode: str = "sequential"
    record_every: int = 1
    record_states: bool = False
    timeout_s: float = 120.0

    @property
    def total_steps(self) -> int:
        return self.cycle.total_steps


# ---------------------------------------------------------------------------
# run products


@dataclass(frozen=True)
class StepRecord:
    """One metrics row.  ``loss`` and ``interval_loss`` are clamped to
    LOSS_CAP; sync-only fields are None off sync rows."""

    step: int
    rank: int
    loss: float
    lrs: tuple[float, ...]
    sync: bool = False
    interval_loss: float | None = None
    weight: float | None = None
    controller: str = ""
    deltas: tuple[float, ...] | None = None
    velocities: tuple[float, ...] | None = None
    bases: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ChannelSync:
    """Controller outcome for one channel at one sync (unclamped)."""

    name: str
    values: tuple[float, ...]
    mean_value: float
    delta: float | None
    velocity: float
    base_value: float
    permutation: tuple[int, ...]


@dataclass(frozen=True)
class SyncRecord:
    step: int
    rank_losses: tuple[float, ...]
    skipped: bool
    weights: tuple[float, ...] | None
    channels: tuple[ChannelSync, ...]


@dataclass
class RunResult:
    params_by_rank: list[ParamGroupSet]
    records: list[StepRecord]
    sync_records: list[SyncRecord]
    call_counts: dict[tuple[str, str], int]
    channel_names: tuple[str, ...]
    nonfinite_first_step: dict[int, int | None]
    trace: dict[str, Any] | None = None

    def final_params(self) -> ParamGroupSet:
        return self.params_by_rank[0]


# ---------------------------------------------------------------------------
# replica state and the two core operations


@dataclass
class ReplicaState:
    """Everything one rank mutates while training."""

    params: ParamGroupSet
    loss_accumulator: float = 0.0
    step: int = 0
    moments: tuple[np.ndarray, np.ndarray] | None = None  # adam (m, v)


@dataclass(frozen=True)
class StepOutcome:
    raw_loss: float
    recorded_loss: float
    finite: bool
    shared_grad: np.ndarray


@dataclass(frozen=True)
class SyncOutcome:
    interval_loss: float
    controller: str  # "", "update", "skip"
    weight: float | None
    record: SyncRecord | None


def warm_noisy_init(cfg: WarmInitConfig, rank: int, global_seed: int) -> ParamGroupSet:
    """Checkpoint plus per-rank Gaussian noise of per-coordinate std
    nu * ||checkpoint|| / sqrt(total_dim); nu = 0 returns the checkpoint
    bit-exactly."""
    cfg.checkpoint.require_finite()
    if cfg.nu == 0.0:
        return cfg.checkpoint.copy()
    d = cfg.checkpoint.total_dim
    std = cfg.nu * cfg.checkpoint.global_norm() / math.sqrt(d)
    rng = seeded_rng(STREAM_WARM_NOISE, global_seed, rank)
    flat = cfg.checkpoint.flatten() + rng.standard_normal(d) * std
    return cfg.checkpoint.with_flat(flat)


def _group_slices(params: ParamGroupSet) -> list[tuple[str, slice]]:
    out, offset = [], 0
    for name, n in params.sizes():
        out.append((name, slice(offset, offset + n)))
        offset += n
    return out


def _local_gradient(objective: Objective, params: ParamGroupSet,
                    batch: Batch) -> tuple[float, np.ndarray, bool]:
    """Loss and flat gradient; non-finite parameters or outputs degrade to a
    zero gradient so the rank keeps participating in the reduction."""
    try:
        # divergence is a modeled state here, not a numerics bug: let values
        # overflow to inf quietly and catch them below
        with np.errstate(over="ignore", invalid="ignore"):
            loss, flat = objective.loss_and_flat_grad(params, batch)
    except OverflowError:  # non-finite parameters
        return float("nan"), np.zeros(params.total_dim), False
    if math.isfinite(loss) and np.isfinite(flat).all():
        return float(loss), flat, True
    return float(loss), np.zeros(params.total_dim), False


def train_step(state: ReplicaState, lr_per_group: Sequence[float], comm: RankComm,
               objective: Objective, global_seed: int,
               optimizer: OptimizerConfig) -> StepOutcome:
    """Advance one rank by one step: local gradient, shared mean reduction,
    per-group update at this rank's learning rates, loss accumulation."""
    t = state.step + 1
    batch = sample_batch(global_seed, comm.rank, t)
    raw_loss, local_grad, finite = _local_gradient(objective, state.params, batch)
    shared = comm.all_reduce_mean(local_grad, label="grad")

    if optimizer.kind == "adam":
        if state.moments is None:
            state.moments = (np.zeros_like(shared), np.zeros_like(shared))
        m, v = state.moments
        m += (1.0 - optimizer.beta1) * (shared - m)
        v += (1.0 - optimizer.beta2) * (shared * shared - v)
        m_hat = m / (1.0 - optimizer.beta1 ** t)
        v_hat = v / (1.0 - optimizer.beta2 ** t)
        direction = m_hat / (np.sqrt(v_hat) + optimizer.eps)
    else:
        direction = shared

    for (name, sl), lr in zip(_group_slices(state.params), lr_per_group):
        state.params[name] -= lr * direction[sl]

    state.loss_accumulator += raw_loss
    state.step = t
    recorded = raw_loss if math.isfinite(raw_loss) else LOSS_CAP
    return StepOutcome(raw_loss=raw_loss, recorded_loss=recorded,
                       finite=finite, shared_grad=shared)


def converge_sync(state: ReplicaState, comm: RankComm,
                  channels: list[HyperparamChannel], channel_lrs: Sequence[float],
                  sync_interval: int, optimizer: OptimizerConfig,
                  auto_cfg: AutoLRConfig | None) -> SyncOutcome:
    """Average parameters across ranks; when the controller is due, gather
    interval losses and channel values, update every channel, and redraw
    permutations.  ``channel_lrs`` are the values this rank applied at the
    sync step, one per channel."""
    avg = comm.all_reduce_mean(state.params.flatten(), label="params")
    state.params = state.params.with_flat(avg)
    if state.moments is not None and optimizer.average_moments:
        m = comm.all_reduce_mean(state.moments[0], label="adam_m")
        v = comm.all_reduce_mean(state.moments[1], label="adam_v")
        state.moments = (m, v)

    interval_loss = state.loss_accumulator / sync_interval
    state.loss_accumulator = 0.0

    if auto_cfg is None or state.step < auto_cfg.warmup_steps:
        return SyncOutcome(interval_loss=interval_loss, controller="",
                           weight=None, record=None)

    losses = np.asarray(comm.all_gather_scalar(interval_loss, label="loss"))
    gathered = [
        np.asarray(comm.all_gather_scalar(lr, label=f"value:{ch.name}"))
        for ch, lr in zip(channels, channel_lrs)
    ]
    all_finite = bool(np.isfinite(losses).all())

    weights = None
    channel_syncs = []
    for ch, values in zip(channels, gathered):
        # The base entering the update is the gathered mean of the values the
        # ranks actually applied; before engagement that hands over from the
        # per-step schedule, afterwards it reproduces the stored base.
        mean_value = float(np.mean(values))
        st = ch.controller
        if all_finite:
            stats = sync_stats(losses, values, auto_cfg.temperature)
            weights = stats.weights
            st = velocity_update(replace(st, base_value=mean_value),
                                 stats.delta, auto_cfg)
            delta: float | None = stats.delta
        else:
            # Skipped sync: decay only, velocity frozen.
            st = replace(st, base_value=max(mean_value * (1.0 - st.decay), LR_FLOOR),
                         engaged=True)
            delta = None
        ch.controller = st
        ch.reassign()
        channel_syncs.append(ChannelSync(
            name=ch.name, values=tuple(float(x) for x in values),
            mean_value=mean_value, delta=delta, velocity=st.velocity,
            base_value=st.base_value,
            permutation=tuple(int(i) for i in ch.spread.permutation),
        ))

    record = SyncRecord(
        step=state.step,
        rank_losses=tuple(float(x) for x in losses),
        skipped=not all_finite,
        weights=None if weights is None else tuple(float(w) for w in weights),
        channels=tuple(channel_syncs),
    )
    mode = "update" if all_finite else "skip"
    rank_weight = None if weights is None else float(weights[comm.rank])
    return SyncOutcome(interval_loss=interval_loss, controller=mode,
                       weight=rank_weight, record=record)


# ---------------------------------------------------------------------------
# run orchestration


def channel_names_for(objective: Objective, lr_scope: str) -> tuple[str, ...]:
    if lr_scope == "global":
        return ("lr",)
    return tuple(f"lr:{name}" for name, _ in objective.group_sizes)


def _build_channels(config: RunConfig, objective: Objective,
                    gamma: float) -> list[HyperparamChannel]:
    alpha = config.ensemble.alpha if config.ensemble is not None else 0.0
    channels = []
    for index, name in enumerate(channel_names_for(objective, config.lr_scope)):
        channels.append(HyperparamChannel(
            name=name,
            spread=SpreadAssignment.build(config.world_size, alpha),
            controller=ControllerState(base_value=0.0, velocity=0.0,
                                       decay=gamma, engaged=False),
            rng=seeded_rng(STREAM_REASSIGN, config.global_seed, index),
        ))
    return channels


def _channel_lrs(channels: list[HyperparamChannel], cycle: OneCycleConfig,
                 step: int, rank: int) -> list[float]:
    """Per-channel value this rank applies at ``step``: the one-cycle curve
    times the rank's multiplier before engagement, the controller-owned base
    times the multiplier (constant within a sync interval) after."""
    schedule_value = None
    out = []
    for ch in channels:
        if ch.controller.engaged:
            base = ch.controller.base_value
        else:
            if schedule_value is None:
                schedule_value = one_cycle_lr(step, cycle)
            base = schedule_value
        out.append(ch.rank_value(base, rank))
    return out


def _lrs_per_group(channel_lrs: Sequence[float], lr_scope: str,
                   n_groups: int) -> list[float]:
    if lr_scope == "global":
        return [channel_lrs[0]] * n_groups
    return list(channel_lrs)


def validate_config(config: RunConfig) -> tuple[Objective, AutoLRConfig | None, float]:
    """Fail fast on any inconsistent setting; returns the built objective,
    the full controller config (None when inactive), and the decay factor."""
    if config.world_size < 1:
        raise ConfigError(f"world_size must be >= 1, got {config.world_size}")
    if config.lr_scope not in LR_SCOPES:
        raise ConfigError(f"lr_scope must be one of {LR_SCOPES}, got {config.lr_scope!r}")
    if config.record_every < 1:
        raise ConfigError(f"record_every must be >= 1, got {config.record_every}")
    objective = build_objective(config.objective)
    if config.warm_init is not None:
        template = objective.init_params(config.global_seed)
        if config.warm_init.checkpoint.sizes() != template.sizes():
            raise ConfigError(
                "warm-init checkpoint groups "
                f"{config.warm_init.checkpoint.sizes()} do not match the "
                f"objective's parameter groups {template.sizes()}"
            )
        config.warm_init.checkpoint.require_finite()

    auto_cfg: AutoLRConfig | None = None
    gamma = 0.0
    ens = config.ensemble
    if ens is not None:
        if ens.sync_interval < 1:
            raise ConfigError(f"sync_interval must be >= 1, got {ens.sync_interval}")
        if config.total_steps % ens.sync_interval != 0:
            raise ConfigError(
                f"total_steps ({config.total_steps}) must be a multiple of "
                f"sync_interval ({ens.sync_interval})"
            )
        if ens.alpha < 0.0:
            raise ConfigError(f"spread alpha must be >= 0, got {ens.alpha}")
        if ens.auto_lr is not None:
            ctl = ens.auto_lr
            if not 0 <= ctl.warmup_steps <= config.total_steps:
                raise ConfigError(
                    f"warmup_steps must be in [0, {config.total_steps}], "
                    f"got {ctl.warmup_steps}"
                )
            remaining = config.total_steps - ctl.warmup_steps
            if remaining % ens.sync_interval != 0:
                raise ConfigError(
                    f"steps after warmup ({remaining}) must be a multiple of "
                    f"sync_interval ({ens.sync_interval})"
                )
            intervals = remaining // ens.sync_interval
            if intervals < 1:
                raise ConfigError(
                    "controller needs at least one sync interval after "
                    f"warmup; got {intervals}"
                )
            gamma = decay_gamma(config.cycle.div_factor,
                                config.cycle.final_div_factor, intervals)
            auto_cfg = AutoLRConfig(
                momentum=ctl.momentum, temperature=ctl.temperature,
                step_scale=ctl.step_scale, warmup_steps=ctl.warmup_steps,
                sync_interval=ens.sync_interval, interval_count=intervals,
            )
    return objective, auto_cfg, gamma


def _initial_params(config: RunConfig, cold_template: ParamGroupSet,
                    rank: int) -> ParamGroupSet:
    if config.warm_init is not None:
        return warm_noisy_init(config.warm_init, rank, config.global_seed)
    return cold_template.copy()


def run(config: RunConfig) -> RunResult:
    """Execute the full loop on every rank and merge the per-rank outputs."""
    objective, auto_cfg, gamma = validate_config(config)
    cold_template = objective.init_params(config.global_seed)
    group = RankGroup(config.world_size, execution_mode=config.execution_mode,
                      timeout_s=config.timeout_s)
    S = config.total_steps
    T = config.ensemble.sync_interval if config.ensemble is not None else 0
    n_groups = len(objective.group_sizes)

    def worker(comm: RankComm) -> dict:
        state = ReplicaState(params=_initial_params(config, cold_template, comm.rank))
        channels = _build_channels(config, objective, gamma)
        records: list[StepRecord] = []
        sync_records: list[SyncRecord] = []
        nonfinite_first: int | None = None
        trace: dict[str, Any] | None = None
        if config.record_states:
            trace = {"post_update": {}, "post_sync": {}, "shared_grad": {},
                     "channel_lrs": {}}

        for t in range(1, S + 1):
            lrs = _channel_lrs(channels, config.cycle, t, comm.rank)
            outcome = train_step(state, _lrs_per_group(lrs, config.lr_scope, n_groups),
                                 comm, objective, config.global_seed, config.optimizer)
            if not outcome.finite and nonfinite_first is None:
                nonfinite_first = t
            if trace is not None:
                trace["post_update"][t] = state.params.flatten()
                trace["channel_lrs"][t] = tuple(lrs)
                if comm.rank == 0:
                    trace["shared_grad"][t] = outcome.shared_grad

            sync_now = T > 0 and t % T == 0
            if sync_now:
                sync = converge_sync(state, comm, channels, lrs, T,
                                     config.optimizer, auto_cfg)
                if trace is not None:
                    trace["post_sync"][t] = state.params.flatten()
                if sync.record is not None and comm.rank == 0:
                    sync_records.append(sync.record)

            if sync_now or t % config.record_every == 0 or t == 1 or t == S:
                if sync_now:
                    clamped = (sync.interval_loss if math.isfinite(sync.interval_loss)
                               else LOSS_CAP)
                    controller_fields: dict[str, Any] = {
                        "sync": True, "interval_loss": clamped,
                        "weight": sync.weight, "controller": sync.controller,
                    }
                    if sync.record is not None:
                        controller_fields.update(
                            deltas=tuple(
                                math.nan if c.delta is None else c.delta
                                for c in sync.record.channels),
                            velocities=tuple(c.velocity for c in sync.record.channels),
                            bases=tuple(c.base_value for c in sync.record.channels),
                        )
                else:
                    controller_fields = {}
                records.append(StepRecord(step=t, rank=comm.rank,
                                          loss=outcome.recorded_loss,
                                          lrs=tuple(lrs), **controller_fields))
        return {
            "params": state.params,
            "records": records,
            "sync_records": sync_records,
            "nonfinite": nonfinite_first,
            "trace": trace,
        }

    outputs = group.run(worker)
    records = sorted(
        (row for out in outputs for row in out["records"]),
        key=lambda row: (row.step, row.rank),
    )
    sync_records = outputs[0]["sync_records"]

    trace = None
    if config.record_states:
        trace = {"shared_grad": outputs[0]["trace"]["shared_grad"],
                 "post_update": {}, "post_sync": {}, "channel_lrs": {}}
        for t in outputs[0]["trace"]["post_update"]:
            trace["post_update"][t] = np.stack(
                [out["trace"]["post_update"][t] for out in outputs])
            trace["channel_lrs"][t] = np.array(
                [out["trace"]["channel_lrs"][t] for out in outputs])
        for t in outputs[0]["trace"]["post_sync"]:
            trace["post_sync"][t] = np.stack(
                [out["trace"]["post_sync"][t] for out in outputs])

    return RunResult(
        params_by_rank=[out["params"] for out in outputs],
        records=records,
        sync_records=sync_records,
        call_counts=group.call_counts(),
        channel_names=channel_names_for(objective, config.lr_scope),
        nonfinite_first_step={r: outputs[r]["nonfinite"]
                              for r in range(config.world_size)},
        trace=trace,
    )


def reference_ddp_run(config: RunConfig) -> RunResult:
    """Single-trajectory data-parallel reference: one parameter copy, the
    gradient is the rank-ascending running mean over the same per-rank
    batches, the learning rate is the plain one-cycle curve.

    Used to check that the ensemble loop with alpha = 0, controller off and
    zero warm noise reproduces plain data-parallel training bit for bit.
    """
    if config.ensemble is not None and (
            config.ensemble.alpha != 0.0 or config.ensemble.auto_lr is not None):
        raise ConfigError(
            "the reference loop models plain data-parallel training; "
            "it accepts no spread and no controller"
        )
    if config.warm_init is not None and config.warm_init.nu != 0.0:
        raise ConfigError("the reference loop needs nu = 0 warm init")
    objective, _, _ = validate_config(config)
    if config.warm_init is not None:
        params = config.warm_init.checkpoint.copy()
    else:
        params = objective.init_params(config.global_seed)

    n_groups = len(objective.group_sizes)
    slices = _group_slices(params)
    n_channels = len(channel_names_for(objective, config.lr_scope))
    moments: tuple[np.ndarray, np.ndarray] | None = None
    opt = config.optimizer
    records: list[StepRecord] = []

    for t in range(1, config.total_steps + 1):
        per_rank = []
        for r in range(config.world_size):
            batch = sample_batch(config.global_seed, r, t)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, flat = objective.loss_and_flat_grad(params, batch)
            except OverflowError:
                loss, flat = float("nan"), np.zeros(params.total_dim)
            if not (math.isfinite(loss) and np.isfinite(flat).all()):
                flat = np.zeros(params.total_dim)
            per_rank.append((loss, flat))
        shared = mean_reduce([flat for _, flat in per_rank])
        lr = one_cycle_lr(t, config.cycle)

        if opt.kind == "adam":
            if moments is None:
                moments = (np.zeros_like(shared), np.zeros_like(shared))
            m, v = moments
            m += (1.0 - opt.beta1) * (shared - m)
            v += (1.0 - opt.beta2) * (shared * shared - v)
            direction = (m / (1.0 - opt.beta1 ** t)) / (
                np.sqrt(v / (1.0 - opt.beta2 ** t)) + opt.eps)
        else:
            direction = shared
        for name, sl in slices:
            params[name] -= lr * direction[sl]

        for r, (loss, _) in enumerate(per_rank):
            recorded = float(loss) if math.isfinite(loss) else LOSS_CAP
            records.append(StepRecord(step=t, rank=r, loss=recorded,
                                      lrs=(lr,) * n_channels))

    return RunResult(
        params_by_rank=[params],
        records=records,
        sync_records=[],
        call_counts={},
        channel_names=channel_names_for(objective, config.lr_scope),
        nonfinite_first_step={0: None},
        trace=None,
    )
