"""Deterministic in-process collectives over simulated ranks.

This module provides the communication substrate for the multi-replica
training engine: a group of N logical ranks that exchange data through
blocking, lockstep collectives (mean all-reduce, scalar all-gather,
barrier).  There is no real transport; ranks live in one Python process
and meet at a shared rendezvous structure.

Two execution modes drive the same worker code:

* ``threaded``   -- one OS thread per rank, meeting at a generation-counted
  rendezvous with a bounded wait.
* ``sequential`` -- a single-threaded greenlet scheduler that resumes ranks
  round-robin between collective boundaries.

Both modes funnel every reduction through one combine kernel that walks
ranks in ascending index order, so results are bit-identical across modes
and across arrival orders.  The mean is accumulated as a running mean; a
useful consequence is that reducing N bit-identical vectors returns those
bits unchanged, which keeps replica averaging exact when replicas agree.

Every rank must issue the same sequence of collective calls.  Each call
carries a monotonically increasing tag; ranks that disagree on tag, kind,
or payload length trip a fault, as does a rank that returns from its
worker while peers are still parked at a collective.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "CollectiveCall",
    "CollectiveFault",
    "DeadlockDetected",
    "LockstepViolation",
    "ProtocolViolation",
    "RankComm",
    "RankGroup",
    "REDUCE_MEAN",
    "GATHER",
    "BARRIER",
]

REDUCE_MEAN = "reduce_mean"
GATHER = "gather"
BARRIER = "barrier"

_EXECUTION_MODES = ("threaded", "sequential")


class CollectiveFault(RuntimeError):
    """Base class for failures of the lockstep collective protocol."""


class ProtocolViolation(CollectiveFault):
    """Ranks disagreed on payload shape for the same collective call."""


class LockstepViolation(CollectiveFault):
    """Ranks issued different call sequences (tag/kind mismatch, or a rank
    exited while a collective was still pending)."""


class DeadlockDetected(CollectiveFault):
    """A rank waited longer than the bounded-wait budget at a rendezvous."""


@dataclass(frozen=True)
class CollectiveCall:
    """Ledger entry for one completed collective."""

    tag: int
    kind: str
    payload_len: int
    label: str = ""


@dataclass(frozen=True)
class _Stamp:
    # What each rank claims it is doing this call; all N must agree.
    tag: int
    kind: str
    payload_len: int
    label: str

    def describe(self) -> str:
        return f"tag={self.tag} kind={self.kind} len={self.payload_len} label={self.label!r}"


def _check_stamps(reference: _Stamp, other: _Stamp, rank: int) -> None:
    if (reference.tag, reference.kind, reference.label) != (other.tag, other.kind, other.label):
        raise LockstepViolation(
            f"rank {rank} issued {other.describe()} while peers issued {reference.describe()}"
        )
    if reference.payload_len != other.payload_len:
        raise ProtocolViolation(
            f"payload length mismatch on tag {reference.tag}: rank {rank} sent "
            f"{other.payload_len}, peers sent {reference.payload_len}"
        )


def mean_reduce(slots: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise mean over per-rank vectors, walking ranks in ascending order.

    Running mean updated one rank at a time by a single designated
    accumulator: the result is independent of arrival order and exact when
    all inputs are bit-identical.  Any loop that must agree with the group
    reduction bit for bit (e.g. a single-trajectory reference run) should
    call this instead of ``np.mean``.
    """
    acc = np.array(slots[0], dtype=np.float64, copy=True)
    for i in range(1, len(slots)):
        acc += (slots[i] - acc) / (i + 1)
    return acc


def _combine(kind: str, slots: Sequence[Any]) -> Any:
    """Combine deposited payloads for one completed collective."""
    if kind == REDUCE_MEAN:
        return mean_reduce(slots)
    if kind == GATHER:
        return list(slots)
    if kind == BARRIER:
        return None
    raise ValueError(f"unknown collective kind: {kind!r}")


class RankComm:
    """Per-rank handle used inside worker functions.

    Collectives block until every rank in the group has arrived with a
    matching call, then return the shared result (a private copy per rank
    for array payloads, so ranks can never alias each other's buffers).
    """

    def __init__(self, rank: int, world_size: int, endpoint: "_Endpoint") -> None:
        self.rank = rank
        self.world_size = world_size
        self._endpoint = endpoint
        self._next_tag = 0

    def _exchange(self, kind: str, payload: Any, payload_len: int, label: str) -> Any:
        stamp = _Stamp(self._next_tag, kind, payload_len, label)
        self._next_tag += 1
        return self._endpoint.exchange(self.rank, stamp, payload)

    def all_reduce_mean(self, vec: np.ndarray, label: str = "") -> np.ndarray:
        """Element-wise mean of one equal-length float vector per rank."""
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"all_reduce_mean expects a flat vector, got shape {arr.shape}")
        out = self._exchange(REDUCE_MEAN, arr, arr.shape[0], label)
        # Each rank gets its own buffer; the reduced bits are identical on all ranks.
        return out.copy()

    def all_gather_scalar(self, value: float, label: str = "") -> list:
        """Gather one scalar per rank; index r of the result holds rank r's value."""
        out = self._exchange(GATHER, value, 1, label)
        return list(out)

    def barrier(self, label: str = "") -> None:
        """Block until every rank reaches the same barrier call."""
        self._exchange(BARRIER, None, 0, label)


class _Endpoint:
    def exchange(self, rank: int, stamp: _Stamp, payload: Any) -> Any:
        raise NotImplementedError


class _ThreadRendezvous(_Endpoint):
    """Generation-counted rendezvous shared by all rank threads.

    Each collective occupies one generation: ranks deposit payloads under
    the current generation, the last arriver combines them (ascending rank
    order) and advances the generation, waking the waiters.  Waits are
    bounded; a timeout or a mismatched stamp poisons the group so every
    rank observes the same fault.
    """

    def __init__(self, group: "RankGroup", timeout_s: float) -> None:
        self._group = group
        self._world = group.world_size
        self._timeout = timeout_s
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._generation = 0
        self._slots: list = [None] * self._world
        self._arrived: set[int] = set()
        self._stamp: _Stamp | None = None
        self._results: dict[int, list] = {}  # generation -> [result, reads remaining]
        self._exited: set[int] = set()
        self._fault: BaseException | None = None

    def _poison(self, exc: BaseException) -> BaseException:
        # First fault wins; later ranks re-raise the same exception object.
        if self._fault is None:
            self._fault = exc
        self._cond.notify_all()
        return self._fault

    def mark_exited(self, rank: int) -> None:
        with self._cond:
            self._exited.add(rank)
            self._cond.notify_all()

    def exchange(self, rank: int, stamp: _Stamp, payload: Any) -> Any:
        with self._cond:
            if self._fault is not None:
                raise self._fault
            gen = self._generation
            if not self._arrived:
                self._stamp = stamp
            else:
                try:
                    _check_stamps(self._stamp, stamp, rank)
                except CollectiveFault as exc:
                    raise self._poison(exc)
            self._slots[rank] = payload
            self._arrived.add(rank)
            if len(self._arrived) == self._world:
                result = _combine(stamp.kind, self._slots)
                self._group._log_call(stamp)
                self._results[gen] = [result, self._world]
                self._slots = [None] * self._world
                self._arrived = set()
                self._stamp = None
                self._generation = gen + 1
                self._cond.notify_all()
            else:
                def ready() -> bool:
                    return (
                        self._generation > gen
                        or self._fault is not None
                        or bool(self._exited - self._arrived)
                    )

                while not ready():
                    if not self._cond.wait(timeout=self._timeout):
                        raise self._poison(
                            DeadlockDetected(
                                f"rank {rank} waited over {self._timeout}s at "
                                f"{stamp.describe()}; peers never arrived"
                            )
                        )
                if self._fault is not None:
                    raise self._fault
                if self._generation == gen:
                    missing = sorted(self._exited - self._arrived)
                    raise self._poison(
                        LockstepViolation(
                            f"rank(s) {missing} finished while {stamp.describe()} was pending"
                        )
                    )
            entry = self._results[gen]
            entry[1] -= 1
            if entry[1] == 0:
                del self._results[gen]
            return entry[0]


class _SequentialScheduler(_Endpoint):
    """Single-threaded round-robin driver built on greenlets.

    Each rank runs as a greenlet.  The hub resumes ranks in ascending
    order; a rank runs until it parks at a collective (or finishes), so
    execution proceeds round-robin between collective boundaries.  Once
    every live rank is parked, stamps are checked and the shared combine
    kernel produces the result delivered back to each rank in turn.
    """

    _POST = "post"
    _DONE = "done"

    def __init__(self, group: "RankGroup") -> None:
        self._group = group
        self._world = group.world_size
        self._hub = None

    def exchange(self, rank: int, stamp: _Stamp, payload: Any) -> Any:
        # Park this rank: hand (stamp, payload) to the hub, resume on delivery.
        return self._hub.switch((self._POST, rank, stamp, payload))

    def run(self, worker: Callable[[RankComm], Any]) -> list:
        import greenlet

        self._hub = greenlet.getcurrent()
        comms = [RankComm(r, self._world, self) for r in range(self._world)]

        def make_runner(comm: RankComm):
            def runner(_first: Any) -> tuple:
                return (self._DONE, comm.rank, worker(comm), None)

            return runner

        glets = [greenlet.greenlet(make_runner(c)) for c in comms]
        results: list = [None] * self._world
        done: list[bool] = [False] * self._world
        parked: dict[int, tuple[_Stamp, Any]] = {}
        deliver: dict[int, Any] = {}

        try:
            while not all(done):
                for rank in range(self._world):
                    if done[rank] or rank in parked:
                        continue
                    out = glets[rank].switch(deliver.pop(rank, None))
                    if out[0] == self._DONE:
                        results[rank] = out[2]
                        done[rank] = True
                    else:
                        _, r, stamp, payload = out
                        parked[r] = (stamp, payload)
                if not parked:
                    continue
                if any(done):
                    finished = sorted(r for r in range(self._world) if done[r])
                    pending = parked[min(parked)][0]
                    raise LockstepViolation(
                        f"rank(s) {finished} finished while {pending.describe()} was pending"
                    )
                # All ranks are parked at the same boundary: validate and combine.
                reference = parked[0][0]
                for rank in range(1, self._world):
                    _check_stamps(reference, parked[rank][0], rank)
                slots = [parked[r][1] for r in range(self._world)]
                result = _combine(reference.kind, slots)
                self._group._log_call(reference)
                for rank in range(self._world):
                    deliver[rank] = result
                parked.clear()
        finally:
            for g in glets:
                if not g.dead:
                    g.throw(greenlet.GreenletExit)
        return results


class RankGroup:
    """A fixed-size group of simulated ranks driven in lockstep.

    Parameters
    ----------
    world_size:
        Number of logical ranks, N >= 1.
    execution_mode:
        ``"threaded"`` or ``"sequential"``.  Both produce bit-identical
        collective results for the same worker.
    timeout_s:
        Bounded wait for the threaded rendezvous; exceeded waits raise
        :class:`DeadlockDetected` on every rank.
    """

    def __init__(self, world_size: int, execution_mode: str = "sequential",
                 timeout_s: float = 30.0) -> None:
        if world_size < 1:
            raise ValueError(f"world_size must be >= 1, got {world_size}")
        if execution_mode not in _EXECUTION_MODES:
            raise ValueError(
                f"execution_mode must be one of {_EXECUTION_MODES}, got {execution_mode!r}"
            )
        self.world_size = world_size
        self.execution_mode = execution_mode
        self.timeout_s = timeout_s
        self.call_log: list[CollectiveCall] = []
        self._log_lock = threading.Lock()

    def _log_call(self, stamp: _Stamp) -> None:
        with self._log_lock:
            self.call_log.append(
                CollectiveCall(stamp.tag, stamp.kind, stamp.payload_len, stamp.label)
            )

    def call_counts(self) -> dict[tuple[str, str], int]:
        """Completed-collective counts keyed by (kind, label)."""
        counts: dict[tuple[str, str], int] = {}
        for call in self.call_log:
            key = (call.kind, call.label)
            counts[key] = counts.get(key, 0) + 1
        return counts

    def run(self, worker: Callable[[RankComm], Any]) -> list:
        """Run ``worker(comm)`` once per rank; return per-rank results in rank order.

        In threaded mode worker exceptions poison the rendezvous so peer
        ranks do not hang; the original exception is re-raised here.
        """
        if self.execution_mode == "sequential":
            return _SequentialScheduler(self).run(worker)
        return self._run_threaded(worker)

    def _run_threaded(self, worker: Callable[[RankComm], Any]) -> list:
        rendezvous = _ThreadRendezvous(self, self.timeout_s)
        results: list = [None] * self.world_size
        errors: list[BaseException | None] = [None] * self.world_size

        def target(rank: int) -> None:
            comm = RankComm(rank, self.world_size, rendezvous)
            try:
                results[rank] = worker(comm)
            except BaseException as exc:  # noqa: BLE001 - propagated to the caller
                errors[rank] = exc
                with rendezvous._cond:
                    rendezvous._poison(exc)
            finally:
                rendezvous.mark_exited(rank)

        threads = [
            threading.Thread(target=target, args=(r,), name=f"rank-{r}", daemon=True)
            for r in range(self.world_size)
        ]
        for t in threads:
            t.start()
        # Once the rendezvous is poisoned, give stragglers a grace period and
        # abandon them (daemon threads) so a hung rank cannot hang the caller.
        for t in threads:
            while t.is_alive():
                t.join(timeout=0.2)
                if t.is_alive() and rendezvous._fault is not None:
                    t.join(timeout=self.timeout_s + 5.0)
                    break
        for exc in errors:
            if exc is not None:
                raise exc
        return results
