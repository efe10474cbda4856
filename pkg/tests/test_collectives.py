"""Tests for the deterministic in-process collectives."""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdet.collectives import (
    BARRIER,
    REDUCE_MEAN,
    DeadlockDetected,
    LockstepViolation,
    ProtocolViolation,
    RankGroup,
)


def run_both_modes(world_size, worker, **kwargs):
    out = {}
    for mode in ("sequential", "threaded"):
        group = RankGroup(world_size, execution_mode=mode, **kwargs)
        out[mode] = (group.run(worker), group)
    return out


# ---------------------------------------------------------------------------
# reduce_mean values


def test_reduce_mean_two_ranks_symmetric():
    def worker(comm):
        vec = np.array([1.0, 3.0]) if comm.rank == 0 else np.array([3.0, 1.0])
        return comm.all_reduce_mean(vec)

    for mode in ("sequential", "threaded"):
        group = RankGroup(2, execution_mode=mode)
        results = group.run(worker)
        for res in results:
            assert res.tolist() == [2.0, 2.0]


def test_reduce_mean_single_rank_identity():
    group = RankGroup(1)
    (res,) = group.run(lambda comm: comm.all_reduce_mean(np.array([5.5])))
    assert res.tolist() == [5.5]


def test_reduce_mean_four_ranks():
    # 0,1,2,3 -> 1.5; the running-mean accumulation is exact here.
    def worker(comm):
        return comm.all_reduce_mean(np.array([float(comm.rank)]))

    for results, _ in run_both_modes(4, worker).values():
        assert all(res.tolist() == [1.5] for res in results)


def test_reduce_mean_identical_inputs_bit_exact():
    # Averaging N bit-identical vectors must return exactly those bits.
    rng = np.random.default_rng(7)
    base = rng.standard_normal(257) * np.exp(rng.standard_normal(257) * 8)

    def worker(comm):
        return comm.all_reduce_mean(base.copy())

    for n in (2, 3, 5, 8):
        for results, _ in run_both_modes(n, worker).values():
            for res in results:
                np.testing.assert_array_equal(res, base)


def test_reduce_mean_matches_numpy():
    rng = np.random.default_rng(21)
    data = rng.standard_normal((6, 40))

    def worker(comm):
        return comm.all_reduce_mean(data[comm.rank])

    for results, _ in run_both_modes(6, worker).values():
        for res in results:
            np.testing.assert_allclose(res, data.mean(axis=0), rtol=1e-13, atol=0)


def test_reduce_result_buffers_are_private():
    def worker(comm):
        out = comm.all_reduce_mean(np.array([1.0, 2.0]))
        out[0] = float(comm.rank) + 100.0  # must not leak to peers
        return out

    results = RankGroup(3).run(worker)
    for rank, res in enumerate(results):
        assert res[0] == rank + 100.0
        assert res[1] == 2.0


# ---------------------------------------------------------------------------
# gather / barrier


def test_all_gather_scalar_order():
    def worker(comm):
        return comm.all_gather_scalar(float(comm.rank) * 10.0)

    for results, _ in run_both_modes(5, worker).values():
        for res in results:
            assert res == [0.0, 10.0, 20.0, 30.0, 40.0]


def test_barrier_releases_all_ranks():
    def worker(comm):
        comm.barrier()
        return comm.rank

    for results, _ in run_both_modes(8, worker).values():
        assert results == list(range(8))


def test_barrier_orders_effects_across_ranks():
    # Effects before a barrier are visible to every rank after it.
    log = []

    def worker(comm):
        log.append(("pre", comm.rank))
        comm.barrier()
        return len([e for e in log if e[0] == "pre"])

    results = RankGroup(4, execution_mode="threaded").run(worker)
    assert results == [4, 4, 4, 4]


# ---------------------------------------------------------------------------
# determinism between execution modes


def _mixed_workload(comm):
    rng = np.random.default_rng(1000 + comm.rank)
    acc = np.zeros(17)
    trace = []
    for _ in range(25):
        vec = rng.standard_normal(17) * 10.0 ** rng.integers(-6, 6)
        acc = comm.all_reduce_mean(acc + vec)
        trace.append(comm.all_gather_scalar(float(acc[0])))
        comm.barrier()
    return acc, trace


def test_threaded_and_sequential_bit_identical():
    by_mode = run_both_modes(7, _mixed_workload)
    seq_results, seq_group = by_mode["sequential"]
    thr_results, thr_group = by_mode["threaded"]
    for (seq_acc, seq_trace), (thr_acc, thr_trace) in zip(seq_results, thr_results):
        np.testing.assert_array_equal(seq_acc, thr_acc)
        assert seq_trace == thr_trace
    assert seq_group.call_log == thr_group.call_log


def test_threaded_result_independent_of_arrival_order():
    data = np.random.default_rng(3).standard_normal((4, 9))

    def slow_worker(comm):
        # Stagger arrivals; the reduction order is fixed by rank index anyway.
        time.sleep(0.02 * (comm.world_size - comm.rank))
        return comm.all_reduce_mean(data[comm.rank])

    def fast_worker(comm):
        return comm.all_reduce_mean(data[comm.rank])

    slow = RankGroup(4, execution_mode="threaded").run(slow_worker)
    fast = RankGroup(4, execution_mode="threaded").run(fast_worker)
    for a, b in zip(slow, fast):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=8),
    dim=st.integers(min_value=1, max_value=16),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_modes_agree_property(n, dim, seed):
    data = np.random.default_rng(seed).standard_normal((n, dim))

    def worker(comm):
        return comm.all_reduce_mean(data[comm.rank])

    seq = RankGroup(n, execution_mode="sequential").run(worker)
    thr = RankGroup(n, execution_mode="threaded").run(worker)
    for a, b in zip(seq, thr):
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a, data.mean(axis=0), rtol=1e-12, atol=1e-300)


# ---------------------------------------------------------------------------
# call ledger


def test_call_log_records_kinds_and_labels():
    def worker(comm):
        comm.all_reduce_mean(np.ones(3), label="grad")
        comm.all_reduce_mean(np.ones(3), label="params")
        comm.all_gather_scalar(1.0, label="loss")
        comm.barrier()
        return None

    group = RankGroup(2)
    group.run(worker)
    assert [c.kind for c in group.call_log] == [REDUCE_MEAN, REDUCE_MEAN, "gather", BARRIER]
    assert [c.tag for c in group.call_log] == [0, 1, 2, 3]
    assert group.call_counts()[(REDUCE_MEAN, "grad")] == 1
    assert group.call_counts()[(REDUCE_MEAN, "params")] == 1


# ---------------------------------------------------------------------------
# protocol faults


def test_mismatched_kind_is_lockstep_violation():
    def worker(comm):
        if comm.rank == 0:
            comm.barrier()
        else:
            comm.all_gather_scalar(1.0)

    for mode in ("sequential", "threaded"):
        with pytest.raises(LockstepViolation):
            RankGroup(2, execution_mode=mode, timeout_s=2.0).run(worker)


def test_tag_drift_is_lockstep_violation():
    def worker(comm):
        if comm.rank == 1:
            comm.barrier()  # extra call: tags drift by one
        comm.barrier()
        comm.all_gather_scalar(1.0)

    for mode in ("sequential", "threaded"):
        with pytest.raises(LockstepViolation):
            RankGroup(2, execution_mode=mode, timeout_s=2.0).run(worker)


def test_length_mismatch_is_protocol_violation():
    def worker(comm):
        return comm.all_reduce_mean(np.ones(3 if comm.rank == 0 else 4))

    for mode in ("sequential", "threaded"):
        with pytest.raises(ProtocolViolation):
            RankGroup(2, execution_mode=mode, timeout_s=2.0).run(worker)


def test_rank_exit_during_pending_collective_faults():
    def worker(comm):
        if comm.rank == 0:
            return None  # finishes without joining the barrier
        comm.barrier()

    for mode in ("sequential", "threaded"):
        with pytest.raises(LockstepViolation):
            RankGroup(3, execution_mode=mode, timeout_s=5.0).run(worker)


def test_bounded_wait_deadlock_detection():
    def worker(comm):
        if comm.rank == 1:
            time.sleep(1.0)  # never shows up within the wait budget
        comm.barrier()

    with pytest.raises(DeadlockDetected):
        RankGroup(2, execution_mode="threaded", timeout_s=0.2).run(worker)


def test_worker_exception_propagates_and_unblocks_peers():
    def worker(comm):
        if comm.rank == 2:
            raise ValueError("boom in worker")
        comm.barrier()

    for mode in ("sequential", "threaded"):
        with pytest.raises(ValueError, match="boom in worker"):
            RankGroup(3, execution_mode=mode, timeout_s=5.0).run(worker)


# ---------------------------------------------------------------------------
# construction guards


def test_world_size_must_be_positive():
    with pytest.raises(ValueError, match="world_size"):
        RankGroup(0)


def test_unknown_execution_mode_rejected():
    with pytest.raises(ValueError, match="execution_mode"):
        RankGroup(2, execution_mode="distributed")


def test_reduce_rejects_non_flat_payload():
    def worker(comm):
        return comm.all_reduce_mean(np.ones((2, 2)))

    with pytest.raises(ValueError, match="flat"):
        RankGroup(1).run(worker)
