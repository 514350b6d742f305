import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import daly_decimal, xor_all
from rmaft.checkpointing import (CKPT_LOCK, CheckpointGroup, CheckpointStore, DalyGate,
                                 coordinated_checkpoint_gsync, coordinated_checkpoint_locks,
                                 daly_interval, demand_checkpoint, payload_from_bytes,
                                 payload_to_bytes, rma_consistency_check, select_victim,
                                 xor_recover, xor_update)
from rmaft.errors import CatastrophicFailure, CrashedProcessError, ProtocolError, WouldBlock
from rmaft.ftlog import FtLog
from rmaft.machine import Machine
from rmaft.scheduler import SimConfig, Simulation


def _machine(n=4, size=4):
    log = FtLog(n)
    m = Machine(n, size, log=log)
    return m, CheckpointStore(m)


def _gsync_all(m):
    for p in range(m.n):
        m.gsync(p)


def test_gsync_checkpoint_is_consistent():
    m, store = _machine()
    m.put(0, 1, 0, 1)
    m.get(2, 3, 0)
    _gsync_all(m)
    cks = coordinated_checkpoint_gsync(store)
    assert len(cks) == 4
    assert rma_consistency_check(cks, m.graph) is None


def test_gsync_checkpoint_off_a_gsync_point_is_rejected():
    m, store = _machine()
    with pytest.raises(ProtocolError):
        coordinated_checkpoint_gsync(store)
    _gsync_all(m)
    m.put(0, 1, 0, 1)
    with pytest.raises(ProtocolError):
        coordinated_checkpoint_gsync(store)


def test_capture_between_put_and_flush_is_rejected():
    m, store = _machine()
    m.put(0, 1, 0, 1)
    with pytest.raises(ProtocolError):
        store.capture(0, "demand")
    m.flush(0, 1)
    assert store.capture(0, "demand").payload == [0, 0, 0, 0]


def test_daly_gate_skips_early_gsync_points():
    gate = DalyGate(mtbf=200.0)
    interval = daly_interval(1.0, 200.0)
    assert not gate.due(int(interval) - 1)
    assert gate.due(int(interval) + 1)
    gate.taken(100, 5)
    assert gate.delta == 5 and not gate.due(101)


def test_daly_gating_in_simulation():
    progs = [[("put", 1 - p, 0, 1, False, False), ("gsync",)] * 5 for p in range(2)]
    every = Simulation(2, 2, progs, 0, SimConfig(daly=None)).run()
    gated = Simulation(2, 2, progs, 0, SimConfig(daly=DalyGate(1e9))).run()
    assert every.store.coordinated_count == 6
    assert gated.store.coordinated_count == 1


def test_locks_checkpoint_rejects_held_locks():
    m, store = _machine()
    m.lock(0, 1)
    with pytest.raises(ProtocolError):
        coordinated_checkpoint_locks(store)
    m.put(0, 1, 0, 3)
    m.unlock(0, 1)
    cks = coordinated_checkpoint_locks(store)
    assert rma_consistency_check(cks, m.graph) is None
    assert cks[1].payload[0] == 3


def test_locks_checkpoint_deferred_until_unlock():
    progs = [[("lock", 1, None), ("put", 1, 0, 7, False, False), ("ckpt",), ("unlock", 1, None)],
             [("ckpt",)]]
    sim = Simulation(2, 2, progs, 3).run()
    kinds = [ev.kind for ev in sim.machine.graph.events if ev.proc == 0]
    assert kinds.index("UNLOCK") < kinds.index("CKPT", 1)
    assert sim.store.coordinated_count == 2
    assert sim.consistency_failures == 0
    assert sim.store.latest[1].payload[0] == 7


def test_consistency_counterexample():
    # C_p precedes a put that p then publishes through a lock q acquires
    # before C_q: the two checkpoints are cohb-ordered
    m, store = _machine(2)
    cp = store.capture(0, "demand")
    m.lock(0, 1)
    m.put(0, 1, 0, 9)
    m.unlock(0, 1)
    m.lock(1, 1)
    m.unlock(1, 1)
    cq = store.capture(1, "demand")
    v = rma_consistency_check({0: cp, 1: cq}, m.graph)
    assert v is not None and (v.first, v.second) == (0, 1)


def test_barrier_set_is_consistent_and_single_process_trivially():
    m, store = _machine(1)
    assert rma_consistency_check({0: store.capture(0, "x")}, m.graph) is None
    with pytest.raises(ValueError):
        rma_consistency_check([store.capture(0, "x"), store.capture(0, "x")], m.graph)


def test_demand_checkpoint_fires_past_budget():
    ops = []
    for i in range(11):
        ops += [("put", 1, i % 4, i + 1, False, False), ("flush", 1)]
    sim = Simulation(2, 4, [ops, []], 0, SimConfig(log_budget=10, daly=None))
    sim.run()
    assert sim.store.demand_count == 1
    assert sim.log.stored_at(0) <= 10


def test_confirmation_matches_victim_counters():
    m, store = _machine(3)
    for i in range(3):
        m.put(0, 1, i, i)
        m.flush(0, 1)
    m.get(1, 2, 0, blocking=True)
    assert select_victim(m.log, 0) == 1
    ck, conf, trimmed = demand_checkpoint(store, 0)
    # three puts held by 0 plus the get logged at 2
    assert ck.owner == 1 and trimmed == 4
    assert not m.log.lp[0][1] and not m.log.lg[2][1]
    assert conf.e == m.epoch[0][1] == 3
    assert conf.e_get == m.epoch[1][0]
    assert conf.gc == m.procs[1].gc
    assert conf.gnc is None and conf.sc is None
    assert store.demand_count == 1


def test_racing_demand_checkpoints_serialize():
    m, store = _machine(3)
    m.put(0, 2, 0, 1)
    m.put(1, 2, 0, 2)
    m.locks[(2, CKPT_LOCK)] = 0  # requester 0 is mid-checkpoint
    with pytest.raises(WouldBlock):
        demand_checkpoint(store, 1, 2)
    del m.locks[(2, CKPT_LOCK)]
    demand_checkpoint(store, 1, 2)
    assert (2, CKPT_LOCK) not in m.locks


def test_demand_checkpoint_of_crashed_victim_fails():
    m, store = _machine(3)
    m.put(0, 1, 0, 1)
    m.crash(1)
    with pytest.raises(CrashedProcessError):
        demand_checkpoint(store, 0, 1)
    assert len(m.log.lp[0][1]) == 1


def test_xor_examples():
    g = CheckpointGroup.empty([0, 1], 2, 1)
    xor_update(g, 0, [0], [0x0F])
    xor_update(g, 1, [0], [0xF0])
    assert g.parity == [0xFF]
    g.lose(0)
    assert xor_recover(g, 0) == [0x0F]
    single = CheckpointGroup.empty([5], 6, 2)
    xor_update(single, 5, [0, 0], [3, -4])
    assert single.parity == [3, -4]


def test_xor_two_losses_is_catastrophic():
    g = CheckpointGroup.empty([0, 1, 2], 3, 1)
    g.lose(0)
    g.lose(1)
    with pytest.raises(CatastrophicFailure):
        xor_recover(g, 0)


def test_xor_random_payloads_every_member():
    rng = random.Random(7)
    for size in (2, 5):
        payloads = [[rng.getrandbits(64) - (1 << 63) for _ in range(64)] for _ in range(size)]
        g = CheckpointGroup.empty(range(size), size, 64)
        for i, pl in enumerate(payloads):
            xor_update(g, i, [0] * 64, pl)
        assert g.parity == xor_all(payloads)
        for i in range(size):
            saved = g.payloads.pop(i)
            assert xor_recover(g, i) == payloads[i]
            g.payloads[i] = saved


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.lists(st.integers(-(1 << 63), (1 << 63) - 1),
                                                       min_size=4, max_size=4)), max_size=20))
def test_parity_tracks_shadow_copy(updates):
    g = CheckpointGroup.empty(range(4), 4, 4)
    shadow = {i: [0] * 4 for i in range(4)}
    for member, new in updates:
        xor_update(g, member, shadow[member], new)
        shadow[member] = new
    assert g.parity == xor_all(list(shadow.values()))


def test_payload_bytes_roundtrip():
    pl = [0, -1, 1 << 40, -(1 << 63)]
    data = payload_to_bytes(pl)
    assert data[:8] == b"\0" * 8 and len(data) == 32
    assert payload_from_bytes(data) == pl
    with pytest.raises(ValueError):
        payload_from_bytes(b"abc")


def test_daly_examples():
    assert daly_interval(2, 1) == 1
    assert daly_interval(400, 200) == 200
    assert abs(daly_interval(1, 200) - 19.33889) < 1e-5
    assert abs(daly_interval(1, 200) - float(daly_decimal(1, 200))) < 1e-12
    assert 0 < daly_interval(1e-12, 200) < 1e-4
    with pytest.raises(ValueError):
        daly_interval(0, 1)
    with pytest.raises(ValueError):
        daly_interval(1, -1)


@given(st.floats(1e-6, 1e6), st.floats(1e-6, 1e6))
def test_daly_matches_decimal_oracle(delta, mtbf):
    got = daly_interval(delta, mtbf)
    want = float(daly_decimal(delta, mtbf))
    assert got == pytest.approx(want, rel=1e-9, abs=1e-9 * mtbf)
