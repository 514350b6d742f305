import io
import json

import pytest

from rmaft.checkpointing import CheckpointStore, capture_all, coordinated_checkpoint_gsync
from rmaft.errors import CatastrophicFailure, ProtocolError
from rmaft.ftlog import FtLog
from rmaft.machine import GET, PUT, Action, Machine
from rmaft.recovery import (RecoveryPlan, fallback_rollback, order_gsync, order_locks,
                            recover_gsync, recover_locks)


def _act(kind, src, trg, ec=0, gnc=0, gc=0, sc=0, seq=0):
    return Action(kind, src, trg, False, ec, gc, sc, gnc, cell=0, value=0, seq=seq)


NAMES = {}


def _named(name, kind=PUT, src=1, trg=0, **kw):
    a = _act(kind, src, trg, **kw)
    NAMES[id(a)] = name
    return a


def _names(trace):
    return [NAMES[id(a)] for a in trace]


def _setup(n=3, size=4, **kw):
    log = FtLog(n, **kw)
    m = Machine(n, size, log=log)
    store = CheckpointStore(m)
    capture_all(store)
    return m, store


def test_alg2_example_order():
    a = _named("a", gnc=1, ec=1)
    b = _named("b", gnc=1, ec=2)
    c = _named("c", gnc=2, ec=1)
    assert _names(order_gsync([c, b, a], [])) == ["a", "b", "c"]


def test_alg2_puts_before_gets_and_all_strata_drain():
    p1 = _named("p1", gnc=0, ec=0)
    p2 = _named("p2", gnc=0, ec=1)
    g1 = _named("g1", kind=GET, src=0, trg=1, gnc=0, gc=0)
    g2 = _named("g2", kind=GET, src=0, trg=1, gnc=0, gc=3)
    late = _named("late", gnc=4, ec=0)
    got = _names(order_gsync([late, p2, p1], [g2, g1]))
    assert got == ["p1", "g1", "p2", "g2", "late"]


def test_alg3_example_order():
    a = _named("a", sc=1, ec=1)
    b = _named("b", sc=1, ec=2)
    c = _named("c", sc=2, ec=1)
    assert _names(order_locks([c, a, b])) == ["a", "b", "c"]


def test_ties_break_by_peer_then_seq():
    x = _named("x", src=2, seq=1)
    y = _named("y", src=1, seq=5)
    z = _named("z", src=1, seq=2)
    assert _names(order_locks([x, y, z])) == ["z", "y", "x"]


def test_m_flag_forces_fallback_without_replay():
    m, store = _setup()
    m.put(1, 0, 0, 5, combine=True)
    m.flush(1, 0)
    m.crash(0)
    store.lose(0)
    plan = recover_gsync(m, store, 0)
    assert plan.fallback and "M flag" in plan.reason
    assert plan.replay_trace == [] and plan.exactly_once()
    assert not m.procs[0].crashed
    assert m.memory()[0] == [0, 0, 0, 0]


def test_n_flag_forces_fallback_in_gsync_scheme():
    m, store = _setup()
    m.get(0, 1, 0)
    m.crash(0)
    store.lose(0)
    plan = recover_gsync(m, store, 0, rollback=False)
    assert plan.fallback and "N flag" in plan.reason


def test_empty_logs_restore_checkpoint_only():
    m, store = _setup()
    m.procs[0].cells[:] = [1, 2, 3, 4]
    store.capture(0, "demand")
    m.crash(0)
    store.lose(0)
    plan = recover_gsync(m, store, 0)
    assert not plan.fallback and plan.fetched == 0
    assert m.memory()[0] == [1, 2, 3, 4]


def test_gsync_recovery_restores_pre_crash_memory():
    m, store = _setup(4)
    m.put(1, 0, 0, 11)
    m.put(2, 0, 1, 22)
    m.procs[3].cells[2] = 8
    m.procs[2].cells[3] = 9
    m.get(0, 3, 2)
    for p in range(4):
        m.gsync(p)
    m.put(1, 0, 2, 33)
    m.flush(1, 0)
    m.get(0, 2, 3, blocking=True)
    before = m.memory()
    m.crash(0)
    store.lose(0)
    plan = recover_gsync(m, store, 0)
    assert not plan.fallback
    assert plan.fetched == 5 and plan.exactly_once() and plan.order_preserved()
    assert m.memory() == before
    assert before[0] == [11, 22, 33, 9]


def test_lock_ordered_puts_from_two_peers():
    m, store = _setup()
    m.lock(1, 0)
    m.put(1, 0, 0, 10)
    m.unlock(1, 0)
    m.lock(2, 0)
    m.put(2, 0, 0, 20)
    m.unlock(2, 0)
    m.lock(1, 0)
    m.put(1, 0, 0, 30)
    m.unlock(1, 0)
    m.crash(0)
    store.lose(0)
    plan = recover_locks(m, store, 0)
    assert [a.value for a in plan.replay_trace] == [10, 20, 30]
    assert plan.order_preserved()
    assert m.memory()[0][0] == 30


def test_single_epoch_replay_any_order():
    m, store = _setup(2)
    for i in range(4):
        m.put(1, 0, i, i + 5)
    m.flush(1, 0)
    m.crash(0)
    store.lose(0)
    plan = recover_locks(m, store, 0)
    trace = list(plan.replay_trace)
    assert m.memory()[0] == [5, 6, 7, 8]
    cells = [0] * 4
    for a in reversed(trace):
        cells[a.cell] = a.value
    assert cells == [5, 6, 7, 8]


def test_open_epoch_entries_are_not_replayed():
    m, store = _setup(2)
    m.put(1, 0, 0, 5)
    m.crash(0)
    store.lose(0)
    plan = recover_gsync(m, store, 0)
    assert plan.fetched == 0
    m.flush(1, 0)
    assert m.memory()[0][0] == 5


def test_crashed_peer_forces_fallback():
    m, store = _setup(4)
    m.crash(1)
    m.crash(0)
    plan = recover_gsync(m, store, 0, rollback=False)
    assert plan.fallback and "peer 1" in plan.reason


def test_recovering_a_live_process_is_an_error():
    m, store = _setup()
    with pytest.raises(ProtocolError):
        recover_gsync(m, store, 0)


def test_fallback_restores_gsync_counters():
    m, store = _setup(2)
    for _ in range(5):
        m.put(0, 1, 0, 1, combine=True)
        m.gsync(0)
        m.gsync(1)
    coordinated_checkpoint_gsync(store)
    for _ in range(2):
        m.put(0, 1, 1, 7)
        m.gsync(0)
        m.gsync(1)
    assert any(m.log.lp[0][1])
    fallback_rollback(m, store)
    assert [st.gnc for st in m.procs] == [5, 5]
    assert m.memory()[1] == [5, 0, 0, 0]
    assert not any(m.log.lp[0][1]) and m.log.stored_at(0) == 0
    snap = (m.memory(), [m.counters(p) for p in range(2)])
    fallback_rollback(m, store)
    assert (m.memory(), [m.counters(p) for p in range(2)]) == snap


def test_fallback_without_coordinated_checkpoint():
    m = Machine(2, 2, log=FtLog(2))
    with pytest.raises(CatastrophicFailure):
        fallback_rollback(m, CheckpointStore(m))


def test_orphan_with_optimistic_logging_falls_back():
    # p=0 puts x at q=1; q reads x and puts it on to r=2; q crashes while
    # p's log entry is still deferred
    m, store = _setup(3, optimistic=True)
    m.put(0, 1, 0, 42)
    m.flush(0, 1)
    x = m.local_read(1, 0)
    if x:
        m.put(1, 2, 0, x)
        m.flush(1, 2)
    assert not m.log.lp[0][1]
    m.crash(1)
    store.lose(1)
    plan = recover_gsync(m, store, 1)
    assert plan.fallback and "M flag" in plan.reason


def test_orphan_without_optimism_replays_the_read_value():
    m, store = _setup(3)
    m.put(0, 1, 0, 42)
    m.flush(0, 1)
    m.put(1, 2, 0, m.local_read(1, 0))
    m.flush(1, 2)
    m.crash(1)
    store.lose(1)
    plan = recover_gsync(m, store, 1)
    assert not plan.fallback
    assert m.memory()[1][0] == 42 and m.memory()[2][0] == 42


def test_replay_trace_dump():
    plan = RecoveryPlan(0, 0, "gsync", put_logs=[_act(PUT, 1, 0)])
    plan.replay_trace = list(plan.put_logs)
    buf = io.StringIO()
    plan.dump(buf)
    row = json.loads(buf.getvalue())
    assert row["step"] == 0 and row["failed"] == 0 and row["type"] == "PUT"


def test_plan_checks_detect_duplicates_and_disorder():
    a = _act(PUT, 1, 0, ec=2, seq=1)
    b = _act(PUT, 1, 0, ec=1, seq=2)
    plan = RecoveryPlan(0, 0, "gsync", put_logs=[a, b])
    plan.replay_trace = [a, b]
    assert plan.exactly_once() and not plan.order_preserved()
    plan.replay_trace = [b, a, a]
    assert not plan.exactly_once()
