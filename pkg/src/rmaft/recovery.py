"""Causal recovery of a crashed process from its checkpoint plus the logs
its peers hold, with fallback to the last coordinated checkpoint."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .checkpointing import CheckpointStore, xor_recover
from .errors import CatastrophicFailure, ProtocolError
from .ftlog import LG_LOCK, LP_LOCK
from .machine import PUT, Action, Machine, to_word


@dataclass
class RecoveryPlan:
    failed: int
    replacement: int
    scheme: str
    put_logs: list[Action] = field(default_factory=list)
    get_logs: list[Action] = field(default_factory=list)
    fallback: bool = False
    reason: str = ""
    replay_trace: list[Action] = field(default_factory=list)

    @property
    def fetched(self) -> int:
        return len(self.put_logs) + len(self.get_logs)

    def exactly_once(self) -> bool:
        """Every fetched action replayed, none twice."""
        if self.fallback:
            return not self.replay_trace
        dets = [a.determinant for a in self.replay_trace]
        fetched = {a.determinant for a in self.put_logs} | {a.determinant for a in self.get_logs}
        return len(dets) == self.fetched and len(set(dets)) == len(dets) and set(dets) == fetched

    def order_preserved(self) -> bool:
        trace = self.replay_trace
        if self.scheme == "locks":
            return all(a.sc <= b.sc for a, b in zip(trace, trace[1:]))
        if any(a.gnc > b.gnc for a, b in zip(trace, trace[1:])):
            return False
        last = {}
        for a in trace:
            key = (a.gnc, a.type)
            c = a.ec if a.type == PUT else a.gc
            if key in last and last[key] > c:
                return False
            last[key] = c
        return True

    def dump(self, fp) -> None:
        for i, a in enumerate(self.replay_trace):
            fp.write(json.dumps({"step": i, "failed": self.failed, **a.to_json()},
                                sort_keys=True) + "\n")


def _min_batch(actions, key):
    lo = min(key(a) for a in actions)
    return [a for a in actions if key(a) == lo], [a for a in actions if key(a) != lo]


def _peer_order(a: Action):
    # ties inside a minimum batch: ascending peer id, then log order
    return (a.src if a.type == PUT else a.trg, a.seq)


def order_gsync(put_logs, get_logs) -> list[Action]:
    """Replay order of the gsync scheme: GNC strata, then min-EC puts / min-GC gets."""
    out = []
    logs = list(put_logs) + list(get_logs)
    while logs:
        stratum, logs = _min_batch(logs, lambda a: a.gnc)
        puts = [a for a in stratum if a.type == PUT]
        gets = [a for a in stratum if a.type != PUT]
        while puts or gets:
            if puts:
                batch, puts = _min_batch(puts, lambda a: a.ec)
                out.extend(sorted(batch, key=_peer_order))
            if gets:
                batch, gets = _min_batch(gets, lambda a: a.gc)
                out.extend(sorted(batch, key=_peer_order))
    return out


def order_locks(put_logs) -> list[Action]:
    """Replay order of the lock scheme: SC strata, then min EC."""
    out = []
    logs = list(put_logs)
    while logs:
        stratum, logs = _min_batch(logs, lambda a: a.sc)
        while stratum:
            batch, stratum = _min_batch(stratum, lambda a: a.ec)
            out.extend(sorted(batch, key=_peer_order))
    return out


def _replay(machine: Machine, p: int, a: Action) -> None:
    cells = machine.procs[p].cells
    if a.type == PUT:
        cells[a.cell] = to_word(cells[a.cell] + a.value) if a.combine else a.value
    elif a.local is not None:
        cells[a.local] = a.value


def _restore_checkpoint(machine: Machine, store: CheckpointStore, p_f: int) -> None:
    payload = xor_recover(store.group_of[p_f], p_f)
    machine.revive(p_f, payload)
    store.group_of[p_f].restore(p_f, payload)
    if store.coordinated is not None:
        for g in store.coordinated.groups:
            if p_f in g.members and p_f not in g.payloads:
                g.restore(p_f, xor_recover(g, p_f))


def _fetch(machine: Machine, p_f: int, plan: RecoveryPlan, with_gets: bool) -> None:
    log = machine.log
    for q in range(machine.n):
        if q == p_f:
            continue
        if machine.procs[q].crashed:
            plan.fallback, plan.reason = True, f"peer {q} is down; its logs are lost"
            return
        with log._struct_lock(p_f, q, LP_LOCK), log._struct_lock(p_f, q, LG_LOCK):
            if with_gets and log.n_flag[q][p_f]:
                plan.fallback, plan.reason = True, f"N flag set at {q}"
                return
            if log.m_flag[q][p_f]:
                plan.fallback, plan.reason = True, f"M flag set at {q}"
                return
            if log.lost[q][p_f]:
                plan.fallback, plan.reason = True, f"logs at {q} lost in an earlier crash"
                return
            # entries of still-open epochs commit by themselves later
            plan.put_logs.extend(a for a in log.lp[q][p_f] if a.ec < machine.epoch[q][p_f])
            if with_gets:
                plan.get_logs.extend(log.lg[q][p_f])


def _recover(machine, store, p_f, scheme, rollback) -> RecoveryPlan:
    if not machine.procs[p_f].crashed:
        raise ProtocolError(f"process {p_f} has not crashed")
    if machine.log is None:
        raise ProtocolError("recovery needs a logging layer")
    plan = RecoveryPlan(p_f, p_f, scheme)
    _fetch(machine, p_f, plan, with_gets=scheme == "gsync")
    if plan.fallback:
        plan.put_logs, plan.get_logs = [], []
        if rollback:
            fallback_rollback(machine, store)
        return plan
    _restore_checkpoint(machine, store, p_f)
    if scheme == "gsync":
        plan.replay_trace = order_gsync(plan.put_logs, plan.get_logs)
    else:
        plan.replay_trace = order_locks(plan.put_logs)
    for a in plan.replay_trace:
        _replay(machine, p_f, a)
    # re-execution would log p_f's in-flight puts again
    for (src, _), acts in machine.pending.items():
        if src == p_f:
            for a in acts:
                if a.type == PUT:
                    machine.log.relog(a)
    machine.record_internal(p_f, "RECOVER")
    return plan


def recover_gsync(machine: Machine, store: CheckpointStore, p_f: int,
                  rollback: bool = True) -> RecoveryPlan:
    return _recover(machine, store, p_f, "gsync", rollback)


def recover_locks(machine: Machine, store: CheckpointStore, p_f: int,
                  rollback: bool = True) -> RecoveryPlan:
    return _recover(machine, store, p_f, "locks", rollback)


def fallback_rollback(machine: Machine, store: CheckpointStore) -> None:
    """Every process back to the last coordinated checkpoint; logs dropped."""
    cc = store.coordinated
    if cc is None:
        raise CatastrophicFailure("no coordinated checkpoint to fall back to")
    for g in cc.groups:
        for p in g.members:
            payload = g.payloads[p] if p in g.payloads else xor_recover(g, p)
            machine.revive(p, payload)
            g.restore(p, payload)
    for g_live, g_cc in zip(store.groups, cc.groups):
        g_live.parity = list(g_cc.parity)
        g_live.payloads = {k: list(v) for k, v in g_cc.payloads.items()}
        g_live.meta = dict(g_cc.meta)
    store.latest = dict(cc.checkpoints)
    machine.restore_state(cc.machine_state)
    if machine.log is not None:
        machine.log.clear()
