"""In-memory checkpoints: coordinated (Gsync and Locks schemes), demand
checkpoints that trim logs, XOR checksum groups, and the Daly interval."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import CatastrophicFailure, CrashedProcessError, ProtocolError, WouldBlock
from .ftlog import CheckpointMeta
from .machine import Machine

CKPT_LOCK = "__CKPT__"


@dataclass
class Checkpoint:
    owner: int
    seq: int
    payload: list[int]
    meta: dict
    kind: str = "coordinated"
    event: int | None = None


def payload_to_bytes(payload) -> bytes:
    return struct.pack(f"<{len(payload)}q", *payload)


def payload_from_bytes(data: bytes) -> list[int]:
    if len(data) % 8:
        raise ValueError("payload length is not a multiple of 8 bytes")
    return list(struct.unpack(f"<{len(data) // 8}q", data))


# -- XOR checksum groups ------------------------------------------------------


@dataclass
class CheckpointGroup:
    members: list[int]
    checksum_holder: int
    parity: list[int]
    payloads: dict[int, list[int]] = field(default_factory=dict)
    meta: dict[int, dict] = field(default_factory=dict)

    @classmethod
    def empty(cls, members, holder, size):
        g = cls(list(members), holder, [0] * size)
        for m in members:
            g.payloads[m] = [0] * size
        return g

    def lose(self, member: int) -> None:
        """The member's local copy of its checkpoint went down with it."""
        self.payloads.pop(member, None)

    def restore(self, member: int, payload) -> None:
        self.payloads[member] = list(payload)


def xor_update(group: CheckpointGroup, member: int, old_payload, new_payload) -> None:
    if member not in group.members:
        raise KeyError(f"{member} is not in this group")
    group.parity = [p ^ o ^ n for p, o, n in zip(group.parity, old_payload, new_payload)]
    group.payloads[member] = list(new_payload)


def xor_recover(group: CheckpointGroup, lost: int) -> list[int]:
    missing = [m for m in group.members if m not in group.payloads]
    if lost in group.payloads:
        missing.append(lost)
    if len(set(missing)) > 1:
        raise CatastrophicFailure(f"group {group.members} lost {sorted(set(missing))}")
    out = list(group.parity)
    for m in group.members:
        if m != lost:
            out = [a ^ b for a, b in zip(out, group.payloads[m])]
    return out


def make_groups(n: int, g: int, size: int, first_holder: int | None = None) -> list[CheckpointGroup]:
    """Split processes 0..n-1 into ``g`` contiguous groups of n/g members."""
    if g < 1 or n % g:
        raise ValueError(f"{n} processes do not split into {g} equal groups")
    k = n // g
    base = n if first_holder is None else first_holder
    return [CheckpointGroup.empty(range(i * k, (i + 1) * k), base + i, size) for i in range(g)]


# -- the Daly interval ----------------------------------------------------------


def daly_interval(delta: float, mtbf: float) -> float:
    """Near-optimal time between coordinated checkpoints."""
    if delta <= 0 or mtbf <= 0:
        raise ValueError("checkpoint cost and MTBF must be positive")
    if delta >= 2 * mtbf:
        return mtbf
    r = delta / (2 * mtbf)
    return math.sqrt(2 * delta * mtbf) * (1 + math.sqrt(r) / 3 + r / 9) - delta


@dataclass
class DalyGate:
    """Decides which gsync points are followed by a coordinated checkpoint.

    Time is simulated: event counts scaled by ``seconds_per_event``.  The
    checkpoint cost is the event count of the previous checkpoint.
    """

    mtbf: float
    seconds_per_event: float = 1.0
    delta: float = 1.0
    last: float = 0.0

    def due(self, clock: int) -> bool:
        elapsed = clock * self.seconds_per_event - self.last
        return elapsed >= daly_interval(self.delta, self.mtbf)

    def taken(self, clock: int, cost_events: int) -> None:
        self.last = clock * self.seconds_per_event
        self.delta = max(cost_events, 1) * self.seconds_per_event


# -- the store ---------------------------------------------------------------


@dataclass
class CoordinatedSet:
    checkpoints: dict[int, Checkpoint]
    groups: list[CheckpointGroup]
    machine_state: dict
    control: object = None


class CheckpointStore:
    """Latest checkpoint of every process plus the last coordinated set."""

    def __init__(self, machine: Machine, groups: int = 1):
        self.machine = machine
        self.groups = make_groups(machine.n, groups, machine.window_size)
        self.group_of = {m: g for g in self.groups for m in g.members}
        self.latest: dict[int, Checkpoint] = {}
        self.coordinated: CoordinatedSet | None = None
        self.seq = [0] * machine.n
        self.demand_count = 0
        self.coordinated_count = 0

    def lose(self, p: int) -> None:
        self.group_of[p].lose(p)
        if self.coordinated is not None:
            for g in self.coordinated.groups:
                if p in g.members:
                    g.lose(p)

    def capture(self, p: int, kind: str) -> Checkpoint:
        m = self.machine
        if m.open_epochs(p):
            raise ProtocolError(f"process {p} has open epochs; checkpoint refused")
        st = m.procs[p]
        if st.crashed:
            raise CrashedProcessError(f"process {p} has crashed")
        self.seq[p] += 1
        meta = {"E": list(m.epoch[p]), "E_in": [m.epoch[r][p] for r in range(m.n)],
                "GNC": st.gnc, "GC": st.gc, "SC": st.sc}
        ev = m.record_internal(p, "CKPT")
        ck = Checkpoint(p, self.seq[p], list(st.cells), meta, kind, ev)
        grp = self.group_of[p]
        xor_update(grp, p, grp.payloads[p], ck.payload)
        grp.meta[p] = meta
        self.latest[p] = ck
        return ck

    def confirmation(self, ck: Checkpoint, owner: int) -> CheckpointMeta:
        """Counters the checksum holder reports to ``owner`` after ``ck``."""
        m = self.machine
        meta = ck.meta
        return CheckpointMeta(
            e=meta["E_in"][owner], e_get=meta["E"][owner],
            gnc=meta["GNC"] if m.used_gsync else None,
            gc=meta["GC"],
            sc=meta["SC"] if m.used_locks else None)

    def broadcast_trim(self, ck: Checkpoint) -> int:
        log = self.machine.log
        if log is None:
            return 0
        removed, q = 0, ck.owner
        for owner in range(self.machine.n):
            if owner == q or self.machine.procs[owner].crashed:
                continue
            if not (log.lp[owner][q] or log.lg[owner][q] or log.m_flag[owner][q]
                    or log.lost[owner][q]):
                continue  # nothing held about q
            removed += log.trim_logs(owner, q, self.confirmation(ck, owner))
        return removed


# -- coordinated schemes ---------------------------------------------------------


def capture_all(store: CheckpointStore, control=None) -> dict[int, Checkpoint]:
    m = store.machine
    cks = {p: store.capture(p, "coordinated") for p in range(m.n) if not m.procs[p].crashed}
    for ck in cks.values():
        store.broadcast_trim(ck)
    groups = [CheckpointGroup(list(g.members), g.checksum_holder, list(g.parity),
                              {k: list(v) for k, v in g.payloads.items()}, dict(g.meta))
              for g in store.groups]
    store.coordinated = CoordinatedSet(cks, groups, m.snapshot_state(), control)
    store.coordinated_count += 1
    return cks


def coordinated_checkpoint_gsync(store: CheckpointStore, *, barrier: bool = True,
                                 control=None) -> dict[int, Checkpoint]:
    """Checkpoint every process right after a completed gsync."""
    m = store.machine
    if not m.at_gsync_point:
        raise ProtocolError("Gsync checkpoint requested outside a gsync point")
    if barrier:
        for p in range(m.n):
            if not m.procs[p].crashed:
                m.barrier(p)
    cks = capture_all(store, control)
    m.at_gsync_point = True
    return cks


def coordinated_checkpoint_locks(store: CheckpointStore, control=None) -> dict[int, Checkpoint]:
    """Flush, barrier, capture; all processes must hold no locks."""
    m = store.machine
    for p in range(m.n):
        if m.procs[p].lc:
            raise ProtocolError(f"process {p} holds {m.procs[p].lc} lock(s); barrier would risk deadlock")
    for p in range(m.n):
        if not m.procs[p].crashed:
            m.flush_all(p)
    for p in range(m.n):
        if not m.procs[p].crashed:
            m.barrier(p)
    return capture_all(store, control)


class Violation(NamedTuple):
    first: int
    second: int


def rma_consistency_check(checkpoints, graph) -> Violation | None:
    """Return the first pair of checkpoints ordered by cohb, or None."""
    cks = sorted(checkpoints.values() if isinstance(checkpoints, dict) else checkpoints,
                 key=lambda c: c.owner)
    owners = [c.owner for c in cks]
    if len(set(owners)) != len(owners):
        raise ValueError("a consistent set holds one checkpoint per process")
    for a in cks:
        for b in cks:
            if a is not b and graph.cohb(a.event, b.event):
                return Violation(a.owner, b.owner)
    return None


# -- demand checkpoints ------------------------------------------------------------


def select_victim(log, requester: int) -> int | None:
    best, victim = 0, None
    for q in range(log.n):
        if q == requester:
            continue
        size = max(len(log.lp[requester][q]), len(log.lg[requester][q]))
        if size > best:
            best, victim = size, q
    return victim


def demand_checkpoint(store: CheckpointStore, requester: int, victim: int | None = None):
    """Force ``victim`` to checkpoint; returns (checkpoint, requester's meta, trimmed)."""
    m = store.machine
    if victim is None:
        victim = select_victim(m.log, requester)
        if victim is None:
            raise ProtocolError(f"process {requester} holds no logs to trim")
    if m.procs[victim].crashed:
        raise CrashedProcessError(f"demand checkpoint of crashed process {victim}")
    key = (victim, CKPT_LOCK)
    if key in m.locks:
        raise WouldBlock(f"checkpoint structures of {victim} held by {m.locks[key]}")
    m.flush_all(victim)
    m.locks[key] = requester
    try:
        ck = store.capture(victim, "demand")
    finally:
        del m.locks[key]
    store.demand_count += 1
    trimmed = store.broadcast_trim(ck)
    return ck, store.confirmation(ck, requester), trimmed
