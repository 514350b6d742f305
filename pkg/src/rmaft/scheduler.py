"""Seeded interleaving of per-process programs over one machine, with
coordinated checkpoints, demand checkpoints, fault injection and recovery."""

from __future__ import annotations

import copy
import hashlib
import random
from dataclasses import dataclass, field

from .checkpointing import (CheckpointStore, DalyGate, capture_all,
                            coordinated_checkpoint_gsync, demand_checkpoint,
                            payload_to_bytes, rma_consistency_check)
from .errors import (CatastrophicFailure, CrashedProcessError, DeadlockError,
                     ProtocolError, WouldBlock)
from .ftlog import FtLog
from .machine import Machine
from .recovery import fallback_rollback, recover_gsync, recover_locks


def memory_digest(machine: Machine) -> str:
    h = hashlib.sha256()
    for st in machine.procs:
        h.update(payload_to_bytes(st.cells))
    return h.hexdigest()


@dataclass
class SimConfig:
    groups: int = 1
    log_budget: int | None = None
    daly: DalyGate | None = None
    gsync_adds_hb: bool = True
    access_deterministic: bool = True
    gsync_ckpt_barrier: bool = True
    optimistic_put_logging: bool = False
    corrupt_log: bool = False
    recovery: str = "auto"  # gsync | locks | auto


@dataclass
class RecoveryRecord:
    victim: int
    event: int
    fallback: bool
    reason: str
    fetched: int
    replayed: int
    exactly_once: bool
    order_preserved: bool
    combining_logged: bool

    def to_json(self) -> dict:
        return dict(self.__dict__)


class _Catastrophe(Exception):
    pass


class Simulation:
    def __init__(self, n: int, window: int, programs, seed: int = 0,
                 config: SimConfig | None = None, faults=()):
        self.config = cfg = config or SimConfig()
        self.n = n
        self.programs = [list(p) for p in programs]
        if len(self.programs) != n:
            raise ValueError("one program per process")
        self.log = FtLog(n, access_deterministic=cfg.access_deterministic,
                         optimistic=cfg.optimistic_put_logging)
        self.log.duplicate_next_put = cfg.corrupt_log
        self.machine = Machine(n, window, gsync_adds_hb=cfg.gsync_adds_hb, log=self.log)
        self.store = CheckpointStore(self.machine, cfg.groups)
        self.rng = random.Random(seed)
        self.gate = copy.deepcopy(cfg.daly)
        self.pcs = [0] * n
        self.regs = [dict() for _ in range(n)]
        self.waiting: dict[int, str] = {}
        self.blocked: set[int] = set()
        self.ckpt_pending: set[int] = set()
        self.faults = sorted((int(e), tuple(v)) for e, v in faults)
        self.fired = 0
        self.marks: list[tuple] = []
        self.recoveries: list[RecoveryRecord] = []
        self.plans = []
        self.fallbacks = 0
        self.cf = False
        self.consistency_checks = 0
        self.consistency_failures = 0
        self.uses_gsync = any(op[0] == "gsync" for prog in self.programs for op in prog)
        uses_locks = any(op[0] == "lock" for prog in self.programs for op in prog)
        uses_gets = any(op[0] in ("get", "atomic") for prog in self.programs for op in prog)
        scheme = cfg.recovery
        if scheme == "auto":
            scheme = "locks" if uses_locks and not uses_gets and not self.uses_gsync else "gsync"
        self.recovery_scheme = scheme

    # -- control snapshots for rollback -------------------------------------------

    def _control(self) -> dict:
        return {"pcs": list(self.pcs), "regs": copy.deepcopy(self.regs),
                "rng": self.rng.getstate(), "ckpt_pending": set(self.ckpt_pending),
                "gate": copy.deepcopy(self.gate)}

    def _restore_control(self, c: dict) -> None:
        self.pcs = list(c["pcs"])
        self.regs = copy.deepcopy(c["regs"])
        self.rng.setstate(c["rng"])
        self.ckpt_pending = set(c["ckpt_pending"])
        self.gate = copy.deepcopy(c["gate"])
        self.waiting = {}
        self.blocked = set()

    def _clock(self) -> int:
        return len(self.machine.graph)

    def _check_consistency(self, cks) -> None:
        self.consistency_checks += 1
        if rma_consistency_check(cks, self.machine.graph) is not None:
            self.consistency_failures += 1

    # -- coordinated checkpoints -----------------------------------------------------

    def _cc_due(self) -> bool:
        return self.gate is None or self.gate.due(self._clock())

    def _cc_taken(self, start: int) -> None:
        if self.gate is not None:
            self.gate.taken(self._clock(), self._clock() - start)

    def _gsync_point(self) -> None:
        if not self._cc_due():
            return
        start = self._clock()
        cks = coordinated_checkpoint_gsync(self.store, barrier=self.config.gsync_ckpt_barrier,
                                           control=None)
        self._check_consistency(cks)
        self._cc_taken(start)
        self.store.coordinated.control = self._control()

    def _locks_point(self) -> None:
        if not self._cc_due():
            return
        start = self._clock()
        cks = capture_all(self.store)
        self._check_consistency(cks)
        self._cc_taken(start)
        self.store.coordinated.control = self._control()

    # -- execution ---------------------------------------------------------------

    def _val(self, p: int, x):
        if isinstance(x, tuple) and x and x[0] == "r":
            return self.regs[p].get(x[1], 0) * x[2] + x[3]
        return x

    def _release(self, kind: str) -> None:
        for q in [q for q, k in self.waiting.items() if k == kind]:
            del self.waiting[q]

    def _ckpt_phase(self, p: int) -> None:
        m = self.machine
        m.flush_all(p)
        self.waiting[p] = "barrier"
        if m.barrier(p):
            self._release("barrier")
            self._locks_point()

    def step(self, p: int) -> None:
        m = self.machine
        if p in self.ckpt_pending and m.procs[p].lc == 0:
            self.ckpt_pending.discard(p)
            self._ckpt_phase(p)
            return
        op = self.programs[p][self.pcs[p]]
        kind = op[0]
        v = lambda x: self._val(p, x)  # noqa: E731
        nxt = self.pcs[p] + 1
        if kind == "put":
            m.put(p, op[1], v(op[2]), v(op[3]), combine=op[4], blocking=op[5])
        elif kind == "get":
            m.get(p, op[1], v(op[2]), local=v(op[3]), blocking=op[4])
        elif kind == "flush":
            m.flush(p, op[1])
        elif kind == "lock":
            try:
                m.lock(p, op[1], op[2])
            except WouldBlock:
                self.blocked.add(p)
                return
        elif kind == "unlock":
            m.unlock(p, op[1], op[2])
            self.blocked.clear()
        elif kind == "gsync":
            self.pcs[p] = nxt
            self.waiting[p] = "gsync"
            if m.gsync(p):
                self._release("gsync")
                self._gsync_point()
            return
        elif kind == "ckpt":
            self.pcs[p] = nxt
            if m.procs[p].lc:
                self.ckpt_pending.add(p)
            else:
                self._ckpt_phase(p)
            return
        elif kind == "write":
            m.local_write(p, v(op[1]), v(op[2]))
        elif kind == "read":
            self.regs[p][op[2]] = m.local_read(p, v(op[1]))
        elif kind == "atomic":
            old, _, _ = m.atomic(p, op[2], v(op[3]), op[1], v(op[4]), v(op[5]))
            self.regs[p][op[6]] = old
        elif kind == "jz":
            if self.regs[p].get(op[1], 0) == 0:
                nxt = op[2]
        elif kind == "mark":
            puts = sum(len(x) for x in self.log.lp[p])
            gets = sum(len(self.log.lg[q][p]) for q in range(self.n))
            self.marks.append((p, op[1], dict(self.regs[p]), puts, gets))
        elif kind == "nop":
            m.record_internal(p, "NOP")
        else:
            raise ProtocolError(f"unknown instruction {kind!r}")
        self.pcs[p] = nxt

    def _finished(self, p: int) -> bool:
        return (self.pcs[p] >= len(self.programs[p]) and p not in self.waiting
                and p not in self.ckpt_pending)

    def run(self) -> Simulation:
        cks = capture_all(self.store)
        self._check_consistency(cks)
        self.store.coordinated.control = self._control()
        try:
            while True:
                runnable = [p for p in range(self.n)
                            if p not in self.waiting and p not in self.blocked
                            and (self.pcs[p] < len(self.programs[p]) or p in self.ckpt_pending)]
                if not runnable:
                    if all(self._finished(p) for p in range(self.n)):
                        break
                    raise DeadlockError(
                        f"no runnable process; waiting={self.waiting} blocked={sorted(self.blocked)}")
                self.step(self.rng.choice(runnable))
                self._inject_faults()
                self._demand_checkpoints()
        except _Catastrophe:
            self.cf = True
        if self.fired < len(self.faults) and not self.cf:
            raise ValueError(f"fault at event {self.faults[self.fired][0]} is beyond the "
                             f"trace ({self._clock()} events)")
        return self

    # -- faults and demand checkpoints -------------------------------------------

    def _inject_faults(self) -> None:
        while self.fired < len(self.faults) and self.faults[self.fired][0] <= self._clock():
            event, victims = self.faults[self.fired]
            self.fired += 1
            self._fail(event, victims)

    def _fail(self, event: int, victims) -> None:
        m, log = self.machine, self.log
        victims = sorted(set(victims))
        combining = {}
        for v in victims:
            if m.procs[v].crashed:
                continue
            combining[v] = any(a.combine for q in range(self.n) for a in log.lp[q][v])
            m.crash(v)
            self.store.lose(v)
        for g in self.store.groups:
            if sum(m.procs[p].crashed for p in g.members) > 1:
                raise _Catastrophe()
        recover = recover_locks if self.recovery_scheme == "locks" else recover_gsync
        for v in victims:
            if not m.procs[v].crashed:
                continue  # restored by an earlier fallback
            try:
                plan = recover(m, self.store, v, rollback=False)
                if plan.fallback:
                    fallback_rollback(m, self.store)
                    self._restore_control(self.store.coordinated.control)
                    self.fallbacks += 1
            except CatastrophicFailure:
                raise _Catastrophe() from None
            self.plans.append(plan)
            self.recoveries.append(RecoveryRecord(
                v, event, plan.fallback, plan.reason, plan.fetched, len(plan.replay_trace),
                plan.exactly_once(), plan.order_preserved(), combining.get(v, False)))

    def _demand_checkpoints(self) -> None:
        budget = self.config.log_budget
        if budget is None:
            return
        for p in range(self.n):
            while self.log.stored_at(p) > budget:
                before = self.log.stored_at(p)
                try:
                    demand_checkpoint(self.store, p)
                except (CrashedProcessError, WouldBlock, ProtocolError):
                    break
                if self.log.stored_at(p) >= before:
                    break

    # -- results ---------------------------------------------------------------------

    def digest(self) -> str:
        return memory_digest(self.machine)
