"""A deterministic, single-threaded RMA abstract machine.

Processes expose equally sized windows of 64-bit words.  Puts and gets are
buffered per (source, target) epoch and commit when a flush, unlock or
gsync closes that epoch.  Every operation stamps the epoch, get, sync and
gsync counters that the logging and recovery layers rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import BoundsError, CrashedProcessError, ProtocolError, WouldBlock
from .orders import OrderGraph

PUT, GET = "PUT", "GET"
LOCK, UNLOCK, FLUSH, GSYNC = "LOCK", "UNLOCK", "FLUSH", "GSYNC"
ALL = -1  # the "every process" target of gsync and flush-all

_MASK = (1 << 64) - 1


def to_word(value: int) -> int:
    """Wrap an integer into the signed 64-bit range."""
    value &= _MASK
    return value - (1 << 64) if value >= 1 << 63 else value


class Determinant(NamedTuple):
    type: str
    src: int
    trg: int
    combine: bool
    ec: int
    gc: int
    sc: int
    gnc: int
    # per-source issue number; two accesses in one epoch otherwise collide
    seq: int


@dataclass(slots=True)
class Action:
    type: str
    src: int
    trg: int
    combine: bool
    ec: int
    gc: int
    sc: int
    gnc: int
    cell: int
    value: int | None = None
    local: int | None = None
    seq: int = 0
    blocking: bool = False
    event: int | None = None
    order: int = 0

    def __post_init__(self):
        if self.src == self.trg:
            raise ProtocolError("an access needs distinct source and target")
        if self.combine and self.type != PUT:
            raise ProtocolError("only puts can combine")

    @property
    def determinant(self) -> Determinant:
        return Determinant(self.type, self.src, self.trg, self.combine,
                           self.ec, self.gc, self.sc, self.gnc, self.seq)

    def to_json(self) -> dict:
        return {"type": self.type, "src": self.src, "trg": self.trg,
                "combine": self.combine, "EC": self.ec, "GC": self.gc,
                "SC": self.sc, "GNC": self.gnc, "seq": self.seq,
                "data": {"cell": self.cell, "value": self.value, "local": self.local}}


@dataclass(slots=True)
class SyncAction:
    type: str
    src: int
    trg: int
    ec: int
    gc: int
    sc: int
    gnc: int
    str: str | None = None

    def to_json(self) -> dict:
        return {"type": self.type, "src": self.src,
                "trg": "ALL" if self.trg == ALL else self.trg,
                "EC": self.ec, "GC": self.gc, "SC": self.sc, "GNC": self.gnc,
                "str": self.str}


@dataclass(slots=True)
class Internal:
    type: str
    proc: int
    cell: int | None = None
    value: int | None = None

    def to_json(self) -> dict:
        return {"type": self.type, "src": self.proc,
                "data": {"cell": self.cell, "value": self.value}}


@dataclass
class ProcessState:
    cells: list[int]
    gc: int = 0
    sc: int = 0  # this process's synchronization counter, read by lockers
    gnc: int = 0
    lc: int = 0
    seq: int = 0
    crashed: bool = False
    # SC value fetched by the last lock this process took on each target
    sc_seen: dict[int, int] = field(default_factory=dict)
    held: set = field(default_factory=set)


class Machine:
    """The simulated RMA system: windows, epochs, locks and counters."""

    def __init__(self, n: int, window_size: int, *, gsync_adds_hb: bool = True,
                 track_orders: bool = True, log=None):
        if n < 1:
            raise ValueError("need at least one process")
        if window_size < 1:
            raise ValueError("window size must be positive")
        self.n = n
        self.window_size = window_size
        self.gsync_adds_hb = gsync_adds_hb
        self.procs = [ProcessState([0] * window_size) for _ in range(n)]
        self.epoch = [[0] * n for _ in range(n)]
        self.pending: dict[tuple[int, int], list[Action]] = {}
        self.locks: dict[tuple[int, str | None], int] = {}
        self._last_release: dict[tuple[int, str | None], int] = {}
        self.graph = OrderGraph(n, enabled=track_orders)
        self.halted = False
        self.used_gsync = False
        self.used_locks = False
        self.at_gsync_point = False
        self._issue_order = 0
        self._gsync_arrived: dict[int, int] = {}
        self._barrier_arrived: dict[int, int] = {}
        self.log = None
        if log is not None:
            self.attach_log(log)

    def attach_log(self, log) -> None:
        self.log = log
        log.machine = self

    # -- helpers -----------------------------------------------------------

    def _check_proc(self, p: int) -> ProcessState:
        if not 0 <= p < self.n:
            raise BoundsError(f"process {p} outside [0, {self.n})")
        st = self.procs[p]
        if st.crashed:
            raise CrashedProcessError(f"process {p} has crashed")
        return st

    def _check_cell(self, cell: int) -> None:
        if not 0 <= cell < self.window_size:
            raise BoundsError(f"cell {cell} outside window of {self.window_size}")

    def _check_access(self, src: int, trg: int, cell: int) -> ProcessState:
        if self.halted:
            raise ProtocolError("machine halted")
        if src == trg:
            raise ProtocolError("an access needs distinct source and target")
        st = self._check_proc(src)
        if not 0 <= trg < self.n:
            raise BoundsError(f"process {trg} outside [0, {self.n})")
        self._check_cell(cell)
        self.at_gsync_point = False
        return st

    def _stamp(self, kind, src, trg, st, **kw) -> Action:
        st.seq += 1
        self._issue_order += 1
        return Action(kind, src, trg, kw.pop("combine", False), self.epoch[src][trg],
                      st.gc, st.sc_seen.get(trg, 0), st.gnc, seq=st.seq,
                      order=self._issue_order, **kw)

    def _sync(self, kind, src, trg, str_=None) -> SyncAction:
        st = self.procs[src]
        ec = self.epoch[src][trg] if trg != ALL else 0
        return SyncAction(kind, src, trg, ec, st.gc, st.sc_seen.get(trg, 0), st.gnc, str_)

    def open_epochs(self, p: int) -> bool:
        """True while ``p`` has issued accesses that have not committed yet."""
        return any(acts and key[0] == p for key, acts in self.pending.items())

    def pending_to(self, trg: int, cell: int | None = None) -> list[Action]:
        out = []
        for (s, t), acts in self.pending.items():
            if t == trg:
                out.extend(a for a in acts if a.type == PUT and (cell is None or a.cell == cell))
        return out

    # -- commit ------------------------------------------------------------

    def _commit(self, acts, step: int) -> None:
        for a in sorted(acts, key=lambda a: a.order):
            trg = self.procs[a.trg]
            if a.type == PUT:
                if a.combine:
                    trg.cells[a.cell] = to_word(trg.cells[a.cell] + a.value)
                else:
                    trg.cells[a.cell] = a.value
            else:
                a.value = trg.cells[a.cell]
                if a.local is not None:
                    self.procs[a.src].cells[a.local] = a.value
            if a.event is not None:
                self.graph.set_visible(a.event, step)
            if a.type == GET and self.log is not None:
                self.log.get_phase2(a)

    def _close(self, src: int, targets, step: int) -> None:
        acts = []
        for t in targets:
            acts.extend(self.pending.pop((src, t), ()))
            self.epoch[src][t] += 1
        self._commit(acts, step)
        self.procs[src].gc += 1
        if self.log is not None:
            self.log.on_epoch_close(src)

    # -- communication -------------------------------------------------------

    def put(self, src: int, trg: int, cell: int, value: int, combine: bool = False,
            blocking: bool = False) -> Action:
        st = self._check_access(src, trg, cell)
        a = self._stamp(PUT, src, trg, st, combine=combine, cell=cell,
                        value=to_word(value), blocking=blocking)
        if self.log is not None:
            self.log.log_put(a)
        a.event = self.graph.record(src, PUT, a, visible=False)
        self.pending.setdefault((src, trg), []).append(a)
        if blocking:
            self.flush(src, trg)
        return a

    def get(self, src: int, trg: int, cell: int, local: int | None = -1,
            blocking: bool = False) -> Action:
        """Read ``trg``'s ``cell`` into ``src``'s ``local`` cell at epoch close.

        ``local`` defaults to the same index as ``cell``; pass None to keep
        the value only in the returned action.
        """
        st = self._check_access(src, trg, cell)
        if local == -1:
            local = cell
        if local is not None:
            self._check_cell(local)
        a = self._stamp(GET, src, trg, st, cell=cell, local=local, blocking=blocking)
        if self.log is not None:
            self.log.get_phase1(a)
        a.event = self.graph.record(src, GET, a, visible=False)
        self.pending.setdefault((src, trg), []).append(a)
        if blocking:
            self.flush(src, trg)
        return a

    def atomic(self, src: int, trg: int, cell: int, op: str, operand: int,
               compare: int | None = None) -> tuple[int, Action, Action]:
        """Blocking read-modify-write: ``cas``, ``fao`` (fetch-and-add) or ``swap``.

        Counts as both a put and a get; returns (old value, put, get).
        """
        st = self._check_access(src, trg, cell)
        if op not in ("cas", "fao", "swap"):
            raise ValueError(f"unknown atomic {op!r}")
        # flush first so the read-modify-write sees committed memory
        if self.pending.get((src, trg)):
            self.flush(src, trg)
        old = self.procs[trg].cells[cell]
        if op == "cas":
            new = to_word(operand) if old == compare else old
        elif op == "fao":
            new = to_word(old + operand)
        else:
            new = to_word(operand)
        g = self._stamp(GET, src, trg, st, cell=cell, local=None, blocking=True)
        # logged as a combining put of the delta, so commit and replay both
        # produce ``new`` from ``old``
        p = self._stamp(PUT, src, trg, st, combine=True, cell=cell,
                        value=to_word(new - old), blocking=True)
        if self.log is not None:
            self.log.get_phase1(g)
            self.log.log_put(p)
        g.event = self.graph.record(src, GET, g, visible=False)
        p.event = self.graph.record(src, PUT, p, visible=False)
        self.pending.setdefault((src, trg), []).extend([g, p])
        self.flush(src, trg)
        return old, p, g

    # -- synchronization -----------------------------------------------------

    def flush(self, src: int, trg: int) -> SyncAction:
        if trg == ALL:
            return self.flush_all(src)
        self._check_proc(src)
        if not 0 <= trg < self.n or trg == src:
            raise BoundsError(f"bad flush target {trg}")
        self.at_gsync_point = False
        b = self._sync(FLUSH, src, trg)
        idx = self.graph.record(src, FLUSH, b)
        self._close(src, [trg], idx)
        return b

    def flush_all(self, src: int) -> SyncAction:
        self._check_proc(src)
        self.at_gsync_point = False
        b = self._sync(FLUSH, src, ALL)
        idx = self.graph.record(src, FLUSH, b)
        self._close(src, [t for t in range(self.n) if t != src], idx)
        return b

    def lock_holder(self, trg: int, str_=None) -> int | None:
        return self.locks.get((trg, str_))

    def lock(self, src: int, trg: int, str_=None) -> SyncAction:
        st = self._check_proc(src)
        key = (trg, str_)
        if key in self.locks:
            raise WouldBlock(f"lock {key} held by {self.locks[key]}")
        self.at_gsync_point = False
        self.used_locks = True
        self.locks[key] = src
        st.held.add(key)
        st.lc += 1
        # fetch-and-increment of the target's synchronization counter
        tst = self.procs[trg]
        st.sc_seen[trg] = tst.sc
        tst.sc += 1
        b = self._sync(LOCK, src, trg, str_)
        rel = self._last_release.get(key)
        self.graph.record(src, LOCK, b, so_from=(rel,) if rel is not None else ())
        return b

    def unlock(self, src: int, trg: int, str_=None) -> SyncAction:
        st = self._check_proc(src)
        key = (trg, str_)
        if self.locks.get(key) != src:
            raise ProtocolError(f"unlock of {key} by {src} without holding it")
        self.at_gsync_point = False
        b = self._sync(UNLOCK, src, trg, str_)
        idx = self.graph.record(src, UNLOCK, b)
        if trg != src:
            self._close(src, [trg], idx)
        del self.locks[key]
        st.held.discard(key)
        st.lc -= 1
        self._last_release[key] = idx
        return b

    def gsync(self, p: int) -> bool:
        """Arrive at the collective gsync; returns True when this call completes the round."""
        self._check_proc(p)
        if p in self._gsync_arrived:
            raise ProtocolError(f"process {p} already waiting in gsync")
        self.used_gsync = True
        b = self._sync(GSYNC, p, ALL)
        self._gsync_arrived[p] = self.graph.record(p, GSYNC, b)
        alive = [q for q in range(self.n) if not self.procs[q].crashed]
        if len(self._gsync_arrived) < len(alive):
            return False
        self._complete_gsync()
        return True

    def gsync_waiting(self, p: int) -> bool:
        return p in self._gsync_arrived

    def _complete_gsync(self) -> None:
        arrived = self._gsync_arrived
        step = max(arrived.values())
        acts = [a for acts in self.pending.values() for a in acts]
        self.pending.clear()
        for s in range(self.n):
            for t in range(self.n):
                if s != t:
                    self.epoch[s][t] += 1
        self._commit(acts, step)
        for q in arrived:
            st = self.procs[q]
            st.gnc += 1
            st.gc += 1
            if self.log is not None:
                self.log.on_epoch_close(q)
        if self.gsync_adds_hb:
            sources = list(arrived.values())
            for q in arrived:
                self.graph.so_to_next(q, [s for s in sources if s != arrived[q]])
        self._gsync_arrived = {}
        self.at_gsync_point = True

    def barrier(self, p: int) -> bool:
        """Collective barrier adding hb edges; True when this call completes it."""
        st = self._check_proc(p)
        if st.lc:
            raise ProtocolError(f"process {p} entered a barrier holding {st.lc} lock(s)")
        if p in self._barrier_arrived:
            raise ProtocolError(f"process {p} already waiting in barrier")
        self._barrier_arrived[p] = self.graph.record(p, "BARRIER", Internal("BARRIER", p))
        alive = [q for q in range(self.n) if not self.procs[q].crashed]
        if len(self._barrier_arrived) < len(alive):
            return False
        arrived = self._barrier_arrived
        sources = list(arrived.values())
        for q in arrived:
            self.graph.so_to_next(q, [s for s in sources if s != arrived[q]])
        self._barrier_arrived = {}
        return True

    def barrier_waiting(self, p: int) -> bool:
        return p in self._barrier_arrived

    # -- local memory ----------------------------------------------------------

    def local_read(self, p: int, cell: int) -> int:
        st = self._check_proc(p)
        self._check_cell(cell)
        v = st.cells[cell]
        self.graph.record(p, "READ", Internal("READ", p, cell, v))
        return v

    def local_write(self, p: int, cell: int, value: int) -> None:
        st = self._check_proc(p)
        self._check_cell(cell)
        st.cells[cell] = to_word(value)
        if self.log is not None:
            self.log.note_local_write(p, cell, self.pending_to(p, cell))
        self.graph.record(p, "WRITE", Internal("WRITE", p, cell, st.cells[cell]))

    def record_internal(self, p: int, kind: str) -> int:
        return self.graph.record(p, kind, Internal(kind, p))

    # -- failures --------------------------------------------------------------

    def crash(self, p: int) -> None:
        """Fail-stop ``p``: its window and everything stored at it is lost."""
        st = self._check_proc(p)
        st.cells = [0] * self.window_size
        st.crashed = True
        if self.log is not None:
            self.log.drop_owner(p)

    def revive(self, p: int, cells: list[int]) -> None:
        st = self.procs[p]
        if len(cells) != self.window_size:
            raise ValueError("payload does not match the window size")
        st.cells = list(cells)
        st.crashed = False

    def snapshot_state(self) -> dict:
        """Counters and lock table, enough to rewind to a coordinated checkpoint."""
        return {
            "epoch": [list(r) for r in self.epoch],
            "procs": [(st.gc, st.sc, st.gnc, st.lc, st.seq, dict(st.sc_seen), set(st.held))
                      for st in self.procs],
            "locks": dict(self.locks),
            "issue_order": self._issue_order,
        }

    def restore_state(self, snap: dict) -> None:
        self.epoch = [list(r) for r in snap["epoch"]]
        for st, (gc, sc, gnc, lc, seq, seen, held) in zip(self.procs, snap["procs"]):
            st.gc, st.sc, st.gnc, st.lc, st.seq = gc, sc, gnc, lc, seq
            st.sc_seen, st.held = dict(seen), set(held)
            st.crashed = False
        self.locks = dict(snap["locks"])
        self._issue_order = snap["issue_order"]
        self.pending.clear()
        self._gsync_arrived = {}
        self._barrier_arrived = {}
        self.at_gsync_point = False

    def memory(self) -> list[list[int]]:
        return [list(st.cells) for st in self.procs]

    def counters(self, p: int) -> dict:
        st = self.procs[p]
        return {"E": list(self.epoch[p]), "GC": st.gc, "SC": st.sc, "GNC": st.gnc, "LC": st.lc}
