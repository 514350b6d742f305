"""Transparent logging of puts and gets.

Put logs live at the issuer (``lp[p][q]``), get logs at the target
(``lg[q][p]``), so each survives the crash of the process it is needed to
recover.  Gets are logged in two phases: the determinant is parked in the
issuer's pending queue until the epoch closes and the read value exists.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass

from .errors import ProtocolError, WouldBlock
from .machine import GET, PUT, Action

LP_LOCK = "__LP__"
LG_LOCK = "__LG__"


@dataclass(frozen=True)
class CheckpointMeta:
    """Counter bounds confirmed for a checkpoint of ``peer``.

    ``e`` bounds puts owner->peer and ``e_get`` bounds gets peer->owner;
    a None counter places no constraint.
    """

    e: float | None = None
    gnc: float | None = None
    gc: float | None = None
    sc: float | None = None
    e_get: float | None = None


def _below(value, bound) -> bool:
    return bound is None or value < bound


class FtLog:
    def __init__(self, n: int, *, access_deterministic: bool = True,
                 optimistic: bool = False):
        self.n = n
        self.access_deterministic = access_deterministic
        self.optimistic = optimistic
        self.machine = None
        self.lp = [[[] for _ in range(n)] for _ in range(n)]
        self.lg = [[[] for _ in range(n)] for _ in range(n)]
        self.queue = [dict() for _ in range(n)]
        self.n_flag = [[False] * n for _ in range(n)]
        self.m_flag = [[False] * n for _ in range(n)]
        self._deferred = [[] for _ in range(n)]
        # lost[p][q]: entries about q went down with p; q cannot be recovered
        # from logs until it checkpoints again
        self.lost = [[False] * n for _ in range(n)]
        self.size = [0] * n  # entries stored at each owner
        self.duplicate_next_put = False
        self.logged_puts = 0
        self.logged_gets = 0

    # -- structure locks -------------------------------------------------

    @contextmanager
    def _struct_lock(self, holder: int, owner: int, name: str):
        locks = self.machine.locks if self.machine is not None else {}
        key = (owner, name)
        if key in locks:
            raise WouldBlock(f"log structure {key} held by {locks[key]}")
        locks[key] = holder
        try:
            yield
        finally:
            del locks[key]

    # -- puts ---------------------------------------------------------------

    def log_put(self, a: Action) -> None:
        if a.type != PUT:
            raise ProtocolError("log_put needs a put")
        m = self.machine
        if m is not None and m.epoch[a.src][a.trg] != a.ec:
            raise ProtocolError(f"put {a.determinant} logged after its epoch closed")
        if self.optimistic:
            # logging postponed; the owner cannot vouch for q's replay meanwhile
            self._deferred[a.src].append([a, False])
            self.m_flag[a.src][a.trg] = True
            return
        self._append_put(a)

    def _append_put(self, a: Action) -> None:
        with self._struct_lock(a.src, a.src, LP_LOCK):
            self.lp[a.src][a.trg].append(a)
            self.size[a.src] += 1
            if self.duplicate_next_put:
                self.lp[a.src][a.trg].append(a)
                self.size[a.src] += 1
                self.duplicate_next_put = False
        self.logged_puts += 1
        if a.combine or not self.access_deterministic:
            self.m_flag[a.src][a.trg] = True

    def on_epoch_close(self, p: int) -> None:
        if not self._deferred[p]:
            return
        keep = []
        for item in self._deferred[p]:
            if item[1]:
                self._append_put(item[0])
            else:
                item[1] = True
                keep.append(item)
        self._deferred[p] = keep

    def note_local_write(self, q: int, cell: int, pending_puts) -> None:
        """A write at ``q`` racing with buffered puts makes their replay unsafe."""
        for a in pending_puts:
            self.m_flag[a.src][q] = True

    # -- gets ---------------------------------------------------------------

    def get_phase1(self, a: Action) -> None:
        if a.type != GET:
            raise ProtocolError("log_get needs a get")
        self.n_flag[a.trg][a.src] = True
        self.queue[a.src][a.determinant] = a

    def get_phase2(self, a: Action) -> None:
        det = a.determinant
        q = self.queue[a.src]
        if det not in q:
            raise ProtocolError(f"phase 2 for {det} without phase 1")
        with self._struct_lock(a.src, a.trg, LG_LOCK):
            self.lg[a.trg][a.src].append(a)
            self.size[a.trg] += 1
            del q[det]
        self.logged_gets += 1
        if not any(d.trg == a.trg for d in q):
            self.n_flag[a.trg][a.src] = False

    def log_get(self, a: Action) -> None:
        """Both phases back to back, for a get whose epoch is already closed."""
        self.get_phase1(a)
        self.get_phase2(a)

    # -- maintenance -------------------------------------------------------

    def drop_owner(self, p: int) -> None:
        """Forget everything stored at ``p`` (it crashed)."""
        for q in range(self.n):
            if self.lp[p][q] or self.lg[p][q]:
                self.lost[p][q] = True
            self.lp[p][q] = []
            self.lg[p][q] = []
            self.m_flag[p][q] = False
            self.n_flag[p][q] = False
        self.queue[p] = {}
        self._deferred[p] = []
        self.size[p] = 0

    def clear(self) -> None:
        for p in range(self.n):
            self.drop_owner(p)
        self.lost = [[False] * self.n for _ in range(self.n)]

    def relog(self, a: Action) -> None:
        """Re-create the entry of a put still in flight from a recovered issuer."""
        self._append_put(a)

    def trim_logs(self, owner: int, peer: int, meta: CheckpointMeta) -> int:
        """Drop entries of ``owner``'s logs about ``peer`` that the checkpoint covers."""
        lp, lg = self.lp[owner][peer], self.lg[owner][peer]
        self.lost[owner][peer] = False
        if not lp and not lg:
            if not any(item[0].trg == peer for item in self._deferred[owner]):
                self.m_flag[owner][peer] = False
            return 0
        # each family is bounded by the counters its replay order uses
        keep_p = [a for a in lp if not (
            _below(a.ec, meta.e) and _below(a.gnc, meta.gnc) and _below(a.sc, meta.sc))]
        e_get = meta.e_get if meta.e_get is not None else meta.e
        keep_g = [a for a in lg if not (
            _below(a.ec, e_get) and _below(a.gnc, meta.gnc) and _below(a.gc, meta.gc))]
        removed = len(lp) - len(keep_p) + len(lg) - len(keep_g)
        self.lp[owner][peer] = keep_p
        self.lg[owner][peer] = keep_g
        self.size[owner] -= removed
        pending = any(item[0].trg == peer for item in self._deferred[owner])
        if not pending and (self.access_deterministic
                            and not any(a.combine for a in keep_p) or not keep_p):
            self.m_flag[owner][peer] = False
        return removed

    def stored_at(self, p: int) -> int:
        return self.size[p]

    def dump(self, fp) -> None:
        for owner in range(self.n):
            for peer in range(self.n):
                for kind, entries in (("LP", self.lp[owner][peer]), ("LG", self.lg[owner][peer])):
                    for a in entries:
                        fp.write(json.dumps({"log": kind, "owner": owner, "peer": peer,
                                             **a.to_json()}, sort_keys=True) + "\n")
