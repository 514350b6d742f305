"""Order tracking over a simulated RMA trace.

Every recorded event carries a vector clock, so happened-before queries
are O(1).  Program order is implicit (consecutive events of one process),
synchronization order is an explicit edge list, and the consistency order
is derived from the step at which an event's effects became visible.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field


class Order(enum.Enum):
    BEFORE = "ordered(a,b)"
    AFTER = "ordered(b,a)"
    PARALLEL = "parallel"


RELATIONS = ("po", "so", "hb", "co", "cohb")


@dataclass(slots=True)
class Event:
    index: int
    proc: int
    kind: str
    obj: object = None
    # step at which the effects became globally visible; None while buffered
    visible: int | None = None
    clock: list[int] | None = None
    so_from: tuple[int, ...] = ()


@dataclass
class OrderGraph:
    n: int
    enabled: bool = True
    events: list[Event] = field(default_factory=list)
    _last: dict[int, int] = field(default_factory=dict)
    _inbox: dict[int, list[int]] = field(default_factory=dict)

    def record(self, proc: int, kind: str, obj=None, so_from=(), visible=True) -> int:
        idx = len(self.events)
        if not self.enabled:
            # indices stay meaningful for trace dumps; no clocks are kept
            self.events.append(Event(idx, proc, kind, obj, idx if visible else None))
            return idx
        sources = tuple(so_from) + tuple(self._inbox.pop(proc, ()))
        prev = self._last.get(proc)
        clock = list(self.events[prev].clock) if prev is not None else [0] * self.n
        for s in sources:
            other = self.events[s].clock
            for i in range(self.n):
                if other[i] > clock[i]:
                    clock[i] = other[i]
        clock[proc] += 1
        self.events.append(Event(idx, proc, kind, obj, idx if visible else None, clock, sources))
        self._last[proc] = idx
        return idx

    def so_to_next(self, proc: int, sources) -> None:
        """Attach synchronization edges to the next event ``proc`` records."""
        if self.enabled:
            self._inbox.setdefault(proc, []).extend(sources)

    def set_visible(self, idx: int, step: int) -> None:
        self.events[idx].visible = step

    def __len__(self):
        return len(self.events)

    def _event(self, idx: int) -> Event:
        if not 0 <= idx < len(self.events):
            raise KeyError(f"unknown event {idx}")
        return self.events[idx]

    # -- relations -------------------------------------------------------

    def po(self, a: int, b: int) -> bool:
        ea, eb = self._event(a), self._event(b)
        return ea.proc == eb.proc and a < b

    def hb(self, a: int, b: int) -> bool:
        ea, eb = self._event(a), self._event(b)
        if a == b:
            return False
        if not self.enabled:
            raise RuntimeError("order tracking disabled for this machine")
        return ea.clock[ea.proc] <= eb.clock[ea.proc]

    def co(self, a: int, b: int) -> bool:
        ea, _ = self._event(a), self._event(b)
        return a != b and ea.visible is not None and ea.visible <= b

    def so(self, a: int, b: int) -> bool:
        self._event(a)
        eb = self._event(b)
        seen, stack = set(), list(eb.so_from)
        while stack:
            s = stack.pop()
            if s == a:
                return True
            if s not in seen:
                seen.add(s)
                stack.extend(self.events[s].so_from)
        return False

    def cohb(self, a: int, b: int) -> bool:
        return self.co(a, b) and self.hb(a, b)

    def order_query(self, a: int, b: int, relation: str) -> Order:
        if relation not in RELATIONS:
            raise ValueError(f"unknown relation {relation!r}")
        rel = getattr(self, relation)
        if rel(a, b):
            return Order.BEFORE
        if rel(b, a):
            return Order.AFTER
        return Order.PARALLEL

    def hb_edges(self):
        """All explicit po and so edges as (src, dst) index pairs."""
        last = {}
        for ev in self.events:
            if ev.proc in last:
                yield last[ev.proc], ev.index
            last[ev.proc] = ev.index
            for s in ev.so_from:
                yield s, ev.index

    def is_acyclic(self) -> bool:
        # Kahn's algorithm; independent of the recording order argument
        indeg = [0] * len(self.events)
        succ: dict[int, list[int]] = {}
        for s, d in self.hb_edges():
            succ.setdefault(s, []).append(d)
            indeg[d] += 1
        ready = [i for i, d in enumerate(indeg) if d == 0]
        seen = 0
        while ready:
            i = ready.pop()
            seen += 1
            for d in succ.get(i, ()):
                indeg[d] -= 1
                if indeg[d] == 0:
                    ready.append(d)
        return seen == len(self.events)

    def dump(self, fp) -> None:
        """Write the trace as JSON lines, one event per line."""
        for ev in self.events:
            rec = {"index": ev.index, "proc": ev.proc, "kind": ev.kind}
            obj = ev.obj
            if obj is not None and hasattr(obj, "to_json"):
                rec.update(obj.to_json())
            if ev.visible is not None and ev.visible != ev.index:
                rec["visible"] = ev.visible
            fp.write(json.dumps(rec, sort_keys=True) + "\n")
