"""Per-process programs for the scheduler.

A program is a list of tuples in a small instruction set:

    ("put", trg, cell, value, combine, blocking)
    ("get", trg, cell, local, blocking)
    ("flush", trg)                    trg may be ALL
    ("lock", trg, str) / ("unlock", trg, str)
    ("gsync",)
    ("ckpt",)                         collective Locks-scheme checkpoint
    ("write", cell, value) / ("read", cell, reg)
    ("atomic", op, trg, cell, operand, compare, reg)
    ("jz", reg, target)               jump when the register holds 0
    ("mark", label)                   record log counters (instrumentation)
    ("nop",)

Operands may be register references ``("r", reg, mul, add)`` meaning
``regs[reg] * mul + add``.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .machine import ALL


def reg(name: str, mul: int = 1, add: int = 0):
    return ("r", name, mul, add)


@dataclass
class RandomGsync:
    """Rounds of puts and gets separated by gsyncs.

    Inside one round every location (process, cell) plays one role: read
    only, written by a single source, written only by combining puts, or
    the landing cell of a single get.  The committed outcome therefore does
    not depend on when within the round an epoch closes.
    """

    rounds: int = 4
    ops_per_round: int = 4
    get_fraction: float = 0.3
    combine_fraction: float = 0.0
    flush_prob: float = 0.3
    blocking_prob: float = 0.1

    def programs(self, n: int, window: int, rng: random.Random):
        progs = [[] for _ in range(n)]
        if n < 2:
            return progs
        for _ in range(self.rounds):
            role: dict[tuple[int, int], tuple] = {}
            for p in range(n):
                ops = progs[p]
                for _ in range(self.ops_per_round):
                    t = rng.choice([q for q in range(n) if q != p])
                    cell = rng.randrange(window)
                    if rng.random() < self.get_fraction:
                        if role.setdefault((t, cell), ("ro",)) != ("ro",):
                            continue
                        free = [c for c in range(window) if (p, c) not in role]
                        if not free:
                            continue
                        local = rng.choice(free)
                        role[(p, local)] = ("land",)
                        ops.append(("get", t, cell, local, rng.random() < self.blocking_prob))
                    else:
                        combine = rng.random() < self.combine_fraction
                        want = ("combine",) if combine else ("single", p)
                        if role.setdefault((t, cell), want) != want:
                            continue
                        ops.append(("put", t, cell, rng.randrange(1, 1 << 20), combine,
                                    rng.random() < self.blocking_prob))
                    if rng.random() < self.flush_prob:
                        ops.append(("flush", t if rng.random() < 0.5 else ALL))
                ops.append(("gsync",))
        return progs


@dataclass
class LockPut:
    """Critical sections of puts; structure s owns cells s, s+k, s+2k, ..."""

    sections: int = 4
    puts_per_section: int = 3
    structures: int = 1
    flush_prob: float = 0.3
    ckpt_every: int = 0

    def programs(self, n: int, window: int, rng: random.Random):
        progs = [[] for _ in range(n)]
        if n < 2:
            return progs
        k = max(1, min(self.structures, window))
        for p in range(n):
            ops = progs[p]
            for i in range(self.sections):
                t = rng.choice([q for q in range(n) if q != p])
                s = rng.randrange(k)
                name = None if k == 1 else f"s{s}"
                cells = list(range(s, window, k))
                ops.append(("lock", t, name))
                for _ in range(self.puts_per_section):
                    ops.append(("put", t, rng.choice(cells), rng.randrange(1, 1 << 20), False, False))
                    if rng.random() < self.flush_prob:
                        ops.append(("flush", t))
                ops.append(("unlock", t, name))
                if self.ckpt_every and (i + 1) % self.ckpt_every == 0:
                    ops.append(("ckpt",))
        return progs


@dataclass
class KvStore:
    """Inserts into a distributed hash table of ``slots`` cells per process.

    Layout at every owner: slots [0, S), a free-entry counter at S, the
    last-inserted entry at S+1, then overflow entries (key, next) pairs.
    A free slot takes one CAS (a put and a get); a collision takes CAS,
    fetch-and-add, two puts, a swap, a link put and a read-back get,
    which is six puts and four gets.
    """

    inserts: int = 16
    slots: int = 8
    key_range: int = 1000
    wait_nops: bool = True

    def window_size(self) -> int:
        return self.slots + 2 + 2 * max(self.inserts, 1)

    def programs(self, n: int, window: int, rng: random.Random):
        progs = [[] for _ in range(n)]
        if n < 2 or self.inserts <= 0:
            return progs
        if self.key_range < self.slots:
            raise ValueError("key range must cover the slots")
        if window < self.window_size():
            raise ValueError(f"kvstore needs a window of {self.window_size()} cells")
        total = n * self.slots
        for i in range(self.inserts):
            p = i % n
            while True:
                key = rng.randrange(1, self.key_range + 1)
                owner = (key % total) // self.slots
                if owner != p:
                    break
            progs[p].extend(insert_ops(owner, key % self.slots, key, self.slots, len(progs[p])))
            if self.wait_nops:
                # exponential think time between inserts, as a placeholder event
                progs[p].append(("nop",))
        return progs


def insert_ops(owner: int, slot: int, key: int, slots: int, base: int):
    free, last, heap = slots, slots + 1, slots + 2
    end = base + 9
    return [
        ("atomic", "cas", owner, slot, key, 0, "old"),
        ("jz", "old", end - 1),
        ("atomic", "fao", owner, free, 1, None, "idx"),
        ("put", owner, reg("idx", 2, heap), key, False, False),
        ("put", owner, reg("idx", 2, heap + 1), 0, False, False),
        ("atomic", "swap", owner, last, reg("idx", 1, 1), None, "prev"),
        ("put", owner, reg("idx", 2, heap + 1), reg("prev"), False, False),
        ("get", owner, reg("idx", 2, heap), None, True),
        ("mark", "insert"),
    ]


def make_workload(spec: dict):
    kinds = {"random-gsync": RandomGsync, "lock-put": LockPut, "kvstore": KvStore}
    kind = spec.get("kind")
    if kind not in kinds:
        raise ValueError(f"unknown workload kind {kind!r}")
    params = {k: v for k, v in spec.items() if k != "kind"}
    try:
        return kinds[kind](**params)
    except TypeError as exc:
        raise ValueError(f"bad {kind} parameters: {exc}") from None
