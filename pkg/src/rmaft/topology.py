"""Failure-domain hierarchies, topology-aware group placement and the
analytic probability of a catastrophic failure."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import FitError, InfeasiblePlacement


@dataclass(frozen=True)
class FailurePdf:
    """A * exp(-lam * x): failures per day with x concurrent element failures."""

    A: float
    lam: float

    def __post_init__(self):
        if not (self.A > 0 and self.lam > 0):
            raise ValueError(f"pdf coefficients must be positive, got A={self.A} lam={self.lam}")

    def __call__(self, x: int) -> float:
        return self.A * math.exp(-self.lam * x)


@dataclass
class Level:
    name: str
    count: int
    pdf: FailurePdf | None = None


@dataclass
class FdHierarchy:
    """Levels bottom-up (level 1 holds the nodes processes run on).

    ``parents[j]`` maps each element of level j+1 to its parent at level j+2
    (0-based lists); by default elements are split evenly and contiguously.
    """

    levels: list[Level]
    parents: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.levels:
            raise ValueError("a hierarchy needs at least one level")
        for lv in self.levels:
            if lv.count < 1:
                raise ValueError(f"level {lv.name!r} has no elements")
        if not self.parents:
            self.parents = [
                [i * hi.count // lo.count for i in range(lo.count)]
                for lo, hi in zip(self.levels, self.levels[1:])
            ]
        if len(self.parents) != len(self.levels) - 1:
            raise ValueError("need one containment map per adjacent level pair")
        for j, pmap in enumerate(self.parents):
            if len(pmap) != self.levels[j].count:
                raise ValueError(f"containment map for {self.levels[j].name!r} has wrong length")
            if any(not 0 <= x < self.levels[j + 1].count for x in pmap):
                raise ValueError(f"containment map for {self.levels[j].name!r} out of range")

    @property
    def h(self) -> int:
        return len(self.levels)

    def ancestors(self, node: int) -> list[int]:
        """Element ids of ``node`` at levels 1..h."""
        out = [node]
        for pmap in self.parents:
            out.append(pmap[out[-1]])
        return out

    def to_json(self) -> dict:
        return {"levels": [{"name": lv.name, "count": lv.count,
                            **({"pdf": {"A": lv.pdf.A, "lambda": lv.pdf.lam}} if lv.pdf else {})}
                           for lv in self.levels]}

    @classmethod
    def from_json(cls, obj: dict) -> FdHierarchy:
        try:
            levels = []
            for lv in obj["levels"]:
                pdf = lv.get("pdf")
                levels.append(Level(str(lv["name"]), int(lv["count"]),
                                    FailurePdf(float(pdf["A"]), float(pdf["lambda"])) if pdf else None))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"bad machine profile: {exc!r}") from None
        return cls(levels, obj.get("parents") or [])


# Coefficients fitted to the TSUBAME2 failure history.  Element counts are
# not published with them; these follow the machine's 1408 compute nodes.
TSUBAME2 = {
    "levels": [
        {"name": "nodes", "count": 1408, "pdf": {"A": 0.30142e-2, "lambda": 1.3567}},
        {"name": "psus", "count": 352, "pdf": {"A": 1.1836e-4, "lambda": 1.4831}},
        {"name": "switches", "count": 88, "pdf": {"A": 3.9249e-5, "lambda": 1.5902}},
        {"name": "racks", "count": 44, "pdf": {"A": 3.2257e-5, "lambda": 1.5488}},
    ]
}

PROFILES = {"tsubame2": TSUBAME2}


def load_profile(name_or_path: str) -> FdHierarchy:
    if name_or_path in PROFILES:
        return FdHierarchy.from_json(PROFILES[name_or_path])
    with open(name_or_path) as fp:
        return FdHierarchy.from_json(json.load(fp))


# -- placement ------------------------------------------------------------------


class PlacementViolation(NamedTuple):
    group: int
    level: int
    element: int


@dataclass
class Placement:
    hierarchy: FdHierarchy
    nodes: dict[int, int]

    def element(self, p: int, level: int) -> int:
        """Element hosting process ``p`` at 1-based ``level``."""
        return self.hierarchy.ancestors(self.nodes[p])[level - 1]


def make_taware_placement(hier: FdHierarchy, groups, n: int, m: int = 1) -> Placement:
    """Place groups so at most ``m`` members share any element at levels <= n."""
    if not 0 <= n <= hier.h:
        raise ValueError(f"t-awareness level {n} outside [0, {hier.h}]")
    for k in range(1, n + 1):
        cap = hier.levels[k - 1].count * m
        for grp in groups:
            if len(grp) > cap:
                raise InfeasiblePlacement(k, len(grp), hier.levels[k - 1].count)
    nodes_n = hier.levels[0].count
    anc = [hier.ancestors(v) for v in range(nodes_n)]
    # interleave nodes across level-n elements so consecutive picks differ there
    if n:
        rank, seen = {}, {}
        for v in range(nodes_n):
            top = anc[v][n - 1]
            rank[v] = seen.get(top, 0)
            seen[top] = rank[v] + 1
        order = sorted(range(nodes_n), key=lambda v: (rank[v], anc[v][n - 1]))
    else:
        order = list(range(nodes_n))
    out: dict[int, int] = {}
    ptr = 0
    for grp in groups:
        used = [dict() for _ in range(n)]
        for p in grp:
            for step in range(nodes_n):
                v = order[(ptr + step) % nodes_n]
                if all(used[k].get(anc[v][k], 0) < m for k in range(n)):
                    break
            else:
                for k in range(n):
                    if all(used[k].get(anc[v][k], 0) >= m for v in range(nodes_n)):
                        raise InfeasiblePlacement(k + 1, len(grp), hier.levels[k].count)
                raise InfeasiblePlacement(n, len(grp), hier.levels[n - 1].count)
            ptr = (ptr + step + 1) % nodes_n
            out[p] = v
            for k in range(n):
                used[k][anc[v][k]] = used[k].get(anc[v][k], 0) + 1
    return Placement(hier, out)


def validate_taware(placement: Placement, groups, n: int, m: int = 1) -> PlacementViolation | None:
    for gi, grp in enumerate(groups):
        for k in range(1, n + 1):
            count: dict[int, int] = {}
            for p in grp:
                e = placement.element(p, k)
                count[e] = count.get(e, 0) + 1
                if count[e] > m:
                    return PlacementViolation(gi, k, e)
    return None


# -- catastrophic-failure probability ---------------------------------------------


def p_conditional(H: int, group_size: int, x: int) -> float:
    """Chance that ``x`` concurrent failures among ``H`` elements hit two
    members of one group, under the worst-case (fully fragmented) placement.

    D * C(G,2) * C(H-2,x-2) / C(H,x) reduces to D*G(G-1)*x(x-1) / (2H(H-1)),
    which stays exact in integers for any H.
    """
    if H < 1 or group_size < 2 or not 0 <= x <= H:
        raise ValueError(f"invalid counts H={H} group_size={group_size} x={x}")
    if x < 2:
        return 0.0
    d = -(-H // group_size)
    num = d * group_size * (group_size - 1) * x * (x - 1)
    den = 2 * H * (H - 1)
    return 1.0 if num >= den else num / den


@dataclass
class PcfQuery:
    n_procs: int
    groups: int
    level: int
    hierarchy: FdHierarchy
    m: int = 1

    def __post_init__(self):
        if self.m != 1:
            raise ValueError("only m = 1 (XOR) groups are modeled")
        if self.groups < 1 or self.n_procs < 1:
            raise ValueError("need at least one process and one group")
        if self.n_procs % self.groups:
            raise ValueError(f"{self.n_procs} processes do not split into {self.groups} groups")
        if not 0 <= self.level <= self.hierarchy.h:
            raise ValueError(f"t-awareness level {self.level} outside [0, {self.hierarchy.h}]")
        if any(lv.pdf is None for lv in self.hierarchy.levels):
            raise ValueError("every level needs a failure pdf")

    @property
    def group_size(self) -> int:
        return self.n_procs // self.groups + self.m


def p_cf(q: PcfQuery) -> float:
    """Per-day probability of a catastrophic failure."""
    total = 0.0
    gs = q.group_size
    for j, lv in enumerate(q.hierarchy.levels, 1):
        for x in range(1, lv.count + 1):
            px = lv.pdf(x)
            total += px * p_conditional(lv.count, gs, x) if j <= q.level else px
    return min(max(total, 0.0), 1.0)


def ch_groups(n_procs: int, fraction: float) -> int:
    """Group count for a checksum-process share of ``fraction`` * N."""
    if not 0 < fraction <= 1:
        raise ValueError(f"checksum fraction {fraction} outside (0, 1]")
    g = round(fraction * n_procs)
    if g < 1:
        raise ValueError(f"fraction {fraction} of {n_procs} leaves no groups")
    return g


def fit_pdf(samples) -> FailurePdf:
    """Least-squares fit of ln(count) = ln A - lam * x.

    ``samples`` maps concurrent-failure counts x to observed frequencies
    (a dict or (x, count) pairs); empty bins carry no information and are skipped.
    """
    pairs = sorted(samples.items() if hasattr(samples, "items") else samples)
    pts = [(float(x), math.log(c)) for x, c in pairs if c > 0]
    if len({x for x, _ in pts}) < 2:
        raise FitError("need at least two non-empty bins to fit an exponential")
    slope, intercept = statistics.linear_regression([x for x, _ in pts], [y for _, y in pts])
    if slope >= 0:
        raise FitError("histogram does not decay")
    return FailurePdf(math.exp(intercept), -slope)
