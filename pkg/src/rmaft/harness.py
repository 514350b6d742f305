"""Scenario files, seeded runs, the fault-free oracle and reports."""

from __future__ import annotations

import functools
import json
import random
from dataclasses import dataclass, field

from .checkpointing import DalyGate
from .errors import DeadlockError, ScenarioError
from .scheduler import SimConfig, Simulation
from .topology import FdHierarchy, make_taware_placement
from .workloads import KvStore, make_workload

_MASK64 = (1 << 64) - 1

PROTOCOL_DEFAULTS = {
    "groups": 1,
    "taware_level": 0,
    "topology": None,
    "log_budget": None,
    "daly": {"mtbf": 200.0, "seconds_per_event": 1.0},
    "gsync_adds_hb": True,
    "access_deterministic": True,
    "gsync_ckpt_barrier": True,
    "optimistic_put_logging": False,
    "corrupt_log": False,
    "recovery": "auto",
}


@dataclass
class Scenario:
    n: int
    workload: dict
    window: int | None = None
    protocol: dict = field(default_factory=dict)
    faults: list = field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_json(cls, obj: dict) -> Scenario:
        if not isinstance(obj, dict):
            raise ScenarioError("a scenario is a JSON object")
        unknown = set(obj) - {"n", "window", "workload", "protocol", "faults", "seed"}
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            s = cls(n=int(obj["n"]), workload=dict(obj["workload"]),
                    window=None if obj.get("window") is None else int(obj["window"]),
                    protocol=dict(obj.get("protocol") or {}),
                    faults=list(obj.get("faults") or []), seed=int(obj.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"bad scenario: {exc!r}") from None
        s.validate()
        return s

    def to_json(self) -> dict:
        return {"n": self.n, "window": self.window, "workload": self.workload,
                "protocol": self.protocol, "faults": self.faults, "seed": self.seed}

    def with_seed(self, seed: int) -> Scenario:
        return Scenario(self.n, dict(self.workload), self.window, dict(self.protocol),
                        list(self.faults), seed)

    def settings(self) -> dict:
        unknown = set(self.protocol) - set(PROTOCOL_DEFAULTS)
        if unknown:
            raise ScenarioError(f"unknown protocol keys: {sorted(unknown)}")
        return {**PROTOCOL_DEFAULTS, **self.protocol}

    def validate(self) -> None:
        if self.n < 1:
            raise ScenarioError("need at least one process")
        if self.window is not None and self.window < 1:
            raise ScenarioError("window size must be positive")
        try:
            make_workload(self.workload)
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None
        cfg = self.settings()
        if cfg["groups"] < 1 or self.n % cfg["groups"]:
            raise ScenarioError(f"{self.n} processes do not split into {cfg['groups']} groups")
        if cfg["recovery"] not in ("auto", "gsync", "locks"):
            raise ScenarioError(f"unknown recovery scheme {cfg['recovery']!r}")
        for f in self.faults:
            if not isinstance(f, dict) or "event" not in f or int(f["event"]) < 0:
                raise ScenarioError(f"bad fault entry {f!r}")
            if "victim" in f:
                if not 0 <= int(f["victim"]) < self.n:
                    raise ScenarioError(f"fault victim {f['victim']} outside [0, {self.n})")
            elif "level" not in f or "element" not in f:
                raise ScenarioError(f"fault {f!r} names neither a victim nor a domain")
            elif cfg["topology"] is None:
                raise ScenarioError("domain faults need a protocol topology")


@dataclass
class Report:
    digest: str
    event_count: int
    fallbacks: int
    cf: bool
    replay_stats: dict
    exactly_once_ok: bool
    order_ok: bool
    consistency_ok: bool
    checkpoints: dict
    recoveries: list
    oracle_ok: bool | None = None

    @property
    def ok(self) -> bool:
        return (self.exactly_once_ok and self.order_ok and self.consistency_ok
                and self.oracle_ok is not False)

    def to_json(self) -> dict:
        return {
            "digest": self.digest, "event_count": self.event_count,
            "fallbacks": self.fallbacks, "cf": self.cf, "replay_stats": self.replay_stats,
            "exactly_once_ok": self.exactly_once_ok, "order_ok": self.order_ok,
            "consistency_ok": self.consistency_ok, "checkpoints": self.checkpoints,
            "recoveries": self.recoveries, "oracle_ok": self.oracle_ok,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _window(s: Scenario, workload) -> int:
    if s.window is not None:
        return s.window
    return workload.window_size() if isinstance(workload, KvStore) else 16


def build(s: Scenario, *, faults: bool = True) -> Simulation:
    s.validate()
    cfg = s.settings()
    workload = make_workload(s.workload)
    window = _window(s, workload)
    try:
        programs = workload.programs(s.n, window, random.Random(s.seed))
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    daly = cfg["daly"]
    config = SimConfig(
        groups=cfg["groups"], log_budget=cfg["log_budget"],
        daly=DalyGate(float(daly["mtbf"]), float(daly.get("seconds_per_event", 1.0))) if daly else None,
        gsync_adds_hb=bool(cfg["gsync_adds_hb"]),
        access_deterministic=bool(cfg["access_deterministic"]),
        gsync_ckpt_barrier=bool(cfg["gsync_ckpt_barrier"]),
        optimistic_put_logging=bool(cfg["optimistic_put_logging"]),
        corrupt_log=bool(cfg["corrupt_log"]), recovery=cfg["recovery"])
    plan = _fault_plan(s, cfg) if faults else []
    sched_seed = (s.seed * 0x9E3779B97F4A7C15 + 1) & _MASK64
    return Simulation(s.n, window, programs, sched_seed, config, plan)


def _fault_plan(s: Scenario, cfg: dict):
    placement = None
    out = []
    for f in s.faults:
        if "victim" in f:
            out.append((int(f["event"]), (int(f["victim"]),)))
            continue
        if placement is None:
            hier = FdHierarchy.from_json(cfg["topology"])
            k = s.n // cfg["groups"]
            groups = [list(range(i * k, (i + 1) * k)) for i in range(cfg["groups"])]
            placement = make_taware_placement(hier, groups, int(cfg["taware_level"]))
        level, element = int(f["level"]), int(f["element"])
        victims = tuple(p for p in range(s.n) if placement.element(p, level) == element)
        if victims:
            out.append((int(f["event"]), victims))
    return out


def _execute(sim: Simulation) -> Simulation:
    try:
        return sim.run()
    except DeadlockError as exc:
        raise ScenarioError(f"deadlock: {exc}") from None
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None


@functools.lru_cache(maxsize=4096)
def _reference(key: str) -> tuple[str, int]:
    s = Scenario.from_json(json.loads(key))
    sim = _execute(build(s, faults=False))
    return sim.digest(), len(sim.machine.graph)


def _reference_key(s: Scenario) -> str:
    return json.dumps({**s.to_json(), "faults": []}, sort_keys=True)


def reference_run(s: Scenario) -> str:
    """Digest of the same scenario with every fault removed."""
    return _reference(_reference_key(s))[0]


def run_scenario(s: Scenario, *, check_oracle: bool = False) -> Report:
    sim = _execute(build(s))
    recs = [r.to_json() for r in sim.recoveries]
    report = Report(
        digest=sim.digest(),
        event_count=len(sim.machine.graph),
        fallbacks=sim.fallbacks,
        cf=sim.cf,
        replay_stats={"recoveries": len(recs),
                      "fetched": sum(r["fetched"] for r in recs),
                      "replayed": sum(r["replayed"] for r in recs)},
        exactly_once_ok=all(r["exactly_once"] for r in recs),
        order_ok=all(r["order_preserved"] for r in recs),
        consistency_ok=sim.consistency_failures == 0 and sim.machine.graph.is_acyclic(),
        checkpoints={"coordinated": sim.store.coordinated_count,
                     "demand": sim.store.demand_count},
        recoveries=recs)
    if check_oracle and not sim.cf and sim.config.access_deterministic:
        report.oracle_ok = report.digest == reference_run(s)
    return report


def random_gsync_scenario(seed: int, *, combine_fraction: float = 0.0, faults: int = 1,
                          max_n: int = 32, max_events: int = 500) -> Scenario:
    """A random gsync workload with ``faults`` failures at random event indices."""
    rng = random.Random(seed)
    n = rng.randint(2, max_n)
    groups = rng.choice([g for g in (1, 2, 4, 8) if n % g == 0])
    ops = rng.randint(1, 4)
    rounds = rng.randint(1, 6)
    s = Scenario(
        n=n, window=rng.choice([4, 8, 16]),
        workload={"kind": "random-gsync", "rounds": rounds, "ops_per_round": ops,
                  "get_fraction": rng.choice([0.0, 0.3, 0.5]),
                  "combine_fraction": combine_fraction,
                  "flush_prob": rng.random(), "blocking_prob": rng.choice([0.0, 0.2])},
        protocol={"groups": groups,
                  "log_budget": rng.choice([None, 8, 32, 128]),
                  "daly": rng.choice([None, {"mtbf": 100.0}, {"mtbf": 1e9}]),
                  "gsync_ckpt_barrier": rng.random() < 0.5},
        seed=seed)
    while True:
        events = _reference(_reference_key(s))[1]
        wl = s.workload
        if events <= max_events or (wl["rounds"] == 1 and wl["ops_per_round"] == 1):
            break
        if wl["rounds"] > 1:
            wl["rounds"] -= 1
        else:
            wl["ops_per_round"] -= 1
    s.faults = [{"victim": rng.randrange(n), "event": rng.randrange(1, max(events, 2))}
                for _ in range(faults)]
    return s
