"""Declarative experiment descriptions (TOML) and their validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from .node import Timers
from .simnet.delays import DelayModel
from .simnet.mobility import MobilityModel

ROLES = (
    "exhaustion-requester",
    "spoofing-sender",
    "sybil-requester",
    "malicious-cosigner",
    "disturbing-initializer",
)
AXES = ("threshold", "density", "max-speed")
PLACEMENTS = ("random", "cluster", "explicit")


class ScenarioError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


@dataclass(frozen=True)
class NodeGroup:
    name: str = "nodes"
    count: int = 0
    count_from: str | None = None
    density: float | None = None
    placement: str = "random"
    center: tuple[float, float] | None = None
    radius: float = 50.0
    ids: tuple[int, ...] | None = None
    positions: tuple[tuple[float, float], ...] | None = None
    start: float = 0.0
    jitter: float = 0.0
    spacing: float = 0.0
    preconfigured: bool = False
    relay_only: bool = False


@dataclass(frozen=True)
class JoinEvent:
    time: float
    id: int
    position: tuple[float, float] | None = None


@dataclass(frozen=True)
class Departure:
    id: int
    leave: float
    rejoin: float | None = None


@dataclass(frozen=True)
class AdversarySpec:
    role: str
    id: int | None = None
    time: float = 0.0
    position: tuple[float, float] | None = None
    params: dict = field(default_factory=dict, hash=False, compare=False)


@dataclass(frozen=True)
class Scenario:
    k: int = 3
    rc_thresh: int = 3
    m_blocks: int = 16
    area: tuple[float, float] = (1000.0, 1000.0)
    radio_range: float = 250.0
    t_end: float = 30.0
    runs: int = 1
    bootstrap: str = "protocol"
    group: str = "sim"
    joiner_block: int | None = None
    mobility: MobilityModel = MobilityModel()
    timers: Timers = Timers()
    delays: DelayModel = DelayModel()
    initial_r_k: int = 2
    reply_grace: float = 0.05
    early_exit: bool = True
    cert_lifetime: float = 3600.0
    pending_ttl: float = 30.0
    accusation_threshold: int | None = None
    node_groups: tuple[NodeGroup, ...] = ()
    joins: tuple[JoinEvent, ...] = ()
    departures: tuple[Departure, ...] = ()
    adversaries: tuple[AdversarySpec, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def area_km2(self) -> float:
        return self.area[0] * self.area[1] / 1e6

    def group_count(self, g: NodeGroup) -> int:
        if g.count_from == "k":
            return max(0, self.k + g.count)
        if g.count_from == "density":
            return max(0, int(round((g.density or 0.0) * self.area_km2)) + g.count)
        if g.ids is not None:
            return len(g.ids)
        if g.positions is not None and g.placement == "explicit":
            return len(g.positions)
        return g.count

    @property
    def node_count(self) -> int:
        groups = sum(self.group_count(g) for g in self.node_groups if not g.relay_only)
        return groups + len(self.joins) + len(self.adversaries)


@dataclass(frozen=True)
class SweepSpec:
    base: Scenario
    axis: str
    values: tuple[float, ...]
    runs: int


# -- parsing ------------------------------------------------------------------------


class _Reader:
    """Pulls typed fields out of a TOML table while collecting errors."""

    def __init__(self, table: dict, path: str, errors: list[str]):
        self.table = dict(table)
        self.path = path
        self.errors = errors

    def _err(self, key: str, reason: str) -> None:
        where = f"{self.path}.{key}" if self.path else key
        self.errors.append(f"{where}: {reason}")

    def get(self, key: str, kind, default=None, *, check=None, reason: str = ""):
        if key not in self.table:
            return default
        v = self.table.pop(key)
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if kind is not None and (not isinstance(v, kind) or (kind is int and isinstance(v, bool))):
            name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            self._err(key, f"expected {name}, got {type(v).__name__}")
            return default
        if check is not None and not check(v):
            self._err(key, reason or "invalid value")
            return default
        return v

    def point(self, key: str, default=None):
        v = self.get(key, list, None)
        if v is None:
            return default
        if len(v) != 2 or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            self._err(key, "expected [x, y]")
            return default
        return (float(v[0]), float(v[1]))

    def finish(self) -> None:
        for key in sorted(self.table):
            self._err(key, "unknown field")


def _nonneg(v) -> bool:
    return v >= 0


def _parse_timers(table, errors) -> Timers:
    r = _Reader(table, "timers", errors)
    kw = {f.name: r.get(f.name, float, f.default, check=lambda v: v > 0, reason="must be > 0") for f in dataclasses.fields(Timers)}
    r.finish()
    return Timers(**kw)


def _parse_delays(table, errors) -> DelayModel:
    r = _Reader(table, "delays", errors)
    kw = {}
    for f in dataclasses.fields(DelayModel):
        kw[f.name] = r.get(f.name, float, f.default, check=_nonneg, reason="must be >= 0")
    r.finish()
    try:
        return DelayModel(**kw)
    except ValueError as exc:
        errors.append(f"delays: {exc}")
        return DelayModel()


def _parse_mobility(table, errors) -> MobilityModel:
    r = _Reader(table, "mobility", errors)
    kind = r.get("kind", str, "static", check=lambda v: v in ("static", "random-waypoint"),
                 reason="must be 'static' or 'random-waypoint'")
    max_speed = r.get("max_speed", float, 0.0, check=_nonneg, reason="must be >= 0")
    min_speed = r.get("min_speed", float, None, check=_nonneg, reason="must be >= 0")
    pause = r.get("pause", float, 0.0, check=_nonneg, reason="must be >= 0")
    step = r.get("step", float, 0.1, check=lambda v: v > 0, reason="must be > 0")
    r.finish()
    if min_speed is not None and min_speed > max_speed:
        errors.append("mobility.min_speed: exceeds max_speed")
    return MobilityModel(kind, max_speed, min_speed, pause, step)


def _parse_group(table, path, errors) -> NodeGroup:
    r = _Reader(table, path, errors)
    g = NodeGroup(
        name=r.get("name", str, path),
        count=r.get("count", int, 0),
        count_from=r.get("count_from", str, None, check=lambda v: v in ("k", "density"), reason="must be 'k' or 'density'"),
        density=r.get("density", float, None, check=_nonneg, reason="must be >= 0"),
        placement=r.get("placement", str, "random", check=lambda v: v in PLACEMENTS, reason=f"must be one of {PLACEMENTS}"),
        center=r.point("center"),
        radius=r.get("radius", float, 50.0, check=_nonneg, reason="must be >= 0"),
        ids=None,
        positions=None,
        start=r.get("start", float, 0.0, check=_nonneg, reason="must be >= 0"),
        jitter=r.get("jitter", float, 0.0, check=_nonneg, reason="must be >= 0"),
        spacing=r.get("spacing", float, 0.0, check=_nonneg, reason="must be >= 0"),
        preconfigured=r.get("preconfigured", bool, False),
        relay_only=r.get("relay_only", bool, False),
    )
    ids = r.get("ids", list, None)
    if ids is not None:
        if not all(isinstance(i, int) and not isinstance(i, bool) and 0 <= i < 2 ** 64 for i in ids):
            errors.append(f"{path}.ids: identities must be unsigned 64-bit integers")
            ids = None
        else:
            ids = tuple(ids)
    positions = r.get("positions", list, None)
    if positions is not None:
        ok = all(isinstance(p, list) and len(p) == 2 for p in positions)
        if not ok:
            errors.append(f"{path}.positions: expected a list of [x, y]")
            positions = None
        else:
            positions = tuple((float(x), float(y)) for x, y in positions)
    r.finish()
    g = dataclasses.replace(g, ids=ids, positions=positions)
    if g.count < 0 and g.count_from is None:
        errors.append(f"{path}.count: must be >= 0")
    if g.placement == "explicit" and positions is None:
        errors.append(f"{path}.positions: required for explicit placement")
    if g.count_from == "density" and g.density is None:
        errors.append(f"{path}.density: required when count_from = 'density'")
    return g


def _parse_join(table, path, errors) -> JoinEvent | None:
    r = _Reader(table, path, errors)
    t = r.get("time", float, None, check=_nonneg, reason="must be >= 0")
    ident = r.get("id", int, None, check=lambda v: 0 <= v < 2 ** 64, reason="must be an unsigned 64-bit integer")
    pos = r.point("position")
    r.finish()
    if t is None or ident is None:
        errors.append(f"{path}: 'time' and 'id' are required")
        return None
    return JoinEvent(t, ident, pos)


def _parse_departure(table, path, errors) -> Departure | None:
    r = _Reader(table, path, errors)
    ident = r.get("id", int, None)
    leave = r.get("leave", float, None, check=_nonneg, reason="must be >= 0")
    rejoin = r.get("rejoin", float, None, check=_nonneg, reason="must be >= 0")
    r.finish()
    if ident is None or leave is None:
        errors.append(f"{path}: 'id' and 'leave' are required")
        return None
    if rejoin is not None and rejoin <= leave:
        errors.append(f"{path}.rejoin: must be after leave")
    return Departure(ident, leave, rejoin)


def _parse_adversary(table, path, errors) -> AdversarySpec | None:
    r = _Reader(table, path, errors)
    role = r.get("role", str, None, check=lambda v: v in ROLES, reason=f"must be one of {ROLES}")
    ident = r.get("id", int, None, check=lambda v: 0 <= v < 2 ** 64, reason="must be an unsigned 64-bit integer")
    t = r.get("time", float, 0.0, check=_nonneg, reason="must be >= 0")
    pos = r.point("position")
    params = r.get("params", dict, {})
    r.finish()
    if role is None:
        if not any(e.startswith(f"{path}.role") for e in errors):
            errors.append(f"{path}.role: required")
        return None
    return AdversarySpec(role, ident, t, pos, params)


_TOP_LEVEL = {
    "k", "rc_thresh", "m_blocks", "area", "radio_range", "t_end", "runs", "bootstrap", "group",
    "joiner_block", "initial_r_k", "reply_grace", "early_exit", "cert_lifetime", "pending_ttl",
    "accusation_threshold",
}


def _scenario_from_table(doc: dict, errors: list[str]) -> Scenario:
    doc = dict(doc)
    sub = {name: doc.pop(name, None) for name in ("mobility", "timers", "delays", "nodes", "joins", "departures", "adversaries", "sweep")}
    r = _Reader({k: v for k, v in doc.items() if k in _TOP_LEVEL}, "", errors)
    for key in sorted(set(doc) - _TOP_LEVEL):
        errors.append(f"{key}: unknown field")
    d = Scenario()
    k = r.get("k", int, d.k)
    if isinstance(k, int) and k < 2:
        errors.append("k: k must be ≥ 2")
    kw: dict[str, Any] = dict(
        k=k,
        rc_thresh=r.get("rc_thresh", int, d.rc_thresh, check=lambda v: v >= 1, reason="must be >= 1"),
        m_blocks=r.get("m_blocks", int, d.m_blocks, check=lambda v: v >= 1 and v & (v - 1) == 0, reason="must be a power of two"),
        radio_range=r.get("radio_range", float, d.radio_range, check=lambda v: v > 0, reason="must be > 0"),
        t_end=r.get("t_end", float, d.t_end, check=_nonneg, reason="must be >= 0"),
        runs=r.get("runs", int, d.runs, check=lambda v: v >= 1, reason="run count must be ≥ 1"),
        bootstrap=r.get("bootstrap", str, d.bootstrap, check=lambda v: v in ("protocol", "preconfigured"),
                        reason="must be 'protocol' or 'preconfigured'"),
        group=r.get("group", str, d.group, check=lambda v: v in ("sim", "test"), reason="must be 'sim' or 'test'"),
        joiner_block=r.get("joiner_block", int, None, check=_nonneg, reason="must be >= 0"),
        initial_r_k=r.get("initial_r_k", int, d.initial_r_k, check=lambda v: v >= 1, reason="must be >= 1"),
        reply_grace=r.get("reply_grace", float, d.reply_grace, check=_nonneg, reason="must be >= 0"),
        early_exit=r.get("early_exit", bool, d.early_exit),
        cert_lifetime=r.get("cert_lifetime", float, d.cert_lifetime, check=lambda v: v > 0, reason="must be > 0"),
        pending_ttl=r.get("pending_ttl", float, d.pending_ttl, check=lambda v: v > 0, reason="must be > 0"),
        accusation_threshold=r.get("accusation_threshold", int, None, check=lambda v: v >= 1, reason="must be >= 1"),
    )
    area = r.point("area", d.area)
    if area[0] <= 0 or area[1] <= 0:
        errors.append("area: both sides must be > 0")
    kw["area"] = area
    r.finish()
    if isinstance(kw["joiner_block"], int) and kw["joiner_block"] >= kw["m_blocks"]:
        errors.append("joiner_block: must be below m_blocks")

    def tables(name):
        v = sub[name]
        if v is None:
            return []
        if not isinstance(v, list) or not all(isinstance(t, dict) for t in v):
            errors.append(f"{name}: expected an array of tables")
            return []
        return v

    def table(name):
        v = sub[name]
        if v is None:
            return {}
        if not isinstance(v, dict):
            errors.append(f"{name}: expected a table")
            return {}
        return v

    kw["mobility"] = _parse_mobility(table("mobility"), errors)
    kw["timers"] = _parse_timers(table("timers"), errors)
    kw["delays"] = _parse_delays(table("delays"), errors)
    kw["node_groups"] = tuple(_parse_group(t, f"nodes[{i}]", errors) for i, t in enumerate(tables("nodes")))
    kw["joins"] = tuple(j for i, t in enumerate(tables("joins")) if (j := _parse_join(t, f"joins[{i}]", errors)))
    kw["departures"] = tuple(x for i, t in enumerate(tables("departures")) if (x := _parse_departure(t, f"departures[{i}]", errors)))
    kw["adversaries"] = tuple(a for i, t in enumerate(tables("adversaries")) if (a := _parse_adversary(t, f"adversaries[{i}]", errors)))
    scenario = Scenario(**kw)
    return validate(scenario, errors)


def validate(scenario: Scenario, errors: list[str] | None = None) -> Scenario:
    """Cross-field checks.  Returns the scenario with warnings attached."""
    errors = [] if errors is None else errors
    warnings = []
    seen: dict[int, str] = {}

    def claim(ident: int, where: str):
        if ident in seen:
            errors.append(f"{where}: duplicate node identity {ident} (also in {seen[ident]})")
        else:
            seen[ident] = where

    for i, g in enumerate(scenario.node_groups):
        for ident in g.ids or ():
            claim(ident, f"nodes[{i}]")
        if g.ids is not None and g.count and len(g.ids) != scenario.group_count(g):
            errors.append(f"nodes[{i}].ids: {len(g.ids)} identities for {scenario.group_count(g)} nodes")
        if g.placement == "explicit" and g.positions is not None and len(g.positions) != scenario.group_count(g):
            errors.append(f"nodes[{i}].positions: {len(g.positions)} positions for {scenario.group_count(g)} nodes")
    for i, j in enumerate(scenario.joins):
        claim(j.id, f"joins[{i}]")
    for i, a in enumerate(scenario.adversaries):
        if a.id is not None:
            claim(a.id, f"adversaries[{i}]")
    for i, d in enumerate(scenario.departures):
        if d.id not in seen:
            errors.append(f"departures[{i}].id: unknown node identity {d.id}")
    if errors:
        raise ScenarioError(errors)
    n = scenario.node_count
    if n and n < 2 * scenario.k - 1:
        warnings.append(f"n={n} is below 2k-1={2 * scenario.k - 1}; joins may raise it")
    if scenario.initial_r_k >= scenario.k:
        warnings.append(f"initial_r_k={scenario.initial_r_k} is clamped to k-1={scenario.k - 1}")
    return dataclasses.replace(scenario, warnings=tuple(warnings))


def _load(text: str) -> dict:
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError([f"syntax: {exc}"]) from None


def parse_scenario(text: str) -> Scenario:
    errors: list[str] = []
    scenario = _scenario_from_table(_load(text), errors)
    if errors:
        raise ScenarioError(errors)
    return scenario


def parse_sweep(text: str) -> SweepSpec:
    doc = _load(text)
    errors: list[str] = []
    sweep = doc.get("sweep")
    base = None
    try:
        base = _scenario_from_table(doc, errors)
    except ScenarioError as exc:
        errors = exc.errors
    if not isinstance(sweep, dict):
        errors.append("sweep: a [sweep] table is required")
        raise ScenarioError(errors)
    r = _Reader(sweep, "sweep", errors)
    axis = r.get("axis", str, None, check=lambda v: v in AXES, reason=f"must be one of {AXES}")
    values = r.get("values", list, None)
    runs = r.get("runs", int, None, check=lambda v: v >= 1, reason="run count must be ≥ 1")
    r.finish()
    if axis is None and not any(e.startswith("sweep.axis") for e in errors):
        errors.append("sweep.axis: required")
    if not values:
        errors.append("sweep.values: must be a nonempty list")
    elif not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        errors.append("sweep.values: must be numbers")
    if errors:
        raise ScenarioError(errors)
    if axis == "threshold" and any(v != int(v) or v < 2 for v in values):
        raise ScenarioError(["sweep.values: thresholds must be integers ≥ 2"])
    return SweepSpec(base, axis, tuple(values), runs or base.runs)


def apply_axis(base: Scenario, axis: str, value: float) -> Scenario:
    if axis == "threshold":
        return dataclasses.replace(base, k=int(value))
    if axis == "density":
        groups = tuple(
            dataclasses.replace(g, density=float(value)) if g.count_from == "density" else g for g in base.node_groups
        )
        return dataclasses.replace(base, node_groups=groups)
    if axis == "max-speed":
        kind = "random-waypoint" if value > 0 else base.mobility.kind
        mob = dataclasses.replace(base.mobility, kind=kind, max_speed=float(value),
                                  min_speed=None if base.mobility.min_speed is None else min(base.mobility.min_speed, float(value)))
        return dataclasses.replace(base, mobility=mob)
    raise ValueError(f"unknown axis {axis!r}")
