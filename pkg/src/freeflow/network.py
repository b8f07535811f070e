"""Road network model, scenario documents and super-segment partitioning.

A scenario document is JSON with the top-level keys ``links``, ``connectors``,
``routes``, ``entries``, ``sim`` and ``controller``. Lengths are metres,
speed limits km/h, demand rates veh/hr.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

CONTROLLER_TYPES = (
    "none",
    "equal_split",
    "prop_split",
    "green_wave",
    "scats",
    "scoot",
    "backpressure",
    "dqn",
)

DEFAULT_STEP_S = 0.1
DEFAULT_CONTROL_INTERVAL_S = 60.0
DEFAULT_SUPER_SEGMENT_M = (2000.0, 3000.0)


class ScenarioError(ValueError):
    """Invalid scenario document or network."""


@dataclass(frozen=True)
class Link:
    id: str
    length: float
    speed_limit: float
    from_node: str
    to_node: str
    exit: bool = False
    entry_of: str | None = None


@dataclass(frozen=True)
class Connector:
    id: str
    kind: str
    upstream: tuple[str, ...]
    downstream: tuple[str, ...]
    priority: tuple[str, ...] = ()
    signalized: bool = False


@dataclass(frozen=True)
class Route:
    id: str
    links: tuple[str, ...]
    weight: float = 1.0


@dataclass(frozen=True)
class DemandWindow:
    t_start_s: float
    t_end_s: float
    rate_veh_per_hr: float


@dataclass(frozen=True)
class Entry:
    id: str
    link: str
    demand: tuple[DemandWindow, ...]

    def rate_at(self, t: float) -> float:
        for w in self.demand:
            if w.t_start_s <= t < w.t_end_s:
                return w.rate_veh_per_hr
        return 0.0


@dataclass(frozen=True)
class SimParams:
    duration_s: float
    step_s: float = DEFAULT_STEP_S
    control_interval_s: float = DEFAULT_CONTROL_INTERVAL_S
    seed: int = 0
    compliance: float = 1.0
    critical_gap_s: float = 3.0
    vehicle_length_m: float = 4.5
    desired_speed_kmh: float | None = None
    command_decel: float = 2.0
    # intrinsic fixed-time heads on single-approach signalized connectors
    fixed_cycle_s: float = 120.0
    fixed_green_s: float = 55.0
    super_segment_m: tuple[float, float] = DEFAULT_SUPER_SEGMENT_M
    w99: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ControllerSpec:
    type: str = "none"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ScenarioConfig:
    links: tuple[Link, ...]
    connectors: tuple[Connector, ...]
    routes: tuple[Route, ...]
    entries: tuple[Entry, ...]
    sim: SimParams
    controller: ControllerSpec = ControllerSpec()
    name: str = ""

    def with_controller(self, type: str, params: dict | None = None) -> "ScenarioConfig":
        if type not in CONTROLLER_TYPES:
            raise ScenarioError(f"unknown controller type {type!r}")
        if params is None:
            params = dict(self.controller.params) if type == self.controller.type else {}
        return _replace(self, controller=ControllerSpec(type, dict(params)))

    def with_sim(self, **changes: Any) -> "ScenarioConfig":
        return _replace(self, sim=_replace(self.sim, **changes))

    def with_demand_scale(self, factor: float) -> "ScenarioConfig":
        entries = tuple(
            Entry(e.id, e.link, tuple(
                DemandWindow(w.t_start_s, w.t_end_s, w.rate_veh_per_hr * factor) for w in e.demand
            ))
            for e in self.entries
        )
        return _replace(self, entries=entries)


def _replace(obj, **changes):
    from dataclasses import replace
    return replace(obj, **changes)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ScenarioError(f"{where}: missing field {key!r}")
    return d[key]


def _num(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ScenarioError(f"{where}: value must be finite")
    return float(value)


def parse_scenario(text: str | bytes) -> ScenarioConfig:
    """Parse and validate a scenario document, applying defaults."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(
            f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a JSON object")
    return scenario_from_dict(doc)


def scenario_from_dict(doc: dict) -> ScenarioConfig:
    entries_raw = doc.get("entries", [])
    entry_links = {}
    for i, e in enumerate(entries_raw):
        eid = str(e.get("id", f"entry{i}"))
        entry_links[str(_require(e, "link", f"entries[{i}]"))] = eid

    links = []
    for i, raw in enumerate(_require(doc, "links", "scenario")):
        where = f"links[{i}]"
        lid = str(_require(raw, "id", where))
        links.append(Link(
            id=lid,
            length=_num(_require(raw, "length", where), f"{where}.length"),
            speed_limit=_num(_require(raw, "speed_limit", where), f"{where}.speed_limit"),
            from_node=str(raw.get("from_node", f"{lid}:from")),
            to_node=str(raw.get("to_node", f"{lid}:to")),
            exit=bool(raw.get("exit", False)),
            entry_of=entry_links.get(lid),
        ))

    connectors = []
    for i, raw in enumerate(doc.get("connectors", [])):
        where = f"connectors[{i}]"
        up = tuple(str(x) for x in _require(raw, "upstream", where))
        connectors.append(Connector(
            id=str(raw.get("id", f"c{i}")),
            kind=str(_require(raw, "kind", where)),
            upstream=up,
            downstream=tuple(str(x) for x in _require(raw, "downstream", where)),
            priority=tuple(str(x) for x in raw.get("priority", up)),
            signalized=bool(raw.get("signalized", False)),
        ))

    routes = []
    for i, raw in enumerate(_require(doc, "routes", "scenario")):
        where = f"routes[{i}]"
        routes.append(Route(
            id=str(raw.get("id", f"r{i}")),
            links=tuple(str(x) for x in _require(raw, "links", where)),
            weight=_num(raw.get("weight", 1.0), f"{where}.weight"),
        ))

    entries = []
    for i, raw in enumerate(entries_raw):
        where = f"entries[{i}]"
        windows = []
        for j, w in enumerate(_require(raw, "demand", where)):
            ww = f"{where}.demand[{j}]"
            windows.append(DemandWindow(
                _num(_require(w, "t_start_s", ww), f"{ww}.t_start_s"),
                _num(_require(w, "t_end_s", ww), f"{ww}.t_end_s"),
                _num(_require(w, "rate_veh_per_hr", ww), f"{ww}.rate_veh_per_hr"),
            ))
        entries.append(Entry(str(raw.get("id", f"entry{i}")), str(raw["link"]), tuple(windows)))

    sim_raw = dict(_require(doc, "sim", "scenario"))
    sim_kwargs: dict[str, Any] = {"duration_s": _num(_require(sim_raw, "duration_s", "sim"), "sim.duration_s")}
    for key in ("step_s", "control_interval_s", "compliance", "critical_gap_s",
                "vehicle_length_m", "command_decel", "fixed_cycle_s", "fixed_green_s"):
        if key in sim_raw:
            sim_kwargs[key] = _num(sim_raw[key], f"sim.{key}")
    if "seed" in sim_raw:
        sim_kwargs["seed"] = int(sim_raw["seed"])
    if sim_raw.get("desired_speed_kmh") is not None:
        sim_kwargs["desired_speed_kmh"] = _num(sim_raw["desired_speed_kmh"], "sim.desired_speed_kmh")
    if "super_segment_m" in sim_raw:
        lo, hi = sim_raw["super_segment_m"]
        sim_kwargs["super_segment_m"] = (_num(lo, "sim.super_segment_m"), _num(hi, "sim.super_segment_m"))
    if "w99" in sim_raw:
        sim_kwargs["w99"] = {str(k): _num(v, f"sim.w99.{k}") for k, v in sim_raw["w99"].items()}

    ctrl_raw = doc.get("controller", {"type": "none"})
    controller = ControllerSpec(str(ctrl_raw.get("type", "none")), dict(ctrl_raw.get("params", {})))

    cfg = ScenarioConfig(
        links=tuple(links),
        connectors=tuple(connectors),
        routes=tuple(routes),
        entries=tuple(entries),
        sim=SimParams(**sim_kwargs),
        controller=controller,
        name=str(doc.get("name", "")),
    )
    validate_scenario(cfg)
    return cfg


def validate_scenario(cfg: ScenarioConfig) -> None:
    link_ids = [l.id for l in cfg.links]
    if len(set(link_ids)) != len(link_ids):
        raise ScenarioError("duplicate link id")
    links = {l.id: l for l in cfg.links}
    for l in cfg.links:
        if l.length <= 0:
            raise ScenarioError(f"link {l.id}: length must be > 0")
        if l.speed_limit <= 0:
            raise ScenarioError(f"link {l.id}: speed_limit must be > 0")

    for c in cfg.connectors:
        for lid in c.upstream + c.downstream + c.priority:
            if lid not in links:
                raise ScenarioError(f"connector {c.id}: unresolved link id {lid!r}")
        if c.kind == "merge":
            if len(c.upstream) < 2:
                raise ScenarioError(f"connector {c.id}: merge needs at least 2 upstream links")
            if len(c.downstream) != 1:
                raise ScenarioError(f"connector {c.id}: merge needs exactly 1 downstream link")
        elif c.kind == "diverge":
            if len(c.upstream) != 1 or len(c.downstream) < 2:
                raise ScenarioError(f"connector {c.id}: diverge needs 1 upstream and at least 2 downstream links")
        elif c.kind == "through":
            if len(c.upstream) != 1 or len(c.downstream) != 1:
                raise ScenarioError(f"connector {c.id}: through needs 1 upstream and 1 downstream link")
        else:
            raise ScenarioError(f"connector {c.id}: unknown kind {c.kind!r}")
        if sorted(c.priority) != sorted(c.upstream):
            raise ScenarioError(f"connector {c.id}: priority must permute the upstream links")
        for lid in c.upstream:
            if links[lid].exit:
                raise ScenarioError(f"link {lid}: exit link has an outgoing connector {c.id}")

    out_of: dict[str, str] = {}
    into: dict[str, str] = {}
    for c in cfg.connectors:
        for lid in c.upstream:
            if lid in out_of:
                raise ScenarioError(f"link {lid}: more than one outgoing connector")
            out_of[lid] = c.id
        for lid in c.downstream:
            if lid in into:
                raise ScenarioError(f"link {lid}: more than one incoming connector")
            into[lid] = c.id
    conn = {c.id: c for c in cfg.connectors}

    route_ids = [r.id for r in cfg.routes]
    if len(set(route_ids)) != len(route_ids):
        raise ScenarioError("duplicate route id")
    for r in cfg.routes:
        if not r.links:
            raise ScenarioError(f"route {r.id}: empty")
        for lid in r.links:
            if lid not in links:
                raise ScenarioError(f"route {r.id}: unresolved link id {lid!r}")
        for a, b in zip(r.links, r.links[1:]):
            cid = out_of.get(a)
            if cid is None or b not in conn[cid].downstream:
                raise ScenarioError(f"route {r.id}: links {a} and {b} are not connected")
        if not links[r.links[-1]].exit:
            raise ScenarioError(f"route {r.id}: last link {r.links[-1]} is not an exit")
        if r.weight < 0:
            raise ScenarioError(f"route {r.id}: negative weight")

    entry_links = set()
    for e in cfg.entries:
        if e.link not in links:
            raise ScenarioError(f"entry {e.id}: unresolved link id {e.link!r}")
        if e.link in entry_links:
            raise ScenarioError(f"entry {e.id}: link {e.link} already has an entry")
        entry_links.add(e.link)
        for w in e.demand:
            if w.t_end_s <= w.t_start_s:
                raise ScenarioError(f"entry {e.id}: demand window ends before it starts")
            if w.rate_veh_per_hr < 0:
                raise ScenarioError(f"entry {e.id}: negative demand rate")
        weights = [r.weight for r in cfg.routes if r.links[0] == e.link]
        if not weights:
            raise ScenarioError(f"entry {e.id}: no route starts at link {e.link}")
        total = sum(weights)
        if abs(total - 1.0) > 1e-9:
            raise ScenarioError(f"entry {e.id}: route weights sum {total:g} ≠ 1")

    s = cfg.sim
    if s.duration_s <= 0:
        raise ScenarioError("sim.duration_s must be positive")
    if s.step_s <= 0:
        raise ScenarioError("sim.step_s must be positive")
    if s.control_interval_s <= 0:
        raise ScenarioError("sim.control_interval_s must be positive")
    ratio = s.control_interval_s / s.step_s
    if abs(ratio - round(ratio)) > 1e-6:
        raise ScenarioError("sim.control_interval_s must be an integer multiple of sim.step_s")
    if not 0.0 < s.fixed_green_s <= s.fixed_cycle_s:
        raise ScenarioError("sim.fixed_green_s must lie in (0, fixed_cycle_s]")
    if not 0.0 <= s.compliance <= 1.0:
        raise ScenarioError("sim.compliance must lie in [0, 1]")
    lo, hi = s.super_segment_m
    if not 0 < lo <= hi:
        raise ScenarioError("sim.super_segment_m must satisfy 0 < min <= max")
    if cfg.controller.type not in CONTROLLER_TYPES:
        raise ScenarioError(f"unknown controller type {cfg.controller.type!r}")


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    doc: dict[str, Any] = {}
    if cfg.name:
        doc["name"] = cfg.name
    doc["links"] = [
        {"id": l.id, "length": l.length, "speed_limit": l.speed_limit,
         "from_node": l.from_node, "to_node": l.to_node, "exit": l.exit}
        for l in cfg.links
    ]
    doc["connectors"] = [
        {"id": c.id, "kind": c.kind, "upstream": list(c.upstream),
         "downstream": list(c.downstream), "priority": list(c.priority),
         "signalized": c.signalized}
        for c in cfg.connectors
    ]
    doc["routes"] = [{"id": r.id, "links": list(r.links), "weight": r.weight} for r in cfg.routes]
    doc["entries"] = [
        {"id": e.id, "link": e.link, "demand": [asdict(w) for w in e.demand]}
        for e in cfg.entries
    ]
    sim = asdict(cfg.sim)
    sim["super_segment_m"] = list(cfg.sim.super_segment_m)
    if sim["desired_speed_kmh"] is None:
        del sim["desired_speed_kmh"]
    doc["sim"] = sim
    doc["controller"] = {"type": cfg.controller.type, "params": dict(cfg.controller.params)}
    return doc


def serialize_scenario(cfg: ScenarioConfig) -> str:
    return json.dumps(scenario_to_dict(cfg), indent=2) + "\n"


def scenario_hash(data: str | bytes) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuperSegment:
    id: int
    links: tuple[str, ...]
    length: float
    undersized: bool = False


@dataclass
class RoadNetwork:
    """Indexed, immutable view of a scenario's road graph.

    Links are addressed by dense integer indices in document order.
    ``link_order`` is a topological order (upstream first) with merge
    approaches listed in priority order.
    """

    config: ScenarioConfig
    links: tuple[Link, ...]
    link_index: dict[str, int]
    connectors: tuple[Connector, ...]
    out_connector: tuple[int, ...]  # per link, -1 for none
    in_connector: tuple[int, ...]
    routes: tuple[Route, ...]
    route_links: tuple[tuple[int, ...], ...]
    entry_routes: dict[str, tuple[int, ...]]
    link_order: tuple[int, ...]
    super_segments: tuple[SuperSegment, ...]
    link_segment: tuple[int, ...]  # per link super-segment index, -1 if none
    signal_connectors: tuple[int, ...]

    @property
    def n_links(self) -> int:
        return len(self.links)

    def link(self, lid: str) -> Link:
        return self.links[self.link_index[lid]]

    def predecessors(self, li: int) -> tuple[int, ...]:
        ci = self.in_connector[li]
        if ci < 0:
            return ()
        return tuple(self.link_index[u] for u in self.connectors[ci].upstream)

    def approach_rank(self, li: int) -> int:
        """Priority rank of a link at its downstream merge (0 = major)."""
        ci = self.out_connector[li]
        if ci < 0:
            return 0
        c = self.connectors[ci]
        return c.priority.index(self.links[li].id)


def build_network(config: ScenarioConfig) -> RoadNetwork:
    validate_scenario(config)
    links = config.links
    index = {l.id: i for i, l in enumerate(links)}
    out_c = [-1] * len(links)
    in_c = [-1] * len(links)
    for ci, c in enumerate(config.connectors):
        for lid in c.upstream:
            out_c[index[lid]] = ci
        for lid in c.downstream:
            in_c[index[lid]] = ci
    for i, l in enumerate(links):
        if not l.exit and out_c[i] < 0:
            raise ScenarioError(f"link {l.id}: dead end (not an exit and no outgoing connector)")

    route_links = tuple(tuple(index[x] for x in r.links) for r in config.routes)
    entry_routes = {}
    for e in config.entries:
        entry_routes[e.id] = tuple(ri for ri, r in enumerate(config.routes) if r.links[0] == e.link)

    order = _topological_order(config, index, out_c, in_c)
    segments = partition_super_segments(config, config.routes, config.sim.super_segment_m)
    link_seg = [-1] * len(links)
    for si, seg in enumerate(segments):
        for lid in seg.links:
            link_seg[index[lid]] = si
    signals = tuple(ci for ci, c in enumerate(config.connectors) if c.signalized)

    return RoadNetwork(
        config=config,
        links=links,
        link_index=index,
        connectors=config.connectors,
        out_connector=tuple(out_c),
        in_connector=tuple(in_c),
        routes=config.routes,
        route_links=route_links,
        entry_routes=entry_routes,
        link_order=order,
        super_segments=tuple(segments),
        link_segment=tuple(link_seg),
        signal_connectors=signals,
    )


def _topological_order(config, index, out_c, in_c) -> tuple[int, ...]:
    n = len(config.links)
    succ: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for c in config.connectors:
        for u in c.upstream:
            for d in c.downstream:
                succ[index[u]].append(index[d])
                indeg[index[d]] += 1
    rank = {}
    for c in config.connectors:
        for r, lid in enumerate(c.priority):
            rank[index[lid]] = r
    ready = sorted((i for i in range(n) if indeg[i] == 0), key=lambda i: (rank.get(i, 0), i))
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
        ready.sort(key=lambda k: (rank.get(k, 0), k))
    if len(order) != n:
        raise ScenarioError("network contains a cycle")
    return tuple(order)


def partition_super_segments(
    config: ScenarioConfig,
    routes: Sequence[Route],
    target: tuple[float, float] = DEFAULT_SUPER_SEGMENT_M,
) -> list[SuperSegment]:
    """Group contiguous route links into super-segments.

    Routes are visited by descending weight (document order on ties). Along
    each route, unassigned links accumulate until the group reaches the
    minimum length; a link that would push the group past the maximum
    starts a new group instead. Groups cut short by the end of a route or by
    an already-assigned link are kept and flagged ``undersized``.
    """
    if not routes:
        raise ScenarioError("partitioning needs at least one route")
    lo, hi = target
    lengths = {l.id: l.length for l in config.links}
    ordered = sorted(enumerate(routes), key=lambda p: (-p[1].weight, p[0]))
    assigned: set[str] = set()
    groups: list[tuple[list[str], bool]] = []

    for _, route in ordered:
        current: list[str] = []
        cum = 0.0

        def close(terminal: bool) -> None:
            nonlocal current, cum
            if current:
                groups.append((current, cum < lo or cum > hi))
            current, cum = [], 0.0

        for lid in route.links:
            if lid in assigned:
                close(True)
                continue
            ln = lengths[lid]
            if current and cum + ln > hi:
                close(False)
            current.append(lid)
            assigned.add(lid)
            cum += ln
            if cum >= lo:
                close(False)
        close(True)

    orphans = [l.id for l in config.links if l.id not in assigned]
    if orphans:
        raise ScenarioError(f"links not covered by any route: {', '.join(orphans)}")
    return [
        SuperSegment(i + 1, tuple(g), sum(lengths[x] for x in g), flag)
        for i, (g, flag) in enumerate(groups)
    ]
