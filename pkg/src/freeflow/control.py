"""Controllers: fixed signal baselines, simplified SCATS/SCOOT, and backpressure.

A controller is advanced by its simulation. ``control(sim)`` runs once per
control interval and returns per-link speed ceilings in km/h (or None);
``signal_state(sim)`` runs every step and returns, per signalized merge
connector index, the index of the link holding green or -1 for all red.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import KMH, steady_flow
from .network import RoadNetwork

MIN_GREEN_S = 5.0
DEFAULT_CYCLE_S = 120.0
DEFAULT_INTERGREEN_S = 5.0
SCATS_CAP = 0.04  # fraction of cycle shifted per update at most
SCOOT_STEP_S = 4.0
SCOOT_REVERSE_S = 3.0
SCOOT_DEADBAND = 0.1
SCOOT_LEAD_S = 5.0
BACKPRESSURE_FLOOR_KMH = 5.0
DISCHARGE_ZONE_M = 30.0


@dataclass(frozen=True)
class Phase:
    approaches: tuple[str, ...]
    green: float


@dataclass(frozen=True)
class SignalPlan:
    node: str
    cycle: float
    phases: tuple[Phase, ...]
    intergreen: float = DEFAULT_INTERGREEN_S
    offset: float = 0.0

    def __post_init__(self):
        total = sum(p.green + self.intergreen for p in self.phases)
        if not math.isclose(total, self.cycle, rel_tol=0, abs_tol=1e-6):
            raise ValueError(f"plan {self.node}: greens plus intergreens sum {total:g} != cycle {self.cycle:g}")
        for p in self.phases:
            if p.green < MIN_GREEN_S - 1e-9:
                raise ValueError(f"plan {self.node}: green {p.green:g} s below {MIN_GREEN_S:g} s floor")

    @property
    def greens(self) -> tuple[float, ...]:
        return tuple(p.green for p in self.phases)

    def with_greens(self, greens) -> "SignalPlan":
        phases = tuple(Phase(p.approaches, float(g)) for p, g in zip(self.phases, greens))
        return replace(self, phases=phases)

    def phase_at(self, t: float) -> int:
        """Index of the phase showing green at time t, or -1 during intergreen."""
        tc = (t - self.offset) % self.cycle
        for i, p in enumerate(self.phases):
            if tc < p.green - 1e-9:
                return i
            tc -= p.green
            if tc < self.intergreen - 1e-9:
                return -1
            tc -= self.intergreen
        return -1

    def stage_end(self, i: int) -> float:
        """Time within the cycle (from the offset) at which phase i's green ends."""
        return sum(p.green + self.intergreen for p in self.phases[:i]) + self.phases[i].green


@dataclass
class ControllerCommand:
    signals: dict[int, int] = field(default_factory=dict)
    speeds: dict[int, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# plan construction and updates
# ---------------------------------------------------------------------------

def _phases(approaches, greens):
    return tuple(Phase((a,) if isinstance(a, str) else tuple(a), float(g)) for a, g in zip(approaches, greens))


def equal_split_plan(node: str, approaches, cycle: float = DEFAULT_CYCLE_S,
                     intergreen: float = DEFAULT_INTERGREEN_S) -> SignalPlan:
    """Every phase gets cycle/k - intergreen of green."""
    if isinstance(approaches, int):
        approaches = [f"{node}.{i}" for i in range(approaches)]
    k = len(approaches)
    if k < 1:
        raise ValueError("equal split needs at least one approach")
    if cycle / k <= intergreen:
        raise ValueError(f"equal split infeasible: cycle/k = {cycle / k:g} s <= intergreen {intergreen:g} s")
    green = cycle / k - intergreen
    if green < MIN_GREEN_S:
        raise ValueError(f"equal split infeasible: green {green:g} s below {MIN_GREEN_S:g} s floor")
    return SignalPlan(node, cycle, _phases(approaches, [green] * k), intergreen)


def _floored_split(total: float, weights: np.ndarray, floor: float = MIN_GREEN_S) -> np.ndarray:
    """Split ``total`` proportionally to ``weights`` with every share at least ``floor``."""
    k = weights.shape[0]
    if k * floor > total + 1e-9:
        raise ValueError(f"cannot give {k} phases {floor:g} s each out of {total:g} s")
    fixed = np.zeros(k, dtype=bool)
    out = np.zeros(k)
    while True:
        free = ~fixed
        remaining = total - floor * fixed.sum()
        w = weights[free]
        share = remaining * w / w.sum() if w.sum() > 0 else np.full(w.shape, remaining / w.shape[0])
        out[free] = share
        low = free.copy()
        low[free] = share < floor
        if not low.any():
            break
        fixed |= low
        out[fixed] = floor
    return out


def proportional_split_plan(node: str, loads, cycle: float = DEFAULT_CYCLE_S,
                            intergreen: float = DEFAULT_INTERGREEN_S, approaches=None) -> SignalPlan:
    loads = np.asarray(loads, dtype=float)
    if loads.sum() <= 0:
        raise ValueError("proportional split needs a positive total load")
    k = loads.shape[0]
    if approaches is None:
        approaches = [f"{node}.{i}" for i in range(k)]
    greens = _floored_split(cycle - k * intergreen, loads)
    return SignalPlan(node, cycle, _phases(approaches, greens), intergreen)


def green_wave_offsets(distances, v_limit_kmh: float, cycle: float = DEFAULT_CYCLE_S) -> list[float]:
    """Offsets so that a vehicle at the speed limit meets every node at the start of green.

    ``distances[i]`` is the distance from node i to node i+1.
    """
    if any(d < 0 for d in distances):
        raise ValueError("distances must be non-negative")
    offsets = [0.0]
    travelled = 0.0
    for d in distances:
        travelled += d
        off = (travelled * 3.6 / v_limit_kmh) % cycle
        if math.isclose(off, cycle, abs_tol=1e-9):
            off = 0.0
        offsets.append(off)
    return offsets


def scats_update(plan: SignalPlan, ds) -> SignalPlan:
    """Shift green from the least to the most saturated phase.

    The shift is half their DS difference times the cycle, capped at 4% of
    the cycle and at what the donor phase can give above the green floor.
    """
    ds = list(ds)
    hi = int(np.argmax(ds))
    lo = int(np.argmin(ds))
    if hi == lo or ds[hi] == ds[lo]:
        return plan
    greens = list(plan.greens)
    shift = min(SCATS_CAP * plan.cycle, 0.5 * (ds[hi] - ds[lo]) * plan.cycle,
                max(greens[lo] - MIN_GREEN_S, 0.0))
    greens[hi] += shift
    greens[lo] -= shift
    return plan.with_greens(greens)


def scoot_update(plan: SignalPlan, ds, stage: int) -> tuple[SignalPlan, float]:
    """Decision taken shortly before ``stage`` ends: extend or cut it by 4 s.

    The following stage absorbs the change. Returns the new plan and the
    change applied to ``stage`` (0 inside the dead-band).
    """
    k = len(plan.phases)
    nxt = (stage + 1) % k
    diff = ds[stage] - ds[nxt]
    if diff > SCOOT_DEADBAND:
        delta = SCOOT_STEP_S
    elif diff < -SCOOT_DEADBAND:
        delta = -SCOOT_STEP_S
    else:
        return plan, 0.0
    return _move_green(plan, stage, nxt, delta)


def _move_green(plan: SignalPlan, to: int, frm: int, delta: float) -> tuple[SignalPlan, float]:
    greens = list(plan.greens)
    if delta > 0:
        delta = min(delta, max(greens[frm] - MIN_GREEN_S, 0.0))
    else:
        delta = -min(-delta, max(greens[to] - MIN_GREEN_S, 0.0))
    greens[to] += delta
    greens[frm] -= delta
    return plan.with_greens(greens), delta


def scoot_reverse(plan: SignalPlan, changes) -> SignalPlan:
    """At cycle start, take back 3 s of each (stage, change) made in the last cycle."""
    k = len(plan.phases)
    for stage, delta in changes:
        if delta == 0:
            continue
        back = -math.copysign(min(SCOOT_REVERSE_S, abs(delta)), delta)
        plan, _ = _move_green(plan, stage, (stage + 1) % k, back)
    return plan


def backpressure_alpha(b_hat: float, dt: float, c_out: float, c_in: float, seg_capacity: float) -> float:
    """Inflow scaling that keeps a segment's occupancy within its headroom over dt.

    ``b_hat`` is the occupancy headroom (critical minus current occupancy)
    and ``seg_capacity`` the vehicle count at full occupancy.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    room = b_hat * seg_capacity
    if (c_in - c_out) * dt <= room or c_in <= 0.0:
        return 1.0
    alpha = (room / dt + c_out) / c_in
    return float(min(max(alpha, 0.0), 1.0))


@dataclass
class BackpressureState:
    B_star: float = 0.3
    delta_t: float = 60.0
    C_in: dict = field(default_factory=dict)
    C_out: dict = field(default_factory=dict)
    b: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.B_star < 1.0:
            raise ValueError("B_star must lie in (0, 1)")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")


def backpressure_command(alpha: float, v_measured_kmh: float, limit_kmh: float,
                         floor_kmh: float = BACKPRESSURE_FLOOR_KMH) -> float:
    if alpha >= 1.0:
        return float(limit_kmh)
    return float(min(max(alpha * v_measured_kmh, floor_kmh), limit_kmh))


def backpressure_act(state: BackpressureState, measurements: dict) -> ControllerCommand:
    """Speed commands for the upstream approaches of each merge.

    ``measurements`` maps a merge key to a dict with ``b`` (downstream
    occupancy), ``capacity`` (vehicles), ``C_out`` and ``C_in`` (veh/s) and
    ``upstream``: list of (link index, measured km/h, limit km/h).
    """
    cmd = ControllerCommand()
    for key, m in measurements.items():
        state.b[key] = m["b"]
        state.C_in[key] = m["C_in"]
        state.C_out[key] = m["C_out"]
        alpha = backpressure_alpha(state.B_star - m["b"], state.delta_t, m["C_out"], m["C_in"],
                                   m["capacity"])
        for li, v, limit in m["upstream"]:
            cmd.speeds[li] = backpressure_command(alpha, v, limit)
    return cmd


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------

class Controller:
    kind = "none"

    def reset(self, sim) -> None:
        pass

    def control(self, sim):
        return None

    def signal_state(self, sim):
        return None


class NoControl(Controller):
    kind = "none"


def _merge_heads(network: RoadNetwork) -> list[int]:
    return [ci for ci in network.signal_connectors if len(network.connectors[ci].upstream) > 1]


class SignalController(Controller):
    """Runs one plan per signalized merge; subclasses adapt plans at cycle boundaries."""

    kind = "signal"

    def __init__(self, cycle: float = DEFAULT_CYCLE_S, intergreen: float = DEFAULT_INTERGREEN_S):
        self.cycle = float(cycle)
        self.intergreen = float(intergreen)
        self.plans: dict[int, SignalPlan] = {}
        self.history: list[tuple[float, int, tuple[float, ...]]] = []

    def initial_plans(self, sim) -> dict[int, SignalPlan]:
        net = sim.network
        return {ci: equal_split_plan(net.connectors[ci].id, list(net.connectors[ci].priority),
                                     self.cycle, self.intergreen)
                for ci in _merge_heads(net)}

    def reset(self, sim) -> None:
        self.plans = self.initial_plans(sim)
        self._cycle_no = {ci: None for ci in self.plans}
        self._approach_idx = {
            ci: [sim.network.link_index[a[0]] for a in (p.approaches for p in plan.phases)]
            for ci, plan in self.plans.items()
        }
        self.history = []

    def on_cycle(self, sim, ci: int) -> None:
        pass

    def on_step(self, sim, ci: int, phase: int) -> None:
        pass

    def signal_state(self, sim):
        out = {}
        for ci, plan in self.plans.items():
            n = math.floor((sim.clock - plan.offset) / plan.cycle + 1e-9)
            if self._cycle_no[ci] != n:
                if self._cycle_no[ci] is not None:
                    self.on_cycle(sim, ci)
                    plan = self.plans[ci]
                self._cycle_no[ci] = n
                self.history.append((sim.clock, ci, plan.greens))
            phase = plan.phase_at(sim.clock)
            self.on_step(sim, ci, phase)
            out[ci] = self._approach_idx[ci][phase] if phase >= 0 else -1
        return out


class EqualSplit(SignalController):
    kind = "equal_split"


class GreenWave(SignalController):
    """Equal split with offsets chained along the mainline at the speed limit."""

    kind = "green_wave"

    def initial_plans(self, sim):
        plans = super().initial_plans(sim)
        net = sim.network
        if not plans:
            return plans
        # order merges along the route that visits most of them
        best = max(range(len(net.routes)),
                   key=lambda r: sum(net.out_connector[li] in plans for li in net.route_links[r]))
        links = net.route_links[best]
        nodes, marks, run = [], [], 0.0
        for li in links:
            run += net.links[li].length
            ci = net.out_connector[li]
            if ci in plans:
                nodes.append(ci)
                marks.append(run)
        dists = list(np.diff(marks))
        v = net.links[links[0]].speed_limit
        offsets = green_wave_offsets(dists, v, self.cycle)
        for ci, off in zip(nodes, offsets):
            plans[ci] = replace(plans[ci], offset=off)
        return plans


class ProportionalSplit(SignalController):
    """Greens re-split every cycle by the arrivals counted on each approach."""

    kind = "prop_split"

    def reset(self, sim):
        super().reset(sim)
        self._last_in = {ci: [int(sim.link_in[li]) for li in idx] for ci, idx in self._approach_idx.items()}

    def on_cycle(self, sim, ci):
        idx = self._approach_idx[ci]
        now = [int(sim.link_in[li]) for li in idx]
        loads = [a - b for a, b in zip(now, self._last_in[ci])]
        self._last_in[ci] = now
        if sum(loads) > 0:
            plan = self.plans[ci]
            self.plans[ci] = replace(proportional_split_plan(plan.node, loads, plan.cycle, plan.intergreen,
                                                             [p.approaches for p in plan.phases]),
                                     offset=plan.offset)


class Scats(SignalController):
    """Degree of saturation = share of available green with a vehicle discharging."""

    kind = "scats"

    def reset(self, sim):
        super().reset(sim)
        self._used = {ci: np.zeros(len(p.phases)) for ci, p in self.plans.items()}
        self._avail = {ci: np.zeros(len(p.phases)) for ci, p in self.plans.items()}

    def on_step(self, sim, ci, phase):
        if phase < 0:
            return
        li = self._approach_idx[ci][phase]
        self._avail[ci][phase] += sim.dt
        ids = sim.vehicles_on(li)
        if ids.shape[0] and sim.link_len[li] - sim.pos[ids[0]] <= DISCHARGE_ZONE_M:
            self._used[ci][phase] += sim.dt

    def on_cycle(self, sim, ci):
        avail = self._avail[ci]
        ds = np.where(avail > 0, self._used[ci] / np.where(avail > 0, avail, 1.0), 0.0)
        self.plans[ci] = scats_update(self.plans[ci], ds)
        self._used[ci][:] = 0.0
        avail[:] = 0.0


class Scoot(SignalController):
    """DS from arrivals against saturation flow; +-4 s stage changes, 3 s taken back each cycle."""

    kind = "scoot"

    def reset(self, sim):
        super().reset(sim)
        p = sim.params
        d0 = p.CC0 + sim.veh_len
        self._sat = {ci: [steady_flow(sim.limit_ms[li], d0, p.CC1) for li in idx]
                     for ci, idx in self._approach_idx.items()}
        self._last_in = {ci: [int(sim.link_in[li]) for li in idx] for ci, idx in self._approach_idx.items()}
        self._changes = {ci: [] for ci in self.plans}
        self._decided = {ci: set() for ci in self.plans}

    def _ds(self, sim, ci):
        plan = self.plans[ci]
        idx = self._approach_idx[ci]
        now = [int(sim.link_in[li]) for li in idx]
        arr = [a - b for a, b in zip(now, self._last_in[ci])]
        return [a / (s * max(g, 1e-9)) for a, s, g in zip(arr, self._sat[ci], plan.greens)]

    def on_step(self, sim, ci, phase):
        plan = self.plans[ci]
        tc = (sim.clock - plan.offset) % plan.cycle
        for stage in range(len(plan.phases)):
            if stage in self._decided[ci]:
                continue
            if tc >= plan.stage_end(stage) - SCOOT_LEAD_S - 1e-9 and phase == stage:
                new, delta = scoot_update(plan, self._ds(sim, ci), stage)
                self.plans[ci] = new
                self._changes[ci].append((stage, delta))
                self._decided[ci].add(stage)
                break

    def on_cycle(self, sim, ci):
        self.plans[ci] = scoot_reverse(self.plans[ci], self._changes[ci])
        self._changes[ci] = []
        self._decided[ci] = set()
        self._last_in[ci] = [int(sim.link_in[li]) for li in self._approach_idx[ci]]


class Backpressure(Controller):
    """Slows the approaches of a merge when the downstream link would overshoot B*."""

    kind = "backpressure"

    def __init__(self, B_star: float = 0.3, delta_t: float | None = None):
        self.B_star = float(B_star)
        self.delta_t = delta_t
        self.log: list[dict] = []

    def reset(self, sim):
        net = sim.network
        dt = sim.config.sim.control_interval_s if self.delta_t is None else float(self.delta_t)
        self.state = BackpressureState(self.B_star, dt)
        self.merges = []
        for c in net.connectors:
            if c.kind != "merge":
                continue
            ups = [net.link_index[u] for u in c.priority]
            self.merges.append((c.id, ups, net.link_index[c.downstream[0]]))
        self._last = {}
        self.log = []

    def control(self, sim):
        meas = {}
        p = sim.params
        for key, ups, down in self.merges:
            out_now = int(sim.link_out[down])
            in_now = int(sim.link_in[down])
            last_out, last_in = self._last.get(key, (out_now, in_now))
            self._last[key] = (out_now, in_now)
            upstream = []
            for li in ups:
                ids = sim.vehicles_on(li)
                limit = sim.limit_ms[li] / KMH
                v = float(sim.speed[ids].mean() / KMH) if ids.shape[0] else limit
                upstream.append((li, v, limit))
            meas[key] = {
                "b": sim.link_occupancy(down),
                "capacity": sim.link_len[down] / (sim.veh_len + p.CC0),
                "C_out": (out_now - last_out) / self.state.delta_t,
                "C_in": (in_now - last_in) / self.state.delta_t,
                "upstream": upstream,
            }
        cmd = backpressure_act(self.state, meas)
        self.log.append({"t": sim.clock, "speeds": dict(cmd.speeds)})
        return cmd.speeds


SIGNAL_CONTROLLERS = {
    "equal_split": EqualSplit,
    "prop_split": ProportionalSplit,
    "green_wave": GreenWave,
    "scats": Scats,
    "scoot": Scoot,
}


def make_controller(kind: str, params: dict | None = None) -> Controller:
    params = dict(params or {})
    if kind == "none":
        return NoControl()
    if kind in SIGNAL_CONTROLLERS:
        return SIGNAL_CONTROLLERS[kind](cycle=params.get("cycle_s", DEFAULT_CYCLE_S),
                                        intergreen=params.get("intergreen_s", DEFAULT_INTERGREEN_S))
    if kind == "backpressure":
        return Backpressure(B_star=params.get("B_star", 0.3), delta_t=params.get("delta_t_s"))
    if kind == "dqn":
        from .rl import PolicyController, load_policy

        if "policy" not in params:
            raise ValueError("dqn controller needs a 'policy' path parameter")
        return PolicyController(load_policy(params["policy"]))
    raise ValueError(f"unknown controller type {kind!r}")
