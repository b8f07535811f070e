"""Time-stepped single-lane vehicle dynamics.

Car following uses a deterministic Wiedemann-99 variant with four regimes
(free flow, closing in, following, emergency). Merges are resolved by
priority and critical-gap acceptance, signals by virtual stop lines, and
demand enters through FIFO entry queues fed by Poisson arrivals.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, fields
from enum import IntEnum
from typing import NamedTuple

import numba
import numpy as np

from .network import RoadNetwork

KMH = 1.0 / 3.6
STOP_SPEED = 0.2
LOOKAHEAD_M = 300.0
GAP_LOOKBACK_M = 200.0
MERGE_DECISION_M = 20.0
# a driver facing a fresh red who would need more than this to stop goes through
DILEMMA_DECEL = 4.0
TRACE_HEADER = "t_s,vehicle_id,link_id,pos_m,speed_mps,regime\n"


class Regime(IntEnum):
    FreeFlow = 0
    ClosingIn = 1
    Following = 2
    Emergency = 3


@dataclass(frozen=True)
class W99Params:
    CC0: float = 0.5
    CC1: float = 2.5
    CC2: float = 20.0
    CC3: float = -25.0
    CC4: float = -0.5
    CC5: float = 0.6
    CC6: float = 10.0
    CC7: float = 0.5
    CC8: float = 1.0
    CC9: float = 0.75
    emergency_floor: float = -8.0
    closing_floor: float = -4.0

    def __post_init__(self):
        checks = [
            (self.CC0 > 0, "CC0 > 0"),
            (self.CC1 > 0, "CC1 > 0"),
            (self.CC2 >= 0, "CC2 >= 0"),
            (self.CC3 < 0, "CC3 < 0"),
            (self.CC4 < 0, "CC4 < 0"),
            (self.CC5 > 0, "CC5 > 0"),
            (self.CC7 > 0, "CC7 > 0"),
            (self.CC8 >= self.CC9 > 0, "CC8 >= CC9 > 0"),
            (self.emergency_floor <= self.closing_floor < 0, "emergency_floor <= closing_floor < 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"W99 parameter invariant violated: {msg}")

    @classmethod
    def from_dict(cls, d: dict) -> "W99Params":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown W99 parameters: {sorted(unknown)}")
        return cls(**d)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)


class Thresholds(NamedTuple):
    SDXC: float
    SDXO: float
    SDXV: float
    SDV: float
    SDVC: float
    SDVO: float


@numba.njit(cache=True)
def _thresholds(dx, dv, vf, vl, al, p):
    if dv >= 0.0 or al < -1.0:
        vs = vf
    else:
        vs = vl
    if vl <= 0.0:
        sdxc = p[0]
    else:
        sdxc = p[0] + p[1] * vs
    sdxo = sdxc + p[2]
    sdxv = sdxo + p[3] * (dv - p[4])
    sdv = p[6] / 1.0e4 * dx * dx
    if vl > 0.0:
        sdvc = p[4] - sdv
    else:
        sdvc = 0.0
    if vf > p[5]:
        sdvo = sdv + p[5]
    else:
        sdvo = sdv
    return sdxc, sdxo, sdxv, sdv, sdvc, sdvo


@numba.njit(cache=True)
def _accel(dx, dv, vf, vl, al, vcmd, p, dt, cmd_decel):
    cc0 = p[0]
    cc7 = p[7]
    if math.isinf(dx):
        regime = 0
        a = 0.0
    else:
        sdxc, sdxo, sdxv, sdv, sdvc, sdvo = _thresholds(dx, dv, vf, vl, al, p)
        if dx <= sdxc and dv <= sdvo:
            regime = 3
            if dx <= cc0:
                a = p[10]
            else:
                a = al - dv * dv / (2.0 * max(dx - cc0, 0.1))
                a = min(max(a, p[10]), -cc7)
        elif dx < sdxv and dv < sdvc:
            regime = 1
            a = al - dv * dv / (2.0 * max(dx - sdxc, 0.1))
            a = min(max(a, p[11]), 0.0)
        elif sdxc < dx <= sdxo and sdvc <= dv < sdvo:
            regime = 2
            a = -cc7 if dv < 0.0 else cc7
        else:
            regime = 0
            a = 0.0
    if regime == 0:
        amax = p[8] + (p[9] - p[8]) * min(vf, 22.22) / 22.22
        a = amax
    # speed stays within [0, vcmd]; a lowered command is approached at cmd_decel
    if vf <= vcmd:
        a = min(a, (vcmd - vf) / dt)
    else:
        a = min(a, max((vcmd - vf) / dt, -cmd_decel))
    a = max(a, -vf / dt)
    return a, regime


@numba.njit(cache=True)
def _advance(x, v, ln, dx, vl, al, vcmd, lead, lead_off, seq, p, dt, cmd_decel, a_out, reg_out):
    """Accelerations, semi-implicit Euler update and gap clamping.

    Beyond the regime acceleration, the new speed is capped so that the
    follower ends the step no closer than CC0 to a leader that keeps its
    current speed; a hard clamp is only needed when the leader brakes or
    the leader estimate was off.

    ``lead[k]`` is the array index of the vehicle whose rear bounds vehicle
    k (``-1`` none, ``-2`` a wall at ``lead_off[k]``); its rear sits at
    ``lead_off[k] + x[lead] - ln[lead]`` in k's link coordinates. ``seq``
    visits leaders before followers. Returns the number of hard clamps.
    """
    n = x.shape[0]
    for k in range(n):
        a, r = _accel(dx[k], vl[k] - v[k], v[k], vl[k], al[k], vcmd[k], p, dt, cmd_decel)
        a_out[k] = a
        reg_out[k] = r
    clamps = 0
    cc0 = p[0]
    for j in range(n):
        k = seq[j]
        vn = v[k] + a_out[k] * dt
        # do not step inside the standstill distance of a leader holding its speed
        if not math.isinf(dx[k]):
            vn = min(vn, (dx[k] - cc0) / dt + vl[k])
        if vn < 0.0:
            vn = 0.0
        a_out[k] = (vn - v[k]) / dt
        v[k] = vn
        x0 = x[k]
        x[k] = x0 + vn * dt
        m = lead[k]
        if m >= 0:
            lim = lead_off[k] + x[m] - ln[m]
            if x[k] > lim:
                # never pushed backwards: a projected leader from a sibling
                # approach can already sit alongside
                if lim > x0:
                    x[k] = lim
                    v[k] = min(vn, v[m])
                else:
                    x[k] = x0
                    v[k] = 0.0
                clamps += 1
        elif m == -2:
            lim = lead_off[k] - 1e-6
            if x[k] > lim:
                x[k] = max(lim, x0)
                v[k] = 0.0
                clamps += 1
    return clamps


@numba.njit(cache=True)
def _accel_many(dx, dv, vf, vl, al, vcmd, p, dt, cmd_decel):
    n = dx.shape[0]
    a = np.empty(n)
    r = np.empty(n, dtype=np.int64)
    for k in range(n):
        a[k], r[k] = _accel(dx[k], dv[k], vf[k], vl[k], al[k], vcmd[k], p, dt, cmd_decel)
    return a, r


def w99_thresholds(dx: float, dv: float, v_f: float, v_l: float, a_l: float,
                   p: W99Params = W99Params()) -> Thresholds:
    return Thresholds(*_thresholds(float(dx), float(dv), float(v_f), float(v_l), float(a_l), p.as_array()))


def car_following_accel(dx, dv, v_f, v_l, a_l, v_cmd, p: W99Params = W99Params(),
                        dt: float = 0.1, cmd_decel: float = math.inf) -> tuple[float, Regime]:
    """Acceleration and regime of a follower; ``dx=inf`` means no leader.

    ``dv`` is leader speed minus follower speed.
    """
    a, r = _accel(float(dx), float(dv), float(v_f), float(v_l), float(a_l), float(v_cmd),
                  p.as_array(), float(dt), float(cmd_decel))
    return a, Regime(r)


def car_following_accel_many(dx, dv, v_f, v_l, a_l, v_cmd, p: W99Params = W99Params(),
                             dt: float = 0.1, cmd_decel: float = math.inf):
    arrs = [np.ascontiguousarray(a, dtype=np.float64) for a in (dx, dv, v_f, v_l, a_l, v_cmd)]
    return _accel_many(*arrs, p.as_array(), float(dt), float(cmd_decel))


def steady_flow(v: float, d0: float, T: float) -> float:
    """Equilibrium flow (veh/s) of a platoon at speed v, standstill spacing d0 and headway T."""
    if v < 0 or d0 <= 0 or T <= 0:
        raise ValueError("steady_flow needs v >= 0, d0 > 0, T > 0")
    if math.isinf(v):
        return 1.0 / T
    return v / (d0 + v * T)


def gap_accept(mainline, downstream_space: float, t_c: float, min_space: float,
               lookback: float = GAP_LOOKBACK_M) -> bool:
    """Critical-gap test for a minor-stream vehicle at a merge.

    ``mainline`` holds (distance to merge point m, speed m/s) for
    priority-stream vehicles upstream of the merge. Only the nearest one
    within ``lookback`` matters; a stopped one never arrives.
    """
    nearest = None
    for d, v in mainline:
        if d <= lookback and (nearest is None or d < nearest[0]):
            nearest = (d, v)
    if nearest is not None:
        d, v = nearest
        arrival = math.inf if v <= 0.0 else d / v
        if arrival < t_c:
            return False
    return downstream_space >= min_space


# ---------------------------------------------------------------------------
# entry queues
# ---------------------------------------------------------------------------

class EntryQueue:
    """FIFO of vehicles waiting to enter at one entry link."""

    def __init__(self, entry_id: str, link: int):
        self.entry_id = entry_id
        self.link = link
        self.waiting: deque[float] = deque()
        self.generated = 0
        self.injected = 0
        self.wait_released = 0.0

    def arrive(self, rate: float, dt: float, clock: float, rng: np.random.Generator) -> int:
        lam = rate * dt / 3600.0
        n = int(rng.poisson(lam)) if lam > 0 else 0
        for _ in range(n):
            self.waiting.append(clock)
        self.generated += n
        return n

    def pending_wait(self, clock: float) -> float:
        return sum(clock - t for t in self.waiting)


def insertion_speed(gap: float, v_leader: float | None, v_cmd: float, p: W99Params) -> float | None:
    """Speed at which a vehicle may enter at position 0, or None if blocked.

    The entering vehicle takes its ceiling or the leader's speed, whichever
    is lower, and waits until the free gap covers SDXC at that speed.
    """
    if v_leader is None:
        return v_cmd
    v = max(0.0, min(v_cmd, v_leader))
    need = p.CC0 if v <= 0.0 else p.CC0 + p.CC1 * v
    return v if gap >= need else None


def inject_demand(queue: EntryQueue, rate: float, dt: float, rng: np.random.Generator,
                  sim: "Simulation") -> EntryQueue:
    """Poisson arrivals into ``queue`` then release of its head if insertion is safe."""
    queue.arrive(rate, dt, sim.clock, rng)
    sim._release(queue)
    return queue


# ---------------------------------------------------------------------------
# simulation state
# ---------------------------------------------------------------------------

class Simulation:
    """Mutable simulation state plus its step function.

    Vehicles live in slot arrays indexed by vehicle id (ids are never
    reused). ``order`` holds active ids grouped by link rank (topological
    link order), front vehicle of each link first; ``starts`` are the
    group boundaries.
    """

    def __init__(self, network: RoadNetwork, seed: int | None = None, controller=None,
                 trace=None, trace_every: int = 1):
        from .metrics import MetricsAccumulator

        cfg = network.config
        self.network = network
        self.config = cfg
        self.params = W99Params.from_dict(cfg.sim.w99) if cfg.sim.w99 else W99Params()
        self._p = self.params.as_array()
        self.dt = cfg.sim.step_s
        self.seed = cfg.sim.seed if seed is None else seed
        self.rng = np.random.default_rng(self.seed)
        self.clock = 0.0
        self.steps = 0
        self.steps_per_interval = int(round(cfg.sim.control_interval_s / self.dt))
        self.t_c = cfg.sim.critical_gap_s
        self.veh_len = cfg.sim.vehicle_length_m
        self.cmd_decel = cfg.sim.command_decel
        self.compliance = cfg.sim.compliance
        self.desired = math.inf if cfg.sim.desired_speed_kmh is None else cfg.sim.desired_speed_kmh * KMH

        nl = network.n_links
        self.link_len = np.array([l.length for l in network.links])
        self.limit_ms = np.array([l.speed_limit for l in network.links]) * KMH
        self.cmd_ms = np.full(nl, math.inf)
        self.rank_of = np.empty(nl, dtype=np.int64)
        for r, li in enumerate(network.link_order):
            self.rank_of[li] = r
        self.link_order = network.link_order
        self.is_exit = [l.exit for l in network.links]
        self.link_seg = np.array(network.link_segment, dtype=np.int64)
        self.route_arrays = network.route_links
        self._route_cum = {}
        for e in cfg.entries:
            ris = network.entry_routes[e.id]
            w = np.array([network.routes[i].weight for i in ris])
            self._route_cum[e.id] = (ris, np.cumsum(w) / w.sum())
        self._merge_info = self._build_merge_info()
        self._siblings = {}
        for c in network.connectors:
            if c.kind == "merge":
                ups = [network.link_index[u] for u in c.priority]
                for u in ups:
                    self._siblings[u] = tuple((o, rk) for rk, o in enumerate(ups) if o != u)

        cap = 1024
        self.pos = np.zeros(cap)
        self.speed = np.zeros(cap)
        self.acc = np.zeros(cap)
        self.length = np.zeros(cap)
        self.desired_ms = np.zeros(cap)
        self.compliant = np.zeros(cap, dtype=bool)
        self.link = np.zeros(cap, dtype=np.int64)
        self.route = np.zeros(cap, dtype=np.int64)
        self.ridx = np.zeros(cap, dtype=np.int64)
        self.accepted = np.zeros(cap, dtype=bool)
        self.regime = np.zeros(cap, dtype=np.int64)
        self.vcmd = np.zeros(cap)
        self.n_vehicles = 0

        self.order = np.zeros(0, dtype=np.int64)
        self.starts = np.zeros(nl + 1, dtype=np.int64)

        self.queues = [EntryQueue(e.id, network.link_index[e.link]) for e in cfg.entries]
        # a head with one approach stands for a junction outside the controlled
        # area and runs on a fixed cycle unless a controller overrides it
        self.fixed_heads = [(ci, network.link_index[network.connectors[ci].upstream[0]])
                            for ci in network.signal_connectors
                            if len(network.connectors[ci].upstream) == 1]
        self.signal_state: dict[int, int] | None = None
        self.exited: list[int] = []
        self.exit_time: dict[int, float] = {}
        self.hard_clamps = 0
        self.vehicle_steps = 0

        nseg = len(network.super_segments)
        self.seg_in = np.zeros(nseg, dtype=np.int64)
        self.seg_out = np.zeros(nseg, dtype=np.int64)
        self.link_in = np.zeros(nl, dtype=np.int64)
        self.link_out = np.zeros(nl, dtype=np.int64)

        self.metrics = MetricsAccumulator()
        self.trace = trace
        self.trace_every = max(1, int(trace_every))
        self.controller = controller
        if controller is not None:
            controller.reset(self)

    # -- bookkeeping -------------------------------------------------------

    @property
    def n_active(self) -> int:
        return int(self.order.shape[0])

    @property
    def generated(self) -> int:
        return sum(q.generated for q in self.queues)

    @property
    def queued(self) -> int:
        return sum(len(q.waiting) for q in self.queues)

    def vehicles_on(self, li: int) -> np.ndarray:
        r = self.rank_of[li]
        return self.order[self.starts[r]:self.starts[r + 1]]

    def link_occupancy(self, li: int) -> float:
        ids = self.vehicles_on(li)
        return float((self.length[ids] + self.params.CC0).sum() / self.link_len[li])

    def _build_merge_info(self):
        """For each minor merge approach: the priority links feeding the merge point."""
        net = self.network
        info = {}
        for ci, c in enumerate(net.connectors):
            if c.kind != "merge":
                continue
            for rank, lid in enumerate(c.priority):
                if rank == 0:
                    continue
                info[net.link_index[lid]] = (
                    ci,
                    [net.link_index[u] for u in c.priority[:rank]],
                    net.link_index[c.downstream[0]],
                )
        return info

    def _grow(self) -> None:
        cap = self.pos.shape[0] * 2
        for name in ("pos", "speed", "acc", "length", "desired_ms", "compliant", "link",
                     "route", "ridx", "accepted", "regime", "vcmd"):
            old = getattr(self, name)
            new = np.zeros(cap, dtype=old.dtype)
            new[:old.shape[0]] = old
            setattr(self, name, new)

    def _insert_tail(self, vid: int, li: int) -> None:
        r = self.rank_of[li]
        lo = self.starts[r]
        at = self.starts[r + 1]
        x = self.pos[vid]
        while at > lo and self.pos[self.order[at - 1]] < x:
            at -= 1
        self.order = np.insert(self.order, at, vid)
        self.starts[r + 1:] += 1

    def _remove_head(self, li: int) -> int:
        r = self.rank_of[li]
        at = self.starts[r]
        vid = int(self.order[at])
        self.order = np.delete(self.order, at)
        self.starts[r + 1:] -= 1
        return vid

    def _vcmd_for(self, vid: int, li: int) -> float:
        if self.compliant[vid]:
            return min(self.limit_ms[li], self.cmd_ms[li])
        return min(self.limit_ms[li], self.desired_ms[vid])

    # -- controller interface -----------------------------------------------

    def set_link_speeds(self, speeds_kmh: dict[int, float] | None) -> None:
        self.cmd_ms[:] = math.inf
        if speeds_kmh:
            for li, v in speeds_kmh.items():
                self.cmd_ms[li] = v * KMH

    # -- merges and signals -------------------------------------------------

    def _mainline_near(self, links: list[int]):
        """(distance to merge point, speed) of the nearest vehicle on each priority chain."""
        out = []
        for li in links:
            dist = 0.0
            cur = li
            while True:
                ids = self.vehicles_on(cur)
                if ids.shape[0]:
                    h = int(ids[0])
                    out.append((dist + self.link_len[cur] - self.pos[h], float(self.speed[h])))
                    break
                dist += self.link_len[cur]
                preds = self.network.predecessors(cur)
                if dist > GAP_LOOKBACK_M or not preds:
                    break
                if len(preds) > 1:
                    ci = self.network.in_connector[cur]
                    preds = (self.network.link_index[self.network.connectors[ci].priority[0]],)
                cur = preds[0]
        return out

    def _stop_line(self, li: int, h: int, rem: float) -> bool:
        ci = self.network.out_connector[li]
        if ci < 0:
            return False
        if self.signal_state is not None and ci in self.signal_state:
            if self.signal_state[ci] == li:
                # close to the line on green counts as committed, like an accepted merge
                if rem <= MERGE_DECISION_M:
                    self.accepted[h] = True
                return False
            if self.accepted[h]:
                return False
            v = self.speed[h]
            if rem <= 0.0 or v * v / (2.0 * max(rem, 0.1)) > DILEMMA_DECEL:
                self.accepted[h] = True
                return False
            return True
        info = self._merge_info.get(li)
        if info is None:
            return False
        if self.accepted[h]:
            return False
        if rem > MERGE_DECISION_M:
            return True
        _, major_links, down = info
        ids = self.vehicles_on(down)
        if ids.shape[0]:
            t = int(ids[-1])
            space = self.pos[t] - self.length[t]
        else:
            space = math.inf
        mainline = self._mainline_near(major_links)
        if gap_accept(mainline, space, self.t_c, self.params.CC0 + self.length[h]):
            self.accepted[h] = True
            return False
        return True

    def _red_at(self, li: int) -> bool:
        ci = self.network.out_connector[li]
        if self.signal_state is None or ci not in self.signal_state:
            return False
        return self.signal_state[ci] != li

    def _merge_siblings(self, li: int):
        """Other approaches of the merge that ``li`` feeds, as (link, priority rank)."""
        return self._siblings.get(li, ())

    def _head_leader(self, li: int, h: int):
        """Leader of the front vehicle of a link.

        Returns (gap, leader speed, leader accel, stop flag, leader id, offset)
        where leader id is -1 for none and -2 for a stop line; ``offset``
        converts the leader's position into this link's coordinates.
        """
        L = self.link_len[li]
        rem = L - self.pos[h]
        if self.is_exit[li]:
            return math.inf, 0.0, 0.0, False, -1, 0.0
        if self._stop_line(li, h, rem):
            return rem, 0.0, 0.0, True, -2, L
        best = (math.inf, 0.0, 0.0, False, -1, 0.0)
        # committed vehicles on the other merge approaches, projected onto this one
        for sl, rank in self._merge_siblings(li):
            ids = self.vehicles_on(sl)
            if not ids.shape[0]:
                continue
            o = int(ids[0])
            if rank > 0 and not self.accepted[o]:
                continue
            orem = self.link_len[sl] - self.pos[o]
            if orem < rem:
                gap = rem - orem - self.length[o]
                if gap < best[0]:
                    best = (gap, self.speed[o], self.acc[o], False, o, L - self.link_len[sl])
        route = self.route_arrays[self.route[h]]
        k = self.ridx[h] + 1
        dist = rem
        while k < len(route) and dist < LOOKAHEAD_M:
            nl = route[k]
            ids = self.vehicles_on(nl)
            if ids.shape[0]:
                t = int(ids[-1])
                gap = dist + self.pos[t] - self.length[t]
                if gap < best[0]:
                    best = (gap, self.speed[t], self.acc[t], False, t, dist + self.pos[h])
                return best
            dist += self.link_len[nl]
            if self._red_at(nl) or (nl in self._merge_info):
                if dist < best[0]:
                    best = (dist, 0.0, 0.0, False, -1, 0.0)
                return best
            if self.is_exit[nl]:
                break
            k += 1
        return best

    # -- stepping ---------------------------------------------------------------

    def step(self) -> None:
        dt = self.dt
        ctrl = self.controller
        cfg_sim = self.config.sim
        state = None
        if self.fixed_heads:
            green = (self.clock % cfg_sim.fixed_cycle_s) < cfg_sim.fixed_green_s - 1e-9
            state = {ci: (li if green else -1) for ci, li in self.fixed_heads}
        if ctrl is not None:
            if self.steps % self.steps_per_interval == 0:
                self.set_link_speeds(ctrl.control(self))
            heads = ctrl.signal_state(self)
            if heads:
                state = {**(state or {}), **heads}
        self.signal_state = state

        order = self.order
        n = order.shape[0]
        clamps = 0
        if n:
            x = self.pos[order]
            v = self.speed[order]
            ln = self.length[order]
            al = np.empty(n)
            vl = np.empty(n)
            dx = np.empty(n)
            dx[1:] = x[:-1] - ln[:-1] - x[1:]
            vl[1:] = v[:-1]
            al[1:] = self.acc[order[:-1]]
            lead = np.arange(-1, n - 1, dtype=np.int64)
            lead_off = np.zeros(n)
            counts = np.diff(self.starts)
            links_of = np.repeat(np.asarray(self.link_order, dtype=np.int64), counts)
            where = {}
            head_lead = {}
            occupied = np.nonzero(counts)[0]
            for r in occupied:
                s = self.starts[r]
                li = self.link_order[r]
                h = int(order[s])
                g, vlead, alead, _, lv, off = self._head_leader(li, h)
                dx[s] = g
                vl[s] = vlead
                al[s] = alead
                lead[s] = lv
                lead_off[s] = off
                where[h] = s
                if lv >= 0:
                    head_lead[r] = lv
            for r, lv in head_lead.items():
                lead[self.starts[r]] = self._index_of(lv, where)
            seq = self._sequence(occupied, head_lead)
            lim = self.limit_ms[links_of]
            comp = self.compliant[order]
            vcmd = np.where(comp, np.minimum(lim, self.cmd_ms[links_of]),
                            np.minimum(lim, self.desired_ms[order]))
            a = np.empty(n)
            reg = np.empty(n, dtype=np.int64)
            clamps = _advance(x, v, ln, dx, vl, al, vcmd, lead, lead_off, seq, self._p, dt,
                              self.cmd_decel, a, reg)
            self.pos[order] = x
            self.speed[order] = v
            self.acc[order] = a
            self.regime[order] = reg
            self.vcmd[order] = vcmd
            self.vehicle_steps += n
            self.metrics.record_step(order, v, vcmd, dt, self.clock)

        clamps += self._transfer()
        self.hard_clamps += clamps

        for q, e in zip(self.queues, self.config.entries):
            q.arrive(e.rate_at(self.clock), dt, self.clock, self.rng)
            self._release(q)

        self.steps += 1
        self.clock = self.steps * dt
        if self.trace is not None and self.steps % self.trace_every == 0:
            self._write_trace()

    def _index_of(self, vid: int, where: dict) -> int:
        """Index in ``order`` of a leader that is the tail (or head) of its link."""
        li = int(self.link[vid])
        r = self.rank_of[li]
        lo, hi = self.starts[r], self.starts[r + 1]
        if int(self.order[hi - 1]) == vid:
            return int(hi - 1)
        return int(where.get(vid, lo))

    def _sequence(self, occupied, head_lead) -> np.ndarray:
        """Array positions ordered so every leader is updated before its follower."""
        done = set()
        out = []
        # downstream ranks first; a head waits for the link of its leader
        for r0 in reversed(occupied.tolist()):
            if r0 in done:
                continue
            stack = [r0]
            while stack:
                r = stack[-1]
                lv = head_lead.get(r)
                dep = None if lv is None else int(self.rank_of[self.link[lv]])
                if dep is not None and dep not in done and dep != r and dep not in stack:
                    stack.append(dep)
                    continue
                stack.pop()
                if r not in done:
                    done.add(r)
                    out.append(np.arange(self.starts[r], self.starts[r + 1]))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def _transfer(self) -> int:
        clamps = 0
        net = self.network
        for r, li in enumerate(self.link_order):
            L = self.link_len[li]
            while self.starts[r] < self.starts[r + 1]:
                h = int(self.order[self.starts[r]])
                if self.pos[h] < L:
                    break
                self._remove_head(li)
                self.link_out[li] += 1
                seg = self.link_seg[li]
                if self.is_exit[li]:
                    if seg >= 0:
                        self.seg_out[seg] += 1
                    self.exited.append(h)
                    self.exit_time[h] = self.clock + self.dt
                    self.metrics.on_exit(h)
                    continue
                route = self.route_arrays[self.route[h]]
                self.ridx[h] += 1
                nl = route[self.ridx[h]]
                self.pos[h] -= L
                self.link[h] = nl
                self.accepted[h] = False
                self.link_in[nl] += 1
                nseg = self.link_seg[nl]
                if nseg != seg:
                    if seg >= 0:
                        self.seg_out[seg] += 1
                    if nseg >= 0:
                        self.seg_in[nseg] += 1
                self._insert_tail(h, nl)
                ids = self.vehicles_on(nl)
                at = int(np.nonzero(ids == h)[0][0])
                if at > 0:
                    lead = int(ids[at - 1])
                    lim = self.pos[lead] - self.length[lead]
                    if self.pos[h] > lim:
                        self.pos[h] = lim
                        self.speed[h] = self.speed[lead]
                        clamps += 1
        # cross-link gaps of heads that stayed on their link
        for r, li in enumerate(self.link_order):
            if self.starts[r] == self.starts[r + 1] or self.is_exit[li]:
                continue
            h = int(self.order[self.starts[r]])
            route = self.route_arrays[self.route[h]]
            nl = route[self.ridx[h] + 1]
            ids = self.vehicles_on(nl)
            if not ids.shape[0]:
                continue
            t = int(ids[-1])
            gap = self.link_len[li] - self.pos[h] + self.pos[t] - self.length[t]
            if gap < 0.0:
                if self._merge_siblings(li):
                    # side by side with a vehicle that merged from another approach
                    self.speed[h] = 0.0
                else:
                    floor = -math.inf
                    if self.starts[r + 1] - self.starts[r] > 1:
                        f = int(self.order[self.starts[r] + 1])
                        floor = self.pos[f] + self.length[h]
                    self.pos[h] = max(self.pos[h] + gap, floor)
                    self.speed[h] = min(self.speed[h], self.speed[t])
                clamps += 1
        return clamps

    def _release(self, q: EntryQueue) -> bool:
        if not q.waiting:
            return False
        li = q.link
        ids = self.vehicles_on(li)
        u_route = self.rng.random()
        u_comp = self.rng.random()
        compliant = u_comp < self.compliance
        desired = self.desired
        vmax = self.limit_ms[li]
        if compliant:
            vmax = min(vmax, self.cmd_ms[li])
        else:
            vmax = min(vmax, desired)
        if ids.shape[0]:
            t = int(ids[-1])
            gap = self.pos[t] - self.length[t]
            v0 = insertion_speed(gap, float(self.speed[t]), vmax, self.params)
        else:
            v0 = vmax
        if v0 is None:
            return False
        arrived = q.waiting.popleft()
        q.injected += 1
        q.wait_released += self.clock - arrived
        if self.n_vehicles == self.pos.shape[0]:
            self._grow()
        vid = self.n_vehicles
        self.n_vehicles += 1
        ris, cum = self._route_cum[q.entry_id]
        ri = ris[int(np.searchsorted(cum, u_route, side="right").clip(0, len(ris) - 1))]
        self.pos[vid] = 0.0
        self.speed[vid] = v0
        self.acc[vid] = 0.0
        self.length[vid] = self.veh_len
        self.desired_ms[vid] = desired
        self.compliant[vid] = compliant
        self.link[vid] = li
        self.route[vid] = ri
        self.ridx[vid] = 0
        self.accepted[vid] = False
        self.regime[vid] = 0
        self.vcmd[vid] = vmax
        self._insert_tail(vid, li)
        self.link_in[li] += 1
        seg = self.link_seg[li]
        if seg >= 0:
            self.seg_in[seg] += 1
        self.metrics.on_enter(vid, self.clock - arrived)
        return True

    def _write_trace(self) -> None:
        t = f"{self.clock:.1f}"
        names = [l.id for l in self.network.links]
        for vid in self.order:
            self.trace.write(
                f"{t},{vid},{names[self.link[vid]]},{self.pos[vid]:.3f},"
                f"{self.speed[vid]:.3f},{Regime(self.regime[vid]).name}\n"
            )

    def run(self, until: float | None = None) -> None:
        end = self.config.sim.duration_s if until is None else until
        n_end = int(round(end / self.dt))
        while self.steps < n_end:
            self.step()

    def run_interval(self) -> None:
        for _ in range(self.steps_per_interval):
            self.step()

    def report(self):
        from .metrics import finalize
        return finalize(self.metrics, self)

    def check_conservation(self) -> bool:
        return self.generated == len(self.exited) + self.n_active + self.queued
