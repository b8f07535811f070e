"""Two-into-one merge experiment: time until the downstream link jams."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .control import make_controller
from .dynamics import Simulation
from .network import ScenarioConfig, build_network, scenario_from_dict
from .parallel import parallel_map
from .scenarios import merge_2to1

SUSTAIN_S = 60.0
SAMPLE_S = 1.0
POC_CONTROLLERS = ("none", "equal_split", "scats", "scoot", "backpressure")
# backpressure aims a little below the jam threshold; aiming at it exactly
# leaves the downstream link hovering on the threshold
BACKPRESSURE_MARGIN = 0.9


@dataclass
class PocResult:
    controller: str
    seed: int
    time_to_jam: float  # s, inf if never
    throughput: int  # vehicles that left the network
    speed_avg: float  # km/h
    max_occupancy: float
    report: object = None


def time_to_jam(times, occupancy, rho_star: float, sustain: float = SUSTAIN_S) -> float:
    """First instant from which occupancy stays above ``rho_star`` for ``sustain`` seconds."""
    start = None
    for t, b in zip(times, occupancy):
        if b > rho_star:
            if start is None:
                start = t
            if t - start >= sustain:
                return float(start)
        else:
            start = None
    return math.inf


def run_merge(cfg: ScenarioConfig, controller: str, seed: int, rho_star: float,
              down: str = "down") -> PocResult:
    params = {"B_star": BACKPRESSURE_MARGIN * rho_star} if controller == "backpressure" else {}
    net = build_network(cfg)
    sim = Simulation(net, seed=seed, controller=make_controller(controller, params))
    li = net.link_index[down]
    per = int(round(SAMPLE_S / sim.dt))
    n_end = int(round(cfg.sim.duration_s / sim.dt))
    times, occ = [], []
    while sim.steps < n_end:
        sim.step()
        if sim.steps % per == 0:
            times.append(sim.clock)
            occ.append(sim.link_occupancy(li))
    rep = sim.report()
    return PocResult(controller, seed, time_to_jam(times, occ, rho_star), rep.VEHARR,
                     rep.SPEEDAVG, float(np.max(occ)) if occ else 0.0, rep)


def _run(args):
    return run_merge(*args)


def poc_merge(controllers, seeds, rho_star: float, cfg: ScenarioConfig | None = None,
              jobs: int | None = None) -> list[PocResult]:
    """Every (controller, seed) pair on the merge scenario, ordered controller-major."""
    cfg = scenario_from_dict(merge_2to1()) if cfg is None else cfg
    tasks = [(cfg, c, int(s), float(rho_star)) for c in controllers for s in seeds]
    return parallel_map(_run, tasks, jobs)
