"""Flow-density sweeps on a single segment and unimodal VDF fits."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .dynamics import Simulation
from .network import ScenarioConfig, build_network, scenario_from_dict, scenario_to_dict
from .parallel import parallel_map

WARMUP_S = 300.0
WINDOW_S = 600.0
UNSTEADY_CV = 0.5  # coefficient of variation of sub-window flows that flags a sample


@dataclass
class VDFSample:
    density: float
    flow: float
    demand: float
    seed: int
    steady: bool = True


@dataclass
class VDFFit:
    family: str
    params: dict
    sse: float
    rho_star: float
    c_max: float
    candidates: dict = field(default_factory=dict)

    def curve(self, rho):
        return FAMILIES[self.family][0](np.asarray(rho, dtype=float), *self.params.values())


def greenshields(rho, v_f, rho_jam):
    return rho * v_f * (1.0 - rho / rho_jam)


def underwood(rho, v_f, rho_c):
    return rho * v_f * np.exp(-rho / rho_c)


def drake(rho, v_f, rho_c):
    return rho * v_f * np.exp(-0.5 * (rho / rho_c) ** 2)


# family -> (flow function, parameter names, (rho_star, c_max) from parameters)
FAMILIES = {
    "Greenshields": (greenshields, ("v_f", "rho_jam"), lambda v, r: (r / 2.0, v * r / 4.0)),
    "Underwood": (underwood, ("v_f", "rho_c"), lambda v, r: (r, v * r / math.e)),
    "Drake": (drake, ("v_f", "rho_c"), lambda v, r: (r, v * r * math.exp(-0.5))),
}


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _measure(args) -> VDFSample:
    cfg, demand, seed, window = args
    if demand <= 0:
        return VDFSample(0.0, 0.0, demand, seed, True)
    entry = cfg.entries[0]
    rate_cfg = _with_rate(cfg, demand)
    net = build_network(rate_cfg)
    li = net.link_index[entry.link]
    sim = Simulation(net, seed=seed)
    duration = rate_cfg.sim.duration_s
    start = duration - window
    sim.run(start)
    per = int(round(1.0 / sim.dt))
    occ = []
    sub = []
    n_sub = 5
    edges = [start + window * (k + 1) / n_sub for k in range(n_sub)]
    out0 = last = int(sim.link_out[li])
    k = 0
    while sim.steps < int(round(duration / sim.dt)):
        for _ in range(per):
            sim.step()
        occ.append(sim.link_occupancy(li))
        if k < n_sub and sim.clock >= edges[k] - 1e-9:
            now = int(sim.link_out[li])
            sub.append(now - last)
            last = now
            k += 1
    flow = (int(sim.link_out[li]) - out0) / window
    sub = np.asarray(sub, dtype=float)
    steady = True
    if sub.mean() > 0 and sub.std() / sub.mean() > UNSTEADY_CV:
        steady = False
    return VDFSample(float(np.mean(occ)), float(flow), float(demand), int(seed), steady)


def _with_rate(cfg: ScenarioConfig, rate: float) -> ScenarioConfig:
    doc = scenario_to_dict(cfg)
    for w in doc["entries"][0]["demand"]:
        w["rate_veh_per_hr"] = float(rate)
    return scenario_from_dict(doc)


def sweep_demand(scenario: ScenarioConfig, demands, seeds, window: float = WINDOW_S,
                 warmup: float = WARMUP_S, jobs: int | None = None) -> list[VDFSample]:
    """One steady-window (density, flow) sample per demand level and seed.

    Density is the time-mean occupancy of the entry link over the last
    ``window`` seconds; flow is the count leaving it over that window.
    """
    if len(scenario.entries) != 1:
        raise ValueError("sweep_demand needs a scenario with exactly one entry")
    if scenario.sim.duration_s - window < warmup:
        raise ValueError(f"duration {scenario.sim.duration_s:g} s leaves no {warmup:g} s warm-up "
                         f"before a {window:g} s window")
    tasks = [(scenario, float(d), int(s), float(window)) for d in demands for s in seeds]
    return parallel_map(_measure, tasks, jobs)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _branches(rho: np.ndarray, q: np.ndarray, tol: float = 0.03):
    order = np.argsort(rho)
    qs = q[order]
    first_peak = int(np.nonzero(qs >= (1.0 - tol) * qs.max())[0][0])
    return order[:first_peak], order[first_peak + 1:]


def _fit_family(name, rho, q):
    fn, names, peak = FAMILIES[name]
    top = int(np.argmax(q))
    rho_peak = max(rho[top], 1e-3)
    low = rho <= rho_peak
    v0 = float(np.max(q[low] / np.maximum(rho[low], 1e-9))) if low.any() else 1.0
    second = 2.0 * rho_peak if name == "Greenshields" else rho_peak
    res = least_squares(lambda th: fn(rho, *th) - q, x0=[v0, second],
                        bounds=([1e-9, 1e-6], [np.inf, np.inf]))
    v_f, r = (float(x) for x in res.x)
    rho_star, c_max = peak(v_f, r)
    sse = float(np.sum(res.fun ** 2))
    return VDFFit(name, dict(zip(names, (v_f, r))), sse, float(rho_star), float(c_max))


def fit_vdf(samples) -> VDFFit:
    """Least-squares fit of the three unimodal families; the lowest SSE wins.

    Families whose peak falls outside the sampled density range are not
    eligible.
    """
    if len(samples) < 8:
        raise ValueError(f"fit_vdf needs at least 8 samples, got {len(samples)}")
    rho = np.array([s.density for s in samples], dtype=float)
    q = np.array([s.flow for s in samples], dtype=float)
    rising, falling = _branches(rho, q)
    if len(rising) < 2 or len(falling) < 2:
        raise ValueError("sweep range insufficient: samples do not cover both flow branches")
    fits = {name: _fit_family(name, rho, q) for name in FAMILIES}
    lo, hi = rho.min(), rho.max()
    eligible = [f for f in fits.values() if lo < f.rho_star < hi]
    if not eligible:
        raise ValueError("no family peaks inside the sampled density range")
    best = min(eligible, key=lambda f: f.sse)
    best.candidates = {n: {"sse": f.sse, "rho_star": f.rho_star, "c_max": f.c_max, "params": f.params}
                       for n, f in fits.items()}
    return best


def mean_curve(samples) -> tuple[np.ndarray, np.ndarray]:
    """Seed-averaged (density, flow) per demand level, sorted by density."""
    demands = sorted({s.demand for s in samples})
    rho = np.array([np.mean([s.density for s in samples if s.demand == d]) for d in demands])
    q = np.array([np.mean([s.flow for s in samples if s.demand == d]) for d in demands])
    order = np.argsort(rho)
    return rho[order], q[order]


def is_unimodal(rho, q, tol: float = 0.05) -> bool:
    """Flow rises to one peak and then does not rise again, up to ``tol`` of the peak flow."""
    rho = np.asarray(rho, dtype=float)
    q = np.asarray(q, dtype=float)[np.argsort(rho)]
    if q.size < 3:
        return True
    slack = tol * q.max()
    m = int(np.argmax(q))
    up = np.all(np.diff(q[:m + 1]) >= -slack)
    down = np.all(np.diff(q[m:]) <= slack)
    return bool(up and down)


def curve_sign_changes(fit: VDFFit, rho_max: float, n: int = 100) -> int:
    grid = np.linspace(0.0, rho_max, n)
    d = np.sign(np.diff(fit.curve(grid)))
    d = d[d != 0]
    return int(np.sum(d[1:] != d[:-1]))


def per_seed_fits(samples) -> dict[int, VDFFit]:
    seeds = sorted({s.seed for s in samples})
    return {seed: fit_vdf([s for s in samples if s.seed == seed]) for seed in seeds}


def relative_spread(values) -> float:
    v = np.asarray(list(values), dtype=float)
    m = v.mean()
    return float(np.max(np.abs(v - m)) / m) if m else math.inf


def write_samples(samples, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["density", "flow", "demand", "seed", "steady_flag"])
        for s in samples:
            w.writerow([repr(s.density), repr(s.flow), repr(s.demand), s.seed, int(s.steady)])
    return path


def fit_summary(fit: VDFFit, per_seed: dict[int, VDFFit] | None = None) -> dict:
    out = asdict(fit)
    if per_seed:
        out["per_seed_rho_star"] = {str(k): f.rho_star for k, f in per_seed.items()}
        out["rho_star_spread"] = relative_spread(f.rho_star for f in per_seed.values())
    return out
