"""Per-vehicle accounting and the 14-metric network performance report."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

STOP_BELOW = 0.2  # m/s
REARM_ABOVE = 1.0  # m/s

METRIC_NAMES = (
    "VEHARR",
    "DISTTOT",
    "SPEEDAVG",
    "DEMANDLATENT",
    "STOPSAVG",
    "STOPSTOT",
    "DELAYAVG",
    "DELAYSTOPAVG",
    "DELAYTOT",
    "DELAYSTOPTOT",
    "DELAYLATENT",
    "VEHACT",
    "TRAVTMAVG",
    "EMISSIONSCO2",
)

DELAY_NOTE = (
    "delay is measured against each vehicle's time-varying commanded speed ceiling; "
    "controllers that lower speed commands also lower the free-flow reference"
)

# petrol passenger car speed-emission curve, g/km with v in km/h
CO2_COEFFS = (429.51, -7.8227, 0.0617)


def co2_factor(v_kmh: float, coeffs=CO2_COEFFS) -> float:
    """CO2 emission factor in g/km at mean speed ``v_kmh``; clamped below 5 km/h."""
    v = max(float(v_kmh), 5.0)
    a, b, c = coeffs
    return a + b * v + c * v * v


@dataclass
class MetricsReport:
    VEHARR: int
    DISTTOT: float
    SPEEDAVG: float
    DEMANDLATENT: int
    STOPSAVG: float
    STOPSTOT: int
    DELAYAVG: float
    DELAYSTOPAVG: float
    DELAYTOT: float
    DELAYSTOPTOT: float
    DELAYLATENT: float
    VEHACT: int
    TRAVTMAVG: float
    EMISSIONSCO2: float
    meta: dict = field(default_factory=dict, compare=False)

    def values(self) -> list[float]:
        return [getattr(self, k) for k in METRIC_NAMES]

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}


class MetricsAccumulator:
    """Growable per-vehicle accounting arrays indexed by vehicle id."""

    def __init__(self, capacity: int = 1024):
        self.dist = np.zeros(capacity)
        self.ttime = np.zeros(capacity)
        self.stopped = np.zeros(capacity)
        self.stops = np.zeros(capacity, dtype=np.int64)
        self.armed = np.ones(capacity, dtype=bool)
        self.free_time = np.zeros(capacity)
        self.entry_wait = np.zeros(capacity)
        self.exited = np.zeros(capacity, dtype=bool)
        self.n = 0

    def _ensure(self, vid: int) -> None:
        cap = self.dist.shape[0]
        if vid < cap:
            return
        while cap <= vid:
            cap *= 2
        for name in ("dist", "ttime", "stopped", "stops", "armed", "free_time", "entry_wait", "exited"):
            old = getattr(self, name)
            new = np.ones(cap, dtype=old.dtype) if name == "armed" else np.zeros(cap, dtype=old.dtype)
            new[:old.shape[0]] = old
            setattr(self, name, new)

    def on_enter(self, vid: int, wait: float) -> None:
        self._ensure(vid)
        self.entry_wait[vid] = wait
        self.n = max(self.n, vid + 1)

    def on_exit(self, vid: int) -> None:
        self.exited[vid] = True

    def record_step(self, ids: np.ndarray, v: np.ndarray, vcmd: np.ndarray, dt: float,
                    clock: float = 0.0) -> None:
        record_step(self, ids, v, vcmd, dt)


def record_step(acc: MetricsAccumulator, ids, v, vcmd, dt: float) -> MetricsAccumulator:
    """Accumulate one step of distance, time, stops and delay reference for ``ids``.

    A stop is a fall below 0.2 m/s; the counter re-arms only once the
    vehicle exceeds 1.0 m/s again.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[0] == 0:
        return acc
    acc._ensure(int(ids.max()))
    v = np.asarray(v, dtype=np.float64)
    acc.dist[ids] += v * dt
    acc.ttime[ids] += dt
    stopped = v < STOP_BELOW
    acc.stopped[ids] += np.where(stopped, dt, 0.0)
    armed = acc.armed[ids]
    new_stop = stopped & armed
    acc.stops[ids] += new_stop
    acc.armed[ids] = (armed & ~new_stop) | (v >= REARM_ABOVE)
    acc.free_time[ids] += np.minimum(v / np.asarray(vcmd, dtype=np.float64), 1.0) * dt
    return acc


def finalize(acc: MetricsAccumulator, sim) -> MetricsReport:
    n = sim.n_vehicles
    exited = acc.exited[:n]
    veharr = int(exited.sum())
    vehact = int(sim.n_active)
    latent = int(sim.queued)
    count = veharr + vehact
    dist = acc.dist[:n]
    ttime = acc.ttime[:n]
    disttot_m = float(dist.sum())
    ttot = float(ttime.sum())
    delay = np.maximum(ttime - acc.free_time[:n], 0.0)
    delaytot = float(delay.sum())
    stoptot = float(acc.stopped[:n].sum())
    stops = int(acc.stops[:n].sum())
    latent_wait = float(acc.entry_wait[:n].sum()) + sum(q.pending_wait(sim.clock) for q in sim.queues)
    warnings = []
    if count == 0:
        warnings.append("no completed or active vehicles; averages reported as 0")

    def avg(total: float) -> float:
        return total / count if count else 0.0

    co2 = 0.0
    if disttot_m > 0 and count:
        moving = ttime > 0
        vmean = np.where(moving, dist / np.where(moving, ttime, 1.0), 0.0) * 3.6
        grams = sum(co2_factor(vm) * d / 1000.0 for vm, d in zip(vmean, dist) if d > 0)
        co2 = float(grams) / disttot_m * (count + latent) / count

    report = MetricsReport(
        VEHARR=veharr,
        DISTTOT=disttot_m / 1000.0,
        SPEEDAVG=(disttot_m / ttot * 3.6) if ttot > 0 else 0.0,
        DEMANDLATENT=latent,
        STOPSAVG=avg(stops),
        STOPSTOT=stops,
        DELAYAVG=avg(delaytot),
        DELAYSTOPAVG=avg(stoptot),
        DELAYTOT=delaytot,
        DELAYSTOPTOT=stoptot,
        DELAYLATENT=latent_wait,
        VEHACT=vehact,
        TRAVTMAVG=avg(ttot),
        EMISSIONSCO2=co2,
    )
    report.meta = {
        "seed": sim.seed,
        "controller": getattr(sim.controller, "kind", "none"),
        "generated": sim.generated,
        "travel_time_total_s": ttot,
        "hard_clamps": sim.hard_clamps,
        "vehicle_steps": sim.vehicle_steps,
        "delay_reference": DELAY_NOTE,
        "warnings": warnings,
    }
    return report


def aggregate(reports: list[MetricsReport]) -> tuple[list[float], list[float]]:
    """Per-metric mean and sample standard deviation (0 for a single report)."""
    cols = list(zip(*(r.values() for r in reports)))
    means = [statistics.fmean(c) for c in cols]
    stdevs = [statistics.stdev(c) if len(c) > 1 else 0.0 for c in cols]
    return means, stdevs


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def report_csv(reports: list[MetricsReport], labels: list[str] | None = None) -> str:
    if not reports:
        raise ValueError("write_report needs at least one report")
    if labels is None:
        labels = [f"seed{r.meta.get('seed', i)}" for i, r in enumerate(reports)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", *METRIC_NAMES])
    for label, r in zip(labels, reports):
        w.writerow([label, *(_fmt(x) for x in r.values())])
    means, stdevs = aggregate(reports)
    w.writerow(["mean", *(_fmt(x) for x in means)])
    w.writerow(["stdev", *(_fmt(x) for x in stdevs)])
    return buf.getvalue()


def write_report(reports: list[MetricsReport], path, meta: dict | None = None,
                 labels: list[str] | None = None) -> Path:
    """Write the report CSV plus a ``.meta`` JSON sidecar next to it."""
    path = Path(path)
    text = report_csv(reports, labels)
    path.write_text(text, encoding="utf-8")
    sidecar = {
        "delay_reference": DELAY_NOTE,
        "runs": [r.meta for r in reports],
    }
    if meta:
        sidecar.update(meta)
    path.with_suffix(".meta").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return path


def read_report(path) -> dict[str, list[float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {r["row"]: [float(r[k]) for k in METRIC_NAMES] for r in rows}
