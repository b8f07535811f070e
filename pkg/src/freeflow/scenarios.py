"""Shipped scenario library.

Each builder returns a scenario document (a plain dict in the JSON schema);
``load_scenario`` resolves either a library name or a path to a document
file and returns the parsed config together with the exact bytes it was
parsed from.
"""

from __future__ import annotations

import json
from pathlib import Path

from .network import ScenarioConfig, parse_scenario


def _window(rate: float, duration: float) -> list[dict]:
    return [{"t_start_s": 0.0, "t_end_s": float(duration), "rate_veh_per_hr": float(rate)}]


def _sim(duration: float, seed: int = 0, **extra) -> dict:
    sim = {"duration_s": float(duration), "step_s": 0.1, "control_interval_s": 60.0,
           "seed": seed, "compliance": 1.0}
    sim.update(extra)
    return sim


def single_segment(demand: float = 1000.0, duration: float = 1500.0, length: float = 2000.0,
                   speed_limit: float = 60.0) -> dict:
    """One measured segment ending at a fixed-time stop line, then a short exit stretch."""
    links = [
        {"id": "segment", "length": length, "speed_limit": speed_limit,
         "from_node": "n0", "to_node": "n1"},
        {"id": "exit", "length": 300.0, "speed_limit": speed_limit,
         "from_node": "n1", "to_node": "n2", "exit": True},
    ]
    return {
        "name": "single_segment",
        "links": links,
        "connectors": [{"id": "stopline", "kind": "through", "upstream": ["segment"],
                        "downstream": ["exit"], "signalized": True}],
        "routes": [{"id": "r0", "links": ["segment", "exit"], "weight": 1.0}],
        "entries": [{"id": "source", "link": "segment", "demand": _window(demand, duration)}],
        "sim": _sim(duration),
        "controller": {"type": "none", "params": {}},
    }


def merge_2to1(major_rate: float = 600.0, minor_rate: float = 400.0, duration: float = 1800.0,
               speed_limit: float = 60.0) -> dict:
    """Two single-lane roads merging into one that ends at a fixed-time stop line."""
    links = [
        {"id": "major", "length": 1000.0, "speed_limit": speed_limit, "from_node": "a", "to_node": "m"},
        {"id": "minor", "length": 1000.0, "speed_limit": speed_limit, "from_node": "b", "to_node": "m"},
        {"id": "down", "length": 1000.0, "speed_limit": speed_limit, "from_node": "m", "to_node": "x"},
        {"id": "exit", "length": 300.0, "speed_limit": speed_limit, "from_node": "x",
         "to_node": "y", "exit": True},
    ]
    return {
        "name": "merge_2to1",
        "links": links,
        "connectors": [
            {"id": "merge", "kind": "merge", "upstream": ["major", "minor"], "downstream": ["down"],
             "priority": ["major", "minor"], "signalized": True},
            {"id": "stopline", "kind": "through", "upstream": ["down"], "downstream": ["exit"],
             "signalized": True},
        ],
        "routes": [
            {"id": "r_major", "links": ["major", "down", "exit"], "weight": 1.0},
            {"id": "r_minor", "links": ["minor", "down", "exit"], "weight": 1.0},
        ],
        "entries": [
            {"id": "major_in", "link": "major", "demand": _window(major_rate, duration)},
            {"id": "minor_in", "link": "minor", "demand": _window(minor_rate, duration)},
        ],
        "sim": _sim(duration, control_interval_s=10.0),
        "controller": {"type": "none", "params": {}},
    }


# on-ramp inflows in veh/hr: (low end, high end) per entry, west to east
MAINZ_INFLOWS = {
    "A643_A60": (3000.0, 5000.0),
    "L419": (1500.0, 3000.0),
    "Marienborn": (4000.0, 6000.0),
    "Hechtsheim": (2500.0, 4000.0),
}


def mainz_corridor(traffic: str = "high", duration: float | None = None) -> dict:
    """Stylized eastbound corridor: a mainline fed by three on-ramps, one exit.

    ``traffic="high"`` uses the midpoints of the inflow ranges, ``"low"``
    their lower ends. The mainline forms nine super-segments and every
    ramp feeder one more, twelve in total.
    """
    if traffic == "high":
        rates = {k: (lo + hi) / 2.0 for k, (lo, hi) in MAINZ_INFLOWS.items()}
        duration = 2500.0 if duration is None else duration
    elif traffic == "low":
        rates = {k: lo for k, (lo, hi) in MAINZ_INFLOWS.items()}
        duration = 1200.0 if duration is None else duration
    else:
        raise ValueError(f"unknown traffic pattern {traffic!r}")

    limit = 60.0
    # mainline link lengths (m); merges sit after m3, m7 and m12
    mainline = [1200, 1300, 1100, 1400, 1200, 1300, 1200, 1200, 1400, 1100, 1300, 1200, 1200, 1300,
                1000, 1500, 1200, 1300]
    merges_after = {3: "L419", 7: "Marienborn", 12: "Hechtsheim"}
    ramps = {"L419": [1300, 1200], "Marienborn": [1100, 1300], "Hechtsheim": [1200, 1300]}

    links = []
    connectors = []
    names = [f"m{i + 1}" for i in range(len(mainline))]
    for i, (name, ln) in enumerate(zip(names, mainline)):
        links.append({"id": name, "length": float(ln), "speed_limit": limit,
                      "from_node": f"M{i}", "to_node": f"M{i + 1}",
                      "exit": i == len(mainline) - 1})
    ramp_links = {}
    for ramp, lens in ramps.items():
        ids = [f"{ramp}_{j + 1}" for j in range(len(lens))]
        ramp_links[ramp] = ids
        for j, (rid, ln) in enumerate(zip(ids, lens)):
            links.append({"id": rid, "length": float(ln), "speed_limit": limit,
                          "from_node": f"{ramp}{j}", "to_node": f"{ramp}{j + 1}"})
        for a, b in zip(ids, ids[1:]):
            connectors.append({"id": f"{a}>{b}", "kind": "through", "upstream": [a], "downstream": [b]})
    for i in range(len(mainline) - 1):
        a, b = names[i], names[i + 1]
        ramp = merges_after.get(i + 1)
        if ramp is None:
            connectors.append({"id": f"{a}>{b}", "kind": "through", "upstream": [a], "downstream": [b]})
        else:
            last = ramp_links[ramp][-1]
            connectors.append({"id": f"merge_{ramp}", "kind": "merge", "upstream": [a, last],
                               "downstream": [b], "priority": [a, last], "signalized": True})

    routes = [{"id": "through", "links": names, "weight": 1.0}]
    for i, ramp in merges_after.items():
        routes.append({"id": f"from_{ramp}", "links": ramp_links[ramp] + names[i:], "weight": 1.0})
    entries = [{"id": "A643_A60", "link": names[0], "demand": _window(rates["A643_A60"], duration)}]
    for ramp in merges_after.values():
        entries.append({"id": ramp, "link": ramp_links[ramp][0], "demand": _window(rates[ramp], duration)})

    return {
        "name": f"mainz_corridor_{traffic}",
        "links": links,
        "connectors": connectors,
        "routes": routes,
        "entries": entries,
        "sim": _sim(duration),
        "controller": {"type": "none", "params": {}},
    }


LIBRARY = {
    "single_segment": single_segment,
    "merge_2to1": merge_2to1,
    "mainz_corridor": lambda: mainz_corridor("high"),
    "mainz_corridor_high": lambda: mainz_corridor("high"),
    "mainz_corridor_low": lambda: mainz_corridor("low"),
}


def scenario_text(name: str) -> str:
    return json.dumps(LIBRARY[name](), indent=2) + "\n"


def load_scenario(ref: str | Path) -> tuple[ScenarioConfig, bytes]:
    """Resolve a library name or document path to (config, document bytes)."""
    if str(ref) in LIBRARY:
        data = scenario_text(str(ref)).encode("utf-8")
    else:
        path = Path(ref)
        if not path.exists():
            raise FileNotFoundError(f"scenario not found: {ref}")
        data = path.read_bytes()
    return parse_scenario(data), data
