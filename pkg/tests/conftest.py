import copy

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def chain_doc(lengths, speed=60.0, rate=0.0, duration=300.0, signal=False):
    """Single route over links of the given lengths; the last link is the exit."""
    n = len(lengths)
    links = [{"id": f"L{i}", "length": float(ln), "speed_limit": speed, "from_node": f"n{i}",
              "to_node": f"n{i + 1}", "exit": i == n - 1} for i, ln in enumerate(lengths)]
    connectors = [{"id": f"c{i}", "kind": "through", "upstream": [f"L{i}"], "downstream": [f"L{i + 1}"],
                   "signalized": signal and i == n - 2} for i in range(n - 1)]
    return {
        "links": links,
        "connectors": connectors,
        "routes": [{"id": "r", "links": [l["id"] for l in links], "weight": 1.0}],
        "entries": [{"id": "src", "link": "L0",
                     "demand": [{"t_start_s": 0.0, "t_end_s": duration, "rate_veh_per_hr": rate}]}],
        "sim": {"duration_s": duration, "seed": 0},
        "controller": {"type": "none", "params": {}},
    }


@pytest.fixture
def chain():
    return lambda *a, **k: copy.deepcopy(chain_doc(*a, **k))


# --- acceptance report ------------------------------------------------------

CRITERIA = {
    1: "fundamental diagram",
    2: "merge time-to-jam",
    3: "car-following physics",
    4: "conservation",
    5: "RL correctness",
    6: "SRC end to end",
    7: "mixed autonomy trend",
    8: "determinism and replay",
    9: "controller examples",
}
_outcomes: dict[int, list[tuple[str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    status = "passed" if rep.passed else ("skipped" if rep.skipped else "failed")
    _outcomes.setdefault(mark.args[0], []).append((item.name, status))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        runs = _outcomes[n]
        failed = [name for name, s in runs if s != "passed"]
        verdict = "PASS" if not failed else "FAIL"
        ok = len(runs) - len(failed)
        line = f"criterion {n} ({CRITERIA.get(n, '?')}): {verdict} ({ok}/{len(runs)} checks)"
        if failed:
            line += " failing: " + ", ".join(failed)
        tr.write_line(line)
