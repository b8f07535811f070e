import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import chain_doc
from freeflow.dynamics import (
    TRACE_HEADER,
    EntryQueue,
    Regime,
    Simulation,
    W99Params,
    car_following_accel,
    car_following_accel_many,
    gap_accept,
    insertion_speed,
    steady_flow,
    w99_thresholds,
)
from freeflow.network import build_network, scenario_from_dict
from freeflow.scenarios import merge_2to1

P = W99Params()


def sim_of(doc, seed=0, **kw):
    return Simulation(build_network(scenario_from_dict(doc)), seed=seed, **kw)


# --- independent oracle -----------------------------------------------------

def oracle_regime(dx, dv, vf, vl, al, p=P):
    vs = vf if (dv >= 0 or al < -1) else vl
    sdxc = p.CC0 if vl <= 0 else p.CC0 + p.CC1 * vs
    sdxo = sdxc + p.CC2
    sdxv = sdxo + p.CC3 * (dv - p.CC4)
    sdv = p.CC6 / 1e4 * dx ** 2
    sdvc = p.CC4 - sdv if vl > 0 else 0.0
    sdvo = sdv + p.CC5 if vf > p.CC5 else sdv
    if dx <= sdxc and dv <= sdvo:
        return Regime.Emergency
    if dx < sdxv and dv < sdvc:
        return Regime.ClosingIn
    if sdxc < dx <= sdxo and sdvc <= dv < sdvo:
        return Regime.Following
    return Regime.FreeFlow


# --- thresholds -------------------------------------------------------------

def test_stopped_leader_standstill_distance():
    th = w99_thresholds(10.0, -5.0, 5.0, 0.0, 0.0)
    assert th.SDXC == pytest.approx(0.5)
    assert th.SDVC == 0.0


def test_thresholds_equal_speeds():
    th = w99_thresholds(30.0, 0.0, 10.0, 10.0, 0.0)
    assert th.SDXC == pytest.approx(25.5)
    assert th.SDXO == pytest.approx(45.5)
    assert th.SDXV == pytest.approx(45.5 - 12.5)


def test_thresholds_zero_gap():
    th = w99_thresholds(0.0, 0.0, 10.0, 10.0, 0.0)
    assert th.SDV == 0.0
    assert th.SDVC == pytest.approx(-0.5)


def test_hard_braking_leader_uses_follower_speed():
    th = w99_thresholds(30.0, -2.0, 12.0, 10.0, -2.0)
    assert th.SDXC == pytest.approx(0.5 + 2.5 * 12.0)
    th = w99_thresholds(30.0, -2.0, 12.0, 10.0, 0.0)
    assert th.SDXC == pytest.approx(0.5 + 2.5 * 10.0)


def test_params_invariants():
    with pytest.raises(ValueError, match="CC8 >= CC9"):
        W99Params(CC8=0.5, CC9=0.75)
    with pytest.raises(ValueError, match="CC3"):
        W99Params(CC3=1.0)
    with pytest.raises(ValueError, match="unknown"):
        W99Params.from_dict({"CC10": 1.0})


# --- acceleration -----------------------------------------------------------

def test_free_road_start():
    a, r = car_following_accel(math.inf, 0.0, 0.0, 0.0, 0.0, 16.7)
    assert r is Regime.FreeFlow
    assert a == pytest.approx(1.0)


def test_free_road_acceleration_tapers():
    a, _ = car_following_accel(math.inf, 0.0, 22.22, 0.0, 0.0, 40.0)
    assert a == pytest.approx(0.75)


def test_following_slower_leader():
    # gap inside the following band, small negative speed difference
    dx, vf, vl = 35.0, 10.1, 10.0
    assert oracle_regime(dx, vl - vf, vf, vl, 0.0) is Regime.Following
    a, r = car_following_accel(dx, vl - vf, vf, vl, 0.0, 20.0)
    assert r is Regime.Following
    assert a == pytest.approx(-0.5)


def test_following_faster_leader_accelerates():
    dx, vf, vl = 35.0, 10.0, 10.1
    a, r = car_following_accel(dx, vl - vf, vf, vl, 0.0, 20.0)
    assert r is Regime.Following
    assert a == pytest.approx(0.5)


@pytest.mark.parametrize("dv", [-3.0, -0.5, 0.0, 0.3])
def test_inside_standstill_distance_brakes_fully(dv):
    a, r = car_following_accel(0.4, dv, 5.0, 5.0 + dv, 0.0, 20.0)
    assert r is Regime.Emergency
    assert a == pytest.approx(-8.0)


def test_closing_in_on_stopped_queue():
    dx, vf = 60.0, 10.0
    a, r = car_following_accel(dx, -vf, vf, 0.0, 0.0, 20.0)
    assert r is Regime.ClosingIn
    assert a == pytest.approx(-vf ** 2 / (2 * (dx - 0.5)))


def test_speed_ceiling_and_floor():
    a, _ = car_following_accel(math.inf, 0.0, 16.65, 0.0, 0.0, 16.7)
    assert 16.65 + 0.1 * a == pytest.approx(16.7)
    a, _ = car_following_accel(0.3, -0.1, 0.1, 0.0, 0.0, 16.7)
    assert 0.1 + 0.1 * a >= -1e-12


def test_lowered_command_eases_down():
    a, _ = car_following_accel(math.inf, 0.0, 20.0, 0.0, 0.0, 10.0, cmd_decel=2.0)
    assert a == pytest.approx(-2.0)


finite = dict(allow_nan=False, allow_infinity=False)


@given(dx=st.floats(0, 300, **finite), vf=st.floats(0, 40, **finite), vl=st.floats(0, 40, **finite),
       al=st.floats(-8, 2, **finite), vcmd=st.floats(0.1, 40, **finite))
def test_regime_matches_priority_order(dx, vf, vl, al, vcmd):
    dv = vl - vf
    a, r = car_following_accel(dx, dv, vf, vl, al, vcmd)
    assert r is oracle_regime(dx, dv, vf, vl, al)
    assert math.isfinite(a)
    v_new = vf + 0.1 * a
    assert -1e-9 <= v_new <= max(vf, vcmd) + 1e-9
    if vf > vcmd:
        return  # the speed ceiling overrides the regime floors
    if r is Regime.Emergency:
        assert -8.0 - 1e-12 <= a
    if r is Regime.ClosingIn:
        assert -4.0 - 1e-12 <= a <= 1e-12


@given(st.lists(st.tuples(st.floats(0, 200, **finite), st.floats(0, 30, **finite),
                          st.floats(0, 30, **finite)), min_size=1, max_size=20))
def test_batched_accel_matches_scalar(rows):
    dx, vf, vl = (np.array(c) for c in zip(*rows))
    a, r = car_following_accel_many(dx, vl - vf, vf, vl, np.zeros_like(dx), np.full_like(dx, 20.0))
    for k in range(len(rows)):
        ak, rk = car_following_accel(dx[k], vl[k] - vf[k], vf[k], vl[k], 0.0, 20.0)
        assert a[k] == ak and r[k] == rk


# --- steady flow ------------------------------------------------------------

def test_steady_flow_examples():
    assert steady_flow(0.0, 5.0, 2.5) == 0.0
    assert steady_flow(20.0, 5.0, 2.5) == pytest.approx(20.0 / 55.0)
    assert steady_flow(math.inf, 5.0, 2.5) == pytest.approx(0.4)
    assert steady_flow(1e9, 5.0, 2.5) == pytest.approx(0.4, rel=1e-6)


@pytest.mark.parametrize("args", [(-1.0, 5.0, 2.5), (10.0, 0.0, 2.5), (10.0, 5.0, 0.0)])
def test_steady_flow_domain(args):
    with pytest.raises(ValueError):
        steady_flow(*args)


@pytest.mark.parametrize("v", np.linspace(0.5, 40.0, 10))
def test_flow_derivative(v):
    d0, T, h = 5.0, 2.5, 1e-4
    fd = (steady_flow(v + h, d0, T) - steady_flow(v - h, d0, T)) / (2 * h)
    exact = d0 / (d0 + v * T) ** 2
    assert fd > 0
    assert abs(fd - exact) / exact < 1e-6


# --- merges and insertion ---------------------------------------------------

def test_gap_accept_examples():
    assert gap_accept([(90.0, 30.0)], 10.0, 3.0, 5.0)
    assert gap_accept([], 10.0, 3.0, 5.0)
    assert not gap_accept([(30.0, 30.0)], 10.0, 3.0, 5.0)


def test_gap_accept_space_and_horizon():
    assert not gap_accept([], 4.9, 3.0, 5.0)
    assert gap_accept([(10.0, 0.0)], 10.0, 3.0, 5.0)  # stopped car never arrives
    assert gap_accept([(250.0, 200.0)], 10.0, 3.0, 5.0)  # beyond look-back
    assert not gap_accept([(250.0, 30.0), (40.0, 20.0)], 10.0, 3.0, 5.0)


def test_insertion_speed():
    assert insertion_speed(100.0, None, 16.7, P) == 16.7
    assert insertion_speed(0.4, 0.0, 16.7, P) is None
    assert insertion_speed(0.6, 0.0, 16.7, P) == 0.0
    assert insertion_speed(26.0, 10.0, 16.7, P) == 10.0
    assert insertion_speed(25.0, 10.0, 16.7, P) is None
    assert insertion_speed(50.0, 30.0, 16.7, P) == 16.7


def test_arrival_rate_per_step():
    q = EntryQueue("e", 0)
    rng = np.random.default_rng(0)
    n = sum(q.arrive(3600.0, 1.0, 0.0, rng) for _ in range(20000))
    assert n / 20000 == pytest.approx(1.0, abs=0.03)
    before = q.generated
    q.arrive(0.0, 1.0, 0.0, rng)
    assert q.generated == before


def test_blocked_entry_builds_latent_demand():
    doc = chain_doc([30.0, 300.0], rate=3600.0, duration=200.0, signal=True)
    doc["sim"].update(fixed_cycle_s=1000.0, fixed_green_s=1.0)
    sim = sim_of(doc)
    sim.run(100.0)
    q1 = sim.queued
    sim.run(200.0)
    assert sim.queued > q1 > 0
    assert sim.report().DEMANDLATENT == sim.queued


# --- whole-simulation behaviour ---------------------------------------------

def test_single_vehicle_settles_at_command():
    doc = chain_doc([3000.0, 100.0], speed=60.0, duration=120.0)
    sim = sim_of(doc)
    sim.queues[0].waiting.append(0.0)
    sim.queues[0].generated += 1
    sim.step()
    vid = 0
    sim.speed[vid] = 0.0
    sim.run(120.0)
    assert abs(sim.speed[vid] - 60.0 / 3.6) <= 0.01


def test_standstill_platoon_packs_to_cc0():
    doc = chain_doc([1000.0, 300.0], rate=1200.0, duration=800.0, signal=True)
    doc["entries"][0]["demand"][0]["t_end_s"] = 30.0
    doc["sim"].update(fixed_cycle_s=3000.0, fixed_green_s=1.0)
    sim = sim_of(doc, seed=3)
    sim.run(800.0)
    ids = sim.vehicles_on(0)
    assert len(ids) >= 4
    x, ln = sim.pos[ids], sim.length[ids]
    assert np.all(sim.speed[ids] < 0.01)
    assert 1000.0 - x[0] == pytest.approx(P.CC0, abs=0.1)
    np.testing.assert_allclose(x[:-1] - ln[:-1] - x[1:], P.CC0, atol=0.1)


def _gaps_ok(sim):
    for li in range(len(sim.network.links)):
        ids = sim.vehicles_on(li)
        if len(ids) < 2:
            continue
        x, ln = sim.pos[ids], sim.length[ids]
        if np.any(x[:-1] - ln[:-1] - x[1:] < -1e-9):
            return False
    return True


def test_merge_never_overlaps():
    doc = merge_2to1(duration=600.0)
    sim = sim_of(doc, seed=2)
    while sim.steps < 6000:
        sim.step()
        if sim.steps % 5 == 0:
            assert _gaps_ok(sim)
    assert sim.hard_clamps < 1e-3 * sim.vehicle_steps


@pytest.mark.parametrize("kmh", [45.0, 60.0, 80.0])
def test_saturated_flow_near_analytic(kmh):
    doc = chain_doc([3000.0, 200.0], speed=kmh, rate=5000.0, duration=900.0)
    sim = sim_of(doc, seed=1)
    sim.run(300.0)
    out0 = int(sim.link_out[0])
    sim.run(900.0)
    q = (int(sim.link_out[0]) - out0) / 600.0
    ref = steady_flow(kmh / 3.6, P.CC0 + 4.5, P.CC1)
    assert abs(q - ref) / ref < 0.2


def test_flow_increases_with_command():
    flows = []
    for kmh in (45.0, 60.0, 80.0):
        doc = chain_doc([3000.0, 200.0], speed=kmh, rate=5000.0, duration=900.0)
        sim = sim_of(doc, seed=1)
        sim.run(300.0)
        out0 = int(sim.link_out[0])
        sim.run(900.0)
        flows.append(int(sim.link_out[0]) - out0)
    assert flows[0] < flows[1] < flows[2]


def test_conservation_every_step():
    sim = sim_of(merge_2to1(duration=300.0), seed=5)
    while sim.steps < 3000:
        sim.step()
        assert sim.check_conservation()
    assert sim.clock == pytest.approx(300.0)


def test_same_seed_same_trajectory():
    def trace(seed):
        import io
        buf = io.StringIO()
        sim = sim_of(merge_2to1(duration=120.0), seed=seed, trace=buf)
        sim.run()
        return buf.getvalue(), sim.report().values()

    a, b = trace(4), trace(4)
    assert a == b
    assert a[0]
    assert trace(5)[0] != a[0]


def test_trace_columns():
    import io
    buf = io.StringIO()
    sim = sim_of(chain_doc([500.0, 100.0], rate=1800.0, duration=20.0), trace=buf, trace_every=10)
    sim.run()
    lines = buf.getvalue().splitlines()
    row = lines[-1].split(",")
    assert len(row) == len(TRACE_HEADER.split(",")) == 6
    assert float(row[0]) == pytest.approx(20.0)
    assert row[5] in Regime.__members__
