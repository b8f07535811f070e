import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freeflow.calibration import (
    FAMILIES,
    VDFSample,
    curve_sign_changes,
    drake,
    fit_vdf,
    greenshields,
    is_unimodal,
    relative_spread,
    sweep_demand,
    underwood,
    write_samples,
)
from freeflow.network import scenario_from_dict
from freeflow.scenarios import single_segment

GRID = np.linspace(0.02, 0.95, 24)


def samples_from(fn, *params, rho=GRID, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    q = fn(rho, *params)
    q = q * (1.0 + noise * rng.standard_normal(q.size))
    return [VDFSample(float(r), float(max(f, 0.0)), 100.0 * i, 0) for i, (r, f) in enumerate(zip(rho, q))]


# --- fits on synthetic data -------------------------------------------------

def test_greenshields_vertex():
    fit = fit_vdf(samples_from(greenshields, 30.0, 1.0))
    assert fit.family == "Greenshields"
    assert fit.rho_star == pytest.approx(0.5, rel=1e-6)
    assert fit.c_max == pytest.approx(7.5, rel=1e-6)
    assert fit.sse == pytest.approx(0.0, abs=1e-12)


def test_underwood_peak():
    fit = fit_vdf(samples_from(underwood, 20.0, 0.3))
    assert fit.family == "Underwood"
    assert fit.rho_star == pytest.approx(0.3, rel=1e-6)
    assert fit.c_max == pytest.approx(20.0 * 0.3 / np.e, rel=1e-6)


def test_drake_peak():
    fit = fit_vdf(samples_from(drake, 25.0, 0.35))
    assert fit.family == "Drake"
    assert fit.rho_star == pytest.approx(0.35, rel=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_noisy_greenshields(seed):
    fit = fit_vdf(samples_from(greenshields, 30.0, 1.0, noise=0.02, seed=seed))
    assert fit.rho_star == pytest.approx(0.5, rel=0.05)
    assert fit.sse >= 0.0


def test_candidates_reported():
    fit = fit_vdf(samples_from(greenshields, 30.0, 1.0))
    assert set(fit.candidates) == set(FAMILIES)
    assert all(c["sse"] >= fit.sse for c in fit.candidates.values())


def test_one_branch_rejected():
    with pytest.raises(ValueError, match="sweep range insufficient"):
        fit_vdf(samples_from(greenshields, 30.0, 1.0, rho=np.linspace(0.01, 0.3, 10)))
    with pytest.raises(ValueError, match="sweep range insufficient"):
        fit_vdf(samples_from(greenshields, 30.0, 1.0, rho=np.linspace(0.6, 0.99, 10)))


def test_too_few_samples():
    with pytest.raises(ValueError, match="at least 8"):
        fit_vdf(samples_from(greenshields, 30.0, 1.0, rho=np.linspace(0.1, 0.9, 7)))


@settings(max_examples=40)
@given(st.sampled_from(sorted(FAMILIES)), st.floats(5.0, 40.0), st.floats(0.15, 0.45),
       st.integers(0, 1000))
def test_fitted_curve_unimodal(family, v_f, r, seed):
    fn = FAMILIES[family][0]
    rho = np.linspace(0.02, 0.95, 20)
    if family == "Greenshields":
        r = 2.0 * r  # peak at r/2, keep it inside the grid
    fit = fit_vdf(samples_from(fn, v_f, r, rho=rho, noise=0.01, seed=seed))
    assert rho.min() < fit.rho_star < rho.max()
    assert curve_sign_changes(fit, rho.max()) == 1


# --- helpers ----------------------------------------------------------------

def test_unimodality_helper():
    rho = np.linspace(0.0, 1.0, 11)
    assert is_unimodal(rho, greenshields(rho, 30.0, 1.0))
    assert is_unimodal(rho, rho)  # rising only is still single-peaked
    bimodal = np.array([0, 5, 10, 5, 2, 6, 10, 5, 2, 1, 0], dtype=float)
    assert not is_unimodal(rho, bimodal)
    # small wiggles on the falling branch are tolerated
    wiggle = np.array([0, 5, 10, 8, 8.3, 7, 6, 5, 4, 3, 2], dtype=float)
    assert is_unimodal(rho, wiggle)


def test_relative_spread():
    assert relative_spread([1.0, 1.0, 1.0]) == 0.0
    assert relative_spread([0.9, 1.0, 1.1]) == pytest.approx(0.1)


def test_samples_csv(tmp_path):
    path = write_samples([VDFSample(0.1, 0.2, 300.0, 1), VDFSample(0.3, 0.1, 900.0, 2, False)],
                         tmp_path / "s.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["density", "flow", "demand", "seed", "steady_flag"]
    assert rows[2] == ["0.3", "0.1", "900.0", "2", "0"]


# --- sweeps on the simulator ------------------------------------------------

def test_zero_demand_is_empty_road():
    cfg = scenario_from_dict(single_segment())
    (s,) = sweep_demand(cfg, [0.0], [0])
    assert (s.density, s.flow) == (0.0, 0.0)


def test_low_demand_passes_freely():
    # long window so Poisson arrival noise stays well under the tolerance
    cfg = scenario_from_dict(single_segment(duration=3300.0))
    samples = sweep_demand(cfg, [600.0], [0, 1, 2], window=3000.0, jobs=1)
    flow = np.mean([s.flow for s in samples])
    assert flow == pytest.approx(600.0 / 3600.0, rel=0.10)
    assert all(s.steady for s in samples)


def test_sweep_preconditions():
    with pytest.raises(ValueError, match="warm-up"):
        sweep_demand(scenario_from_dict(single_segment(duration=800.0)), [100.0], [0])
    cfg = scenario_from_dict(single_segment())
    two = dataclasses.replace(cfg, entries=list(cfg.entries) * 2)
    with pytest.raises(ValueError, match="exactly one entry"):
        sweep_demand(two, [100.0], [0])
