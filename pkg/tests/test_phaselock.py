import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rrdps.errors import DomainError
from rrdps.phaselock import (
    CalibrationTable,
    DriftModel,
    InsufficientCounts,
    PhaseDrift,
    applied_phases,
    calibrate_all,
    estimate_phase,
    fringe_cost,
    measure_fringe,
    phase_uncertainty,
    refine,
    wrap_phase,
)


def noiseless_counts(phi, applied=None, total=1e6):
    applied = applied_phases(4) if applied is None else np.asarray(applied)
    f = 0.5 * (1 + np.cos(phi + applied))
    return total * f, total * (1 - f)


def circ(a, b):
    return abs(math.remainder(a - b, 2 * math.pi))


# --- measurement ---------------------------------------------------------------

def test_fringe_extremes():
    rng = np.random.default_rng(0)
    c1, c2 = measure_fringe(0.3, -0.3, 1e4, 1.0, rng, efficiency=1.0)
    assert c2 == 0 and c1 > 0
    c1, c2 = measure_fringe(0.3, math.pi - 0.3, 1e4, 1.0, rng, efficiency=1.0)
    assert c1 == 0 and c2 > 0


def test_fringe_quadrature_splits_evenly():
    rng = np.random.default_rng(1)
    c1, c2 = measure_fringe(np.full(200, math.pi / 2), 0.0, 1e4, 1.0, rng, efficiency=1.0)
    n = c1 + c2
    # binomial split around one half, 3 sigma per trial, allow a few outliers
    z = (c1 - n / 2) / np.sqrt(n / 4)
    assert np.mean(np.abs(z) < 3) > 0.98
    assert abs(np.mean(z)) < 3 / math.sqrt(200)


def test_fringe_needs_light():
    with pytest.raises(DomainError):
        measure_fringe(0.0, 0.0, 0.0, 1.0, np.random.default_rng(0))


# --- estimation ------------------------------------------------------------------

def test_noiseless_zero():
    assert circ(estimate_phase(*noiseless_counts(0.0)), 0.0) < 1e-9


def test_noiseless_matches_grid_oracle():
    phi = 1.2345
    c1, c2 = noiseless_counts(phi)
    f = c1 / (c1 + c2)
    grid = np.linspace(0, 2 * math.pi, 10**6, endpoint=False)
    oracle = grid[np.argmin(fringe_cost(grid, f))]
    got = estimate_phase(c1, c2)
    assert circ(got, oracle) < 2 * math.pi / 10**6
    assert circ(got, phi) < 1e-6


def test_estimate_is_least_squares_minimum_with_noise():
    rng = np.random.default_rng(3)
    applied = applied_phases(4)
    c1, c2 = measure_fringe(0.7, applied, 5e3, 1.0, rng, efficiency=1.0, visibility=0.9)
    f = c1 / (c1 + c2)
    grid = np.linspace(0, 2 * math.pi, 200_001)
    oracle = grid[np.argmin(fringe_cost(grid, f))]
    assert circ(estimate_phase(c1, c2), oracle) < 1e-4


def test_unequal_steps_still_minimise():
    applied = np.array([0.0, 1.1, 2.9, 4.0, 5.5])
    c1, c2 = noiseless_counts(2.2, applied, 1.0)
    c1 = c1 * 0.97 + 0.01  # distort so the closed form is not exact
    f = c1 / (c1 + c2)
    grid = np.linspace(0, 2 * math.pi, 400_001)
    oracle = grid[np.argmin(fringe_cost(grid, f, applied))]
    assert circ(estimate_phase(c1, c2, applied), oracle) < 1e-4


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(-math.pi, math.pi))
def test_equivariance(phi, shift):
    applied = applied_phases(4)
    base = estimate_phase(*noiseless_counts(phi, applied))
    moved = estimate_phase(*noiseless_counts(phi, applied + shift), applied + shift)
    assert circ(moved - base, 0.0) < 1e-7
    assert 0 <= base < 2 * math.pi


def test_vectorised_estimate():
    phis = np.linspace(0, 6, 7)
    c1, c2 = noiseless_counts(phis[:, None])
    out = estimate_phase(c1, c2)
    assert out.shape == (7,)
    assert all(circ(a, b) < 1e-9 for a, b in zip(out, phis))


def test_poisson_recovery():
    rng = np.random.default_rng(7)
    applied = applied_phases(4)
    c1, c2 = measure_fringe(2.0, np.broadcast_to(applied, (1000, 4)), 1e4, 1.0, rng, efficiency=1.0)
    est = estimate_phase(c1, c2)
    err = np.abs(np.remainder(est - 2.0 + math.pi, 2 * math.pi) - math.pi)
    assert np.mean(err < 0.05) >= 0.99


def test_uncertainty_matches_spread():
    rng = np.random.default_rng(8)
    applied = applied_phases(4)
    c1, c2 = measure_fringe(2.0, np.broadcast_to(applied, (4000, 4)), 1e4, 1.0, rng, efficiency=1.0)
    est = estimate_phase(c1, c2)
    sig = phase_uncertainty(est, c1, c2)
    spread = np.std(np.remainder(est - 2.0 + math.pi, 2 * math.pi) - math.pi)
    assert np.median(sig) == pytest.approx(spread, rel=0.1)


def test_empty_step_raises():
    with pytest.raises(InsufficientCounts):
        estimate_phase([10, 0, 5, 5], [10, 0, 5, 5])


def test_too_few_steps():
    with pytest.raises(DomainError):
        estimate_phase([1, 2], [2, 1])


# --- refinement -------------------------------------------------------------------

def test_refine_keeps_optimum():
    c1, c2 = noiseless_counts(1.0)
    phi = estimate_phase(c1, c2)
    assert refine(phi, c1, c2) == phi


def test_refine_walks_back_two_steps():
    c1, c2 = noiseless_counts(1.0)
    assert refine(1.0 + 2 * 0.02, c1, c2) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=1000, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi), st.floats(0.001, 0.3), st.integers(0, 8))
def test_refine_never_worse(phi_true, start, step, n):
    c1, c2 = noiseless_counts(phi_true, total=1.0)
    c1 = c1 + 0.05
    f = c1 / (c1 + c2)
    out = refine(start, c1, c2, step=step, n_steps=n)
    assert fringe_cost(out, f) <= fringe_cost(start, f) + 1e-15


def test_refine_bad_step():
    with pytest.raises(DomainError):
        refine(0.0, [1, 1, 1, 1], [1, 1, 1, 1], step=0.0)


# --- error bound ---------------------------------------------------------------------

@given(st.floats(0.5, 1.0), st.floats(-0.3, 0.3))
def test_quadratic_error_bound(V, eps):
    e = (1 - V * math.cos(eps)) / 2
    assert e <= (1 - V) / 2 + eps**2 * V / 4 + 1e-15


# --- table and calibration -------------------------------------------------------------

def test_table_entry_isolation():
    t = CalibrationTable(8)
    before = t.copy()
    t.update(3, 7.0, 0.01, 1.5)
    assert t.lookup(3) == pytest.approx(7.0 - 2 * math.pi)
    for d in range(8):
        if d != 3:
            assert t.phases[d] == before.phases[d]
            assert np.array_equal(t.timestamps[d], before.timestamps[d], equal_nan=True)
    assert np.all((t.phases >= 0) & (t.phases < 2 * math.pi))


def test_table_text_roundtrip(tmp_path):
    t = CalibrationTable(16)
    rng = np.random.default_rng(0)
    for d in range(16):
        t.update(d, rng.uniform(0, 7), rng.random() * 0.01, float(d))
    path = tmp_path / "lut.tsv"
    t.save(path)
    back = CalibrationTable.load(path)
    assert np.array_equal(back.phases, t.phases)
    assert np.array_equal(back.residuals, t.residuals)
    assert np.array_equal(back.timestamps, t.timestamps)
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    assert len(lines) == 16 and all(len(ln.split("\t")) == 4 for ln in lines)


def test_table_rejects_bad_text():
    with pytest.raises(ValueError):
        CalibrationTable.from_text("0\t1.0\t0.1\n")
    with pytest.raises(ValueError):
        CalibrationTable.from_text("# header only\n")


def test_zero_drift_bright_flux_residuals():
    L = 128
    drift = PhaseDrift(DriftModel(sigma=0.0, rate=0.0), L, np.random.default_rng(1))
    table = calibrate_all(CalibrationTable(L), drift, 0.0, np.random.default_rng(2))
    w = drift.advance(1.0)
    truth = drift.phase(np.arange(L), w, 1.0)
    err = np.abs(np.remainder(table.phases - truth + math.pi, 2 * math.pi) - math.pi)
    assert np.all(err < 0.05)
    assert np.all(table.residuals < 0.05)
    assert not table.stale.any()


def test_starved_delay_goes_stale():
    L = 16
    drift = PhaseDrift(DriftModel(), L, np.random.default_rng(1))
    table = CalibrationTable(L)
    table.update(5, 1.25, 0.0, -1.0)
    flux = np.full(L, 60e6)
    flux[5] = 0.0
    calibrate_all(table, drift, 0.0, np.random.default_rng(3), flux=flux)
    assert table.stale[5] and table.phases[5] == 1.25 and table.timestamps[5] == -1.0
    assert not table.stale[np.arange(L) != 5].any()
    assert np.all(table.timestamps[np.arange(L) != 5] >= 0)


def test_ideal_calibration_is_exact():
    L = 8
    drift = PhaseDrift(DriftModel(), L, np.random.default_rng(4))
    table = calibrate_all(CalibrationTable(L), drift, 0.0, np.random.default_rng(0), ideal=True)
    assert np.all(table.residuals == 0)


def test_drift_scales_with_delay():
    drift = PhaseDrift(DriftModel(sigma=0.0, rate=0.01), 128, np.random.default_rng(0), static=np.zeros(128))
    w = drift.advance(100.0)
    ph = drift.phase(np.array([64, 127]), w, 100.0)
    assert ph[0] == pytest.approx(0.01 * 100 * 64 / 128)
    assert ph[1] == pytest.approx(0.01 * 100 * 127 / 128)


def test_drift_time_monotone():
    drift = PhaseDrift(DriftModel(), 8, np.random.default_rng(0))
    drift.advance(5.0)
    with pytest.raises(DomainError):
        drift.advance(4.0)


def test_wrap_phase_range():
    x = wrap_phase(np.array([-1e-18, 2 * math.pi, -7.0, 13.0]))
    assert np.all((x >= 0) & (x < 2 * math.pi))
