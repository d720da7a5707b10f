import numpy as np
import pytest
from scipy.integrate import quad

from nvwb.errors import FitError, OutOfRangeError, ValidationError, ZeroReferenceError
from nvwb.kinetics import (
    RateTable,
    Trajectory,
    build_rate_matrix,
    gamma_sl_from_t1,
    pl_rate,
    propagate,
    steady_state,
)
from nvwb.readout import (
    ContrastCurve,
    Phase,
    PhaseProtocol,
    contrast_curve,
    contrast_decay_time,
    integrated_pl,
    multiscale_windows,
    phase_grid,
    relaxometry_prediction,
    run_protocol,
)

STRONG = 10e6
WEAK = 5e3


@pytest.fixture(scope="module")
def strong_run():
    table = RateTable.default(eta=STRONG)
    proto = PhaseProtocol.default(STRONG)
    return table, run_protocol(table, proto, extra_times={0: np.linspace(1e-9, 2e-6, 4000),
                                                          2: np.linspace(1e-9, 2e-6, 4000)})


def test_default_protocol_shape():
    p = PhaseProtocol.default(WEAK)
    assert [(ph.label, ph.duration, ph.eta) for ph in p.phases] == [
        ("init", 3.2e-3, WEAK), ("wait", 1e-6, 0.0), ("readout", 3.2e-3, WEAK)]
    assert p.with_wait(2e-3).phases[1].duration == 2e-3
    with pytest.raises(ValidationError):
        Phase("x", 0.0, 1.0)
    with pytest.raises(ValidationError):
        Phase("x", 1.0, -1.0)
    with pytest.raises(ValidationError):
        PhaseProtocol(())


def test_phase_grid_contains_extra_and_endpoints():
    g = phase_grid(1e-3, 200, extra=[3.3e-4, 2e-3])
    assert g[0] == 0.0 and g[-1] == 1e-3
    assert 3.3e-4 in g and 2e-3 not in g
    assert np.all(np.diff(g) > 0)


def test_strong_pump_pl_landmarks(strong_run):
    table, (init, _, readout) = strong_run
    r_pl = pl_rate(readout.states, table)
    k = int(np.argmax(r_pl))
    assert r_pl[k] == pytest.approx(7.12e6, rel=0.05)
    assert readout.times[k] == pytest.approx(46e-9, rel=0.25)

    i_pl = pl_rate(init.states, table)
    mask = (init.times > 50e-9) & (init.times < 1e-6)
    j = np.flatnonzero(mask)[np.argmin(i_pl[mask])]
    assert i_pl[j] == pytest.approx(4.93e6, rel=0.05)
    assert init.times[j] == pytest.approx(220e-9, rel=0.25)
    assert i_pl[-1] == pytest.approx(6.18e6, rel=0.05)


def test_no_pump_relaxes_and_is_dark():
    table = RateTable.default()
    proto = PhaseProtocol((Phase("a", 1e-2, 0.0), Phase("b", 1e-2, 0.0)))
    p0 = [0.9, 0.05, 0.05, 0, 0, 0, 0, 0]
    trajs = run_protocol(table, proto, p0)
    for t in trajs:
        assert np.all(pl_rate(t.states, table) == 0)
    assert np.all(np.diff(trajs[0].states[:, 0]) <= 1e-15)
    assert abs(trajs[1].final[0] - 1 / 3) < abs(trajs[0].final[0] - 1 / 3)


def test_integrated_pl_zero_and_constant():
    table = RateTable.default()
    p = [0, 0, 0, 1, 0, 0, 0, 0]
    traj = Trajectory([0.0, 1e-6, 2e-6], [p, p, p])
    assert integrated_pl(traj, table, 0.0) == 0.0
    w = 1.37e-6
    assert integrated_pl(traj, table, w) == pytest.approx(0.075e9 * w, rel=1e-9)
    with pytest.raises(OutOfRangeError):
        integrated_pl(traj, table, 3e-6)


def test_integrated_pl_against_quadrature(strong_run):
    table, (_, _, readout) = strong_run
    M = build_rate_matrix(table)
    p0 = readout.states[0]

    def rate(t):
        return pl_rate(propagate(M, p0, [0.0, t]).final, table) if t > 0 else pl_rate(p0, table)

    w = 2e-6
    want = quad(rate, 0, 0.25e-6, limit=200)[0] + quad(rate, 0.25e-6, w, limit=200)[0]
    assert integrated_pl(readout, table, w) == pytest.approx(want, rel=0.02)


def test_contrast_strong_and_weak_points():
    strong = contrast_curve(RateTable.default(eta=STRONG), PhaseProtocol.default(STRONG), [0.25e-6])
    assert strong.contrast[0] == pytest.approx(-0.224, abs=0.015)
    weak = contrast_curve(RateTable.default(eta=WEAK), PhaseProtocol.default(WEAK), [500e-6])
    assert weak.contrast[0] == pytest.approx(-0.12, abs=0.015)


def test_contrast_zero_when_states_match():
    table = RateTable.default(eta=STRONG)
    ss = steady_state(build_rate_matrix(table))
    proto = PhaseProtocol((Phase("init", 1e-6, STRONG), Phase("readout", 1e-6, STRONG)))
    c = contrast_curve(table, proto, [1e-8, 1e-7, 5e-7], p0=ss)
    assert np.max(np.abs(c.contrast)) < 1e-12


def test_contrast_errors():
    table = RateTable.default()
    with pytest.raises(ZeroReferenceError):
        contrast_curve(table, PhaseProtocol.default(0.0, init=1e-6, readout=1e-6), [1e-7])
    with pytest.raises(OutOfRangeError):
        contrast_curve(table.with_eta(1e6), PhaseProtocol.default(1e6, init=1e-6, readout=1e-6),
                       [2e-6])
    with pytest.raises(OutOfRangeError):
        contrast_curve(table.with_eta(1e6), PhaseProtocol.default(1e6), [0.0])


@pytest.mark.parametrize("eta,w_max", [(1e3, 3.2e-3), (5e3, 3.2e-3), (1e5, 1e-3),
                                       (1e6, 1e-4), (10e6, 5e-6)])
def test_contrast_sign_and_unimodal(eta, w_max):
    w = multiscale_windows(w_max, 300, w_min=10e-9)
    c = contrast_curve(RateTable.default(eta=eta), PhaseProtocol.default(eta), w).contrast
    assert np.all(c <= 0)
    a = np.abs(c)
    k = int(np.argmax(a))
    tol = 1e-12
    assert np.all(np.diff(a[:k + 1]) >= -tol)
    assert np.all(np.diff(a[k:]) <= tol)


def test_contrast_positive_below_few_nanoseconds():
    # k52 > k41: ms=+-1 emits slightly faster at first, so the very first
    # nanoseconds favour the thermal (signal) phase
    c = contrast_curve(RateTable.default(eta=STRONG), PhaseProtocol.default(STRONG), [1e-9]).contrast
    assert c[0] > 0


@pytest.mark.parametrize("eta,windows", [(STRONG, [0.05e-6, 0.25e-6, 1e-6, 3e-6]),
                                         (WEAK, [5e-6, 100e-6, 500e-6, 2e-3])])
def test_contrast_grid_independence(eta, windows):
    table = RateTable.default(eta=eta)
    a = contrast_curve(table, PhaseProtocol.default(eta, sample_count=1000), windows).contrast
    b = contrast_curve(table, PhaseProtocol.default(eta, sample_count=2000), windows).contrast
    assert np.max(np.abs(a - b)) < 1e-4


def test_extremum_separation_of_scales():
    s = contrast_curve(RateTable.default(eta=STRONG), PhaseProtocol.default(STRONG),
                       multiscale_windows(5e-6, 300, 1e-9))
    w = contrast_curve(RateTable.default(eta=WEAK), PhaseProtocol.default(WEAK),
                       multiscale_windows(3.2e-3, 300, 1e-9))
    ratio = w.integration_times[w.extremum_index()] / s.integration_times[s.extremum_index()]
    # about 5 us against about 0.25 us: a factor of 20, within a factor of two
    assert 10 <= ratio <= 40


def test_decay_time_exact_model():
    w = np.linspace(1e-6, 50e-6, 200)
    curve = ContrastCurve(w, -(0.2 * np.exp(-w / 7.5e-6) + 0.01))
    assert contrast_decay_time(curve) == pytest.approx(7.5e-6, rel=1e-6)


def test_decay_time_rejects_growing_tail():
    w = np.linspace(1e-6, 10e-6, 20)
    c = -np.concatenate([np.linspace(0.1, 0.05, 10), np.linspace(0.05, 0.09, 10)])
    c[0] = -0.2
    with pytest.raises(FitError):
        contrast_decay_time(ContrastCurve(w, c))


def test_decay_time_operating_points():
    s = contrast_curve(RateTable.default(eta=STRONG), PhaseProtocol.default(STRONG),
                       multiscale_windows(5e-6))
    assert contrast_decay_time(s) == pytest.approx(1.26e-6, rel=0.1)
    w = contrast_curve(RateTable.default(eta=WEAK), PhaseProtocol.default(WEAK),
                       multiscale_windows(3.2e-3))
    assert contrast_decay_time(w) == pytest.approx(1.12e-3, rel=0.1)


def test_contrast_curve_io_round_trip():
    c = contrast_curve(RateTable.default(eta=STRONG), PhaseProtocol.default(STRONG),
                       multiscale_windows(2e-6, 50))
    back = ContrastCurve.from_csv(c.to_csv())
    np.testing.assert_array_equal(back.integration_times, c.integration_times)
    np.testing.assert_array_equal(back.contrast, c.contrast)
    import json
    doc = json.loads(c.to_json(1.3e-6))
    assert doc["contrast"] == c.contrast.tolist()
    assert doc["extremum"]["c"] == c.contrast[c.extremum_index()]


def test_relaxometry_field_operating_point():
    eta = 34e3
    table = RateTable.default(eta=eta, gamma_sl=gamma_sl_from_t1(3.24e-3))
    c = relaxometry_prediction(table, PhaseProtocol.default(eta), 0.0, 250e-6)
    assert c == pytest.approx(-0.0728, abs=0.01)


def test_relaxometry_thermalized_limit():
    table = RateTable.default(eta=WEAK)
    t1 = 1 / (3 * 65.0)
    c = relaxometry_prediction(table, PhaseProtocol.default(WEAK), 100 * t1, 500e-6)
    assert abs(c) < 1e-3


def test_relaxometry_delay_fit_recovers_t1():
    from nvwb.fitting import Dataset, fit
    table = RateTable.default(eta=WEAK)
    proto = PhaseProtocol.default(WEAK, init=5e-3, readout=5e-3)
    delays = np.linspace(0.0, 30e-3, 31)
    c = [relaxometry_prediction(table, proto, d, 500e-6) for d in delays]
    r = fit(Dataset(delays, c), "t1_exp")
    assert r.params["T1"] == pytest.approx(1 / (3 * 65.0), rel=0.1)
    with pytest.raises(ValidationError):
        relaxometry_prediction(table, proto, -1.0, 500e-6)
