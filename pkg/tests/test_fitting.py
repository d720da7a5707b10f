import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import least_squares

from nvwb.errors import DomainError, InitError, RankDeficiencyError, ValidationError
from nvwb.fitting import (
    Dataset,
    FitResult,
    auto_init,
    b_field_from_splitting,
    canonical,
    derive_pi_pulses,
    dominant_angular_frequency,
    fit,
    goodness,
    make_model,
)
from nvwb.fitting.lm import levenberg_marquardt, scaled_gradient
from nvwb.fitting.models import FitModel, revival_count, wrap_phase
from nvwb.workbench import PRESETS, preset_model

RABI = PRESETS["rabi"][0]


def rel_close(a, b, rel):
    return abs(a - b) <= rel * abs(b)


# ---- Jacobians -----------------------------------------------------------------

def typical(name, value):
    if name == "phi":
        return max(abs(value), 1.0)
    if name.startswith("C"):
        return max(abs(value), 1e-2)
    return abs(value)


def fd_jacobian(model, x):
    theta = model.theta
    names = model.definition().names
    J = np.empty((len(x), len(theta)))
    for k in range(len(theta)):
        h = 1e-6 * typical(names[k], theta[k])
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        fp = make_model(model.kind, tp, model.n_dips, model.revivals)(x)
        fm = make_model(model.kind, tm, model.n_dips, model.revivals)(x)
        J[:, k] = (fp - fm) / (2 * h)
    return J


def check_jacobian(model, x):
    J = model.jacobian(x)
    F = fd_jacobian(model, x)
    theta = model.theta
    names = model.definition().names
    amp = np.abs(model(x)).max()
    for k in range(J.shape[1]):
        # columns that barely matter are judged against a 1% parameter change
        scale = max(np.abs(F[:, k]).max(), 1e-2 * amp / typical(names[k], theta[k]))
        assert np.abs(J[:, k] - F[:, k]).max() <= 1e-6 * scale, model.definition().names[k]


unit = st.floats(0.5, 2.0)


@settings(max_examples=40)
@given(unit, unit, unit, st.floats(-3, 3), st.floats(-0.1, 0.1))
def test_jacobian_rabi_ramsey(a, b, c, phi, c1):
    x = np.linspace(0, 400e-9, 301)
    for kind, tau in (("rabi", "tau_R"), ("ramsey", "T2star")):
        m = FitModel(kind, {"C0": -0.04 * a, "omega": 28e6 * b, "phi": phi,
                            tau: 150e-9 * c, "C1": c1})
        check_jacobian(m, x)


@settings(max_examples=40)
@given(unit, unit, st.floats(0.3, 2.5), unit, unit)
def test_jacobian_hahn(a, b, p, c, d):
    x = np.linspace(0, 120e-6, 401)
    m = FitModel("hahn", {"C0": -0.014 * a, "T2": 21e-6 * b, "p": p, "tau_rev": 46.7e-6 * c,
                          "tau_w": 7.2e-6 * d, "C1": -0.02}).resolved(x)
    check_jacobian(m, x)


@settings(max_examples=40)
@given(unit, unit, unit, st.integers(1, 4))
def test_jacobian_t1_lorentzian(a, b, c, n):
    x = np.linspace(0, 15e-3, 200)
    check_jacobian(FitModel("t1_exp", {"C0": -0.015 * a, "T1": 5e-3 * b, "C1": -0.1 * c}), x)
    f = np.linspace(2.7e9, 3.05e9, 500)
    theta = []
    for k in range(n):
        theta += [-0.03 * a, 2.75e9 + 0.08e9 * k * b, 15e6 * c]
    theta.append(0.001)
    check_jacobian(make_model("lorentzian_multi", theta, n_dips=n), f)


# ---- exact recoveries ------------------------------------------------------------

def test_noiseless_rabi_recovery():
    truth = preset_model("rabi")
    x = np.linspace(0, 400e-9, 401)
    r = fit(Dataset(x, truth(x)), "rabi")
    assert r.converged
    got = canonical(r.model, -1.0).params
    for k, v in truth.params.items():
        if k == "phi":
            assert abs(math.remainder(got[k] - v, 2 * math.pi)) < 1e-6
        else:
            assert rel_close(got[k], v, 1e-6), k


@pytest.mark.parametrize("name", ["ramsey", "hahn", "t1_exp", "lorentzian_multi", "odmr4"])
def test_noiseless_recovery_other_models(name):
    truth = preset_model(name)
    lo, hi = PRESETS[name][1]
    x = np.linspace(lo, hi, 1501)
    r = fit(Dataset(x, truth(x)), truth.kind, n_dips=truth.n_dips)
    assert r.converged
    got = canonical(r.model, math.copysign(1, truth.params.get("C0", 1))).params
    for k, v in truth.params.items():
        if k == "phi":
            assert abs(math.remainder(got[k] - v, 2 * math.pi)) < 1e-6
        elif v == 0:
            assert abs(got[k]) < 1e-9
        else:
            assert rel_close(got[k], v, 1e-6), k


def test_constant_dataset_t1():
    x = np.linspace(0, 15e-3, 100)
    r = fit(Dataset(x, np.full_like(x, -0.05)), "t1_exp")
    assert r.converged
    assert abs(r.params["C0"]) < 1e-10
    assert r.params["C1"] == pytest.approx(-0.05, abs=1e-12)


def test_rabi_monte_carlo_converges():
    truth = preset_model("rabi")
    x = np.linspace(0, 400e-9, 401)
    ok = 0
    omegas = []
    for seed in range(20):
        y = truth(x) + np.random.default_rng(seed).normal(0, 0.005, len(x))
        r = fit(Dataset(x, y), "rabi")
        ok += r.converged
        omegas.append(r.params["omega"])
    assert ok >= 19
    assert rel_close(float(np.median(omegas)), RABI["omega"], 0.05)


# ---- initial guesses -------------------------------------------------------------

def test_auto_init_finds_four_dips():
    truth = preset_model("odmr4")
    f = np.linspace(2.70e9, 3.05e9, 1401)
    y = truth(f) + np.random.default_rng(1).normal(0, 0.002, len(f))
    m = auto_init(Dataset(f, y), "lorentzian_multi", n_dips=4)
    centers = sorted(v for k, v in m.params.items() if k.startswith("f"))
    for got, want in zip(centers, (2759.08e6, 2841.59e6, 2911.40e6, 2981.12e6)):
        assert abs(got - want) <= 3e6
    free = auto_init(Dataset(f, truth(f)), "lorentzian_multi")
    assert free.n_dips == 4


def test_dominant_frequency_pure_cosine():
    x = np.linspace(0, 1e-6, 500)
    w = 2 * math.pi * 7.3e6
    est = dominant_angular_frequency(x, np.cos(w * x))
    bin_w = 2 * math.pi / (x[-1] - x[0])
    assert abs(est - w) <= bin_w


def test_auto_init_errors():
    with pytest.raises(InitError):
        auto_init(Dataset(np.arange(5.0), np.zeros(5)), "rabi")
    with pytest.raises(InitError):
        auto_init(Dataset(np.arange(20.0), np.zeros(20)), "lorentzian_multi")


# ---- derived quantities ----------------------------------------------------------

def test_derive_pi_pulses():
    half, full = derive_pi_pulses(28.96e6)
    assert round(half * 1e9, 2) == 54.24 and round(full * 1e9, 2) == 108.48
    assert derive_pi_pulses(math.pi) == (0.5, 1.0)
    h2, f2 = derive_pi_pulses(2 * 28.96e6)
    assert h2 == half / 2 and f2 == full / 2
    with pytest.raises(DomainError):
        derive_pi_pulses(0.0)


@given(st.floats(1e-3, 1e12))
def test_pi_is_twice_pi_half(w):
    h, f = derive_pi_pulses(w)
    assert f == 2 * h


def test_b_field():
    assert b_field_from_splitting(2759.08e6, 2981.12e6) == pytest.approx(39.65, abs=0.01)
    assert b_field_from_splitting(2.87e9, 2.87e9) == 0.0
    assert b_field_from_splitting(2.87e9, 2.87e9 + 5.6e6) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(DomainError):
        b_field_from_splitting(2.9e9, 2.8e9)


def test_goodness():
    m = preset_model("hahn")
    x = np.linspace(0, 120e-6, 500)
    assert goodness(Dataset(x, m(x)), m)["rms"] < 1e-12
    eps = 1e-3
    g = goodness(Dataset(x, m(x) + eps), m)
    assert g["rms"] == pytest.approx(eps, rel=1e-9)
    g = goodness(Dataset(x, m(x), sigma=np.full_like(x, 0.01)), m)
    assert g["reduced_chi2"] == 0.0


# ---- independent optimizer cross-check ----------------------------------------------

@pytest.mark.parametrize("name,n", [("rabi", 400), ("ramsey", 400), ("t1_exp", 300),
                                    ("hahn", 1500), ("lorentzian_multi", 400)])
def test_matches_scipy_least_squares(name, n):
    truth = preset_model(name)
    lo, hi = PRESETS[name][1]
    x = np.linspace(lo, hi, n)
    amp = abs(next(v for k, v in truth.params.items() if k.startswith("C")))
    y = truth(x) + np.random.default_rng(7).normal(0, 0.1 * amp, n)
    ours = fit(Dataset(x, y), truth.kind)
    start = auto_init(Dataset(x, y), truth.kind).resolved(x)
    d = start.definition()
    ref = least_squares(lambda th: d.func(x, th) - y, start.theta,
                        jac=lambda th: d.jac(x, th), x_scale="jac", method="lm",
                        xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=20000)
    cost_ref = float(ref.fun @ ref.fun)
    assert ours.residual_norm ** 2 <= cost_ref * (1 + 1e-8)
    if cost_ref <= ours.residual_norm ** 2 * (1 + 1e-6):
        theirs = canonical(FitModel(truth.kind, dict(zip(d.names, ref.x)), 1, start.revivals),
                           math.copysign(1, ours.params.get("C0", 1)))
        for k, v in ours.params.items():
            if k == "phi":
                assert abs(math.remainder(theirs.params[k] - v, 2 * math.pi)) < 1e-4
            else:
                assert abs(theirs.params[k] - v) <= 1e-4 * max(abs(v), amp), k


# ---- equivariance -----------------------------------------------------------------------

def noisy_odmr(shift=0.0, scale=1.0, seed=3):
    truth = preset_model("lorentzian_multi")
    f = np.linspace(2.80e9, 2.94e9, 701)
    y = truth(f) + np.random.default_rng(seed).normal(0, 0.01, len(f))
    return Dataset(f + shift, scale * y)


def test_shift_equivariance():
    base = fit(noisy_odmr(), "lorentzian_multi")
    moved = fit(noisy_odmr(shift=12.5e6), "lorentzian_multi")
    assert moved.params["f1"] - base.params["f1"] == pytest.approx(12.5e6, abs=1e3)
    for k in ("C1", "gamma1", "C_off"):
        assert moved.params[k] == pytest.approx(base.params[k], rel=1e-5, abs=1e-9)


@pytest.mark.parametrize("s", [0.5, 3.0])
def test_scale_equivariance(s):
    base = fit(noisy_odmr(), "lorentzian_multi")
    scaled = fit(noisy_odmr(scale=s), "lorentzian_multi")
    for k in ("C1", "C_off"):
        assert scaled.params[k] == pytest.approx(s * base.params[k], rel=1e-5, abs=1e-9)
    for k in ("f1", "gamma1"):
        assert scaled.params[k] == pytest.approx(base.params[k], rel=1e-7)


def test_scale_equivariance_rabi():
    truth = preset_model("rabi")
    x = np.linspace(0, 400e-9, 401)
    y = truth(x) + np.random.default_rng(0).normal(0, 0.004, len(x))
    a = canonical(fit(Dataset(x, y), "rabi").model, -1.0)
    b = canonical(fit(Dataset(x, 4 * y), "rabi").model, -1.0)
    for k in ("C0", "C1"):
        assert b.params[k] == pytest.approx(4 * a.params[k], rel=1e-5)
    for k in ("omega", "tau_R"):
        assert b.params[k] == pytest.approx(a.params[k], rel=1e-6)


# ---- LM engine, containers and helpers ---------------------------------------------------

def test_lm_on_linear_problem():
    A = np.random.default_rng(0).normal(size=(30, 3))
    b = A @ np.array([1.0, -2.0, 0.5]) + 0.01 * np.random.default_rng(1).normal(size=30)
    res = levenberg_marquardt(lambda u: A @ u - b, lambda u: A, np.zeros(3))
    want = np.linalg.lstsq(A, b, rcond=None)[0]
    assert res.converged
    np.testing.assert_allclose(res.u, want, rtol=1e-9)
    assert scaled_gradient(A, A @ res.u - b) < 1e-9


def test_rank_deficiency_raised():
    x = np.linspace(0, 1, 50)
    with pytest.raises(RankDeficiencyError):
        fit(Dataset(x, np.sin(x)), "t1_exp", theta0={"C0": 0.0, "T1": 1.0, "C1": 0.0})


def test_dataset_validation_and_csv():
    with pytest.raises(ValidationError):
        Dataset([0, 0, 1], [1, 2, 3])
    with pytest.raises(ValidationError):
        Dataset([0, 1], [1, np.nan])
    with pytest.raises(ValidationError):
        Dataset([0, 1], [1, 2], sigma=[1, 0])
    d = Dataset([0.1, 0.2, 0.30000000000000004], [1 / 3, 2 / 3, 1e-300], sigma=[1, 2, 3],
                units="s")
    back = Dataset.from_csv(d.to_csv())
    np.testing.assert_array_equal(back.x, d.x)
    np.testing.assert_array_equal(back.y, d.y)
    np.testing.assert_array_equal(back.sigma, d.sigma)
    assert back.units == "s"


def test_fit_result_json_round_trip():
    m = preset_model("hahn")
    x = np.linspace(0, 120e-6, 300)
    r = fit(Dataset(x, m(x)), "hahn")
    back = FitResult.from_json(r.to_json())
    assert back.model == r.model
    assert back.rms == r.rms and back.converged == r.converged
    doc = json.loads(r.to_json())
    assert set(doc) >= {"model", "theta", "rms", "converged", "iterations"}


def test_weighted_fit_uses_sigma():
    truth = preset_model("t1_exp")
    x = np.linspace(0, 15e-3, 200)
    y = truth(x) + np.random.default_rng(2).normal(0, 1e-3, len(x))
    r = fit(Dataset(x, y, sigma=np.full_like(x, 1e-3)), "t1_exp")
    assert r.converged
    assert r.stderr["T1"] > 0
    assert goodness(Dataset(x, y, sigma=np.full_like(x, 1e-3)), r.model)["reduced_chi2"] < 1.5


def test_model_validation_and_helpers():
    with pytest.raises(ValidationError):
        FitModel("rabi", {"C0": 1.0})
    with pytest.raises(ValidationError):
        FitModel("t1_exp", {"C0": 1.0, "T1": -1.0, "C1": 0.0})
    with pytest.raises(ValidationError):
        FitModel("hahn", {"C0": 1, "T2": 1, "p": 3.5, "tau_rev": 1, "tau_w": 1, "C1": 0})
    with pytest.raises(ValidationError):
        make_model("nope", [1.0])
    assert wrap_phase(-math.pi) == math.pi
    assert wrap_phase(-8.62) == pytest.approx(-8.62 + 2 * math.pi)
    assert revival_count(120e-6, 46.7e-6) == 3
    m = canonical(preset_model("rabi"), 1.0)
    assert m.params["C0"] > 0
    x = np.linspace(0, 4e-7, 50)
    np.testing.assert_allclose(m(x), preset_model("rabi")(x), atol=1e-15)
