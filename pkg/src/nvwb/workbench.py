"""Synthetic experiments, fluorescence-image ROI analysis and simulate -> fit pipelines."""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import keyvalue
from .errors import ConfigError, DegenerateImageError, OutOfRangeError, ValidationError
from .fitting import Dataset, FitModel, FitResult, canonical, fit
from .fitting.design import points_for_precision, tolerance_for
from .fitting.models import model_def
from .kinetics import RateTable, as_state, build_rate_matrix, propagate, thermal_state
from .readout import PhaseProtocol, contrast_curve, integrated_pl
from .sequences import ProtocolSpec

SEED_ENV = "NVWB_SEED"

# sequence protocol -> fit model
MODEL_FOR_PROTOCOL = {
    "odmr": "lorentzian_multi",
    "rabi": "rabi",
    "ramsey": "ramsey",
    "hahn": "hahn",
    "t1": "t1_exp",
}

# Fitted parameters of the measured curves (x in s, or Hz for ODMR) and the
# sweep range each was measured over.
PRESETS = {
    "rabi": ({"C0": -0.0377, "omega": 28.96e6, "phi": -3.1, "tau_R": 138.68e-9, "C1": -0.028},
             (0.0, 400e-9)),
    "ramsey": ({"C0": 3.17e-3, "omega": 14.5e6, "phi": -8.62, "T2star": 549e-9, "C1": -0.0084},
               (0.0, 2e-6)),
    "hahn": ({"C0": -0.014, "T2": 21e-6, "p": 0.61, "tau_rev": 46.7e-6, "tau_w": 7.2e-6,
              "C1": -0.0214},
             (0.0, 120e-6)),
    "t1_exp": ({"C0": -0.015, "T1": 5.2e-3, "C1": -0.122}, (0.0, 15e-3)),
    "lorentzian_multi": ({"C1": -0.136, "f1": 2869.8e6, "gamma1": 17.7e6, "C_off": 0.0},
                         (2.80e9, 2.94e9)),
    "odmr4": ({"C1": -0.0211, "f1": 2759.08e6, "gamma1": 15.48e6,
               "C2": -0.0438, "f2": 2841.59e6, "gamma2": 17.41e6,
               "C3": -0.0427, "f3": 2911.40e6, "gamma3": 15.48e6,
               "C4": -0.0212, "f4": 2981.12e6, "gamma4": 14.04e6,
               "C_off": 0.0},
              (2.70e9, 3.05e9)),
}


def preset_model(name: str) -> FitModel:
    params, _ = PRESETS[name]
    if name == "odmr4":
        return FitModel("lorentzian_multi", params, n_dips=4)
    return FitModel(name, params)


def seed_from_env(seed: int) -> int:
    """``NVWB_SEED`` wins over a configured seed when set."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or not raw.strip():
        return seed
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# ---- fluorescence images -----------------------------------------------------

@dataclass(frozen=True)
class FluorescenceImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=float)
        if px.ndim != 2 or px.size == 0:
            raise ValidationError("image must be a non-empty 2-D grid")
        if not np.all(np.isfinite(px)) or np.any(px < 0):
            raise ValidationError("pixels must be finite and >= 0")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def roi_mask(img: FluorescenceImage, threshold_fraction: float = 0.85) -> tuple[np.ndarray, float]:
    """Pixels at or above ``threshold_fraction`` of the brightest one, and their mean."""
    if not 0 < threshold_fraction <= 1:
        raise OutOfRangeError(f"threshold_fraction must lie in (0, 1], got {threshold_fraction}")
    px = img.pixels
    peak = px.max()
    if peak == 0:
        raise DegenerateImageError("image is all zero")
    mask = px >= threshold_fraction * peak
    # row-major running sum, so the mean is reproducible by a plain loop
    vals = px[mask]
    return mask, float(np.add.accumulate(vals)[-1] / len(vals))


def gaussian_spot(width: int, height: int, sigma: float, peak: float = 1000.0,
                  background: float = 0.0, center=None) -> FluorescenceImage:
    cy, cx = ((height - 1) / 2, (width - 1) / 2) if center is None else center
    y, x = np.mgrid[0:height, 0:width]
    r2 = (x - cx) ** 2 + (y - cy) ** 2
    return FluorescenceImage(background + peak * np.exp(-r2 / (2 * sigma ** 2)))


def write_pgm(img: FluorescenceImage) -> str:
    """Plain (P2) graymap; pixels must be integers in [0, 65535]."""
    px = img.pixels
    if np.any(px != np.round(px)) or px.max() > 65535:
        raise ValidationError("PGM needs integer pixels <= 65535; use the CSV grid instead")
    maxval = max(int(px.max()), 1)
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in px)
    return f"P2\n{img.width} {img.height}\n{maxval}\n{rows}\n"


def read_pgm(text: str) -> FluorescenceImage:
    tokens = []
    for line in text.splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise ValidationError("not a plain PGM (P2) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
        values = np.array([int(t) for t in tokens[4:]], dtype=float)
    except ValueError:
        raise ValidationError("malformed PGM header or pixel data") from None
    if len(values) != w * h:
        raise ValidationError(f"PGM declares {w}x{h} pixels but holds {len(values)}")
    if np.any(values > maxval):
        raise ValidationError("PGM pixel exceeds maxval")
    return FluorescenceImage(values.reshape(h, w))


def write_csv_grid(img: FluorescenceImage) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in img.pixels)


def read_csv_grid(text: str) -> FluorescenceImage:
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        data = [[float(v) for v in ln.split(",")] for ln in rows]
    except ValueError:
        raise ValidationError("CSV grid holds a non-numeric entry") from None
    if not data or len({len(r) for r in data}) != 1:
        raise ValidationError("CSV grid rows must be non-empty and equally long")
    return FluorescenceImage(np.array(data))


def load_image(path) -> FluorescenceImage:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".pgm" or text.lstrip().startswith("P2"):
        return read_pgm(text)
    return read_csv_grid(text)


# ---- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Ground-truth model, sweep grid and seeded Gaussian noise on the contrast."""

    kind: str
    params: dict
    x_start: float
    x_stop: float
    n_points: int = 201
    noise_sigma: float = 0.0
    seed: int = 0
    n_dips: int = 1
    protocol: str | None = None     # protocol spec the sweep stands for, kept for provenance

    def __post_init__(self):
        if not self.noise_sigma >= 0:
            raise ValidationError("noise_sigma must be >= 0")
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ValidationError("n_points must be an integer >= 2")
        if not self.x_stop > self.x_start:
            raise ValidationError("x_stop must exceed x_start")
        object.__setattr__(self, "n_points", int(self.n_points))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "params", dict(self.model().params))

    def model(self) -> FitModel:
        return FitModel(self.kind, self.params, self.n_dips)

    def grid(self) -> np.ndarray:
        return np.linspace(self.x_start, self.x_stop, self.n_points)

    @classmethod
    def preset(cls, name: str, noise_fraction: float = 0.2, seed: int = 0,
              n_points: int | None = None) -> "SyntheticConfig":
        """Preset parameters with noise ``noise_fraction * |amplitude|``.

        Without ``n_points`` the grid is sized so every parameter's 10%
        tolerance sits at 2.5 standard deviations of the Cramer-Rao bound.
        """
        model = preset_model(name)
        _, (a, b) = PRESETS[name]
        amp = abs(next(v for k, v in model.params.items() if k.startswith("C")))
        sigma = noise_fraction * amp
        if n_points is None:
            n_points = points_for_precision(model, (a, b), sigma) if sigma > 0 else 201
        return cls(model.kind, model.params, a, b, n_points, sigma, seed, model.n_dips)

    def to_text(self) -> str:
        items = [("kind", self.kind), ("x_start", float(self.x_start)),
                 ("x_stop", float(self.x_stop)), ("n_points", self.n_points),
                 ("noise_sigma", float(self.noise_sigma)), ("seed", self.seed),
                 ("n_dips", self.n_dips)]
        if self.protocol is not None:
            items.append(("protocol", self.protocol))
        items += [(f"theta.{k}", v) for k, v in self.params.items()]
        return keyvalue.dump(items)

    @classmethod
    def from_mapping(cls, kv: dict) -> "SyntheticConfig":
        conv = {"kind": str, "x_start": float, "x_stop": float, "n_points": int,
                "noise_sigma": float, "seed": int, "n_dips": int, "protocol": str}
        kwargs, params = {}, {}
        for key, value in kv.items():
            if key.startswith("theta."):
                params[key[6:]] = keyvalue.to_float(key, value)
            elif key in conv:
                try:
                    kwargs[key] = conv[key](value)
                except ValueError:
                    raise ConfigError(f"{key}: bad value {value!r}") from None
            else:
                raise ConfigError(f"unknown synth key {key!r}")
        for need in ("kind", "x_start", "x_stop"):
            if need not in kwargs:
                raise ConfigError(f"synth config needs {need!r}")
        return cls(params=params, **kwargs)

    @classmethod
    def from_text(cls, text: str) -> "SyntheticConfig":
        return cls.from_mapping(keyvalue.parse(text))


def synthesize(config: SyntheticConfig) -> Dataset:
    x = config.grid()
    y = config.model()(x)
    if config.noise_sigma > 0:
        rng = np.random.default_rng(config.seed)
        y = y + rng.normal(0.0, config.noise_sigma, len(x))
    units = "Hz" if config.kind == "lorentzian_multi" else "s"
    return Dataset(x, y, units=units)


# ---- round trips -------------------------------------------------------------

@dataclass(frozen=True)
class RecoveryCheck:
    ok: bool
    converged: bool
    errors: dict        # parameter -> |estimate - truth| (phase: wrapped distance)
    fitted: FitResult


def check_recovery(truth: FitModel, result: FitResult, rel_tol: float = 0.1,
                   phase_tol: float = 0.3) -> RecoveryCheck:
    """Compare a fit against the truth, aligning the (C0, phi) sign branch first."""
    amp_name = next(k for k in truth.params if k.startswith("C"))
    amp = truth.params[amp_name]
    est = result.model
    if truth.kind in ("rabi", "ramsey"):
        est = canonical(est, math.copysign(1.0, amp))
    errors, ok = {}, result.converged
    for k, v in truth.params.items():
        e = est.params[k]
        d = abs(math.remainder(e - v, 2 * math.pi)) if k == "phi" else abs(e - v)
        errors[k] = d
        ok = ok and d <= tolerance_for(k, v, amp, rel_tol, phase_tol)
    return RecoveryCheck(bool(ok), result.converged, errors, result)


@dataclass(frozen=True)
class RoundTripReport:
    name: str
    n_points: int
    noise_sigma: float
    seeds: tuple
    successes: tuple

    @property
    def success_rate(self) -> float:
        return sum(self.successes) / len(self.successes)


def round_trip_study(name: str, seeds=range(50), noise_fraction: float = 0.2,
                     n_points: int | None = None, rel_tol: float = 0.1,
                     phase_tol: float = 0.3) -> RoundTripReport:
    """Synthesize at the preset parameters for every seed, fit, and tally recoveries."""
    seeds = tuple(int(s) for s in seeds)
    base = SyntheticConfig.preset(name, noise_fraction, 0, n_points)
    truth = base.model()
    outcomes = []
    for s in seeds:
        cfg = SyntheticConfig(base.kind, base.params, base.x_start, base.x_stop, base.n_points,
                              base.noise_sigma, s, base.n_dips)
        result = fit(synthesize(cfg), cfg.kind, n_dips=cfg.n_dips)
        outcomes.append(check_recovery(truth, result, rel_tol, phase_tol).ok)
    return RoundTripReport(name, base.n_points, base.noise_sigma, seeds, tuple(outcomes))


# ---- relaxometry -------------------------------------------------------------

def relaxometry_sweep(table: RateTable, protocol: PhaseProtocol, delays, window: float,
                      p0=None) -> np.ndarray:
    """Contrast versus extra dark delay, one value per entry of ``delays``.

    Matches :func:`relaxometry_prediction` point by point but runs the
    initialization phase once; only the later phases depend on the delay.
    """
    delays = np.asarray(delays, dtype=float)
    if delays.ndim != 1 or np.any(~(delays >= 0)):
        raise ValidationError("delays must be a vector of values >= 0")
    init, readout = protocol.init, protocol.readout
    if init.eta != readout.eta:
        raise ValidationError("init and readout phases must share the pump rate")
    if not 0 < window <= min(init.duration, readout.duration):
        raise OutOfRangeError(f"window {window} outside (0, phase duration]")
    state = thermal_state() if p0 is None else as_state(p0)
    first = propagate(build_rate_matrix(table.with_eta(init.eta)), state,
                      protocol.grid(init.duration, [window]))
    S = integrated_pl(first, table, window)
    base = next((p.duration for p in protocol.phases[1:-1] if p.eta == 0), None)
    if base is None:
        raise ValidationError("protocol has no dark wait phase")
    out = np.empty(len(delays))
    for n, d in enumerate(delays):
        proto = protocol.with_wait(base + d)
        s = first.final
        for ph in proto.phases[1:-1]:
            M = build_rate_matrix(table.with_eta(ph.eta))
            s = propagate(M, s, [0.0, ph.duration]).final
        last = propagate(build_rate_matrix(table.with_eta(readout.eta)), s,
                         proto.grid(readout.duration, [window]))
        R = integrated_pl(last, table, window)
        out[n] = (S - R) / R
    return out


# ---- pipelines ---------------------------------------------------------------

@dataclass(frozen=True)
class PipelineReport:
    kind: str
    seed: int
    config: dict
    fit: FitResult
    values: dict = field(default_factory=dict)
    data: Dataset | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config,
            "fit": {"model": self.fit.kind, "theta": self.fit.params, "rms": self.fit.rms,
                    "converged": self.fit.converged, "iterations": self.fit.iterations},
            "values": self.values,
        }


def pipeline_protocol(spec: ProtocolSpec, eta: float, window: float) -> PhaseProtocol:
    """Rate-model protocol for a pulse spec: init laser, one guard dark, readout.

    The readout phase lasts as long as the initialization pulse but never less
    than the integration window.
    """
    init = spec.init_laser * 1e-9
    return PhaseProtocol.default(eta, init=init, wait=max(spec.guard, 1) * 1e-9,
                                 readout=max(init, window))


def pipeline_run(spec: ProtocolSpec, table: RateTable, kind: str | None = None,
                 window: float = 5e-4, noise_sigma: float = 0.0, seed: int = 0,
                 theta: dict | None = None) -> PipelineReport:
    """End-to-end check for one protocol.

    ``t1``: predicts the contrast for every delay of the sweep (ns) from the
    rate model, fits ``t1_exp`` and compares the fitted T1 with 1/(3 gamma_sl)
    and the zero-delay contrast with the contrast curve at ``window``.
    Other protocols: synthesize the model on the sweep at ``theta`` (preset
    values by default), fit it back and report the per-parameter errors.
    """
    model_kind = MODEL_FOR_PROTOCOL[spec.kind]
    if kind is not None and kind != model_kind:
        raise ValidationError(f"protocol {spec.kind!r} is fitted with {model_kind!r}, not {kind!r}")
    rng = np.random.default_rng(seed)
    config = {"protocol": spec.to_text(), "window_s": window, "noise_sigma": noise_sigma,
              "rates": table.to_text()}
    if spec.kind == "t1":
        x = np.array(spec.sweep) * 1e-9
        protocol = pipeline_protocol(spec, table.eta, window)
        c = relaxometry_sweep(table, protocol, x, window)
        y = c + (rng.normal(0.0, noise_sigma, len(x)) if noise_sigma > 0 else 0.0)
        data = Dataset(x, y, units="s")
        result = fit(data, "t1_exp")
        gamma = table.k(1, 2)
        expected = 1.0 / (3.0 * gamma) if gamma > 0 else math.inf
        reference = float(contrast_curve(table, protocol, [window]).contrast[0])
        values = {
            "T1_fit_s": result.params["T1"],
            "T1_expected_s": expected,
            "T1_rel_error": abs(result.params["T1"] - expected) / expected,
            "max_abs_contrast": float(np.max(np.abs(c))),
            "contrast_curve_at_window": reference,
        }
        return PipelineReport(spec.kind, seed, config, result, values, data)

    if theta is None:
        name = model_kind
        theta = PRESETS[name][0]
    n_dips = sum(1 for k in theta if k.startswith("f")) if model_kind == "lorentzian_multi" else 1
    truth = FitModel(model_kind, theta, n_dips)
    x = np.array(spec.sweep) * (1.0 if spec.kind == "odmr" else 1e-9)
    y = truth(x)
    if noise_sigma > 0:
        y = y + rng.normal(0.0, noise_sigma, len(x))
    data = Dataset(x, y, units="Hz" if spec.kind == "odmr" else "s")
    if len(x) <= len(model_def(model_kind, n_dips).names):
        raise ValidationError("sweep has too few points for the fit")
    result = fit(data, model_kind, n_dips=n_dips)
    check = check_recovery(truth, result)
    values = {"recovered": check.ok}
    for k, v in truth.params.items():
        values[f"{k}_true"] = v
        values[f"{k}_fit"] = check.fitted.params[k] if k != "phi" else \
            canonical(result.model, math.copysign(1.0, truth.params["C0"])).params[k]
        values[f"{k}_abs_error"] = check.errors[k]
    return PipelineReport(spec.kind, seed, config, result, values, data)


def report_csv(rows, header) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(repr(float(v)) if not isinstance(v, str) else v for v in row) + "\n")
    return buf.getvalue()
