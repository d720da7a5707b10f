"""Three-phase init -> wait -> readout simulation and fluorescence contrast.

The signal is the fluorescence collected during the first (initialization)
phase, which starts from the thermal ground state; the reference is the last
(readout) phase, which starts from the optically polarized state left after
the wait. Contrast for an integration window ``w`` is ``(S(w) - R(w)) / R(w)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FitError, OutOfRangeError, ValidationError, ZeroReferenceError
from .kinetics import (
    RateTable,
    Trajectory,
    as_state,
    build_rate_matrix,
    pl_rate,
    propagate,
    thermal_state,
)

MIN_SAMPLES = 100


@dataclass(frozen=True)
class Phase:
    label: str
    duration: float
    eta: float

    def __post_init__(self):
        if not self.duration > 0:
            raise ValidationError(f"phase {self.label!r}: duration must be > 0")
        if not self.eta >= 0:
            raise ValidationError(f"phase {self.label!r}: eta must be >= 0")


@dataclass(frozen=True)
class PhaseProtocol:
    phases: tuple[Phase, ...]
    sample_count: int = 2000
    # first sample after t=0 on each phase grid
    t_min: float = 1e-11

    def __post_init__(self):
        phases = tuple(p if isinstance(p, Phase) else Phase(*p) for p in self.phases)
        if not phases:
            raise ValidationError("protocol needs at least one phase")
        if self.sample_count < MIN_SAMPLES:
            raise ValidationError(f"sample_count must be >= {MIN_SAMPLES}")
        object.__setattr__(self, "phases", phases)

    @classmethod
    def default(cls, eta: float, init: float = 3.2e-3, wait: float = 1e-6,
                readout: float = 3.2e-3, sample_count: int = 2000) -> "PhaseProtocol":
        return cls(
            (Phase("init", init, eta), Phase("wait", wait, 0.0), Phase("readout", readout, eta)),
            sample_count,
        )

    @property
    def init(self) -> Phase:
        return self.phases[0]

    @property
    def readout(self) -> Phase:
        return self.phases[-1]

    def with_wait(self, duration: float) -> "PhaseProtocol":
        """Replace the duration of every dark (eta = 0) middle phase."""
        phases = list(self.phases)
        hit = False
        for k in range(1, len(phases) - 1):
            if phases[k].eta == 0:
                phases[k] = Phase(phases[k].label, duration, 0.0)
                hit = True
        if not hit:
            raise ValidationError("protocol has no dark wait phase")
        return PhaseProtocol(tuple(phases), self.sample_count, self.t_min)

    def grid(self, duration: float, extra=()) -> np.ndarray:
        return phase_grid(duration, self.sample_count, self.t_min, extra)


def phase_grid(duration: float, n: int, t_min: float = 1e-11, extra=()) -> np.ndarray:
    """Geometric-then-linear sample times on ``[0, duration]``.

    Three quarters of the points are log-spaced from ``t_min`` to a tenth of
    the duration, the rest linear to the end. ``extra`` times are merged in.
    """
    t_min = min(t_min, duration * 1e-4)
    split = duration / 10
    n_geo = (3 * n) // 4
    geo = np.geomspace(t_min, split, n_geo)
    lin = np.linspace(split, duration, n - n_geo)
    extra = np.asarray(extra, dtype=float)
    extra = extra[(extra > 0) & (extra <= duration)]
    return np.unique(np.concatenate([[0.0], geo, lin, extra]))


def run_protocol(table: RateTable, protocol: PhaseProtocol, p0=None,
                 extra_times=None) -> list[Trajectory]:
    """Propagate through every phase, each starting from the previous final state.

    Phase times are local (each trajectory starts at t=0). ``extra_times`` maps
    a phase index to sample times that must appear on that phase's grid.
    """
    state = thermal_state() if p0 is None else as_state(p0)
    extra_times = extra_times or {}
    out = []
    for k, phase in enumerate(protocol.phases):
        M = build_rate_matrix(table.with_eta(phase.eta))
        traj = propagate(M, state, protocol.grid(phase.duration, extra_times.get(k, ())))
        out.append(traj)
        state = traj.final
    return out


def cumulative_pl(traj: Trajectory, table: RateTable) -> np.ndarray:
    """Running trapezoidal integral of the PL rate on the trajectory's grid."""
    r = pl_rate(traj.states, table)
    steps = 0.5 * (r[1:] + r[:-1]) * np.diff(traj.times)
    return np.concatenate([[0.0], np.cumsum(steps)])


def integrated_pl(traj: Trajectory, table: RateTable, window: float) -> float:
    """Photons emitted in ``[t0, t0 + window]`` (trapezoid, linear PL in the last cell)."""
    if window < 0 or window > traj.duration * (1 + 1e-12):
        raise OutOfRangeError(f"window {window} outside [0, {traj.duration}]")
    t = traj.times - traj.times[0]
    window = min(window, t[-1])
    cum = cumulative_pl(traj, table)
    k = np.searchsorted(t, window, side="right") - 1
    if t[k] == window:
        return float(cum[k])
    r = pl_rate(traj.states[k:k + 2], table)
    h = window - t[k]
    r_end = r[0] + (r[1] - r[0]) * h / (t[k + 1] - t[k])
    return float(cum[k] + 0.5 * (r[0] + r_end) * h)


@dataclass(frozen=True)
class ContrastCurve:
    integration_times: np.ndarray
    contrast: np.ndarray
    eta: float = float("nan")
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        w = np.array(self.integration_times, dtype=float)
        c = np.array(self.contrast, dtype=float)
        if w.shape != c.shape or w.ndim != 1:
            raise ValidationError("windows and contrast must be equal-length vectors")
        if len(w) > 1 and np.any(np.diff(w) <= 0):
            raise ValidationError("integration times must be increasing")
        if not np.all(np.isfinite(c)):
            raise ValidationError("contrast values must be finite")
        object.__setattr__(self, "integration_times", w)
        object.__setattr__(self, "contrast", c)

    def extremum_index(self) -> int:
        """First index where |contrast| reaches its global maximum."""
        a = np.abs(self.contrast)
        return int(np.flatnonzero(a == a.max())[0])

    def at(self, window: float) -> float:
        return float(np.interp(window, self.integration_times, self.contrast))

    def to_csv(self) -> str:
        rows = "".join(f"{w!r},{c!r}\n" for w, c in
                       zip(self.integration_times.tolist(), self.contrast.tolist()))
        return "window_s,contrast\n" + rows

    @classmethod
    def from_csv(cls, text: str) -> "ContrastCurve":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if lines[0].strip() != "window_s,contrast":
            raise ValidationError(f"unexpected header {lines[0]!r}")
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]).reshape(-1, 2)
        return cls(data[:, 0], data[:, 1])

    def to_json(self, decay_time: float | None = None) -> str:
        i = self.extremum_index()
        doc = {
            "eta_hz": self.eta,
            "windows_s": self.integration_times.tolist(),
            "contrast": self.contrast.tolist(),
            "extremum": {"w_s": float(self.integration_times[i]), "c": float(self.contrast[i])},
            "decay_time_s": decay_time,
        }
        return json.dumps(doc, indent=1)


def _window_integrals(traj: Trajectory, table: RateTable, windows: np.ndarray) -> np.ndarray:
    return np.array([integrated_pl(traj, table, w) for w in windows])


def contrast_curve(table: RateTable, protocol: PhaseProtocol, windows, p0=None) -> ContrastCurve:
    """Contrast of init-phase (signal) versus readout-phase (reference) fluorescence."""
    windows = np.asarray(windows, dtype=float)
    if np.any(windows <= 0):
        raise OutOfRangeError("integration windows must be > 0")
    init, readout = protocol.init, protocol.readout
    if init.eta != readout.eta:
        raise ValidationError("init and readout phases must share the pump rate")
    limit = min(init.duration, readout.duration)
    if windows.max() > limit:
        raise OutOfRangeError(f"window {windows.max()} exceeds phase duration {limit}")
    last = len(protocol.phases) - 1
    trajs = run_protocol(table, protocol, p0, extra_times={0: windows, last: windows})
    S = _window_integrals(trajs[0], table, windows)
    R = _window_integrals(trajs[-1], table, windows)
    if np.any(R == 0):
        raise ZeroReferenceError("reference fluorescence is zero; is the pump off?")
    return ContrastCurve(windows, (S - R) / R, eta=init.eta)


def contrast_decay_time(curve: ContrastCurve, rtol: float = 1e-9) -> float:
    """Characteristic time of the |contrast| tail after its extremum.

    Fits ``A exp(-w / tau) + B`` to the samples strictly after the extremum
    and returns ``tau``. A tail that grows anywhere is rejected.
    """
    from .fitting import Dataset, fit

    i = curve.extremum_index()
    w = curve.integration_times[i + 1:]
    a = np.abs(curve.contrast[i + 1:])
    if len(w) < 4:
        raise FitError("too few samples after the extremum for a decay fit")
    if np.any(np.diff(a) > rtol * a.max()):
        raise FitError("|contrast| tail is not monotone after the extremum")
    result = fit(Dataset(w, a), "t1_exp")
    if not result.converged:
        raise FitError("decay fit did not converge")
    return float(result.params["T1"])


def relaxometry_prediction(table: RateTable, protocol: PhaseProtocol, delay: float,
                           window: float) -> float:
    """Contrast after an extra dark ``delay`` between initialization and readout.

    The dark phase lasts the protocol's own wait plus ``delay``; the signal is
    still the initialization phase, so the contrast fades to zero once the
    delay allows full thermalization.
    """
    if not delay >= 0:
        raise ValidationError(f"delay must be >= 0, got {delay}")
    base = next(p.duration for p in protocol.phases[1:-1] if p.eta == 0) \
        if len(protocol.phases) > 2 else 0.0
    proto = protocol.with_wait(base + delay)
    return float(contrast_curve(table, proto, [window]).contrast[0])


def multiscale_windows(w_max: float, n: int = 400, w_min: float = 1e-9) -> np.ndarray:
    """Integration windows log-spaced up to a tenth of ``w_max``, then linear."""
    n_geo = n // 2
    geo = np.geomspace(w_min, w_max / 10, n_geo, endpoint=False)
    lin = np.linspace(w_max / 10, w_max, n - n_geo)
    return np.concatenate([geo, lin])
