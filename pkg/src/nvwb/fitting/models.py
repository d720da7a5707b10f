"""Parametric contrast models with analytic parameter derivatives.

Every model maps ``x`` (Hz for ODMR, seconds otherwise) and a parameter vector
to contrast. Parameters carry a transform used by the optimizer:

* ``free``  - unconstrained (amplitudes, offsets, centre frequencies, phases)
* ``log``   - strictly positive scales (widths, times, angular frequency)
* ``unit3`` - the stretch exponent, kept inside (0, 3)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import ValidationError

P_MAX = 3.0


@dataclass(frozen=True)
class ModelDef:
    kind: str
    names: tuple[str, ...]
    transforms: tuple[str, ...]
    func: Callable
    jac: Callable


# ---- lorentzian_multi --------------------------------------------------------

def lorentzian_names(n_dips: int) -> tuple[str, ...]:
    names = []
    for i in range(1, n_dips + 1):
        names += [f"C{i}", f"f{i}", f"gamma{i}"]
    return tuple(names) + ("C_off",)


def _lorentz(x, theta):
    theta = np.asarray(theta, dtype=float)
    y = np.full_like(x, theta[-1], dtype=float)
    for C, f0, g in theta[:-1].reshape(-1, 3):
        h2 = (g / 2) ** 2
        y += C * h2 / ((x - f0) ** 2 + h2)
    return y


def _lorentz_jac(x, theta):
    theta = np.asarray(theta, dtype=float)
    J = np.empty((len(x), len(theta)))
    for k, (C, f0, g) in enumerate(theta[:-1].reshape(-1, 3)):
        h = g / 2
        d = x - f0
        den = d ** 2 + h ** 2
        J[:, 3 * k] = h ** 2 / den
        J[:, 3 * k + 1] = C * 2 * d * h ** 2 / den ** 2
        J[:, 3 * k + 2] = C * h * d ** 2 / den ** 2
    J[:, -1] = 1.0
    return J


# ---- damped cosines ----------------------------------------------------------

def _rabi(x, theta):
    C0, w, phi, tau, C1 = theta
    return C0 * np.cos(w * x + phi) * np.exp(-x / tau) + C1


def _rabi_jac(x, theta):
    C0, w, phi, tau, C1 = theta
    e = np.exp(-x / tau)
    c = np.cos(w * x + phi)
    s = np.sin(w * x + phi)
    return np.column_stack([c * e, -C0 * s * e * x, -C0 * s * e,
                            C0 * c * e * x / tau ** 2, np.ones_like(x)])


def _ramsey(x, theta):
    C0, w, phi, T2s, C1 = theta
    return C0 * np.cos(w * x + phi) * np.exp(-(x / T2s) ** 2) + C1


def _ramsey_jac(x, theta):
    C0, w, phi, T2s, C1 = theta
    g = np.exp(-(x / T2s) ** 2)
    c = np.cos(w * x + phi)
    s = np.sin(w * x + phi)
    return np.column_stack([c * g, -C0 * s * g * x, -C0 * s * g,
                            C0 * c * g * 2 * x ** 2 / T2s ** 3, np.ones_like(x)])


# ---- hahn echo with revivals -------------------------------------------------

def revival_count(x_max: float, tau_rev: float) -> int:
    return max(0, math.ceil(x_max / tau_rev))


def _hahn_parts(x, theta, revivals):
    C0, T2, p, tau_rev, tau_w, C1 = theta
    u = np.abs(x) / T2
    E = np.exp(-u ** p)
    i = np.arange(revivals + 1)[:, None]
    d = x[None, :] - i * tau_rev
    G = np.exp(-(d / tau_w) ** 2)
    return u, E, i, d, G


def _hahn(x, theta, revivals):
    C0, C1 = theta[0], theta[5]
    _, E, _, _, G = _hahn_parts(x, theta, revivals)
    return C0 * E * G.sum(axis=0) + C1


def _hahn_jac(x, theta, revivals):
    C0, T2, p, tau_rev, tau_w, C1 = theta
    u, E, i, d, G = _hahn_parts(x, theta, revivals)
    S = G.sum(axis=0)
    up = u ** p
    with np.errstate(divide="ignore", invalid="ignore"):
        logu = np.where(u > 0, np.log(np.where(u > 0, u, 1.0)), 0.0)
    return np.column_stack([
        E * S,
        C0 * S * E * p * up / T2,
        -C0 * S * E * up * logu,
        C0 * E * (G * 2 * d * i / tau_w ** 2).sum(axis=0),
        C0 * E * (G * 2 * d ** 2 / tau_w ** 3).sum(axis=0),
        np.ones_like(x),
    ])


# ---- T1 exponential ----------------------------------------------------------

def _t1(x, theta):
    C0, T1, C1 = theta
    return C0 * np.exp(-x / T1) + C1


def _t1_jac(x, theta):
    C0, T1, C1 = theta
    e = np.exp(-x / T1)
    return np.column_stack([e, C0 * e * x / T1 ** 2, np.ones_like(x)])


KINDS = ("lorentzian_multi", "rabi", "ramsey", "hahn", "t1_exp")

_FIXED = {
    "rabi": ModelDef("rabi", ("C0", "omega", "phi", "tau_R", "C1"),
                     ("free", "log", "free", "log", "free"), _rabi, _rabi_jac),
    "ramsey": ModelDef("ramsey", ("C0", "omega", "phi", "T2star", "C1"),
                       ("free", "log", "free", "log", "free"), _ramsey, _ramsey_jac),
    "t1_exp": ModelDef("t1_exp", ("C0", "T1", "C1"), ("free", "log", "free"), _t1, _t1_jac),
}


def model_def(kind: str, n_dips: int = 1, revivals: int = 0) -> ModelDef:
    if kind in _FIXED:
        return _FIXED[kind]
    if kind == "lorentzian_multi":
        if n_dips < 1:
            raise ValidationError("lorentzian_multi needs at least one dip")
        names = lorentzian_names(n_dips)
        transforms = ("free", "free", "log") * n_dips + ("free",)
        return ModelDef(kind, names, transforms, _lorentz, _lorentz_jac)
    if kind == "hahn":
        return ModelDef(
            kind, ("C0", "T2", "p", "tau_rev", "tau_w", "C1"),
            ("free", "log", "unit3", "log", "log", "free"),
            lambda x, t: _hahn(x, t, revivals), lambda x, t: _hahn_jac(x, t, revivals),
        )
    raise ValidationError(f"unknown model kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True)
class FitModel:
    """A model family plus concrete parameter values.

    ``n_dips`` applies to ``lorentzian_multi``; ``revivals`` is the highest
    revival index N of the Hahn-echo sum (terms i = 0..N).
    """

    kind: str
    params: dict = field(default_factory=dict)
    n_dips: int = 1
    revivals: int | None = None

    def __post_init__(self):
        d = self.definition()
        missing = set(d.names) - set(self.params)
        extra = set(self.params) - set(d.names)
        if missing or extra:
            raise ValidationError(f"{self.kind}: missing {sorted(missing)}, unexpected {sorted(extra)}")
        params = {k: float(self.params[k]) for k in d.names}
        for name, tr in zip(d.names, d.transforms):
            v = params[name]
            if not math.isfinite(v):
                raise ValidationError(f"{name} must be finite")
            if tr == "log" and v <= 0:
                raise ValidationError(f"{name} must be > 0, got {v}")
            if tr == "unit3" and not 0 < v <= P_MAX:
                raise ValidationError(f"{name} must lie in (0, {P_MAX}], got {v}")
        object.__setattr__(self, "params", params)

    def definition(self) -> ModelDef:
        return model_def(self.kind, self.n_dips, self.revivals or 0)

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.params[n] for n in self.definition().names])

    def resolved(self, x) -> "FitModel":
        """Fix the Hahn revival count from the data range if it is unset."""
        if self.kind != "hahn" or self.revivals is not None:
            return self
        n = revival_count(float(np.max(x)), self.params["tau_rev"])
        return FitModel(self.kind, self.params, self.n_dips, n)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        m = self.resolved(x)
        return m.definition().func(x, m.theta)

    def jacobian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        m = self.resolved(x)
        return m.definition().jac(x, m.theta)


def make_model(kind: str, theta, n_dips: int = 1, revivals: int | None = None) -> FitModel:
    d = model_def(kind, n_dips, revivals or 0)
    theta = np.asarray(theta, dtype=float)
    if len(theta) != len(d.names):
        raise ValidationError(f"{kind} takes {len(d.names)} parameters, got {len(theta)}")
    return FitModel(kind, dict(zip(d.names, theta.tolist())), n_dips, revivals)


# ---- parameter transforms ----------------------------------------------------

def to_internal(theta, transforms) -> np.ndarray:
    u = np.array(theta, dtype=float)
    for k, tr in enumerate(transforms):
        if tr == "log":
            u[k] = math.log(u[k])
        elif tr == "unit3":
            q = min(max(u[k] / P_MAX, 1e-12), 1 - 1e-12)
            u[k] = math.log(q / (1 - q))
    return u


def from_internal(u, transforms) -> np.ndarray:
    """Overflowing steps map to inf, which the optimizer then rejects."""
    theta = np.array(u, dtype=float)
    for k, tr in enumerate(transforms):
        if tr == "log":
            with np.errstate(over="ignore"):
                theta[k] = np.exp(u[k])
        elif tr == "unit3":
            with np.errstate(over="ignore"):
                theta[k] = P_MAX / (1 + np.exp(-u[k]))
    return theta


def internal_derivative(theta, transforms) -> np.ndarray:
    """d theta / d u for each parameter."""
    out = np.ones(len(theta))
    for k, tr in enumerate(transforms):
        if tr == "log":
            out[k] = theta[k]
        elif tr == "unit3":
            out[k] = theta[k] * (1 - theta[k] / P_MAX)
    return out


def wrap_phase(phi: float) -> float:
    """Map an angle to (-pi, pi]."""
    w = math.remainder(phi, 2 * math.pi)
    return math.pi if w == -math.pi else w


def canonical(model: FitModel, amplitude_sign: float | None = None) -> FitModel:
    """Equivalent parameters with the phase wrapped to (-pi, pi].

    For the oscillating models ``(C0, phi)`` and ``(-C0, phi + pi)`` describe the
    same curve; pass ``amplitude_sign`` to pick the branch with that sign of C0.
    """
    if model.kind not in ("rabi", "ramsey"):
        return model
    p = dict(model.params)
    if amplitude_sign is not None and p["C0"] * amplitude_sign < 0:
        p["C0"] = -p["C0"]
        p["phi"] += math.pi
    p["phi"] = wrap_phase(p["phi"])
    return FitModel(model.kind, p, model.n_dips, model.revivals)
