"""Least-squares fitting of ODMR, Rabi, Ramsey, Hahn-echo and T1 contrast data."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError, ValidationError
from .initial import auto_init, dominant_angular_frequency
from .lm import levenberg_marquardt
from .models import (
    KINDS,
    FitModel,
    canonical,
    from_internal,
    internal_derivative,
    make_model,
    model_def,
    revival_count,
    to_internal,
    wrap_phase,
)

__all__ = [
    "KINDS", "Dataset", "FitModel", "FitResult", "auto_init", "b_field_from_splitting",
    "canonical", "derive_pi_pulses", "dominant_angular_frequency", "fit", "goodness",
    "make_model", "revival_count", "wrap_phase", "GYROMAGNETIC_MHZ_PER_G",
]

GYROMAGNETIC_MHZ_PER_G = 2.8

# residual norm, relative to the data norm, treated as an exact fit
ROUNDOFF_FLOOR = 1e-13


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray | None = None
    units: str | None = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        y = np.array(self.y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or len(x) < 2:
            raise ValidationError("x and y must be equal-length vectors with >= 2 points")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValidationError("dataset contains non-finite values")
        if np.any(np.diff(x) <= 0):
            raise ValidationError("x must be strictly increasing")
        sigma = None
        if self.sigma is not None:
            sigma = np.array(self.sigma, dtype=float)
            if sigma.shape != x.shape or not np.all(sigma > 0):
                raise ValidationError("sigma must be positive and match x")
            sigma.setflags(write=False)
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sigma", sigma)

    def __len__(self):
        return len(self.x)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.units:
            buf.write(f"# units: {self.units}\n")
        if self.sigma is None:
            buf.write("x,y\n")
            for a, b in zip(self.x.tolist(), self.y.tolist()):
                buf.write(f"{a!r},{b!r}\n")
        else:
            buf.write("x,y,sigma\n")
            for a, b, s in zip(self.x.tolist(), self.y.tolist(), self.sigma.tolist()):
                buf.write(f"{a!r},{b!r},{s!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        units = None
        rows = []
        header = None
        for line in text.splitlines():
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                body = s[1:].strip()
                if body.lower().startswith("units:"):
                    units = body.split(":", 1)[1].strip()
                continue
            if header is None:
                header = [h.strip() for h in s.split(",")]
                if header not in (["x", "y"], ["x", "y", "sigma"]):
                    raise ValidationError(f"unexpected dataset header {s!r}")
                continue
            rows.append([float(v) for v in s.split(",")])
        if header is None:
            raise ValidationError("dataset CSV has no header")
        data = np.array(rows, dtype=float).reshape(-1, len(header))
        sigma = data[:, 2] if len(header) == 3 else None
        return cls(data[:, 0], data[:, 1], sigma, units)


@dataclass(frozen=True)
class FitResult:
    model: FitModel
    stderr: dict
    residual_norm: float
    rms: float
    converged: bool
    iterations: int
    gradient_norm: float
    message: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def params(self) -> dict:
        return self.model.params

    @property
    def kind(self) -> str:
        return self.model.kind

    def to_json(self) -> str:
        doc = {
            "model": self.model.kind,
            "theta": self.model.params,
            "rms": self.rms,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "gradient_norm": self.gradient_norm,
            "stderr": self.stderr,
            "n_dips": self.model.n_dips,
            "revivals": self.model.revivals,
            "message": self.message,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        d = json.loads(text)
        model = FitModel(d["model"], d["theta"], d.get("n_dips", 1), d.get("revivals"))
        return cls(model, d.get("stderr", {}), d.get("residual_norm", float("nan")), d["rms"],
                   d["converged"], d["iterations"], d.get("gradient_norm", float("nan")),
                   d.get("message", ""))


def _typical_scales(names, transforms, x, y):
    amp = float(np.ptp(y)) or float(np.max(np.abs(y))) or 1.0
    xspan = float(np.ptp(x)) or 1.0
    out = []
    for name, tr in zip(names, transforms):
        if tr != "free":
            out.append(1.0)
        elif name.startswith("C"):
            out.append(amp)
        elif name.startswith("f"):
            out.append(xspan)
        else:
            out.append(1.0)
    return np.array(out)


def fit(data: Dataset, kind: str, theta0=None, n_dips: int | None = None,
        revivals: int | None = None, max_iter: int = 500) -> FitResult:
    """Weighted Levenberg-Marquardt fit of ``kind`` to ``data``.

    ``theta0`` may be a FitModel, a parameter dict or a vector; without it the
    start comes from :func:`auto_init`. Positive parameters are optimized in
    log space so they never leave their domain. Non-convergence is reported
    through ``converged=False`` rather than raised.
    """
    x, y = data.x, data.y
    if theta0 is None:
        start = auto_init(data, kind, n_dips)
    elif isinstance(theta0, FitModel):
        start = theta0
    elif isinstance(theta0, dict):
        start = FitModel(kind, theta0, n_dips or 1, revivals)
    else:
        start = make_model(kind, theta0, n_dips or 1, revivals)
    if start.kind != kind:
        raise ValidationError(f"start model is {start.kind!r}, expected {kind!r}")
    if revivals is not None and kind == "hahn":
        start = FitModel(kind, start.params, start.n_dips, revivals)
    start = start.resolved(x)
    d = start.definition()
    P = len(d.names)
    if len(x) < P + 1:
        raise ValidationError(f"{kind} has {P} parameters; need at least {P + 1} points")

    w = 1.0 / data.sigma if data.sigma is not None else np.ones_like(y)

    def residual(u):
        with np.errstate(over="ignore", invalid="ignore"):
            return (d.func(x, from_internal(u, d.transforms)) - y) * w

    def jacobian(u):
        theta = from_internal(u, d.transforms)
        with np.errstate(over="ignore", invalid="ignore"):
            J = d.jac(x, theta) * internal_derivative(theta, d.transforms)
        return J * w[:, None]

    u0 = to_internal(start.theta, d.transforms)
    res = levenberg_marquardt(residual, jacobian, u0,
                              scale=_typical_scales(d.names, d.transforms, x, y),
                              max_iter=max_iter,
                              residual_floor=ROUNDOFF_FLOOR * float(np.linalg.norm(y * w)))
    theta = from_internal(res.u, d.transforms)
    model = FitModel(kind, dict(zip(d.names, theta.tolist())), start.n_dips, start.revivals)
    sign = math.copysign(1.0, start.params["C0"]) if kind in ("rabi", "ramsey") else None
    model = canonical(model, sign)

    ssr = float(res.residuals @ res.residuals)
    dof = len(x) - P
    s2 = 1.0 if data.sigma is not None else (ssr / dof if dof > 0 else float("nan"))
    try:
        cov_u = np.linalg.inv(res.jac.T @ res.jac) * s2
        se = np.sqrt(np.abs(np.diag(cov_u))) * np.abs(internal_derivative(theta, d.transforms))
    except np.linalg.LinAlgError:
        se = np.full(P, np.nan)
    raw = d.func(x, theta) - y
    return FitResult(
        model=model,
        stderr=dict(zip(d.names, se.tolist())),
        residual_norm=math.sqrt(ssr),
        rms=float(np.sqrt(np.mean(raw ** 2))),
        converged=res.converged,
        iterations=res.iterations,
        gradient_norm=res.gradient_norm,
        message=res.message,
    )


def derive_pi_pulses(omega: float) -> tuple[float, float]:
    """pi/2 and pi pulse durations for a Rabi angular frequency (rad per unit time)."""
    if not omega > 0:
        raise DomainError(f"Rabi angular frequency must be > 0, got {omega}")
    half = math.pi / (2 * omega)
    return half, 2 * half


def b_field_from_splitting(f_low: float, f_high: float,
                           gamma_mhz_per_g: float = GYROMAGNETIC_MHZ_PER_G) -> float:
    """Field in gauss from the ms=0->-1 / ms=0->+1 dip frequencies (Hz).

    The outer dips are split by twice the Zeeman shift, hence the factor 2.
    """
    if f_high < f_low:
        raise DomainError("f_high must be >= f_low")
    return (f_high - f_low) / (2 * gamma_mhz_per_g * 1e6)


def goodness(data: Dataset, model: FitModel) -> dict:
    """RMS and max residual, plus reduced chi-square when the data carry sigma."""
    r = model(data.x) - data.y
    out = {"rms": float(np.sqrt(np.mean(r ** 2))), "max_abs": float(np.max(np.abs(r)))}
    if data.sigma is not None:
        dof = len(r) - len(model.params)
        out["reduced_chi2"] = float(np.sum((r / data.sigma) ** 2) / dof) if dof > 0 else float("nan")
    return out
