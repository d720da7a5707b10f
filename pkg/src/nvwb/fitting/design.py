"""Cramer-Rao sizing of synthetic sweeps.

For white Gaussian noise of standard deviation ``sigma`` the covariance of an
efficient estimator is ``sigma**2 * inv(J^T J)``; on a uniform grid ``J^T J``
grows linearly with the number of points, which gives the grid size needed for
a target precision.
"""

from __future__ import annotations

import math

import numpy as np

from .models import FitModel


def cramer_rao_stderr(model: FitModel, x, sigma: float) -> dict:
    x = np.asarray(x, dtype=float)
    J = model.jacobian(x)
    cov = np.linalg.inv(J.T @ J) * sigma ** 2
    return dict(zip(model.params, np.sqrt(np.diag(cov)).tolist()))


def tolerance_for(name: str, value: float, amplitude: float, rel_tol: float,
                  phase_tol: float) -> float:
    """Absolute recovery tolerance: relative, except phases and zero-valued offsets."""
    if name == "phi":
        return phase_tol
    if value == 0:
        return rel_tol * abs(amplitude)
    return rel_tol * abs(value)


def points_for_precision(model: FitModel, x_range, sigma: float, rel_tol: float = 0.1,
                         phase_tol: float = 0.3, z: float = 2.5, probe: int = 1001) -> int:
    """Smallest uniform-grid size whose Cramer-Rao bound puts every tolerance at ``z`` sigma."""
    x = np.linspace(x_range[0], x_range[1], probe)
    se = cramer_rao_stderr(model.resolved(x), x, sigma)
    amplitude = next(v for k, v in model.params.items() if k.startswith("C"))
    need = probe * max(
        (z * s / tolerance_for(k, model.params[k], amplitude, rel_tol, phase_tol)) ** 2
        for k, s in se.items()
    )
    return max(int(math.ceil(need)) | 1, 21)
