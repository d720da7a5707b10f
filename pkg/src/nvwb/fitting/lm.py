"""Levenberg-Marquardt least squares on an unconstrained parameter vector."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import RankDeficiencyError

LAMBDA0 = 1e-3
LAMBDA_MAX = 1e16


@dataclass
class LMResult:
    u: np.ndarray
    residuals: np.ndarray
    jac: np.ndarray
    iterations: int
    converged: bool
    gradient_norm: float
    message: str


def scaled_gradient(J: np.ndarray, r: np.ndarray) -> float:
    """Largest cosine between a Jacobian column and the residual vector.

    Zero at a stationary point and independent of parameter and data units.
    """
    rn = np.linalg.norm(r)
    if rn == 0:
        return 0.0
    cn = np.linalg.norm(J, axis=0)
    g = np.abs(J.T @ r)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(cn > 0, g / (cn * rn), 0.0)
    return float(cos.max()) if cos.size else 0.0


def levenberg_marquardt(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    u0,
    scale=None,
    max_iter: int = 500,
    xtol: float = 1e-8,
    gtol: float = 1e-10,
    gtol_final: float = 1e-6,
    residual_floor: float = 0.0,
) -> LMResult:
    """Minimize ``sum(residual(u)**2)``.

    Damping follows Marquardt: the step solves
    ``(J^T J + lam * diag(J^T J)) d = -J^T r`` with ``lam`` starting at 1e-3,
    divided by 10 after an accepted step and multiplied by 10 after a
    rejected one. Convergence is declared when the scaled gradient drops below
    ``gtol``, or when an accepted step changes every parameter by less than
    ``xtol`` relative to ``max(|u|, scale)`` while the scaled gradient is below
    ``gtol_final``. A residual norm at or below ``residual_floor`` (the
    roundoff level of exact data) also counts as converged, since the
    gradient direction is meaningless there.
    """
    u = np.array(u0, dtype=float)
    scale = np.ones_like(u) if scale is None else np.asarray(scale, dtype=float)
    r = residual(u)
    J = jacobian(u)
    cost = r @ r
    lam = LAMBDA0

    A = J.T @ J
    g = J.T @ r
    gn = scaled_gradient(J, r)
    if gn >= gtol and np.sqrt(cost) > residual_floor:
        diag = np.diag(A).copy()
        if np.any(diag == 0) or np.linalg.matrix_rank(J / np.sqrt(np.where(diag > 0, diag, 1))) < len(u):
            raise RankDeficiencyError("Jacobian is rank deficient at the starting point")

    it = 0
    message = "max iterations reached"
    converged = False
    while it < max_iter:
        if np.sqrt(cost) <= residual_floor:
            converged, message = True, "residual at roundoff level"
            break
        gn = scaled_gradient(J, r)
        if gn < gtol:
            converged, message = True, "gradient below tolerance"
            break
        diag = np.diag(A).copy()
        floor = 1e-12 * max(diag.max(), 1e-300)
        diag = np.maximum(diag, floor)
        accepted = False
        while lam <= LAMBDA_MAX:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            u_new = u + step
            r_new = residual(u_new)
            cost_new = r_new @ r_new if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                accepted = True
                break
            lam *= 10
        it += 1
        if not accepted:
            if np.sqrt(cost) <= residual_floor:
                converged, message = True, "residual at roundoff level"
            else:
                converged = gn < gtol_final
                message = "damping exhausted; no further decrease"
            break
        rel = np.max(np.abs(step) / np.maximum(np.abs(u), scale))
        u, r, cost = u_new, r_new, cost_new
        J = jacobian(u)
        A = J.T @ J
        g = J.T @ r
        lam = max(lam / 10, 1e-12)
        if rel < xtol:
            gn = scaled_gradient(J, r)
            if gn < gtol_final:
                converged, message = True, "relative step below tolerance"
                break
    return LMResult(u, r, J, it, converged, scaled_gradient(J, r), message)
