"""Data-driven starting points for every model family."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import find_peaks, peak_widths

from ..errors import InitError
from .models import FitModel, make_model, revival_count

MIN_POINTS = 8
# heuristics run on at most this many (resampled) points
MAX_INIT_POINTS = 4096


def _uniform(x, y, n=None):
    n = min(len(x), MAX_INIT_POINTS) if n is None else n
    xu = np.linspace(x[0], x[-1], n)
    return xu, np.interp(xu, x, y)


def _subsample(x, y, n=MAX_INIT_POINTS):
    if len(x) <= n:
        return x, y
    idx = np.unique(np.linspace(0, len(x) - 1, n).round().astype(int))
    return x[idx], y[idx]


def _lstsq_ssr(basis, y):
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    r = y - basis @ coef
    return r @ r, coef


def _smooth(y, width):
    if width <= 1:
        return y.copy()
    kernel = np.ones(width) / width
    pad = width // 2
    yp = np.pad(y, (pad, width - 1 - pad), mode="edge")
    return np.convolve(yp, kernel, mode="valid")


def init_lorentzian(x, y, n_dips=None, depth_fraction=0.3) -> FitModel:
    """Dips are smoothed local minima at least ``depth_fraction`` of the range deep.

    A candidate must also stand out from its neighbourhood by that much, so
    noise ripples at the bottom of one dip do not count as extra dips.
    """
    width = max(1, len(x) // 100) | 1
    ys = _smooth(y, width)
    top, bottom = ys.max(), ys.min()
    span = top - bottom
    if span <= 0:
        raise InitError("flat spectrum: no dips to initialize")
    peaks, _ = find_peaks(-ys, height=-(top - depth_fraction * span),
                          prominence=depth_fraction * span, distance=max(width, 2))
    if len(peaks) == 0:
        raise InitError("no dip candidates found")
    peaks = peaks[np.argsort(ys[peaks])]
    if n_dips is not None:
        if len(peaks) < n_dips:
            raise InitError(f"found {len(peaks)} dip candidates, need {n_dips}")
        peaks = peaks[:n_dips]
    peaks = np.sort(peaks)
    baseline = float(np.median(y))
    widths = peak_widths(-ys, peaks, rel_height=0.5)[0]
    dx = np.gradient(x)
    theta = []
    for pk, w in zip(peaks, widths):
        fwhm = max(w * dx[pk], 2 * dx[pk])
        theta += [ys[pk] - baseline, x[pk], fwhm]
    theta.append(baseline)
    return make_model("lorentzian_multi", theta, n_dips=len(peaks))


def dominant_angular_frequency(x, y, pad: int = 16) -> float:
    """Angular frequency of the largest non-DC peak of the zero-padded spectrum."""
    xu, yu = _uniform(x, y)
    dy = yu - yu.mean()
    n = len(dy) * pad
    spec = np.abs(np.fft.rfft(dy, n))
    freqs = np.fft.rfftfreq(n, d=xu[1] - xu[0])
    spec[0] = 0.0
    return 2 * math.pi * freqs[int(np.argmax(spec))]


def _init_oscillation(kind, x, y, envelope):
    span = x[-1] - x[0]
    w_peak = dominant_angular_frequency(x, y)
    if w_peak <= 0:
        w_peak = 2 * math.pi / span
    xs, ys = _subsample(x, y)
    bin_w = 2 * math.pi / span
    omegas = np.maximum(w_peak + bin_w * np.linspace(-1, 1, 21), 0.25 * bin_w)
    taus = np.geomspace(span / 30, span * 3, 16)
    best = None
    for w in omegas:
        c, s = np.cos(w * xs), np.sin(w * xs)
        for tau in taus:
            env = envelope(xs, tau)
            ssr, coef = _lstsq_ssr(np.column_stack([c * env, s * env, np.ones_like(xs)]), ys)
            if best is None or ssr < best[0]:
                best = (ssr, w, tau, coef)
    _, w, tau, (a, b, c1) = best
    amp = math.hypot(a, b)
    phi = math.atan2(-b, a)
    if amp == 0:
        amp = 1e-6 * max(np.ptp(y), 1e-12)
    return make_model(kind, [amp, w, phi, tau, c1])


def init_t1(x, y) -> FitModel:
    """T1 from a log-linear regression of ``|y - y_tail|``, refined on a grid."""
    span = x[-1] - x[0]
    n_tail = max(1, len(y) // 10)
    base = y[-n_tail:].mean()
    d = y - base
    amp = d[:n_tail].mean()
    T1 = span / 3
    if amp != 0:
        mask = (np.sign(d) == np.sign(amp)) & (np.abs(d) > 0.1 * abs(amp))
        if mask.sum() >= 3:
            slope = np.polyfit(x[mask] - x[0], np.log(np.abs(d[mask])), 1)[0]
            if slope < 0:
                T1 = -1.0 / slope
    xs, ys = _subsample(x, y)
    best = None
    for t in T1 * np.geomspace(0.25, 4, 25):
        ssr, coef = _lstsq_ssr(np.column_stack([np.exp(-xs / t), np.ones_like(xs)]), ys)
        if best is None or ssr < best[0]:
            best = (ssr, t, coef)
    _, T1, (c0, c1) = best
    return make_model("t1_exp", [c0, T1, c1])


def revival_period(x, y) -> float:
    """Lag of the first autocorrelation maximum after the first zero crossing."""
    xu, yu = _uniform(x, y)
    dy = yu - np.median(yu)
    n = len(dy)
    f = np.fft.rfft(dy, 2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    if ac[0] <= 0:
        raise InitError("no signal variance for autocorrelation")
    below = np.flatnonzero(ac < 0)
    if len(below) == 0:
        raise InitError("autocorrelation never crosses zero")
    start = below[0]
    rest = ac[start:n - n // 10]
    if len(rest) < 3:
        raise InitError("revival period not resolved")
    k = start + int(np.argmax(rest))
    return float(k * (xu[1] - xu[0]))


def init_hahn(x, y) -> FitModel:
    span = x[-1]
    try:
        tau_rev0 = revival_period(x, y)
    except InitError:
        tau_rev0 = span / 2
    xs, ys = _subsample(x, y, 2048)
    best = None
    for tau_rev in tau_rev0 * np.array([0.95, 1.0, 1.05]):
        N = revival_count(x[-1], tau_rev)
        i = np.arange(N + 1)[:, None]
        for tau_w in np.geomspace(tau_rev / 30, tau_rev / 2, 10):
            S = np.exp(-((xs[None, :] - i * tau_rev) / tau_w) ** 2).sum(axis=0)
            for p in (0.5, 0.75, 1.0, 1.5, 2.0):
                for T2 in np.geomspace(span / 100, 2 * span, 12):
                    E = np.exp(-(xs / T2) ** p)
                    ssr, coef = _lstsq_ssr(np.column_stack([E * S, np.ones_like(xs)]), ys)
                    if best is None or ssr < best[0]:
                        best = (ssr, (coef[0], T2, p, tau_rev, tau_w, coef[1]))
    return make_model("hahn", best[1])


def auto_init(data, kind: str, n_dips: int | None = None) -> FitModel:
    """Heuristic starting parameters for ``kind`` from the dataset alone."""
    x = np.asarray(data.x, dtype=float)
    y = np.asarray(data.y, dtype=float)
    if len(x) < MIN_POINTS:
        raise InitError(f"need at least {MIN_POINTS} points to initialize, got {len(x)}")
    if kind == "lorentzian_multi":
        return init_lorentzian(x, y, n_dips)
    if kind == "rabi":
        return _init_oscillation("rabi", x, y, lambda t, tau: np.exp(-t / tau))
    if kind == "ramsey":
        return _init_oscillation("ramsey", x, y, lambda t, tau: np.exp(-(t / tau) ** 2))
    if kind == "t1_exp":
        return init_t1(x, y)
    if kind == "hahn":
        return init_hahn(x, y)
    raise InitError(f"no initializer for model kind {kind!r}")
