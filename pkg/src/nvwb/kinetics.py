"""Eight-level NV rate model.

Levels are numbered 1..8:

    1: 3A2 ms=0    2: 3A2 ms=-1    3: 3A2 ms=+1
    4: 3E  ms=0    5: 3E  ms=-1    6: 3E  ms=+1
    7: 1A1         8: 1E

Only the diagonal (population) sector of the master equation is carried, so
the dynamics is the linear ODE ``dP/dt = M @ P`` with a column-stochastic
generator ``M``. Everything is SI: seconds and Hz.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np
from scipy.linalg import expm
from scipy.sparse.csgraph import connected_components

from . import keyvalue
from .errors import (
    ConfigError,
    InvalidRateError,
    NonUniqueSteadyStateError,
    NumericError,
    ValidationError,
)

N_LEVELS = 8

LEVEL_NAMES = {
    1: "3A2 ms=0",
    2: "3A2 ms=-1",
    3: "3A2 ms=+1",
    4: "3E ms=0",
    5: "3E ms=-1",
    6: "3E ms=+1",
    7: "1A1",
    8: "1E",
}

# optical pumping edges, all driven at the same rate eta
PUMP_EDGES = ((1, 4), (2, 5), (3, 6))
# radiative edges that produce detected photons
RADIATIVE_EDGES = ((4, 1), (5, 2), (6, 3))
SPIN_LATTICE_EDGES = ((1, 2), (1, 3), (2, 1), (3, 1))

DEFAULT_GAMMA_SL = 65.0

# largest probability drift propagate() accepts as roundoff before renormalizing
ROUNDOFF_DRIFT = 1e-6

DEFAULT_RATES = {
    (4, 1): 0.075e9,
    (5, 2): 0.08e9,
    (6, 3): 0.08e9,
    (4, 7): 0.0083e9,
    (5, 7): 0.062857e9,
    (6, 7): 0.062857e9,
    (7, 8): 1e9,
    (8, 1): 0.0032558e9,
    (8, 2): 0.001279e9,
    (8, 3): 0.001279e9,
}


def check_level(index: int) -> int:
    if isinstance(index, bool) or int(index) != index or not 1 <= index <= N_LEVELS:
        raise ValidationError(f"level index must be an integer in 1..{N_LEVELS}, got {index!r}")
    return int(index)


@dataclass(frozen=True)
class RateTable:
    """Transition rates ``k[i -> j]`` in Hz plus a uniform pump rate ``eta``.

    ``rates`` holds every non-pump transition; the pump edges 1->4, 2->5,
    3->6 are always taken from ``eta``. Missing entries are zero. Excited-state
    spin mixing (4<->5, 4<->6) may be supplied as ordinary entries.
    """

    rates: Mapping[tuple[int, int], float] = field(default_factory=dict)
    eta: float = 0.0

    def __post_init__(self):
        clean = {}
        for key, value in dict(self.rates).items():
            i, j = (check_level(k) for k in key)
            if i == j:
                raise InvalidRateError(f"self-transition k_{i}_{j} is not allowed")
            if (i, j) in PUMP_EDGES:
                raise InvalidRateError(f"k_{i}_{j} is a pump edge; set it through eta")
            value = float(value)
            if not math.isfinite(value) or value < 0:
                raise InvalidRateError(f"k_{i}_{j} must be finite and >= 0, got {value}")
            if value:
                clean[(i, j)] = value
        eta = float(self.eta)
        if not math.isfinite(eta) or eta < 0:
            raise InvalidRateError(f"eta must be finite and >= 0, got {eta}")
        object.__setattr__(self, "rates", MappingProxyType(dict(sorted(clean.items()))))
        object.__setattr__(self, "eta", eta)

    @classmethod
    def default(cls, eta: float = 0.0, gamma_sl: float = DEFAULT_GAMMA_SL) -> "RateTable":
        rates = dict(DEFAULT_RATES)
        rates.update({edge: gamma_sl for edge in SPIN_LATTICE_EDGES})
        return cls(rates, eta)

    def k(self, i: int, j: int) -> float:
        if (i, j) in PUMP_EDGES:
            return self.eta
        return self.rates.get((i, j), 0.0)

    def all_rates(self) -> dict[tuple[int, int], float]:
        out = dict(self.rates)
        if self.eta:
            out.update({edge: self.eta for edge in PUMP_EDGES})
        return out

    def with_eta(self, eta: float) -> "RateTable":
        return RateTable(self.rates, eta)

    def with_rates(self, **updates: float) -> "RateTable":
        """Copy with entries replaced, e.g. ``with_rates(k_4_7=1e7)``."""
        rates = dict(self.rates)
        for key, value in updates.items():
            rates[_parse_rate_key(key)] = value
        return RateTable(rates, self.eta)

    def with_gamma_sl(self, gamma_sl: float) -> "RateTable":
        rates = dict(self.rates)
        rates.update({edge: gamma_sl for edge in SPIN_LATTICE_EDGES})
        return RateTable(rates, self.eta)

    def to_text(self) -> str:
        items = [("eta", self.eta)]
        items += [(f"k_{i}_{j}", v) for (i, j), v in self.rates.items()]
        return keyvalue.dump(items)

    @classmethod
    def from_text(cls, text: str) -> "RateTable":
        """Parse ``k_i_j``, ``eta`` and ``gamma_sl`` keys; anything else is rejected.

        ``gamma_sl`` sets the four ground-state spin-lattice rates; explicit
        ``k_i_j`` entries override it.
        """
        rates: dict[tuple[int, int], float] = {}
        explicit: dict[tuple[int, int], float] = {}
        eta = 0.0
        for key, value in keyvalue.parse(text).items():
            if key == "eta":
                eta = keyvalue.to_float(key, value)
            elif key == "gamma_sl":
                g = keyvalue.to_float(key, value)
                rates.update({edge: g for edge in SPIN_LATTICE_EDGES})
            elif key.startswith("k_"):
                explicit[_parse_rate_key(key)] = keyvalue.to_float(key, value)
            else:
                raise ConfigError(f"unknown rate-table key {key!r}")
        rates.update(explicit)
        return cls(rates, eta)


def _parse_rate_key(key: str) -> tuple[int, int]:
    parts = key.split("_")
    if len(parts) != 3 or parts[0] != "k" or not (parts[1].isdigit() and parts[2].isdigit()):
        raise ConfigError(f"malformed rate key {key!r}; expected k_<i>_<j>")
    try:
        return check_level(int(parts[1])), check_level(int(parts[2]))
    except ValidationError as exc:
        raise ConfigError(f"{key}: {exc}") from None


@dataclass(frozen=True)
class PumpSpec:
    """Laser illumination: power density in W/um^2, spot area in um^2."""

    power_density: float
    diffraction_area: float = 0.22
    eta_per_mw: float = 30e6

    def __post_init__(self):
        for name in ("power_density", "diffraction_area", "eta_per_mw"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be > 0, got {v}")


def pump_rate_from_power_density(spec: PumpSpec) -> float:
    """Optical pumping rate (Hz) for a diffraction-limited spot."""
    power_mw = spec.power_density * spec.diffraction_area * 1e3
    return spec.eta_per_mw * power_mw


def gamma_sl_from_t1(t1: float) -> float:
    """Symmetric spin-lattice rate reproducing a ground-state T1 (T1 = 1/(3 gamma))."""
    if not t1 > 0:
        raise ValidationError(f"t1 must be > 0, got {t1}")
    return 1.0 / (3.0 * t1)


def build_rate_matrix(table: RateTable) -> np.ndarray:
    """Generator ``M`` with ``M[j, i] = k[i -> j]`` (0-based storage) and zero column sums."""
    M = np.zeros((N_LEVELS, N_LEVELS))
    for (i, j), k in table.all_rates().items():
        if k < 0:
            raise InvalidRateError(f"k_{i}_{j} = {k} < 0")
        M[j - 1, i - 1] += k
    # diagonal from the off-diagonal column sums, so columns sum to exactly zero
    np.fill_diagonal(M, 0.0)
    np.fill_diagonal(M, -M.sum(axis=0))
    return M


def as_state(p, n: int = N_LEVELS, atol: float = 1e-9) -> np.ndarray:
    """Validate a population vector and return it as a read-only float array."""
    p = np.array(p, dtype=float)
    if p.shape != (n,):
        raise ValidationError(f"population state must have shape ({n},), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError("population state contains non-finite entries")
    if p.min() < -atol or p.max() > 1 + atol:
        raise ValidationError("populations must lie in [0, 1]")
    if abs(p.sum() - 1.0) > atol:
        raise ValidationError(f"populations must sum to 1, got {p.sum()!r}")
    p.setflags(write=False)
    return p


def thermal_state(n: int = N_LEVELS) -> np.ndarray:
    """Equal population on the three ground sublevels, nothing elsewhere."""
    p = np.zeros(n)
    p[:3] = 1.0 / 3.0
    return as_state(p, n)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        s = np.array(self.states, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise ValidationError("trajectory needs at least two time samples")
        if s.ndim != 2 or s.shape[0] != len(t):
            raise ValidationError("states must be (len(times), n_levels)")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("times must be strictly increasing")
        if not np.all(np.isfinite(s)) or s.min() < -1e-9 or s.max() > 1 + 1e-9:
            raise ValidationError("states must be finite probabilities")
        if np.max(np.abs(s.sum(axis=1) - 1.0)) > 1e-9:
            raise ValidationError("every state must sum to 1")
        t.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    @property
    def n_levels(self) -> int:
        return self.states.shape[1]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, table: RateTable | None = None) -> str:
        """CSV with header ``t_s,p1,...,pN,pl_hz`` at full float precision."""
        cols = ["t_s"] + [f"p{i}" for i in range(1, self.n_levels + 1)] + ["pl_hz"]
        if table is not None and self.n_levels == N_LEVELS:
            pl = pl_rate(self.states, table)
        else:
            pl = np.zeros(len(self.times))
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for t, row, r in zip(self.times, self.states, pl):
            buf.write(",".join(repr(float(v)) for v in (t, *row, r)) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Trajectory":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = lines[0].split(",")
        if header[0] != "t_s" or header[-1] != "pl_hz":
            raise ConfigError(f"unexpected trajectory header {lines[0]!r}")
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        return cls(data[:, 0], data[:, 1:-1])


def _check_generator(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"generator must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericError("generator matrix has non-finite entries")
    return M


def propagate(M, p0, times, renormalize: bool = True) -> Trajectory:
    """Exact solution of ``dP/dt = M P`` sampled at ``times``.

    Each sample is ``expm(M * (t - t0)) @ p0`` evaluated independently, so no
    error accumulates along the grid. With rates near 1e9 Hz and millisecond
    times the exponential loses about 1e-9 of the total probability to
    roundoff; ``renormalize`` rescales each sample back to unit sum after
    checking that the drift is only roundoff.
    """
    M = _check_generator(M)
    n = M.shape[0]
    p0 = as_state(p0, n)
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or len(t) < 2:
        raise ValidationError("need at least two time samples")
    if not np.all(np.isfinite(t)):
        raise NumericError("non-finite time sample")
    if t[0] < 0 or np.any(np.diff(t) <= 0):
        raise ValidationError("times must be strictly increasing and start at >= 0")
    dt = t - t[0]
    # levels unreachable from the initial support stay empty; dropping them
    # keeps idle GHz-scale blocks out of the exponential
    live = _reachable(M, np.flatnonzero(p0 > 0))
    states = np.zeros((len(t), n))
    sub = M[np.ix_(live, live)]
    if not sub.any():
        states[:, live] = p0[live]
    else:
        props = expm(sub[None, :, :] * dt[:, None, None])
        states[:, live] = props @ p0[live]
    if not np.all(np.isfinite(states)):
        raise NumericError("propagation produced non-finite populations")
    # roundoff can leave entries a few ulp outside [0, 1]
    np.clip(states, 0.0, 1.0, out=states)
    if renormalize:
        total = states.sum(axis=1)
        if np.max(np.abs(total - 1.0)) > ROUNDOFF_DRIFT:
            raise NumericError("propagation lost probability beyond roundoff")
        states /= total[:, None]
    return Trajectory(t, states)


def _reachable(M: np.ndarray, start) -> np.ndarray:
    seen = set(int(s) for s in start)
    frontier = list(seen)
    while frontier:
        i = frontier.pop()
        for j in np.flatnonzero(M[:, i] > 0):
            if j != i and j not in seen:
                seen.add(int(j))
                frontier.append(int(j))
    return np.array(sorted(seen), dtype=int)


def _closed_classes(M: np.ndarray) -> list[np.ndarray]:
    adj = (M > 0).astype(int)
    np.fill_diagonal(adj, 0)
    # adj[j, i] > 0 means an edge i -> j; csgraph wants adj[i, j] for i -> j
    n_comp, labels = connected_components(adj.T, directed=True, connection="strong")
    closed = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        outside = np.setdiff1d(np.arange(M.shape[0]), members)
        if not adj[np.ix_(outside, members)].any():
            closed.append(members)
    return closed


def _gth_stationary(Q: np.ndarray) -> np.ndarray:
    """Grassmann-Taksar-Heyman elimination on an irreducible generator.

    ``Q[i, j]`` is the rate i -> j (row convention). Only off-diagonal rates
    enter, so the result carries no cancellation error.
    """
    A = np.array(Q, dtype=float)
    n = A.shape[0]
    np.fill_diagonal(A, 0.0)
    for k in range(n - 1, 0, -1):
        s = A[k, :k].sum()
        A[:k, k] /= s
        A[:k, :k] += np.outer(A[:k, k], A[k, :k])
        np.fill_diagonal(A[:k, :k], 0.0)
    pi = np.zeros(n)
    pi[0] = 1.0
    for k in range(1, n):
        pi[k] = pi[:k] @ A[:k, k]
    return pi / pi.sum()


def steady_state(M) -> np.ndarray:
    """Unique stationary population of the generator ``M``.

    Raises NonUniqueSteadyStateError when the transition graph has more than
    one closed class (e.g. disconnected levels or the all-zero matrix).
    """
    M = _check_generator(M)
    closed = _closed_classes(M)
    if len(closed) != 1:
        raise NonUniqueSteadyStateError(
            f"generator has {len(closed)} closed classes; steady state is not unique"
        )
    members = closed[0]
    p = np.zeros(M.shape[0])
    if len(members) == 1:
        p[members] = 1.0
    else:
        # M is column convention (M[j, i] = rate i -> j); GTH wants rows
        sub = M[np.ix_(members, members)].T
        p[members] = _gth_stationary(sub)
    return as_state(p, M.shape[0])


def pl_rate(state, table: RateTable):
    """Photon emission rate ``k41 P4 + k52 P5 + k63 P6`` in Hz.

    Accepts one state or an ``(n_samples, 8)`` array.
    """
    P = np.asarray(state, dtype=float)
    k = np.array([table.k(i, j) for i, j in RADIATIVE_EDGES])
    out = P[..., 3:6] @ k
    return float(out) if np.ndim(out) == 0 else out
