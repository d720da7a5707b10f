"""Effective three-level model for weak optical pumping.

When the pump rate is far below the excited-state decay rates, the excited
triplet and both singlets follow the ground populations adiabatically and can
be eliminated. What remains is a 3x3 rate model on the ground sublevels with
pump-induced transfer rates

    return_i      = k[i->i+3] / D_i * (k[i+3->i] + b_i * k[i+3->7])
    transfer_i_j  = k[i->i+3] * k[i+3->7] / D_i * b_j          (i != j)

with ``D_i = k[i+3->i] + k[i+3->7]`` and singlet branching
``b_j = k[8->j] / (k[8->1] + k[8->2] + k[8->3])``. ``transfer[i, j]`` is the
rate from ground level i to ground level j; ``return_i`` is the part of the
pump flux out of level i that comes back to i.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import keyvalue
from .errors import ConfigError, DegenerateTableError, NumericError, PreconditionError
from .kinetics import (
    N_LEVELS,
    SPIN_LATTICE_EDGES,
    RateTable,
    Trajectory,
    as_state,
    propagate,
    steady_state,
)
from .readout import PhaseProtocol, run_protocol

WEAK_PUMP_RATIO = 1e-3

# edges the elimination formulas account for (besides pumping)
_MODELED = {
    (4, 1), (5, 2), (6, 3), (4, 7), (5, 7), (6, 7), (7, 8), (8, 1), (8, 2), (8, 3),
    *SPIN_LATTICE_EDGES, (2, 3), (3, 2),
}


@dataclass(frozen=True)
class EffectiveRates:
    """Effective ground-manifold rates (Hz), levels indexed 1..3 in names, 0..2 in arrays."""

    pump: np.ndarray            # k[i -> i+3]
    returning: np.ndarray       # k~[i -> i]
    transfer: np.ndarray        # transfer[i, j], zero diagonal
    spin_lattice: np.ndarray    # base ground rates sl[i, j], zero diagonal
    eta: float = 0.0

    def __post_init__(self):
        for name in ("pump", "returning", "transfer", "spin_lattice"):
            a = np.array(getattr(self, name), dtype=float)
            if np.any(a < 0) or not np.all(np.isfinite(a)):
                raise NumericError(f"{name} must be finite and >= 0")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def net_loss(self) -> np.ndarray:
        """Pump flux out of each level that does not come straight back."""
        return self.pump - self.returning

    def generator(self) -> np.ndarray:
        """3x3 generator in the column convention of :func:`build_rate_matrix`."""
        G = (self.transfer + self.spin_lattice).T.copy()
        sl_out = self.spin_lattice.sum(axis=1)
        for i in range(3):
            G[i, i] = -(sl_out[i] + self.pump[i] - self.returning[i])
        return G

    def to_text(self) -> str:
        items = [("eta", self.eta)]
        items += [(f"ktilde_{i + 1}_{i + 1}", float(self.returning[i])) for i in range(3)]
        items += [(f"ktilde_{i + 1}_{j + 1}", float(self.transfer[i, j]))
                  for i in range(3) for j in range(3) if i != j]
        items += [(f"pump_{i + 1}", float(self.pump[i])) for i in range(3)]
        items += [(f"k_{i + 1}_{j + 1}", float(self.spin_lattice[i, j]))
                  for i in range(3) for j in range(3) if i != j]
        return keyvalue.dump(items)

    @classmethod
    def from_text(cls, text: str) -> "EffectiveRates":
        pump, ret = np.zeros(3), np.zeros(3)
        transfer, sl = np.zeros((3, 3)), np.zeros((3, 3))
        eta = 0.0
        for key, value in keyvalue.parse(text).items():
            v = keyvalue.to_float(key, value)
            parts = key.split("_")
            try:
                if key == "eta":
                    eta = v
                elif parts[0] == "pump" and len(parts) == 2:
                    pump[int(parts[1]) - 1] = v
                elif parts[0] in ("ktilde", "k") and len(parts) == 3:
                    i, j = int(parts[1]) - 1, int(parts[2]) - 1
                    if not (0 <= i < 3 and 0 <= j < 3):
                        raise IndexError
                    if parts[0] == "k":
                        if i == j:
                            raise IndexError
                        sl[i, j] = v
                    elif i == j:
                        ret[i] = v
                    else:
                        transfer[i, j] = v
                else:
                    raise KeyError
            except (KeyError, IndexError, ValueError):
                raise ConfigError(f"unknown effective-rate key {key!r}") from None
        return cls(pump, ret, transfer, sl, eta)


def _ground_spin_lattice(table: RateTable) -> np.ndarray:
    sl = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            if i != j:
                sl[i, j] = table.k(i + 1, j + 1)
    return sl


def eliminate(table: RateTable) -> EffectiveRates:
    """Adiabatically eliminate levels 4..8 from ``table``.

    Warns when the pump is not at least three orders of magnitude below the
    ms=0 radiative rate, where the reduction stops being accurate.
    """
    unmodeled = set(table.rates) - _MODELED
    if unmodeled:
        raise PreconditionError(
            f"elimination does not cover transitions {sorted(unmodeled)}")
    k = table.k
    if table.eta >= WEAK_PUMP_RATIO * k(4, 1):
        warnings.warn(
            f"eta={table.eta:g} Hz is not << k41={k(4, 1):g} Hz; adiabatic elimination is inaccurate",
            stacklevel=2,
        )
    k8 = k(8, 1) + k(8, 2) + k(8, 3)
    if table.eta > 0 and (k8 == 0 or k(7, 8) == 0):
        raise DegenerateTableError("singlet levels have no decay path back to the ground state")
    branch = np.array([k(8, j) for j in (1, 2, 3)]) / k8 if k8 > 0 else np.zeros(3)

    pump = np.array([k(i, i + 3) for i in (1, 2, 3)])
    returning = np.zeros(3)
    transfer = np.zeros((3, 3))
    for i in range(3):
        rad, isc = k(i + 4, i + 1), k(i + 4, 7)
        denom = rad + isc
        if denom == 0:
            if pump[i] == 0:
                continue
            raise DegenerateTableError(f"level {i + 4} has no decay (k_{i+4}_{i+1} + k_{i+4}_7 = 0)")
        returning[i] = pump[i] / denom * (rad + branch[i] * isc)
        for j in range(3):
            if j != i:
                transfer[i, j] = pump[i] * isc / denom * branch[j]
    loss = pump - returning
    if np.any(loss < -1e-12 * np.maximum(pump, 1.0)):
        raise NumericError(f"negative net pump loss {loss}")
    returning = np.minimum(returning, pump)
    return EffectiveRates(pump, returning, transfer, _ground_spin_lattice(table), table.eta)


def propagate_effective(rates: EffectiveRates, p0, times) -> Trajectory:
    """Solve the three-level rate equations on ``times``."""
    return propagate(rates.generator(), as_state(p0, 3), times)


def embed(traj: Trajectory) -> Trajectory:
    """Pad a three-level trajectory to eight levels (excited levels empty)."""
    states = np.zeros((len(traj.times), N_LEVELS))
    states[:, :traj.n_levels] = traj.states
    return Trajectory(traj.times, states)


def effective_steady_state(rates: EffectiveRates) -> np.ndarray:
    return steady_state(rates.generator())


def validate_equivalence(table: RateTable, protocol: PhaseProtocol, p0=None) -> float:
    """Largest |P_full - P_eff| over every sample of every phase and levels 1..3.

    Both models start from the same ground populations and run the same phase
    grids; each effective phase starts from the previous effective final state.
    """
    for ph in protocol.phases:
        if ph.eta >= WEAK_PUMP_RATIO * table.k(4, 1):
            raise PreconditionError(
                f"phase {ph.label!r}: eta={ph.eta:g} Hz violates the weak-pump condition")
    full = run_protocol(table, protocol, p0)
    state = full[0].states[0][:3].copy()
    state /= state.sum()
    worst = 0.0
    for ph, traj in zip(protocol.phases, full):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rates = eliminate(table.with_eta(ph.eta))
        eff = propagate_effective(rates, state, traj.times)
        worst = max(worst, float(np.max(np.abs(traj.states[:, :3] - eff.states))))
        state = eff.final
    return worst

