# %% [markdown]
# # Three-level reduction at weak pumping
#
# Below about 10 kHz the excited and metastable levels empty in nanoseconds
# while the ground populations move on millisecond scales. Slaving the fast
# levels gives a ground-only rate model.

# %%
import numpy as np

from nvwb.effective import eliminate, embed, propagate_effective, validate_equivalence
from nvwb.kinetics import RateTable, build_rate_matrix, propagate, thermal_state
from nvwb.readout import PhaseProtocol

# %%
table = RateTable.default(eta=5e3)
rates = eliminate(table)
np.set_printoptions(precision=4)
print("transfer rates i -> j (Hz):")
print(rates.transfer)
print("net loss per level (Hz):", rates.net_loss)

# %% [markdown]
# Full and reduced propagation over one 3.2 ms init phase.

# %%
times = np.linspace(0, 3.2e-3, 200)
full = propagate(build_rate_matrix(table), thermal_state(), times)
reduced = embed(propagate_effective(rates, [1 / 3] * 3, times))
gap = np.abs(full.states[:, :3] - reduced.states[:, :3]).max()
print(f"max ground-population gap {gap:.2e}; final ms=0 population {reduced.final[0]:.3f}")

# %%
for eta in (1e3, 5e3, 10e3, 0.0):
    d = validate_equivalence(RateTable.default(eta=eta), PhaseProtocol.default(eta))
    print(f"eta={eta:7.0f} Hz  discrepancy {d:.2e}")
