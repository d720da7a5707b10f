# %% [markdown]
# # Contrast versus camera integration time
#
# The camera integrates photoluminescence over a window `w` after the laser
# switches on. Spin polarization only shows up in the first part of that
# window, so the contrast between a thermal start and a polarized start
# depends strongly on `w`. Here we look at a strong pump (10 MHz) and a
# weak one (5 kHz).

# %%
import numpy as np

from nvwb.kinetics import RateTable, pl_rate
from nvwb.readout import (PhaseProtocol, contrast_curve, contrast_decay_time,
                          multiscale_windows, run_protocol)

# %% [markdown]
# ## PL during the init and readout phases (strong pump)

# %%
eta = 10e6
table = RateTable.default(eta=eta)
fine = np.linspace(1e-9, 2e-6, 4000)
init, wait, readout = run_protocol(table, PhaseProtocol.default(eta),
                                   extra_times={0: fine, 2: fine})

r = pl_rate(readout.states, table)
k = np.argmax(r)
print(f"readout peak {r[k] / 1e6:.2f} Mcps at {readout.times[k] * 1e9:.0f} ns")
i_pl = pl_rate(init.states, table)
sel = np.flatnonzero((init.times > 50e-9) & (init.times < 1e-6))
j = sel[np.argmin(i_pl[sel])]
print(f"init dip {i_pl[j] / 1e6:.2f} Mcps at {init.times[j] * 1e9:.0f} ns, "
      f"steady {i_pl[-1] / 1e6:.2f} Mcps")

# %% [markdown]
# ## Contrast curves
#
# Windows are log-spaced so both the ns and the ms scale are resolved.

# %%
curves = {}
for eta, w_max in ((10e6, 5e-6), (5e3, 3.2e-3)):
    curve = contrast_curve(RateTable.default(eta=eta), PhaseProtocol.default(eta),
                           multiscale_windows(w_max))
    curves[eta] = curve
    k = curve.extremum_index()
    print(f"eta={eta:8.0f} Hz  extremum {100 * curve.contrast[k]:6.2f}% "
          f"at {curve.integration_times[k] * 1e6:8.3f} us, "
          f"decay {contrast_decay_time(curve) * 1e6:9.2f} us")

print("weak pump, 500 us window:", f"{100 * curves[5e3].at(500e-6):.2f}%")

# %% [markdown]
# The extremum moves by roughly an order of magnitude while the decay of
# the contrast moves by three: a weak pump is slower to polarize but the
# polarization it builds survives a much longer exposure.
#
# The curves go out as CSV for plotting elsewhere.

# %%
with open("contrast_weak.csv", "w") as fh:
    fh.write(curves[5e3].to_csv())
