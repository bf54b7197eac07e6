"""Memory in the channel, and plants with several unstable modes.

When good and bad blocks cluster, the i.i.d. average is no longer the
right yardstick: the spectral radius of the weighted transition matrix is.
A vector plant shares each block among its modes in equal slots, and the
optimal powers balance the slots so each mode gets what its growth needs.
"""

import numpy as np

from fading_stab import (Channel, FadingProcess, Plant, PowerPolicy, Problem, check, lyapunov_feasible,
                         min_power, tdma_residual)

channel = Channel([1.0, 0.5], 1.0, 20)
policy = PowerPolicy([5.0, 4.7])

for stay in (0.5, 0.8, 0.95):
    Q = [[stay, 1 - stay], [1 - stay, stay]]
    p = Problem(Plant([1.49]), channel, FadingProcess.markov(Q))
    v, lyap = check(p, policy), lyapunov_feasible(p, policy)
    print(f"stay={stay:.2f}  margin={v.margin:+.4f}  lyapunov certificate found={lyap.feasible}")
    print(f"          min average power {min_power(p).p_star:.4f}")

vec = Problem(Plant([1.2, 1.4]), Channel([1.0, 0.5], 1.0, 20), FadingProcess.iid([0.5, 0.5]))
sol = min_power(vec)
print(f"two-mode plant: P* = {sol.p_star:.4f}")
print("per-slot powers:\n", np.round(sol.policy.per_slot, 4))
print(f"slot balance residual: {tdma_residual(vec.plant, vec.channel, sol.policy):.2e}")
