"""Minimum average power versus the probability of the good state.

Adapting power to the channel state is never worse than a fixed power and
helps most when both states are common.  At the two ends of the sweep only
one state occurs, so both strategies coincide at the closed-form values
5 and 1.25.  Writes a CSV and a small SVG next to this script.
"""

from pathlib import Path

import numpy as np

from fading_stab import Channel, FadingProcess, Plant, Problem, min_power, min_power_uniform
from fading_stab.cli import write_svg

out = Path(__file__).parent / "output"
out.mkdir(exist_ok=True)

grid = np.round(np.linspace(0, 1, 21), 12)
adapted, uniform = [], []
for pi1 in grid:
    p = Problem(Plant([1.5]), Channel([1.0, 0.5], 1.0, 20), FadingProcess.iid([pi1, 1 - pi1]))
    sol = min_power(p)
    adapted.append(sol.p_star)
    uniform.append(min_power_uniform(p).p_star)
    print(f"pi_1={pi1:4.2f}  adapted={sol.p_star:8.5f}  uniform={uniform[-1]:8.5f}  "
          f"per-state={np.round(sol.policy.per_state, 4)}")

gain = max(u - a for a, u in zip(adapted, uniform))
print(f"largest saving from adaptation: {gain:.4f}")

with open(out / "figure1.csv", "w") as fh:
    fh.write("pi_1,adapted_p_star,uniform_p_star\n")
    for row in zip(grid, adapted, uniform):
        fh.write(",".join(f"{v:.12g}" for v in row) + "\n")
write_svg(out / "figure1.svg", grid, adapted, uniform, "pi_1")
print(f"wrote {out / 'figure1.csv'} and {out / 'figure1.svg'}")
