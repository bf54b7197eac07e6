"""How unstable can a plant be before a fading link stops keeping up?

A scalar plant is driven over a channel that is good (gain 1) or poor
(gain 0.5) with equal odds each block of 20 uses, with powers 5 and 4.7.
Stability holds exactly when the plant's growth is outrun by the average
contraction the link delivers, so we can compute the largest tolerable
eigenvalue directly and then probe either side of it.
"""

from fading_stab import Channel, FadingProcess, Plant, PowerPolicy, Problem, check, lambda_max

channel = Channel([1.0, 0.5], noise_var=1.0, block_len=20)
fading = FadingProcess.iid([0.5, 0.5])
policy = PowerPolicy([5.0, 4.7])

limit = lambda_max(Problem(Plant([1.5]), channel, fading), policy)
print(f"largest stabilizable |lambda|: {limit:.6f}")

for lam in (1.3, 1.45, limit - 1e-6, limit + 1e-6, 1.6):
    v = check(Problem(Plant([lam]), channel, fading), policy)
    print(f"  lambda={lam:.6f}  margin={v.margin:+.3e}  stabilizable={v.stabilizable}")

# The poor state alone would not be enough: with it every block the limit drops.
poor_only = Problem(Plant([1.5]), channel, FadingProcess.iid([0.0, 1.0]))
print(f"poor state every block: {lambda_max(poor_only, policy):.4f}")
