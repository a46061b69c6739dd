"""
Failure modes of low-rank and self-referential factorizations
=============================================================

Three small constructions on the three-state CMP: a reward invisible to a
rank-2 backward map, the best achievable rank-d fit, and a pair of FB tables
with the same product whose Bellman backups differ.
"""

# %%
import numpy as np

from fblab import analysis as A
from fblab.cmp import successor_measure, three_state_cmp, uniform_policy, uniform_rho
from fblab.latent import reward_to_latent
from fblab.rng import make_rng

cmp = three_state_cmp()
rho = uniform_rho(cmp)
target = successor_measure(cmp, uniform_policy(cmp)) / rho

# %% [markdown]
# A rank-2 backward map has a 7-dimensional null space. Any reward in it maps to
# the zero latent, yet its optimal Q can be made arbitrarily large.

# %%
b = np.linalg.svd(target)[2][:2]
scale = A.null_reward_scale(b, rho, cmp, 100.0)
r_null, q_err = A.null_reward_attack(b, rho, cmp, scale)
print("null reward:", np.round(r_null, 3))
print("latent norm:", np.linalg.norm(reward_to_latent(b, r_null, rho)), "Q error:", q_err)

# %% [markdown]
# The Frobenius loss of any rank-d model is bounded below by the tail singular
# values of the target.

# %%
for d in range(1, cmp.num_pairs + 1):
    print(f"d={d}: floor {A.eckart_young_floor(target, d):.6g}")

# %% [markdown]
# Two forward-backward pairs with identical products can have different backups,
# because the backup's policy is read from the forward table itself.

# %%
w = A.noncontraction_witness(cmp, rho, make_rng(0, 0))
print(f"tries {w.tries}, state {w.state}")
print(f"|F1 B1 - F2 B2| = {w.rhs_norm:.2e}, |T(F1 B1) - T(F2 B2)| = {w.lhs_norm:.3f}")
