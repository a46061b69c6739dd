"""
Successor measures on the three-state CMP
=========================================

Builds the normalized successor measure of the uniform policy, reads Q-values
off it for a few rewards, and shows that its truncated SVD is an exact one-step
forward-backward factorization. Run with ``python notebooks/01_successor_measures.py``.
"""

# %%
import numpy as np

from fblab.cmp import (
    one_step_improved_policy, q_from_successor, successor_measure, three_state_cmp,
    uniform_policy, uniform_rho, value_iteration,
)
from fblab.latent import reward_to_latent
from fblab.models import ground_truth_onestep, q_prediction

np.set_printoptions(precision=4, suppress=True)

cmp = three_state_cmp()
beta = uniform_policy(cmp)
rho = uniform_rho(cmp)
print(f"{cmp.num_states} states x {cmp.num_actions} actions, gamma {cmp.gamma}")

# %% [markdown]
# Rows are indexed by the starting pair ``s*|A| + a`` and sum to one: each row is
# a discounted distribution over future state-action pairs.

# %%
m = successor_measure(cmp, beta)
print("row sums:", m.sum(axis=1))
print("singular values:", np.linalg.svd(m, compute_uv=False))

# %% [markdown]
# Multiplying by a reward vector gives the (1 - gamma)-scaled Q-function. Value
# iteration on the same policy agrees to solver tolerance.

# %%
r = np.zeros(cmp.num_pairs)
r[2 * cmp.num_actions] = 1.0  # reward for any action taken in state 2
q = q_from_successor(m, r)
print("Q from the measure:", q)
print("max gap to value iteration:", np.max(np.abs(q - value_iteration(cmp, r, beta))))

# %% [markdown]
# The SVD of ``M / rho`` splits into forward and backward tables. Mapping the
# reward to a latent and back through the forward table recovers the same Q.

# %%
gt = ground_truth_onestep(cmp, beta, rho)
z = reward_to_latent(gt.params["b"], r, rho)
print("latent:", z)
print("Q from forward x latent:", q_prediction(gt, z))
print("one-step improved policy:\n", one_step_improved_policy(cmp, beta, r))
