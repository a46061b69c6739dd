"""
One-step FB against FB on the three-state CMP
=============================================

Trains both algorithms for a few thousand steps with the default didactic
hyperparameters and prints the evaluation metrics side by side. The full
100k-step runs behind the acceptance suite live in ``runs/`` once
``python tests/run_cache.py`` has populated them; if present they are
summarized at the end.
"""

# %%
import os

import numpy as np

from fblab import harness as H
from fblab.errors import ConfigError
from fblab.training import TrainConfig

STEPS = 3000

# %% [markdown]
# Each evaluation row holds the training loss and four metrics computed on a
# fixed set of prior latents.

# %%
records = {}
for algo in ("onestep_fb", "fb"):
    exp = H.ExperimentConfig(algo=algo, train=TrainConfig(steps=STEPS, eval_interval=1000, eval_latents_count=200))
    records[algo] = H.run_config(exp, os.path.join("runs", "demo", algo)).records

print(H.METRICS_HEADER)
for algo, recs in records.items():
    print(f"# {algo}")
    for rec in recs:
        print(H.format_row(rec))

# %% [markdown]
# With its latent-free forward table the one-step model fits a fixed target and
# its successor-measure error keeps falling; the FB model chases a target that
# moves with its own policy.

# %%
root = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "runs")
for name in ("onestep_three_state", "fb_three_state", "onestep_five_state", "fb_five_state"):
    paths = [os.path.join(root, name, f"seed{k}", "metrics.csv") for k in range(8)]
    paths = [p for p in paths if os.path.exists(p)]
    if not paths:
        continue
    try:
        agg = H.aggregate(paths)
    except ConfigError as exc:  # runs still in progress have shorter step grids
        print(f"{name}: {exc}")
        continue
    last = -1
    print(f"{name} ({len(paths)} seeds) step {int(agg['step'][last])}: "
          f"eps_smr {agg['eps_smr_mean'][last]:.3e} +- {np.nan_to_num(agg['eps_smr_std'][last]):.1e}, "
          f"eps_equiv {agg['eps_equiv_mean'][last]:.3e}")
