"""Full-length training runs shared by the acceptance tests.

Runs live under ``runs/<config name>/seed<k>/`` next to the package. A stored run
is reused only if its resolved config matches and a fresh replay of the first
``REPLAY_STEPS`` steps reproduces the stored metrics rows byte for byte, so a
cache written by older code is detected and recomputed.

Pre-populate everything (takes hours for the FB runs on one CPU)::

    python tests/run_cache.py
"""

import os
import sys
import tempfile
from dataclasses import replace

from fblab import harness as H

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")
RUNS = os.environ.get("FBLAB_RUNS", os.path.join(ROOT, "runs"))
REPLAY_STEPS = 1000
SEEDS = tuple(range(8))


def run_dir(name, seed):
    return os.path.join(RUNS, name, f"seed{seed}")


def _config(name, seed):
    exp = H.load_config(os.path.join(CONFIGS, f"{name}.ini"))
    exp.train.seed = seed
    return exp


def _complete(exp, out):
    metrics = os.path.join(out, "metrics.csv")
    if not (os.path.exists(metrics) and os.path.exists(os.path.join(out, "final.fbckpt"))):
        return False
    resolved = os.path.join(out, "config.resolved")
    if not os.path.exists(resolved):
        return False
    with open(resolved) as fh:
        if fh.read() != H.format_config(replace(exp, output_dir=out)):
            return False
    with open(metrics) as fh:
        rows = fh.read().splitlines()
    return rows[-1].split(",")[0] == str(exp.train.steps)


def _replay_matches(exp, out):
    steps = min(REPLAY_STEPS, exp.train.steps)
    short = replace(exp, train=replace(exp.train, steps=steps))
    with tempfile.TemporaryDirectory() as tmp:
        H.run_config(short, tmp)
        with open(os.path.join(tmp, "metrics.csv")) as fh:
            fresh = fh.read().splitlines()
    with open(os.path.join(out, "metrics.csv")) as fh:
        stored = fh.read().splitlines()
    return stored[: len(fresh)] == fresh


def ensure_run(name, seed, verify=True):
    """Return the metrics of ``name``/``seed``, training it if no valid stored run exists."""
    exp = _config(name, seed)
    out = run_dir(name, seed)
    if not (_complete(exp, out) and (not verify or _replay_matches(exp, out))):
        H.run_config(exp, out)
    return H.read_metrics(os.path.join(out, "metrics.csv"))


ALL_RUNS = (
    [("onestep_three_state", s) for s in SEEDS]
    + [("onestep_five_state", s) for s in SEEDS]
    + [(f"onestep_three_state_d{d}", 0) for d in (1, 2, 4)]
    + [("fb_three_state", s) for s in SEEDS]
    + [("fb_five_state", s) for s in SEEDS]
)


if __name__ == "__main__":
    names = sys.argv[1:]
    for name, seed in ALL_RUNS:
        if names and name not in names:
            continue
        ensure_run(name, seed, verify=False)
        print(f"done {name} seed {seed}", flush=True)
