"""Seeded random streams.

All randomness in the package goes through :func:`make_rng`, a PCG64 generator
keyed by ``(seed, stream)``. Gaussians are drawn with Box-Muller and Cauchy
variates with the inverse CDF, both on top of the generator's uniform doubles,
so the samplers are fixed independently of numpy's internal algorithms.
"""

import numpy as np

# named sub-streams so that, e.g., changing eval_latents_count never perturbs
# the training latent sequence
STREAM_INIT = 0
STREAM_TRAIN = 1
STREAM_EVAL = 2
STREAM_EQUIV = 3
STREAM_DATA = 4
STREAM_SEARCH = 5


def make_rng(seed, stream=0):
    """Return a PCG64 generator for ``(seed, stream)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


def uniform(rng, size=None):
    """Uniform doubles in [0, 1)."""
    return rng.random(size)


def normal(rng, size=None):
    """Standard normal draws via the Box-Muller transform."""
    u1 = 1.0 - rng.random(size)  # (0, 1], keeps log finite
    u2 = rng.random(size)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def cauchy(rng, scale=1.0, size=None):
    """Centered Cauchy draws via the inverse CDF ``scale * tan(pi (u - 1/2))``."""
    u = rng.random(size)
    return scale * np.tan(np.pi * (u - 0.5))
