"""Latent priors, preprocessing, and the reward <-> latent maps."""

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, InversionError, NumericError

CAUCHY_SCALE = 0.5
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class LatentBatch:
    """``n x d`` latents with the prior they came from."""

    z: np.ndarray
    variant: str
    preprocessed: bool = False

    def __len__(self):
        return self.z.shape[0]

    @property
    def dim(self):
        return self.z.shape[1]


def _directions(rng, d, n):
    x = rngmod.normal(rng, (n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def sample_prior(d, n, variant, rng):
    """Draw ``n`` latents of dimension ``d``.

    ``sphere``: ``sqrt(d) x / |x|`` with ``x ~ N(0, I)``.
    ``cauchy_scaled``: the same direction scaled by ``u ~ Cauchy(0, 0.5)``.
    """
    if d < 1 or n < 1:
        raise ConfigError("latent dimension and count must be >= 1")
    dirs = _directions(rng, d, n)
    if variant == "sphere":
        z = np.sqrt(d) * dirs
    elif variant == "cauchy_scaled":
        u = rngmod.cauchy(rng, CAUCHY_SCALE, (n, 1))
        z = np.sqrt(d) * u * dirs
    else:
        raise ConfigError(f"unknown prior variant {variant!r}")
    return LatentBatch(z, variant)


def preprocess_latent(z):
    """Map R^d into the open ball of radius sqrt(d): ``z / sqrt(1 + |z|^2 / d)``."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NumericError("latent must be finite")
    d = z.shape[-1]
    return z / np.sqrt(1.0 + np.sum(z * z, axis=-1, keepdims=True) / d)


def preprocess_batch(batch):
    return LatentBatch(preprocess_latent(batch.z), batch.variant, True)


def reward_to_latent(b, r, rho):
    """``z_r = B (r * rho)``; ``r`` may be a batch ``(..., n)``."""
    b = np.asarray(b, dtype=float)
    r = np.asarray(r, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if r.shape[-1] != b.shape[1] or rho.shape != (b.shape[1],):
        raise ConfigError(f"shape mismatch: B {b.shape}, r {r.shape}, rho {rho.shape}")
    return (r * rho) @ b.T


def latent_to_reward(b, z, rho):
    """Invert :func:`reward_to_latent` for square invertible ``B``: ``(B^-1 z) / rho``."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != b.shape[1]:
        raise InversionError(f"B must be square to recover rewards, got {b.shape}")
    cond = np.linalg.cond(b)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise InversionError(f"B is ill-conditioned (cond={cond:.3g})")
    z = np.asarray(z, dtype=float)
    x = np.linalg.solve(b, z.T).T if z.ndim > 1 else np.linalg.solve(b, z)
    return x / np.asarray(rho, dtype=float)


def z_one(b, rho):
    """Latent of the constant reward 1."""
    return reward_to_latent(b, np.ones(np.asarray(b).shape[1]), rho)


def reward_weighting(rewards, tau_reward):
    """Softmax-weighted rewards ``w_i r_i`` with ``w = softmax(tau_reward * r)``."""
    if tau_reward <= 0:
        raise ConfigError("tau_reward must be positive")
    r = np.asarray(rewards, dtype=float)
    if not np.all(np.isfinite(r)):
        raise NumericError("rewards must be finite")
    x = tau_reward * (r - r.max())
    w = np.exp(x)
    w /= w.sum()
    return w * r


def backward_latents(b, columns):
    """Rescaled backward columns ``sqrt(d) B[:, i] / |B[:, i]|`` as latents."""
    b = np.asarray(b, dtype=float)
    cols = b[:, np.asarray(columns)].T
    d = b.shape[0]
    norms = np.linalg.norm(cols, axis=1, keepdims=True)
    return LatentBatch(np.sqrt(d) * cols / np.where(norms > 0, norms, 1.0), "backward")


def mix_latents(prior, derived, p, rng):
    """Row-wise mixture: each row comes from ``derived`` w.p. ``p``, else ``prior``."""
    if prior.z.shape != derived.z.shape:
        raise ConfigError(f"latent batches differ in shape: {prior.z.shape} vs {derived.z.shape}")
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"mixing probability must be in [0, 1], got {p}")
    pick = rng.random(len(prior)) < p
    return LatentBatch(np.where(pick[:, None], derived.z, prior.z), "mixed")
