"""Convergence metrics and the theory-verification checks.

Metrics are computed per latent in fixed-size chunks, optionally on a thread
pool (``FBLAB_THREADS``), and reduced in latent order, so the numbers do not
depend on the thread count.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cmp import (
    check_rho,
    fb_bellman_operator,
    greedy_policy,
    softmax_policy,
    successor_measure,
    value_iteration,
)
from .errors import InversionError, NumericError, SearchFailure, UsageError
from .grad import cayley
from .latent import latent_to_reward, z_one
from .models import scores
from .rng import normal, uniform

CHUNK = 128
PROB_FLOOR = 1e-12


@dataclass
class MetricsRecord:
    step: int
    loss: float
    eps_smr: float
    eps_q: float
    kl_policy: float
    eps_equiv: float

    FIELDS = ("step", "loss", "eps_smr", "eps_q", "kl_policy", "eps_equiv")

    def as_row(self):
        return [getattr(self, k) for k in self.FIELDS]


@dataclass
class WitnessRecord:
    """A rotation that leaves ``f b`` unchanged but changes the FB Bellman backup."""

    rotation_params: np.ndarray
    z: np.ndarray
    state: int
    lhs_norm: float
    rhs_norm: float
    f1: np.ndarray = field(repr=False)
    b1: np.ndarray = field(repr=False)
    tries: int = 0


def _threads():
    try:
        return max(1, int(os.environ.get("FBLAB_THREADS", "1")))
    except ValueError:
        return 1


def _per_latent(fn, z):
    """Apply ``fn`` to fixed-size chunks of ``z`` and concatenate in order."""
    z = np.atleast_2d(z)
    chunks = [z[i : i + CHUNK] for i in range(0, len(z), CHUNK)]
    workers = min(_threads(), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return np.concatenate(parts)


def _is_fb(model):
    return model.algo == "fb"


def eps_smr(model, cmp, z, rho, behavioral=None, tau=None):
    """Mean over latents of ``|F_z B - M^pi_z diag(rho)^-1|_F^2``.

    FB models use the softmax policy at the eval temperature; one-step models use
    the fixed ``behavioral`` policy, so their error does not depend on ``z``.
    """
    rho = check_rho(rho, cmp)
    b = model.backward_matrix()
    if not _is_fb(model):
        target = successor_measure(cmp, behavioral) / rho
        return float(np.sum((model.forward_matrix() @ b - target) ** 2))
    tau = model.tau_policy_eval if tau is None else tau

    def chunk(zc):
        f = model.forward_matrix(zc)
        pol = softmax_policy(np.einsum("knd,kd->kn", f, zc), tau, cmp.num_actions)
        target = successor_measure(cmp, pol) / rho
        return np.sum((f @ b - target) ** 2, axis=(-2, -1))

    return float(np.mean(_per_latent(chunk, z)))


def oracle_q(cmp, rewards, mode, behavioral=None):
    """Value-iteration Q-values: optimal (``mode='optimal'``) or behavioral."""
    if mode == "optimal":
        return value_iteration(cmp, rewards)
    if mode in ("behavioral", "one_step"):
        return value_iteration(cmp, rewards, policy=behavioral)
    raise UsageError(f"unknown mode {mode!r}")


def _default_mode(model):
    return "optimal" if _is_fb(model) else "behavioral"


def eps_q(model, cmp, z, rho, mode=None, behavioral=None):
    """Mean over latents of ``|F_z z - Q_r|^2`` with ``r = (B^-1 z) / rho``.

    Raises :class:`InversionError` when ``B`` is not square or is ill-conditioned.
    """
    mode = _default_mode(model) if mode is None else mode
    b = model.backward_matrix()
    latent_to_reward(b, np.zeros(b.shape[0]), rho)  # conditioning check up front

    def chunk(zc):
        q_hat = scores(model, zc) if _is_fb(model) else zc @ model.forward_matrix().T
        r = latent_to_reward(b, zc, rho)
        return np.sum((q_hat - oracle_q(cmp, r, mode, behavioral)) ** 2, axis=-1)

    return float(np.mean(_per_latent(chunk, z)))


def kl_divergence(p, q):
    """Row-wise ``KL(p || q)`` over the last axis with both floored at 1e-12."""
    p = np.maximum(p, PROB_FLOOR)
    q = np.maximum(q, PROB_FLOOR)
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


def kl_policy(model, cmp, z, rho, mode=None, behavioral=None, tau=None):
    """``E_z[(1/|S|) sum_s KL(pi_hat(.|s,z) || pi_ref(.|s,z))]``.

    ``pi_hat`` is the model's softmax policy and ``pi_ref`` the softmax of the oracle
    Q-values, both at the eval temperature.
    """
    mode = _default_mode(model) if mode is None else mode
    tau = getattr(model, "tau_policy_eval", 1.0) if tau is None else tau
    b = model.backward_matrix()

    def chunk(zc):
        q_hat = scores(model, zc) if _is_fb(model) else zc @ model.forward_matrix().T
        q_ref = oracle_q(cmp, latent_to_reward(b, zc, rho), mode, behavioral)
        kl = kl_divergence(
            softmax_policy(q_hat, tau, cmp.num_actions), softmax_policy(q_ref, tau, cmp.num_actions)
        )
        return kl.mean(axis=-1)

    return float(np.mean(_per_latent(chunk, z)))


def draw_equiv_params(rng, n):
    """``nu ~ U(0.5, 2)`` and ``xi ~ U(-1, 1)``, one pair per latent."""
    nu = 0.5 + 1.5 * uniform(rng, n)
    xi = -1.0 + 2.0 * uniform(rng, n)
    return nu, xi


def eps_equiv(model, z, rho, nu, xi):
    """Mean squared error between ``Q_hat(nu z + xi z_one)`` and ``nu Q_hat(z) + xi``.

    ``z_one`` comes from the model's own ``B``; the mean runs over latents and
    state-action pairs.
    """
    z = np.atleast_2d(z)
    zo = z_one(model.backward_matrix(), rho)
    idx = np.arange(len(z))

    def chunk(ic):
        zc = z[ic]
        shifted = nu[ic, None] * zc + xi[ic, None] * zo
        lhs = scores(model, shifted) if _is_fb(model) else shifted @ model.forward_matrix().T
        base = scores(model, zc) if _is_fb(model) else zc @ model.forward_matrix().T
        return np.mean((lhs - (nu[ic, None] * base + xi[ic, None])) ** 2, axis=-1)

    return float(np.mean(_per_latent(chunk, idx)))


def evaluate(model, cmp, z, rho, nu, xi, behavioral=None, step=0, loss=float("nan")):
    """All four metrics on a fixed latent batch.

    ``eps_q`` and ``kl_policy`` are NaN when ``B`` cannot be inverted.
    """
    smr = eps_smr(model, cmp, z, rho, behavioral)
    try:
        q = eps_q(model, cmp, z, rho, behavioral=behavioral)
        kl = kl_policy(model, cmp, z, rho, behavioral=behavioral)
    except InversionError:
        q = kl = float("nan")
    eq = eps_equiv(model, z, rho, nu, xi)
    return MetricsRecord(int(step), float(loss), smr, q, kl, eq)


# slack for the error accumulated by the dense solves that produce the matrices
RANK_SLACK = 64.0


def _rank_tol(s, shape):
    return (s[0] if s.size else 0.0) * max(shape) * np.finfo(float).eps * RANK_SLACK


def rank_report(matrix, tol=None):
    """Numerical rank and singular values.

    The default threshold is ``sigma_max * max(rows, cols) * machine_eps * 64``.
    """
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    s = np.linalg.svd(m, compute_uv=False)
    if tol is None:
        tol = _rank_tol(s, m.shape)
    return int(np.sum(s > tol)), s


def pinv(matrix):
    """SVD pseudoinverse with the :func:`rank_report` threshold."""
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    tol = _rank_tol(s, matrix.shape)
    inv_s = np.where(s > tol, 1.0 / np.where(s > tol, s, 1.0), 0.0)
    return (vt.T * inv_s) @ u.T


class TableFb:
    """Adapter exposing an arbitrary ``z -> F_z`` function and fixed ``B`` like a model."""

    algo = "fb"

    def __init__(self, forward_fn, b, n_actions, tau_policy_eval=1.0):
        self.forward_fn = forward_fn
        self.b = np.asarray(b, dtype=float)
        self.n_actions = n_actions
        self.tau_policy_eval = tau_policy_eval

    def forward_matrix(self, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return np.asarray(self.forward_fn(z), dtype=float)
        return np.stack([self.forward_fn(zi) for zi in z])

    def backward_matrix(self):
        return self.b


def pseudoinverse_consistency(model, cmp, probe_latents, rho, tau=None):
    """Largest Frobenius gap among ``F_z^+ M^pi_z diag(rho)^-1`` over probes and the model's ``B``.

    ``pi`` is greedy in ``F_z z`` when ``tau`` is None, else softmax at ``tau``.
    """
    rho = check_rho(rho, cmp)
    z = np.atleast_2d(np.asarray(probe_latents, dtype=float))
    recovered = []
    for zi in z:
        f = model.forward_matrix(zi)
        q = f @ zi
        pol = greedy_policy(q, cmp.num_actions) if tau is None else softmax_policy(q, tau, cmp.num_actions)
        recovered.append(pinv(f) @ (successor_measure(cmp, pol) / rho))
    mats = recovered + [model.backward_matrix()]
    worst = 0.0
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            worst = max(worst, float(np.linalg.norm(mats[i] - mats[j])))
    return worst


def null_reward_attack(b, rho, cmp, scale=1.0):
    """Reward in the null space of ``B diag(rho)``, so its latent is 0 and any model predicts Q = 0.

    Returns ``(r_null, |Q*_{r_null}|_inf)``.
    """
    b = np.atleast_2d(np.asarray(b, dtype=float))
    rho = check_rho(rho, cmp)
    d, n = b.shape
    if d >= n:
        raise UsageError(f"null-reward attack needs d < |S x A|, got d={d}, n={n}")
    rank, _ = rank_report(b * rho)
    _, _, vt = np.linalg.svd(b * rho)
    if rank >= n:
        raise NumericError("B diag(rho) has a trivial null space")
    r_null = scale * vt[-1]
    q = value_iteration(cmp, r_null)
    return r_null, float(np.max(np.abs(q)))


def null_reward_scale(b, rho, cmp, target_error=100.0):
    """Scale at which :func:`null_reward_attack` reaches ``target_error`` (Q* is positively homogeneous)."""
    _, base = null_reward_attack(b, rho, cmp, 1.0)
    if base <= 0:
        raise NumericError("null-space reward has zero optimal value")
    return target_error / base


def eckart_young_floor(target, d):
    """Smallest ``|X - target|_F^2`` over rank-``d`` matrices: the sum of squared tail singular values."""
    s = np.linalg.svd(np.asarray(target, dtype=float), compute_uv=False)
    return float(np.sum(s[d:] ** 2))


def noncontraction_witness(cmp, rho, rng, max_tries=10_000, d=None, rotation=None):
    """Search for ``(f1, b1, z, Q)`` with ``f1 b1 = (f1 Q^T)(Q b1)`` but different FB backups.

    The rotation is drawn through the Cayley transform of random skew parameters
    unless ``rotation`` fixes it. Raises :class:`SearchFailure` after ``max_tries``.
    """
    rho = check_rho(rho, cmp)
    n = cmp.num_pairs
    d = n if d is None else d
    n_skew = d * (d - 1) // 2
    for t in range(1, max_tries + 1):
        f1 = normal(rng, (n, d))
        b1 = normal(rng, (d, n))
        z = normal(rng, d)
        params = normal(rng, n_skew) if rotation is None else None
        q = cayley(params, d) if rotation is None else np.asarray(rotation, dtype=float)
        f2, b2 = f1 @ q.T, q @ b1
        a1 = np.argmax((f1 @ z).reshape(-1, cmp.num_actions), axis=1)
        a2 = np.argmax((f2 @ z).reshape(-1, cmp.num_actions), axis=1)
        flipped = np.flatnonzero(a1 != a2)
        if flipped.size == 0:
            continue
        rhs = float(np.max(np.abs(f1 @ b1 - f2 @ b2)))
        lhs = float(np.max(np.abs(
            fb_bellman_operator(f1, b1, cmp, rho, z) - fb_bellman_operator(f2, b2, cmp, rho, z)
        )))
        if rhs <= 1e-12 and lhs > 1e-6:
            return WitnessRecord(params, z, int(flipped[0]), lhs, rhs, f1, b1, t)
    raise SearchFailure(f"no non-contraction witness in {max_tries} tries")
