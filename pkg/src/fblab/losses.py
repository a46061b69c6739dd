"""Training objectives: MC and TD forms of FB and one-step FB, plus the orthonormality term.

Every loss returns a scalar :class:`~fblab.grad.Node` built from ``leaves`` (the
parameter nodes of the online model). Targets are always constants: the MC FB
target is recomputed from the current policy but carries no gradient, and TD
targets come from a separate Polyak-averaged model.
"""

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .cmp import build_transition_matrix, check_policy, check_rho, softmax_policy, successor_measure
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class TransitionBatch:
    """Flat state-action indices for ``(s, a)``, ``(s', a')`` and future samples ``(s_f, a_f)``."""

    sa: np.ndarray
    next_sa: np.ndarray
    future_sa: np.ndarray

    def __len__(self):
        return len(self.sa)


class TransitionDataset:
    """Stored behavioral transitions; futures are drawn i.i.d. from ``rho`` at sample time."""

    def __init__(self, cmp, sa, next_sa):
        self.cmp = cmp
        self.sa = np.asarray(sa, dtype=np.int64)
        self.next_sa = np.asarray(next_sa, dtype=np.int64)

    def __len__(self):
        return len(self.sa)

    def sample(self, batch_size, rng, rho):
        rho = check_rho(rho, self.cmp)
        idx = rng.integers(0, len(self), size=batch_size)
        future = _categorical(rng, np.broadcast_to(rho, (batch_size, len(rho))))
        return TransitionBatch(self.sa[idx], self.next_sa[idx], future)

    def frequencies(self):
        """Empirical joint frequency of ``((s, a), (s', a'))`` as an ``n x n`` table."""
        n = self.cmp.num_pairs
        counts = np.bincount(self.sa * n + self.next_sa, minlength=n * n)
        return counts.reshape(n, n) / len(self)


def _categorical(rng, probs):
    """One draw per row of ``probs`` by inverting the cumulative distribution."""
    u = rng.random(probs.shape[:-1])
    cdf = np.cumsum(probs, axis=-1)
    return np.minimum((cdf < u[..., None] * cdf[..., -1:]).sum(axis=-1), probs.shape[-1] - 1)


def generate_dataset(cmp, behavioral, n_transitions, rng, horizon=50):
    """Roll out ``behavioral`` from the initial distribution in parallel episodes of ``horizon`` steps.

    Each stored tuple is ``(s, a, s', a')`` with ``a' ~ pi_beta(.|s')``; the next
    tuple of the episode starts from ``(s', a')``.
    """
    if n_transitions < 1:
        raise ConfigError("n_transitions must be >= 1")
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    behavioral = check_policy(behavioral, cmp)
    na = cmp.num_actions
    n_episodes = -(-n_transitions // horizon)
    s = _categorical(rng, np.broadcast_to(cmp.initial_dist, (n_episodes, cmp.num_states)))
    a = _categorical(rng, behavioral[s])
    sa, next_sa = [], []
    for _ in range(horizon):
        s2 = _categorical(rng, cmp.transition[s, a])
        a2 = _categorical(rng, behavioral[s2])
        sa.append(s * na + a)
        next_sa.append(s2 * na + a2)
        s, a = s2, a2
    # episode-major order so truncation keeps whole prefixes of episodes
    sa = np.stack(sa, axis=1).reshape(-1)[:n_transitions]
    next_sa = np.stack(next_sa, axis=1).reshape(-1)[:n_transitions]
    return TransitionDataset(cmp, sa, next_sa)


def mc_onestep_loss(model, target_ratio, leaves):
    """``|F_beta B_beta - target|_F^2`` against a fixed ratio matrix."""
    prod = model.forward_node(leaves) @ model.backward_node(leaves)
    return G.frob_sq(prod - np.asarray(target_ratio, dtype=float))


def mc_fb_targets(cmp, f_values, z, rho, tau):
    """Stop-gradient targets ``M^pi_z diag(rho)^-1`` for the softmax policy of each ``F_z``."""
    rho = check_rho(rho, cmp)
    scores = np.einsum("knd,kd->kn", f_values, z)
    return successor_measure(cmp, softmax_policy(scores, tau, cmp.num_actions)) / rho


def mc_fb_loss(model, cmp, z, rho, leaves, tau=None):
    """Mean over latents of ``|F_z B - M^pi_z diag(rho)^-1|_F^2``, target held constant."""
    tau = model.tau_policy_train if tau is None else tau
    z = np.atleast_2d(np.asarray(z, dtype=float))
    f = model.forward_node(leaves, z)
    target = mc_fb_targets(cmp, f.value, z, rho, tau)
    prod = f @ model.backward_node(leaves)
    return G.mean(G.frob_sq(prod - target, axis="matrix"))


def _rows(mat, idx):
    """Rows ``mat[..., idx, :]`` paired with a leading batch axis when ``mat`` is batched."""
    if mat.ndim == 3:
        return G.take(mat, (np.arange(len(idx)), idx))
    return G.take(mat, idx)


def _td_terms(f, b, f_bar_next, b_bar, batch, gamma):
    """Empirical TD objective from already-gathered pieces."""
    if len(batch) == 0:
        raise UsageError("empty transition batch")
    f_sa = _rows(f, batch.sa)
    b_t = G.transpose(b)
    pred = G.total(f_sa * G.take(b_t, batch.future_sa), axis=-1)
    boot = np.sum(f_bar_next * b_bar.T[batch.future_sa], axis=-1)
    self_term = G.total(f_sa * G.take(b_t, batch.sa), axis=-1)
    diff = pred - gamma * boot
    return G.mean(G.scale(diff * diff, 0.5) - G.scale(self_term, 1.0 - gamma))


def td_onestep_loss(model, target_model, batch, gamma, leaves):
    """TD one-step loss using the stored next actions of ``batch``."""
    f_bar = target_model.forward_matrix()
    b_bar = target_model.backward_matrix()
    return _td_terms(model.forward_node(leaves), model.backward_node(leaves), f_bar[batch.next_sa], b_bar, batch, gamma)


def resample_next_actions(f_values, z, next_sa, num_actions, tau, rng):
    """Replace the action in each ``(s', a')`` by a draw from the softmax policy of ``F_z``."""
    s_next = next_sa // num_actions
    rows = np.arange(len(next_sa))
    sa_block = s_next[:, None] * num_actions + np.arange(num_actions)
    scores = np.einsum("kad,kd->ka", f_values[rows[:, None], sa_block], z)
    probs = softmax_policy(scores, tau, num_actions)[:, 0, :]
    return s_next * num_actions + _categorical(rng, probs)


def td_fb_loss(model, target_model, batch, z, gamma, leaves, rng, tau=None):
    """TD FB loss with one latent per transition; ``a'`` is resampled from the current policy."""
    if len(batch) == 0:
        raise UsageError("empty transition batch")
    tau = model.tau_policy_train if tau is None else tau
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[0] != len(batch):
        raise UsageError(f"need one latent per transition, got {z.shape[0]} for {len(batch)}")
    f = model.forward_node(leaves, z)
    next_sa = resample_next_actions(f.value, z, batch.next_sa, model.n_actions, tau, rng)
    f_bar = target_model.forward_matrix(z)
    f_bar_next = f_bar[np.arange(len(batch)), next_sa]
    return _td_terms(f, model.backward_node(leaves), f_bar_next, target_model.backward_matrix(), batch, gamma)


def td_expected(prod, target_prod, transition, data_dist, rho, gamma):
    """Exact expectation of the TD objective over data, next pairs, and futures.

    ``prod`` is the online ``F B`` (Node, ``n x n``), ``target_prod`` the constant
    ``F_bar B_bar``, and ``transition`` the ``P[(s,a),(s',a')]`` of the policy that
    picks ``a'``.
    """
    n = transition.shape[0]
    w = data_dist[:, None, None] * transition[:, :, None] * rho[None, None, :]
    diff = G.reshape(prod, (n, 1, n)) - gamma * target_prod[None, :, :]
    quad = G.scale(G.total(G.mul(w, diff * diff)), 0.5)
    self_term = G.total(G.mul(data_dist, G.take(prod, (np.arange(n), np.arange(n)))))
    return quad - G.scale(self_term, 1.0 - gamma)


def td_onestep_expected(model, target_model, cmp, behavioral, data_dist, rho, leaves):
    """Exhaustive TD one-step objective under the behavioral next-action distribution."""
    rho = check_rho(rho, cmp)
    prod = model.forward_node(leaves) @ model.backward_node(leaves)
    target = target_model.forward_matrix() @ target_model.backward_matrix()
    p = build_transition_matrix(cmp, behavioral)
    return td_expected(prod, target, p, np.asarray(data_dist, dtype=float), rho, cmp.gamma)


def ortho_loss(b, rho):
    """``E_{rho x rho}[(B(x)^T B(x'))^2] - 2 E_rho[|B(x)|^2]`` computed exactly.

    With ``G = B diag(rho) B^T`` this is ``|G|_F^2 - 2 tr(G)``, minimized at ``G = I``.
    """
    rho = np.asarray(rho, dtype=float)
    gram = G.mul(b, rho) @ G.transpose(b)
    d = gram.shape[-1]
    return G.frob_sq(gram) - G.scale(G.total(G.take(gram, (np.arange(d), np.arange(d)))), 2.0)


def polyak_update(target_model, online_model, tau_target):
    """In place ``target <- (1 - tau) target + tau online``; returns ``target_model``."""
    if not 0.0 <= tau_target <= 1.0:
        raise UsageError(f"Polyak coefficient must be in [0, 1], got {tau_target}")
    if type(target_model) is not type(online_model) or target_model.params.keys() != online_model.params.keys():
        raise UsageError("target and online models have different parameterizations")
    for name, p in target_model.params.items():
        q = online_model.params[name]
        if p.shape != q.shape:
            raise UsageError(f"shape mismatch for {name}")
        p *= 1.0 - tau_target
        p += tau_target * q
    return target_model


def named_grads(loss):
    """Backpropagate a scalar loss and key the leaf gradients by parameter name."""
    grads = G.backward(loss.tape, loss)
    return {node.name: g for node, g in grads.items() if node.name is not None}
