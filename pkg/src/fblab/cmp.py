"""Exact tabular machinery for finite controlled Markov processes.

Every matrix over state-action pairs uses the flat ordering ``s * n_actions + a``.
Q-values follow the normalized convention ``Q = M @ r`` where ``M`` is the
row-stochastic successor measure, i.e. ``(1 - gamma)`` times the usual discounted
return.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConvergenceError, FormatError, NumericError

PROB_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Cmp:
    """A controlled Markov process (an MDP without rewards).

    Attributes:
        transition: array ``[state, action, next_state]`` of probabilities.
        initial_dist: distribution over states.
        gamma: discount in [0, 1).
    """

    transition: np.ndarray
    initial_dist: np.ndarray
    gamma: float

    def __post_init__(self):
        t = np.array(self.transition, dtype=float)
        p0 = np.array(self.initial_dist, dtype=float)
        if t.ndim != 3 or t.shape[0] != t.shape[2] or min(t.shape) < 1:
            raise ConfigError(f"transition must have shape (S, A, S), got {t.shape}")
        if p0.shape != (t.shape[0],):
            raise ConfigError(f"initial_dist must have shape ({t.shape[0]},), got {p0.shape}")
        if not (np.all(np.isfinite(t)) and np.all(t >= 0)):
            raise ConfigError("transition entries must be finite and non-negative")
        if np.max(np.abs(t.sum(axis=2) - 1.0)) > PROB_TOL:
            raise ConfigError("each transition[s][a] must sum to 1")
        if np.any(p0 < 0) or abs(p0.sum() - 1.0) > PROB_TOL:
            raise ConfigError("initial_dist must be a probability vector")
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        t.flags.writeable = False
        p0.flags.writeable = False
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "initial_dist", p0)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def num_states(self):
        return self.transition.shape[0]

    @property
    def num_actions(self):
        return self.transition.shape[1]

    @property
    def num_pairs(self):
        return self.num_states * self.num_actions

    def with_gamma(self, gamma):
        return Cmp(self.transition, self.initial_dist, gamma)


def flat_index(s, a, num_actions):
    return s * num_actions + a


def unflat_index(flat, num_actions):
    return divmod(flat, num_actions)


def uniform_rho(cmp):
    """The uniform marginal ``1 / |S x A|`` used by the didactic experiments."""
    return np.full(cmp.num_pairs, 1.0 / cmp.num_pairs)


def check_rho(rho, cmp):
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (cmp.num_pairs,):
        raise ConfigError(f"rho must have shape ({cmp.num_pairs},), got {rho.shape}")
    if np.any(rho <= 0) or abs(rho.sum() - 1.0) > PROB_TOL:
        raise ConfigError("rho must be a full-support probability vector")
    return rho


def uniform_policy(cmp):
    return np.full((cmp.num_states, cmp.num_actions), 1.0 / cmp.num_actions)


def check_policy(policy, cmp):
    policy = np.asarray(policy, dtype=float)
    if policy.shape[-2:] != (cmp.num_states, cmp.num_actions):
        raise ConfigError(
            f"policy shape {policy.shape} does not match ({cmp.num_states}, {cmp.num_actions})"
        )
    if np.any(policy < 0) or np.max(np.abs(policy.sum(axis=-1) - 1.0)) > PROB_TOL:
        raise ConfigError("policy rows must be probability vectors")
    return policy


def build_transition_matrix(cmp, policy):
    """State-action transition matrix ``P[(s,a),(s',a')] = p(s'|s,a) pi(a'|s')``.

    ``policy`` may carry leading batch dimensions ``(..., S, A)``; the result then
    has shape ``(..., n, n)``.
    """
    policy = check_policy(policy, cmp)
    n = cmp.num_pairs
    p = np.einsum("sat,...tb->...satb", cmp.transition, policy)
    return p.reshape(policy.shape[:-2] + (n, n))


def successor_measure(cmp, policy):
    """Normalized successor measure ``(1 - gamma) (I - gamma P)^-1`` by dense solve.

    Supports a batch of policies ``(..., S, A)``.
    """
    p = build_transition_matrix(cmp, policy)
    n = cmp.num_pairs
    eye = np.eye(n)
    try:
        m = np.linalg.solve(eye - cmp.gamma * p, np.broadcast_to((1.0 - cmp.gamma) * eye, p.shape))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"successor measure solve failed: {exc}") from exc
    if not np.all(np.isfinite(m)):
        raise NumericError("successor measure is not finite")
    return m


def bellman_residual(cmp, policy, m):
    """Sup-norm residual of ``M = (1 - gamma) I + gamma P M``."""
    p = build_transition_matrix(cmp, policy)
    n = cmp.num_pairs
    return float(np.max(np.abs(m - (1.0 - cmp.gamma) * np.eye(n) - cmp.gamma * p @ m)))


def q_from_successor(m, r):
    """Q-values ``M @ r``; ``r`` may be a batch ``(..., n)``."""
    r = np.asarray(r, dtype=float)
    if m.shape[-1] != r.shape[-1]:
        raise ConfigError(f"reward length {r.shape[-1]} does not match measure size {m.shape[-1]}")
    return np.einsum("...ij,...j->...i", m, r)


def value_iteration(cmp, r, policy=None, tol=1e-12, max_sweeps=100_000):
    """Normalized value iteration.

    With ``policy=None`` this computes the optimal ``Q*``; otherwise it evaluates
    ``policy``. The backup is ``Q <- (1 - gamma) r + gamma E_{s'}[V(s')]``. ``r`` may
    be a batch ``(..., n)`` and is iterated jointly. Iteration stops once the
    sup-norm change is at most ``tol * max(1, |r|_inf)`` for every batch row.
    """
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != cmp.num_pairs:
        raise ConfigError(f"reward length {r.shape[-1]} != {cmp.num_pairs}")
    if not np.all(np.isfinite(r)):
        raise NumericError("rewards must be finite")
    if policy is not None:
        policy = check_policy(policy, cmp)
    s, a = cmp.num_states, cmp.num_actions
    batch = r.shape[:-1]
    rs = r.reshape(batch + (s, a))
    thresh = tol * np.maximum(1.0, np.max(np.abs(r), axis=-1, initial=0.0))
    g = cmp.gamma
    q = (1.0 - g) * rs
    for _ in range(max_sweeps):
        v = q.max(axis=-1) if policy is None else np.sum(q * policy, axis=-1)
        q_new = (1.0 - g) * rs + g * np.einsum("sat,...t->...sa", cmp.transition, v)
        delta = np.max(np.abs(q_new - q), axis=(-2, -1))
        q = q_new
        if np.all(delta <= thresh):
            return q.reshape(r.shape)
    raise ConvergenceError(f"value iteration did not converge in {max_sweeps} sweeps")


def softmax_policy(scores, tau, num_actions):
    """Boltzmann policy ``pi(a|s) ~ exp(tau * score(s, a))``.

    ``scores`` is flat ``(..., S*A)``; returns ``(..., S, A)``.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite policy scores")
    x = tau * scores.reshape(scores.shape[:-1] + (-1, num_actions))
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_policy(q, num_actions):
    """Deterministic argmax policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    qs = q.reshape(q.shape[:-1] + (-1, num_actions))
    best = np.argmax(qs, axis=-1)
    return np.eye(num_actions)[best]


def one_step_improved_policy(cmp, behavioral, r):
    """Greedy policy with respect to the behavioral Q-values of reward ``r``."""
    q = value_iteration(cmp, r, policy=behavioral)
    return greedy_policy(q, cmp.num_actions)


def fb_bellman_operator(f_table, b, cmp, rho, z, policy=None):
    """Apply the FB Bellman backup to the ratio matrix ``f_table @ b``.

    Returns ``(1 - gamma) diag(1/rho) + gamma P^pi (f_table @ b)``. The policy inside
    the backup is greedy in ``f_table @ z`` unless ``policy`` is given explicitly
    (the fixed-policy variant used for one-step representations).
    """
    f_table = np.asarray(f_table, dtype=float)
    b = np.asarray(b, dtype=float)
    rho = check_rho(rho, cmp)
    n = cmp.num_pairs
    if f_table.shape[0] != n or b.shape != (f_table.shape[1], n):
        raise ConfigError(f"incompatible shapes f={f_table.shape} b={b.shape}")
    if policy is None:
        policy = greedy_policy(f_table @ np.asarray(z, dtype=float), cmp.num_actions)
    p = build_transition_matrix(cmp, policy)
    return (1.0 - cmp.gamma) * np.diag(1.0 / rho) + cmp.gamma * p @ (f_table @ b)


def three_state_cmp(gamma=0.9):
    """Start in s0; action a_i moves deterministically to s_i; s1 and s2 absorb."""
    t = np.zeros((3, 3, 3))
    for a in range(3):
        t[0, a, a] = 1.0
    t[1, :, 1] = 1.0
    t[2, :, 2] = 1.0
    return Cmp(t, np.array([1.0, 0.0, 0.0]), gamma)


def five_state_circular_cmp(gamma=0.9):
    """a0 advances to (i+1) mod 5; a1 goes to (i-1) mod 5 w.p. 0.7, else stays."""
    t = np.zeros((5, 2, 5))
    for i in range(5):
        t[i, 0, (i + 1) % 5] = 1.0
        t[i, 1, (i - 1) % 5] += 0.7
        t[i, 1, i] += 0.3
    p0 = np.zeros(5)
    p0[0] = 1.0
    return Cmp(t, p0, gamma)


def random_cmp(seed, n_states, n_actions, concentration=1.0, gamma=0.9):
    """CMP with Dirichlet(concentration) transition rows and initial distribution."""
    from .rng import make_rng

    if n_states < 1 or n_actions < 1:
        raise ConfigError("n_states and n_actions must be >= 1")
    rng = make_rng(seed)
    t = rng.dirichlet(np.full(n_states, float(concentration)), size=(n_states, n_actions))
    t /= t.sum(axis=-1, keepdims=True)
    p0 = rng.dirichlet(np.full(n_states, float(concentration)))
    p0 /= p0.sum()
    return Cmp(t, p0, gamma)


def single_action_cmp(seed, n_states, gamma=0.9):
    """Random CMP with one action, where every policy coincides."""
    return random_cmp(seed, n_states, 1, gamma=gamma)


def _strip(line):
    return line.split("#", 1)[0].split()


def parse_cmp(text):
    """Parse the ``cmp v1`` text format."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = _strip(raw)
        if tokens:
            rows.append((lineno, tokens))
    if not rows:
        raise FormatError("empty CMP file")
    lineno, header = rows[0]
    if len(header) != 5 or header[0] != "cmp" or header[1] != "v1":
        raise FormatError(f"line {lineno}: expected header 'cmp v1 <n_states> <n_actions> <gamma>'")
    try:
        n_s, n_a, gamma = int(header[2]), int(header[3]), float(header[4])
    except ValueError as exc:
        raise FormatError(f"line {lineno}: {exc}") from exc
    body = rows[1:]
    if len(body) != n_s * n_a + 1:
        raise FormatError(f"expected {n_s * n_a + 1} data lines, found {len(body)}")
    values = []
    for lineno, tokens in body:
        if len(tokens) != n_s:
            raise FormatError(f"line {lineno}: expected {n_s} entries, found {len(tokens)}")
        try:
            values.append([float(tok) for tok in tokens])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    t = np.array(values[:-1]).reshape(n_s, n_a, n_s)
    try:
        return Cmp(t, np.array(values[-1]), gamma)
    except ConfigError as exc:
        raise FormatError(str(exc)) from exc


def load_cmp(path):
    return parse_cmp(Path(path).read_text())


def format_cmp(cmp):
    lines = [f"cmp v1 {cmp.num_states} {cmp.num_actions} {cmp.gamma!r}"]
    for s in range(cmp.num_states):
        for a in range(cmp.num_actions):
            lines.append(" ".join(repr(float(x)) for x in cmp.transition[s, a]))
    lines.append(" ".join(repr(float(x)) for x in cmp.initial_dist))
    return "\n".join(lines) + "\n"


def save_cmp(cmp, path):
    Path(path).write_text(format_cmp(cmp))
