"""Learnable forward-backward factorizations and their exact ground truths.

Both models expose the same surface: ``leaves(tape)`` registers parameters on a
tape, ``forward_node``/``backward_node`` build differentiable matrices from those
leaves, and ``forward_matrix``/``backward_matrix`` evaluate them as plain arrays.

Rank is pinned by an SVD-style parameterization ``U diag(sigma) V^T`` where the
orthonormal factors come from the Cayley transform and the singular values from
``softplus + 1e-6``.
"""

import copy

import numpy as np

from . import grad as G
from .cmp import check_rho, greedy_policy, softmax_policy, successor_measure, value_iteration
from .errors import ConfigError, NumericError
from .latent import latent_to_reward, preprocess_latent
from .rng import STREAM_INIT, make_rng, normal

SINGULAR_FLOOR = 1e-6
HIDDEN = (32, 32, 32)
INIT_SCALE = 1e-2


def _n_skew(n):
    return n * (n - 1) // 2


def _selector(rows, cols):
    return np.eye(rows, cols)


def svd_factor(leaves, prefix, rows, cols, skew_u=None, sv=None, skew_v=None):
    """``U[:, :k] diag(sigma) V[:, :k]^T`` of shape ``(..., rows, cols)``.

    Reads ``{prefix}.skew_u``, ``{prefix}.sv``, ``{prefix}.skew_v`` from ``leaves``
    unless the corresponding Nodes are passed explicitly (batched heads).
    """
    k = min(rows, cols)
    skew_u = leaves[f"{prefix}.skew_u"] if skew_u is None else skew_u
    sv = leaves[f"{prefix}.sv"] if sv is None else sv
    skew_v = leaves[f"{prefix}.skew_v"] if skew_v is None else skew_v
    u = G.cayley(skew_u, rows)
    v = G.cayley(skew_v, cols)
    if k < rows:
        u = u @ _selector(rows, k)
    if k < cols:
        v = v @ _selector(cols, k)
    sigma = G.softplus(sv) + SINGULAR_FLOOR
    sigma = G.reshape(sigma, sigma.shape[:-1] + (1, k))
    return (u * sigma) @ G.transpose(v)


def _svd_shapes(prefix, rows, cols):
    return {
        f"{prefix}.skew_u": (_n_skew(rows),),
        f"{prefix}.sv": (min(rows, cols),),
        f"{prefix}.skew_v": (_n_skew(cols),),
    }


class _Factorization:
    """Shared parameter bookkeeping."""

    algo = None

    def __init__(self, n_states, n_actions, d, params, param_kind):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        self.d = int(d)
        self.param_kind = param_kind
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}
        expected = self.param_shapes()
        if set(expected) != set(self.params):
            raise ConfigError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def num_pairs(self):
        return self.n_states * self.n_actions

    def leaves(self, tape, trainable=True):
        if trainable:
            return {name: tape.param(value, name=name) for name, value in self.params.items()}
        return {name: tape.const(value) for name, value in self.params.items()}

    def copy(self):
        return copy.deepcopy(self)

    def backward_node(self, leaves):
        if self.param_kind == "plain":
            return leaves["b"]
        return svd_factor(leaves, "b", self.d, self.num_pairs)

    def backward_matrix(self):
        return self.backward_node(self.leaves(G.Tape(), trainable=False)).value


class OneStepFbModel(_Factorization):
    """Latent-free ``F_beta`` (n x d) and ``B_beta`` (d x n)."""

    algo = "onestep_fb"

    def param_shapes(self):
        n, d = self.num_pairs, self.d
        if self.param_kind == "plain":
            return {"f": (n, d), "b": (d, n)}
        if self.param_kind == "svd":
            return {**_svd_shapes("f", n, d), **_svd_shapes("b", d, n)}
        raise ConfigError(f"unknown param_kind {self.param_kind!r}")

    def forward_node(self, leaves, z=None):
        if self.param_kind == "plain":
            return leaves["f"]
        return svd_factor(leaves, "f", self.num_pairs, self.d)

    def forward_matrix(self, z=None):
        return self.forward_node(self.leaves(G.Tape(), trainable=False)).value


class FbModel(_Factorization):
    """Latent-conditioned ``F(., ., z)`` from three MLPs over the preprocessed latent.

    The MLPs (hidden sizes 32-32-32, GELU) independently predict the skew
    parameters of ``U_F`` (n x n), the singular values, and the skew parameters of
    ``V_F`` (d x d). ``B = U_B diag(sigma_B) V_B^T`` has free parameters.
    """

    algo = "fb"
    heads = ("u", "s", "v")

    def __init__(self, n_states, n_actions, d, params, param_kind="svd", tau_policy_train=5e-3, tau_policy_eval=1.0):
        self.tau_policy_train = tau_policy_train
        self.tau_policy_eval = tau_policy_eval
        super().__init__(n_states, n_actions, d, params, param_kind)

    def head_sizes(self):
        n, d = self.num_pairs, self.d
        return {"u": _n_skew(n), "s": min(n, d), "v": _n_skew(d)}

    def param_shapes(self):
        if self.param_kind != "svd":
            raise ConfigError("FB models only support the svd parameterization")
        shapes = {}
        for head, out in self.head_sizes().items():
            sizes = (self.d,) + HIDDEN + (out,)
            for i in range(len(sizes) - 1):
                shapes[f"{head}.w{i}"] = (sizes[i], sizes[i + 1])
                shapes[f"{head}.b{i}"] = (1, sizes[i + 1])
        shapes.update(_svd_shapes("b", self.d, self.num_pairs))
        return shapes

    def _mlp(self, leaves, head, x):
        depth = len(HIDDEN) + 1
        for i in range(depth):
            x = x @ leaves[f"{head}.w{i}"] + leaves[f"{head}.b{i}"]
            if i < depth - 1:
                x = G.gelu(x)
        return x

    def forward_node(self, leaves, z):
        """Forward matrices ``(N, n, d)`` for raw latents ``z`` of shape ``(N, d)``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        x = leaves["u.w0"].tape.const(preprocess_latent(z))
        out = {h: self._mlp(leaves, h, x) for h in self.heads}
        return svd_factor(None, None, self.num_pairs, self.d, skew_u=out["u"], sv=out["s"], skew_v=out["v"])

    def forward_matrix(self, z):
        """``F_z`` as an array; a single latent gives ``(n, d)``, a batch ``(N, n, d)``."""
        z = np.asarray(z, dtype=float)
        f = self.forward_node(self.leaves(G.Tape(), trainable=False), z).value
        return f[0] if z.ndim == 1 else f


def _mlp_init(rng, shapes, head_scale):
    params = {}
    for name, shape in shapes.items():
        if ".w" in name:
            w = normal(rng, shape) / np.sqrt(shape[0])
            last = name.endswith(f"w{len(HIDDEN)}")
            params[name] = w * head_scale if last else w
        elif ".b" in name and name.split(".")[0] in FbModel.heads:
            params[name] = np.zeros(shape)
    return params


def init_fb_model(cmp, d, seed, head_scale=INIT_SCALE, tau_policy_train=5e-3, tau_policy_eval=1.0):
    """FB model with 1/sqrt(fan_in) MLP weights and near-identity factors.

    ``head_scale`` multiplies the output-layer weights; 0 gives a model whose
    forward matrix is the padded diagonal ``softplus(0) + 1e-6`` for every latent.
    """
    if d < 1:
        raise ConfigError("d must be >= 1")
    shell = FbModel.__new__(FbModel)
    shell.n_states, shell.n_actions, shell.d, shell.param_kind = cmp.num_states, cmp.num_actions, d, "svd"
    shapes = shell.param_shapes()
    rng = make_rng(seed, STREAM_INIT)
    params = _mlp_init(rng, {k: v for k, v in shapes.items() if not k.startswith("b.")}, head_scale)
    for name, shape in shapes.items():
        if name.startswith("b."):
            params[name] = INIT_SCALE * normal(rng, shape)
    return FbModel(cmp.num_states, cmp.num_actions, d, params, "svd", tau_policy_train, tau_policy_eval)


def init_onestep_model(cmp, d, seed, param_kind="plain"):
    """One-step model; ``svd`` factors start near identity, ``plain`` matrices ~ N(0, 1/fan_in)."""
    if d < 1:
        raise ConfigError("d must be >= 1")
    n = cmp.num_pairs
    rng = make_rng(seed, STREAM_INIT)
    if param_kind == "plain":
        params = {"f": normal(rng, (n, d)) / np.sqrt(d), "b": normal(rng, (d, n)) / np.sqrt(n)}
    else:
        shapes = {**_svd_shapes("f", n, d), **_svd_shapes("b", d, n)}
        params = {name: INIT_SCALE * normal(rng, shape) for name, shape in shapes.items()}
    return OneStepFbModel(cmp.num_states, cmp.num_actions, d, params, param_kind)


def scores(model, z):
    """Policy scores ``F(s, a, z)^T z`` as flat ``(..., n)`` arrays."""
    z = np.asarray(z, dtype=float)
    f = model.forward_matrix(z)
    return np.einsum("...nd,...d->...n", f, z)


def induced_policy(model, z, tau):
    """Softmax policy over ``F(s, a, z)^T z`` (or ``F_beta(s, a)^T z``)."""
    return softmax_policy(scores(model, z), tau, model.n_actions)


def q_prediction(model, z):
    """Predicted Q-vector ``F_z z`` (FB) or ``F_beta z`` (one-step)."""
    return scores(model, z)


def ground_truth_onestep(cmp, behavioral, rho, d=None):
    """Exact one-step representations from the SVD of ``M^beta diag(rho)^-1``.

    ``F = U Sigma`` and ``B = V^T``, stored as a ``plain`` model.
    """
    n = cmp.num_pairs
    d = n if d is None else d
    if d != n:
        raise ConfigError(f"ground truth needs d = |S x A| = {n}, got {d}")
    rho = check_rho(rho, cmp)
    target = successor_measure(cmp, behavioral) / rho
    try:
        u, s, vt = np.linalg.svd(target)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed: {exc}") from exc
    return OneStepFbModel(cmp.num_states, cmp.num_actions, d, {"f": u * s, "b": vt}, "plain")


def rotated(model, rotation):
    """Apply ``Q_rot`` in representation space: ``F -> F Q^T``, ``B -> Q B``."""
    if model.param_kind != "plain":
        raise ConfigError("rotation is defined for plain models")
    q = np.asarray(rotation, dtype=float)
    return OneStepFbModel(
        model.n_states, model.n_actions, model.d,
        {"f": model.params["f"] @ q.T, "b": q @ model.params["b"]}, "plain",
    )


def ground_truth_fb_forward(cmp, rho, b, z):
    """Forward matrix of a ground-truth FB pair at latent ``z`` for a given invertible ``B``.

    The reward encoded by ``z`` is ``r = (B^-1 z) / rho``; with ``pi*`` greedy in ``Q*_r``
    the matrix ``M^{pi*} diag(rho)^-1 B^-1`` induces ``pi*`` again and reproduces the
    ratio exactly, so the pair is a fixed point at ``z``.
    """
    rho = check_rho(rho, cmp)
    r = latent_to_reward(b, z, rho)
    pi_star = greedy_policy(value_iteration(cmp, r), cmp.num_actions)
    m = successor_measure(cmp, pi_star)
    return np.linalg.solve(np.asarray(b, dtype=float).T, (m / rho).T).T
