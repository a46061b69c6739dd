"""Training loops for FB and one-step FB with AdamW and periodic evaluation."""

from dataclasses import asdict, dataclass

import numpy as np

from . import losses as L
from .analysis import draw_equiv_params, evaluate
from .cmp import check_rho, successor_measure, uniform_policy, uniform_rho
from .grad import Tape
from .errors import ConfigError, TrainingAborted
from .latent import sample_prior
from .models import init_fb_model, init_onestep_model
from .optim import AdamW
from .rng import STREAM_DATA, STREAM_EQUIV, STREAM_EVAL, STREAM_TRAIN, make_rng


@dataclass
class TrainConfig:
    steps: int = 100_000
    batch_size: int = 512
    lr: float = 1e-4
    weight_decay: float = 1e-4
    adamw_eps: float = 1e-5
    gamma: float = 0.9
    tau_policy_train: float = 5e-3
    tau_policy_eval: float = 1.0
    lambda_ortho: float = 0.0
    target_polyak: float = 0.01
    loss_mode: str = "mc"
    eval_interval: int = 1000
    eval_latents_count: int = 1000
    seed: int = 0
    d: int = 0  # 0 means |S x A|
    prior_variant: str = "cauchy_scaled"
    param_kind: str = "svd"
    n_transitions: int = 100_000
    rollout_horizon: int = 50

    def validate(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lambda_ortho < 0:
            raise ConfigError("lambda_ortho must be >= 0")
        if not 0.0 < self.target_polyak <= 1.0:
            raise ConfigError("target_polyak must be in (0, 1]")
        if self.loss_mode not in ("mc", "td"):
            raise ConfigError(f"loss_mode must be 'mc' or 'td', got {self.loss_mode!r}")
        if self.eval_interval < 1 or self.eval_latents_count < 1:
            raise ConfigError("eval_interval and eval_latents_count must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if self.tau_policy_train <= 0 or self.tau_policy_eval <= 0:
            raise ConfigError("policy temperatures must be positive")
        if self.d < 0:
            raise ConfigError("d must be >= 0")
        return self

    def as_dict(self):
        return asdict(self)


def _model_for(algo, cmp, config):
    d = config.d or cmp.num_pairs
    if algo == "fb":
        return init_fb_model(cmp, d, config.seed, tau_policy_train=config.tau_policy_train,
                             tau_policy_eval=config.tau_policy_eval)
    if algo == "onestep_fb":
        return init_onestep_model(cmp, d, config.seed, config.param_kind)
    raise ConfigError(f"unknown algo {algo!r}")


def train(algo, cmp, config, rho=None, behavioral=None, callback=None):
    """Train ``algo`` in {'fb', 'onestep_fb'} and return ``(model, records)``.

    Metrics are recorded before the update at step 0, every ``eval_interval``
    steps, and once more after the last update (``step == steps``). A non-finite
    loss raises :class:`TrainingAborted` carrying the records so far.
    """
    config.validate()
    if config.gamma != cmp.gamma:
        cmp = cmp.with_gamma(config.gamma)
    rho = uniform_rho(cmp) if rho is None else check_rho(rho, cmp)
    behavioral = uniform_policy(cmp) if behavioral is None else behavioral
    model = _model_for(algo, cmp, config)
    d = model.d
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay, eps=config.adamw_eps)

    eval_z = sample_prior(d, config.eval_latents_count, config.prior_variant, make_rng(config.seed, STREAM_EVAL)).z
    nu, xi = draw_equiv_params(make_rng(config.seed, STREAM_EQUIV), config.eval_latents_count)
    train_rng = make_rng(config.seed, STREAM_TRAIN)

    target_ratio = successor_measure(cmp, behavioral) / rho if algo == "onestep_fb" else None
    dataset = target_model = None
    if config.loss_mode == "td":
        dataset = L.generate_dataset(cmp, behavioral, config.n_transitions, make_rng(config.seed, STREAM_DATA),
                                     config.rollout_horizon)
        target_model = model.copy()

    def objective(tape):
        leaves = model.leaves(tape)
        if config.loss_mode == "mc":
            if algo == "onestep_fb":
                loss = L.mc_onestep_loss(model, target_ratio, leaves)
            else:
                z = sample_prior(d, config.batch_size, config.prior_variant, train_rng).z
                loss = L.mc_fb_loss(model, cmp, z, rho, leaves)
        else:
            batch = dataset.sample(config.batch_size, train_rng, rho)
            if algo == "onestep_fb":
                loss = L.td_onestep_loss(model, target_model, batch, cmp.gamma, leaves)
            else:
                z = sample_prior(d, config.batch_size, config.prior_variant, train_rng).z
                loss = L.td_fb_loss(model, target_model, batch, z, cmp.gamma, leaves, train_rng)
        if config.lambda_ortho > 0:
            loss = loss + config.lambda_ortho * L.ortho_loss(model.backward_node(leaves), rho)
        return loss

    records = []
    last_good = None

    for step in range(config.steps + 1):
        loss = objective(Tape())
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingAborted(f"non-finite loss at step {step}", records, last_good)
        if step % config.eval_interval == 0 or step == config.steps:
            rec = evaluate(model, cmp, eval_z, rho, nu, xi, behavioral, step, value)
            records.append(rec)
            if callback is not None:
                callback(rec, model)
        if step == config.steps:
            break
        opt.step(model.params, L.named_grads(loss))
        if not all(np.all(np.isfinite(p)) for p in model.params.values()):
            raise TrainingAborted(f"non-finite parameters after step {step}", records, step)
        last_good = step
        if target_model is not None:
            L.polyak_update(target_model, model, config.target_polyak)
    return model, records
