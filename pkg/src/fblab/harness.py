"""Experiment configuration, runs, sweeps, theory checks, and aggregation.

Configs are INI-style with three sections. Every key is optional (defaults are
the didactic protocol) and unknown keys are rejected::

    [env]
    kind = three_state          # three_state | five_state | random | file
    rho = uniform               # or a path to a whitespace-separated vector

    [train]
    algo = onestep_fb
    steps = 100000
    seed = 0

    [eval]
    eval_interval = 1000
"""

import configparser
import csv
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import analysis as A
from . import losses as L
from .checkpoint import save_checkpoint
from .cmp import (
    check_rho,
    fb_bellman_operator,
    five_state_circular_cmp,
    load_cmp,
    random_cmp,
    single_action_cmp,
    successor_measure,
    three_state_cmp,
    uniform_policy,
    uniform_rho,
)
from .errors import ConfigError, NumericError, SearchFailure, UsageError
from .grad import Tape, cayley
from .latent import reward_to_latent, sample_prior
from .models import ground_truth_fb_forward, ground_truth_onestep, init_fb_model, rotated
from .rng import STREAM_EQUIV, STREAM_EVAL, STREAM_SEARCH, make_rng, normal
from .training import TrainConfig, train

METRICS_HEADER = "step,loss,eps_smr,eps_q,kl_policy,eps_equiv"
EVAL_KEYS = ("eval_interval", "eval_latents_count", "tau_policy_eval")


@dataclass
class EnvConfig:
    kind: str = "three_state"
    seed: int = 0
    n_states: int = 3
    n_actions: int = 2
    concentration: float = 1.0
    path: str = ""
    rho: str = "uniform"

    def build(self, gamma=0.9):
        if self.kind == "three_state":
            return three_state_cmp(gamma)
        if self.kind == "five_state":
            return five_state_circular_cmp(gamma)
        if self.kind == "random":
            return random_cmp(self.seed, self.n_states, self.n_actions, self.concentration, gamma)
        if self.kind == "file":
            return load_cmp(self.path).with_gamma(gamma)
        raise ConfigError(f"unknown env kind {self.kind!r}")

    def build_rho(self, cmp):
        if self.rho == "uniform":
            return uniform_rho(cmp)
        try:
            values = np.loadtxt(self.rho, dtype=float).reshape(-1)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read rho from {self.rho}: {exc}") from exc
        return check_rho(values, cmp)


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    algo: str = "onestep_fb"
    output_dir: str = "run"
    train: TrainConfig = field(default_factory=TrainConfig)


def _parse_value(raw, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        x = float(raw)
        if x != int(x):
            raise ValueError(f"not an integer: {raw!r}")
        return int(x)
    if isinstance(default, float):
        return float(raw)
    return raw


def _locate(text, section, key=None):
    """1-based (line, column) of ``key`` inside ``[section]`` (or of the header)."""
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if key is None and current == section:
                return i, line.index("[") + 1
            continue
        if current == section and key is not None:
            name = stripped.split("=", 1)[0].split(":", 1)[0].strip().lower()
            if name == key:
                return i, line.index(stripped[0]) + 1
    return None, None


def parse_config(text, base_dir="."):
    """Parse config text into an :class:`ExperimentConfig`; errors carry line/column."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any section", exc.lineno, 1) from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno, 1) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno, 1) from exc
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"unparseable line: {exc.errors[0][1] if exc.errors else ''}", line, 1) from exc

    env = EnvConfig()
    exp = ExperimentConfig(env=env)
    tc = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
    targets = {
        "env": {f.name: (env, f.name) for f in fields(EnvConfig)},
        "train": {
            **{k: (tc, k) for k in tc if k not in EVAL_KEYS},
            "algo": (exp, "algo"),
            "output_dir": (exp, "output_dir"),
        },
        "eval": {k: (tc, k) for k in EVAL_KEYS},
    }
    for section in parser.sections():
        if section not in targets:
            line, col = _locate(text, section)
            raise ConfigError(f"unknown section [{section}]", line, col)
        for key, raw in parser.items(section):
            line, col = _locate(text, section, key)
            if key not in targets[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line, col)
            obj, attr = targets[section][key]
            default = obj[attr] if isinstance(obj, dict) else getattr(obj, attr)
            try:
                value = _parse_value(raw.strip(), default)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: {exc}", line, col) from exc
            if isinstance(obj, dict):
                obj[attr] = value
            else:
                setattr(obj, attr, value)

    for attr in ("path", "rho"):
        value = getattr(env, attr)
        if value and value != "uniform":
            full = value if os.path.isabs(value) else os.path.join(base_dir, value)
            if not os.path.exists(full):
                line, col = _locate(text, "env", attr)
                raise ConfigError(f"env.{attr}: no such file {value!r}", line, col)
            setattr(env, attr, full)
    if env.kind == "file" and not env.path:
        raise ConfigError("env.kind = file needs env.path", *_locate(text, "env", "kind"))
    if exp.algo not in ("fb", "onestep_fb"):
        raise ConfigError(f"train.algo must be fb or onestep_fb, got {exp.algo!r}", *_locate(text, "train", "algo"))
    exp.train = TrainConfig(**tc)
    try:
        exp.train.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc), *_locate(text, "train", None)) from exc
    return exp


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


def format_config(exp):
    """Resolved config text listing every effective value, loadable by :func:`parse_config`."""
    tc = exp.train.as_dict()
    lines = ["[env]"]
    lines += [f"{f.name} = {getattr(exp.env, f.name)!r}".replace("'", "") for f in fields(EnvConfig)]
    lines += ["", "[train]", f"algo = {exp.algo}", f"output_dir = {exp.output_dir}"]
    lines += [f"{k} = {v!r}".replace("'", "") for k, v in tc.items() if k not in EVAL_KEYS]
    lines += ["", "[eval]"]
    lines += [f"{k} = {tc[k]!r}" for k in EVAL_KEYS]
    return "\n".join(lines) + "\n"


def format_row(rec):
    cells = [str(int(rec.step))] + ["{:.12g}".format(v) for v in rec.as_row()[1:]]
    return ",".join(cells)


@dataclass
class RunResult:
    model: object
    records: list
    output_dir: str


def run_config(exp, output_dir=None):
    """Train per ``exp`` and write ``config.resolved``, ``metrics.csv``, ``final.fbckpt``.

    ``metrics.csv`` is written row by row, so an aborted run keeps its history.
    """
    out = output_dir or exp.output_dir
    os.makedirs(out, exist_ok=True)
    exp = replace(exp, output_dir=out)
    cmp = exp.env.build(exp.train.gamma)
    rho = exp.env.build_rho(cmp)
    with open(os.path.join(out, "config.resolved"), "w") as fh:
        fh.write(format_config(exp))
    with open(os.path.join(out, "metrics.csv"), "w") as fh:
        fh.write(METRICS_HEADER + "\n")

        def emit(rec, _model):
            fh.write(format_row(rec) + "\n")
            fh.flush()

        model, records = train(exp.algo, cmp, exp.train, rho, callback=emit)
    save_checkpoint(model, os.path.join(out, "final.fbckpt"))
    return RunResult(model, records, out)


def run_experiment(config_path, seed=None, out=None):
    """Load a config file, apply CLI overrides, and run it."""
    exp = load_config(config_path)
    if seed is not None:
        exp.train.seed = int(seed)
    return run_config(exp, out)


def read_metrics(path):
    """Parse a metrics CSV into a dict of float arrays keyed by column."""
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows or ",".join(rows[0]) != METRICS_HEADER:
        raise ConfigError(f"{path}: not a metrics file")
    data = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float).reshape(-1, len(rows[0]))
    return {name: data[:, i] for i, name in enumerate(rows[0])}


def aggregate(paths, out_path=None):
    """Across-seed mean and sample std per step. All files must share their step column."""
    if not paths:
        raise UsageError("aggregate needs at least one metrics file")
    runs = [read_metrics(p) for p in paths]
    steps = runs[0]["step"]
    for p, r in zip(paths, runs):
        if r["step"].shape != steps.shape or np.any(r["step"] != steps):
            raise ConfigError(f"{p}: step column differs from {paths[0]}")
    names = METRICS_HEADER.split(",")[1:]
    result = {"step": steps}
    for name in names:
        stack = np.stack([r[name] for r in runs])
        result[f"{name}_mean"] = stack.mean(axis=0)
        result[f"{name}_std"] = stack.std(axis=0, ddof=1) if len(runs) > 1 else np.zeros_like(steps)
    if out_path is not None:
        cols = list(result)
        with open(out_path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(len(steps)):
                cells = [str(int(steps[i]))] + ["{:.12g}".format(result[c][i]) for c in cols[1:]]
                fh.write(",".join(cells) + "\n")
    return result


SWEEP_PARAMS = ("lr", "tau_policy_train")


def sweep(config_path, param, values, seed=None, out=None):
    """One run per value with a shared seed; writes ``summary.csv`` and returns its rows.

    Failed runs are recorded with their error class and the sweep continues.
    """
    if param not in SWEEP_PARAMS:
        raise UsageError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    if not values:
        raise UsageError("sweep needs at least one value")
    base = load_config(config_path)
    if seed is not None:
        base.train.seed = int(seed)
    root = out or base.output_dir
    os.makedirs(root, exist_ok=True)
    rows = []
    for value in values:
        exp = replace(base, train=replace(base.train, **{param: float(value)}))
        run_dir = os.path.join(root, f"{param}={value:g}")
        try:
            res = run_config(exp, run_dir)
            rows.append((value, "ok", res.records[-1]))
        except (ConfigError, NumericError) as exc:
            rows.append((value, type(exc).__name__, None))
    with open(os.path.join(root, "summary.csv"), "w") as fh:
        fh.write(f"{param},status,{METRICS_HEADER}\n")
        for value, status, rec in rows:
            tail = format_row(rec) if rec is not None else ",".join(["nan"] * 6)
            fh.write(f"{value:.12g},{status},{tail}\n")
    return rows


# ---------------------------------------------------------------- theory checks


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: str


def _check(name, passed, details):
    return CheckResult(name, bool(passed), details)


def check_rank_law(cmp, seed, n_random=20):
    worst = []
    rng = make_rng(seed, STREAM_SEARCH)
    cmps = [cmp] + [random_cmp(seed * 1000 + i, 2 + i % 5, 1 + i % 4) for i in range(n_random)]
    ok = True
    for c in cmps:
        pols = [uniform_policy(c)]
        raw = rng.random((3, c.num_states, c.num_actions))
        pols += list(raw / raw.sum(axis=-1, keepdims=True))
        for pol in pols:
            rank, s = A.rank_report(successor_measure(c, pol))
            ok &= rank == c.num_pairs
            worst.append(s[-1])
    return _check("rank law", ok, f"{len(cmps)} CMPs x 4 policies full rank; smallest sigma_min {min(worst):.3e}")


def check_svd_ground_truth(cmp, rho, seed):
    beta = uniform_policy(cmp)
    gt = ground_truth_onestep(cmp, beta, rho)
    target = successor_measure(cmp, beta) / rho
    tape = Tape()
    loss = float(L.mc_onestep_loss(gt, target, gt.leaves(tape)).value) / np.sum(target**2)
    bbt = float(np.max(np.abs(gt.params["b"] @ gt.params["b"].T - np.eye(gt.d))))
    q = cayley(normal(make_rng(seed, STREAM_SEARCH), gt.d * (gt.d - 1) // 2), gt.d)
    rot = rotated(gt, q)
    rot_loss = float(L.mc_onestep_loss(rot, target, rot.leaves(Tape())).value) / np.sum(target**2)
    fixed = float(np.max(np.abs(fb_bellman_operator(gt.params["f"], gt.params["b"], cmp, rho, None, beta) - target)))
    z = sample_prior(gt.d, 200, "cauchy_scaled", make_rng(seed, STREAM_EVAL)).z
    nu, xi = A.draw_equiv_params(make_rng(seed, STREAM_EQUIV), len(z))
    rec = A.evaluate(gt, cmp, z, rho, nu, xi, beta)
    metrics = max(rec.eps_smr, rec.eps_q, rec.kl_policy, rec.eps_equiv)
    ok = loss <= 1e-12 and bbt <= 1e-10 and rot_loss <= 1e-12 and fixed <= 1e-8 and metrics <= 1e-8
    return _check(
        "SVD ground truth",
        ok,
        f"relative loss {loss:.3e}, |BB^T - I| {bbt:.3e}, rotated loss {rot_loss:.3e}, "
        f"Bellman fixed point {fixed:.3e}, worst metric {metrics:.3e}",
    )


def check_pseudoinverse(cmp, seed):
    single = single_action_cmp(seed, cmp.num_states, cmp.gamma)
    rho = uniform_rho(single)
    n = single.num_pairs
    b = np.eye(n)
    gt = A.TableFb(lambda z: ground_truth_fb_forward(single, rho, b, z), b, 1)
    probes = sample_prior(n, 8, "sphere", make_rng(seed, STREAM_EVAL)).z
    dev_gt = A.pseudoinverse_consistency(gt, single, probes, rho)
    rnd = init_fb_model(cmp, cmp.num_pairs, seed, head_scale=1.0)
    probes = sample_prior(cmp.num_pairs, 8, "sphere", make_rng(seed, STREAM_EVAL)).z
    dev_rnd = A.pseudoinverse_consistency(rnd, cmp, probes, uniform_rho(cmp))
    return _check(
        "pseudoinverse consistency",
        dev_gt <= 1e-8 and dev_rnd > 1e-2,
        f"ground truth deviation {dev_gt:.3e}, untrained model deviation {dev_rnd:.3e}",
    )


def _best_backward(cmp, rho, d):
    target = successor_measure(cmp, uniform_policy(cmp)) / rho
    _, _, vt = np.linalg.svd(target)
    return vt[:d]


def check_null_reward(cmp, rho, d):
    b = _best_backward(cmp, rho, d)
    c = A.null_reward_scale(b, rho, cmp, 100.0)
    r_null, err = A.null_reward_attack(b, rho, cmp, c)
    _, err2 = A.null_reward_attack(b, rho, cmp, 2 * c)
    z_norm = float(np.linalg.norm(reward_to_latent(b, r_null, rho)))
    ratio_err = abs(err2 / err - 2.0) / 2.0
    return _check(
        f"null-reward attack d={d}",
        z_norm <= 1e-10 and err >= 100 - 1e-6 and ratio_err <= 1e-6,
        f"scale {c:.6g}, |z_null| {z_norm:.3e}, Q error {err:.6g}, doubled {err2:.6g}",
    )


def check_witness(cmp, rho, seed, max_tries=10_000):
    if cmp.num_actions < 2:
        return _check("non-contraction witness", False, "needs at least two actions")
    try:
        w = A.noncontraction_witness(cmp, rho, make_rng(seed, STREAM_SEARCH), max_tries)
    except SearchFailure as exc:
        return _check("non-contraction witness", False, str(exc))
    return _check(
        "non-contraction witness",
        w.rhs_norm <= 1e-12 and w.lhs_norm > 1e-6,
        f"found after {w.tries} tries at state {w.state}: |f1b1 - f2b2| {w.rhs_norm:.3e}, "
        f"|T(f1b1) - T(f2b2)| {w.lhs_norm:.3e}",
    )


def check_eckart_young(cmp, rho, d):
    target = successor_measure(cmp, uniform_policy(cmp)) / rho
    floor = A.eckart_young_floor(target, d)
    u, s, vt = np.linalg.svd(target)
    trunc = (u[:, :d] * s[:d]) @ vt[:d]
    achieved = float(np.sum((trunc - target) ** 2))
    return _check(
        f"Eckart-Young floor d={d}",
        abs(achieved - floor) <= 1e-10 * max(1.0, floor),
        f"floor {floor:.10g}, truncated SVD loss {achieved:.10g}",
    )


def run_theory_checks(env, d_list, seed=0, report_path=None, gamma=0.9):
    """Run every applicable check and return ``(results, report_text)``."""
    cmp = env.build(gamma)
    rho = env.build_rho(cmp)
    n = cmp.num_pairs
    results = [check_rank_law(cmp, seed)]
    for d in d_list:
        if d < 1:
            raise UsageError(f"d must be >= 1, got {d}")
        if d == n:
            results.append(check_svd_ground_truth(cmp, rho, seed))
        if d < n:
            results.append(check_null_reward(cmp, rho, d))
            results.append(check_eckart_young(cmp, rho, d))
    results.append(check_pseudoinverse(cmp, seed))
    results.append(check_witness(cmp, rho, seed))
    lines = [f"theory checks: env={env.kind} |S x A|={n} d={list(d_list)} seed={seed}", ""]
    for r in results:
        lines.append(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.details}")
    text = "\n".join(lines) + "\n"
    if report_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(report_path)), exist_ok=True)
        with open(report_path, "w") as fh:
            fh.write(text)
    return results, text


def evaluate_checkpoint(model, exp):
    """Metrics of ``model`` on the config's fixed evaluation latents."""
    cmp = exp.env.build(exp.train.gamma)
    rho = exp.env.build_rho(cmp)
    tc = exp.train
    z = sample_prior(model.d, tc.eval_latents_count, tc.prior_variant, make_rng(tc.seed, STREAM_EVAL)).z
    nu, xi = A.draw_equiv_params(make_rng(tc.seed, STREAM_EQUIV), tc.eval_latents_count)
    return A.evaluate(model, cmp, z, rho, nu, xi, uniform_policy(cmp))
