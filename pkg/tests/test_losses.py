import numpy as np
import pytest
import sympy as sp

import gradient_cases as GC

from fblab import grad as G
from fblab import losses as L
from fblab import models as M
from fblab.cmp import (
    Cmp, build_transition_matrix, five_state_circular_cmp, successor_measure, three_state_cmp,
    uniform_policy, uniform_rho,
)
from fblab.errors import ConfigError, TrainingAborted, UsageError
from fblab.optim import AdamW
from fblab.rng import make_rng
from fblab.training import TrainConfig, train

THREE = three_state_cmp()
RHO = uniform_rho(THREE)
BEH = uniform_policy(THREE)
TARGET = successor_measure(THREE, BEH) / RHO
_random_rho = GC.random_rho
_with = GC.with_nodes
_batch = GC.random_batch
FD, FD_TOL, FB_SUBSET = GC.FD, GC.FD_TOL, GC.FB_SUBSET


def _plain(n_states, n_actions, f, b):
    return M.OneStepFbModel(n_states, n_actions, f.shape[1], {"f": f, "b": b}, "plain")


# -- finite differences on 20 random instances per loss


CASES = dict(GC.TRAINING_LOSSES, td_expected=GC.td_expected_error)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("loss", sorted(CASES))
def test_loss_gradient_matches_finite_differences(loss, seed):
    assert CASES[loss](seed) <= FD_TOL


def test_mc_fb_gradient_with_frozen_multi_action_target(monkeypatch):
    model = M.init_fb_model(THREE, 4, 0, head_scale=1.0)
    z = np.random.default_rng(0).normal(size=(2, 4))
    frozen = L.mc_fb_targets(THREE, model.forward_matrix(z), z, RHO, model.tau_policy_train)
    monkeypatch.setattr(L, "mc_fb_targets", lambda *a: frozen)
    names = FB_SUBSET
    err = G.finite_diff_check(lambda t, *p: L.mc_fb_loss(model, THREE, z, RHO, _with(model, names, p, t)),
                              [model.params[k] for k in names], **FD)
    assert err <= FD_TOL


# -- MC losses


def test_mc_onestep_examples():
    gt = M.ground_truth_onestep(THREE, BEH, RHO)
    assert L.mc_onestep_loss(gt, TARGET, gt.leaves(G.Tape())).value <= 1e-12 * np.sum(TARGET**2)
    zero = _plain(3, 3, np.zeros((9, 9)), np.ones((9, 9)))
    assert np.isclose(L.mc_onestep_loss(zero, TARGET, zero.leaves(G.Tape())).value, np.sum(TARGET**2),
                      rtol=1e-14)


def test_mc_onestep_respects_the_rank_floor():
    sv = np.linalg.svd(TARGET, compute_uv=False)
    floor = np.sum(sv[1:] ** 2)
    u, s, vt = np.linalg.svd(TARGET)
    best = _plain(3, 3, u[:, :1] * s[:1], vt[:1])
    assert abs(L.mc_onestep_loss(best, TARGET, best.leaves(G.Tape())).value - floor) <= 1e-9
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = _plain(3, 3, rng.normal(size=(9, 1)), rng.normal(size=(1, 9)))
        assert L.mc_onestep_loss(m, TARGET, m.leaves(G.Tape())).value >= floor - 1e-8


def test_mc_fb_zero_when_product_matches_the_target(monkeypatch):
    model = M.init_fb_model(THREE, 9, 0, head_scale=0.0)
    z = np.random.default_rng(1).normal(size=(4, 9))
    prod = model.forward_matrix(z) @ model.backward_matrix()
    monkeypatch.setattr(L, "mc_fb_targets", lambda *a: prod)
    assert L.mc_fb_loss(model, THREE, z, RHO, model.leaves(G.Tape())).value == 0.0


def test_mc_fb_at_gamma_zero_targets_the_delta_ratio():
    cmp = THREE.with_gamma(0.0)
    model = M.init_fb_model(cmp, 9, 0, head_scale=1.0)
    z = np.random.default_rng(2).normal(size=(3, 9))
    prod = model.forward_matrix(z) @ model.backward_matrix()
    expected = np.mean(np.sum((prod - np.diag(1 / RHO)) ** 2, axis=(1, 2)))
    for tau in (5e-3, 1.0, 100.0):
        got = L.mc_fb_loss(model, cmp, z, RHO, model.leaves(G.Tape()), tau=tau).value
        assert np.isclose(got, expected, rtol=1e-13)


def test_mc_fb_matches_symbolic_expansion_on_two_states():
    gamma = sp.Rational(1, 2)
    p = sp.Matrix([[sp.Rational(1, 4), sp.Rational(3, 4)], [1, 0]])
    m_exact = (1 - gamma) * (sp.eye(2) - gamma * p).inv()
    cmp = Cmp(np.array(p.evalf(), dtype=float)[:, None, :], np.array([1.0, 0.0]), 0.5)
    rho = np.array([0.25, 0.75])
    model = M.init_fb_model(cmp, 2, 3, head_scale=1.0)
    z = np.array([[0.3, -1.2]])
    prod = model.forward_matrix(z[0]) @ model.backward_matrix()
    ratio = m_exact * sp.diag(4, sp.Rational(4, 3))
    expected = sum((sp.Float(prod[i, j], 30) - ratio[i, j]) ** 2 for i in range(2) for j in range(2))
    got = L.mc_fb_loss(model, cmp, z, rho, model.leaves(G.Tape())).value
    assert abs(got - float(expected)) <= 1e-12 * float(expected)


def test_mc_fb_target_carries_no_gradient():
    # identical value and gradient to a fit against the same constant matrix
    model = M.init_fb_model(THREE, 4, 0, head_scale=1.0)
    z = np.random.default_rng(3).normal(size=(2, 4))
    target = L.mc_fb_targets(THREE, model.forward_matrix(z), z, RHO, model.tau_policy_train)
    live = L.named_grads(L.mc_fb_loss(model, THREE, z, RHO, model.leaves(G.Tape())))
    tape = G.Tape()
    leaves = model.leaves(tape)
    fixed = G.mean(G.frob_sq(model.forward_node(leaves, z) @ model.backward_node(leaves) - target, axis="matrix"))
    ref = L.named_grads(fixed)
    for k in ref:
        np.testing.assert_array_equal(live[k], ref[k])


# -- TD losses


def test_td_onestep_at_gamma_zero_is_lsif_against_the_delta():
    rng = np.random.default_rng(4)
    f, b = rng.normal(size=(9, 3)), rng.normal(size=(3, 9))
    model = _plain(3, 3, f, b)
    target = _plain(3, 3, rng.normal(size=(9, 3)), rng.normal(size=(3, 9)))
    batch = _batch(rng, 9, 32)
    prod = f @ b
    expected = np.mean(0.5 * prod[batch.sa, batch.future_sa] ** 2 - prod[batch.sa, batch.sa])
    got = L.td_onestep_loss(model, target, batch, 0.0, model.leaves(G.Tape())).value
    assert np.isclose(got, expected, rtol=1e-13)


def test_td_fb_at_gamma_zero_is_lsif_against_the_delta():
    rng = np.random.default_rng(5)
    model = M.init_fb_model(THREE, 4, 0, head_scale=1.0)
    target = M.init_fb_model(THREE, 4, 1, head_scale=1.0)
    batch = _batch(rng, 9, 8)
    z = rng.normal(size=(8, 4))
    prod = model.forward_matrix(z) @ model.backward_matrix()
    k = np.arange(8)
    expected = np.mean(0.5 * prod[k, batch.sa, batch.future_sa] ** 2 - prod[k, batch.sa, batch.sa])
    got = L.td_fb_loss(model, target, batch, z, 0.0, model.leaves(G.Tape()), make_rng(0)).value
    assert np.isclose(got, expected, rtol=1e-13)


def test_td_losses_reject_empty_and_mismatched_batches():
    empty = L.TransitionBatch(np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
    one = M.init_onestep_model(THREE, 9, 0)
    with pytest.raises(UsageError):
        L.td_onestep_loss(one, one.copy(), empty, 0.9, one.leaves(G.Tape()))
    fb = M.init_fb_model(THREE, 4, 0)
    with pytest.raises(UsageError):
        L.td_fb_loss(fb, fb.copy(), empty, np.zeros((0, 4)), 0.9, fb.leaves(G.Tape()), make_rng(0))
    with pytest.raises(UsageError):
        L.td_fb_loss(fb, fb.copy(), _batch(np.random.default_rng(0), 9, 4), np.zeros((3, 4)), 0.9,
                     fb.leaves(G.Tape()), make_rng(0))


def test_td_onestep_is_deterministic():
    data = L.generate_dataset(THREE, BEH, 1000, make_rng(0))
    model = M.init_onestep_model(THREE, 9, 0, "svd")

    def once():
        batch = data.sample(64, make_rng(1), RHO)
        return L.td_onestep_loss(model, model.copy(), batch, 0.9, model.leaves(G.Tape())).value

    assert once() == once()


def test_td_onestep_expected_gradient_vanishes_at_ground_truth():
    gt = M.ground_truth_onestep(THREE, BEH, RHO)
    for data in (RHO, _random_rho(np.random.default_rng(6), 9)):
        grads = L.named_grads(L.td_onestep_expected(gt, gt, THREE, BEH, data, RHO, gt.leaves(G.Tape())))
        assert max(np.max(np.abs(g)) for g in grads.values()) <= 1e-8


def test_td_fb_expected_gradient_vanishes_at_a_fb_fixed_point():
    rng = np.random.default_rng(7)
    b = rng.normal(size=(9, 9))
    z = rng.normal(size=9)
    f = M.ground_truth_fb_forward(THREE, RHO, b, z)
    pol = M.induced_policy(_plain(3, 3, f, b), z, 1e6)
    p = build_transition_matrix(THREE, pol)
    tape = G.Tape()
    fn, bn = tape.param(f), tape.param(b)
    loss = L.td_expected(fn @ bn, f @ b, p, RHO, RHO, THREE.gamma)
    grads = G.backward(tape, loss)
    assert max(np.max(np.abs(grads[fn])), np.max(np.abs(grads[bn]))) <= 1e-8


def test_td_minus_scaled_mc_is_constant():
    # uniform data and rho: td = mc / (2 n^2) + const when the target sits at the ground truth
    gt = M.ground_truth_onestep(THREE, BEH, RHO)
    rng = np.random.default_rng(8)
    diffs = []
    for _ in range(10):
        model = _plain(3, 3, rng.normal(size=(9, 9)), rng.normal(size=(9, 9)))
        leaves = model.leaves(G.Tape())
        td = L.td_onestep_expected(model, gt, THREE, BEH, RHO, RHO, leaves).value
        mc = L.mc_onestep_loss(model, TARGET, leaves).value
        diffs.append(td - mc / (2 * 81))
    assert np.ptp(diffs) <= 1e-8


def test_stop_gradient_contract_for_td_onestep():
    rng = np.random.default_rng(9)
    f, b = rng.normal(size=(9, 4)), rng.normal(size=(4, 9))
    model = _plain(3, 3, f, b)
    batch = _batch(rng, 9, 40)
    gamma, k = 0.9, len(batch)
    values, self_grads = [], []
    for seed in (10, 11):
        r2 = np.random.default_rng(seed)
        target = _plain(3, 3, r2.normal(size=(9, 4)), r2.normal(size=(4, 9)))
        loss = L.td_onestep_loss(model, target, batch, gamma, model.leaves(G.Tape()))
        grads = L.named_grads(loss)
        assert set(grads) == {"f", "b"}
        values.append(loss.value)
        # remove the bootstrapped quadratic part analytically; what is left is the self term
        boot = np.sum(target.params["f"][batch.next_sa] * target.params["b"].T[batch.future_sa], axis=1)
        e = np.sum(f[batch.sa] * b.T[batch.future_sa], axis=1) - gamma * boot
        gf, gb = grads["f"].copy(), grads["b"].copy()
        np.add.at(gf, batch.sa, -(e[:, None] * b.T[batch.future_sa]) / k)
        np.add.at(gb.T, batch.future_sa, -(e[:, None] * f[batch.sa]) / k)
        self_grads.append((gf, gb))
    assert values[0] != values[1]
    np.testing.assert_allclose(self_grads[0][0], self_grads[1][0], atol=1e-12)
    np.testing.assert_allclose(self_grads[0][1], self_grads[1][1], atol=1e-12)
    ef, eb = np.zeros_like(f), np.zeros_like(b)
    np.add.at(ef, batch.sa, -(1 - gamma) * b.T[batch.sa] / k)
    np.add.at(eb.T, batch.sa, -(1 - gamma) * f[batch.sa] / k)
    np.testing.assert_allclose(self_grads[0][0], ef, atol=1e-12)
    np.testing.assert_allclose(self_grads[0][1], eb, atol=1e-12)


def test_resampled_actions_follow_the_current_policy():
    rng = np.random.default_rng(12)
    model = M.init_fb_model(THREE, 9, 0, head_scale=1.0)
    z = np.tile(rng.normal(size=9) * 5, (20_000, 1))
    next_sa = np.full(20_000, 0)
    f = np.broadcast_to(model.forward_matrix(z[0]), (20_000, 9, 9))
    out = L.resample_next_actions(f, z, next_sa, 3, 1.0, make_rng(0))
    assert np.all(out // 3 == 0)
    probs = M.induced_policy(model, z[0], 1.0)[0]
    freq = np.bincount(out, minlength=3) / 20_000
    assert np.all(np.abs(freq - probs) <= 4 * np.sqrt(probs * (1 - probs) / 20_000) + 1e-12)


# -- orthonormality term


def test_ortho_examples():
    tape = G.Tape()
    assert L.ortho_loss(tape.const(np.zeros((4, 9))), RHO).value == 0.0
    rng = np.random.default_rng(13)
    rho = _random_rho(rng, 9)
    q = G.cayley(rng.normal(size=36), 9)
    b = q / np.sqrt(rho)  # B diag(rho) B^T = I
    tape = G.Tape()
    node = tape.param(b)
    loss = L.ortho_loss(node, rho)
    assert np.isclose(loss.value, -9.0)
    assert np.max(np.abs(G.backward(tape, loss)[node])) <= 1e-10


def test_ortho_matches_the_double_sum():
    rng = np.random.default_rng(14)
    b = rng.normal(size=(3, 5))
    rho = _random_rho(rng, 5)
    double = sum(rho[i] * rho[j] * (b[:, i] @ b[:, j]) ** 2 for i in range(5) for j in range(5))
    single = sum(rho[i] * (b[:, i] @ b[:, i]) for i in range(5))
    got = L.ortho_loss(G.Tape().const(b), rho).value
    assert np.isclose(got, double - 2 * single, rtol=1e-13)


def test_lambda_ortho_scales_the_term_in_training():
    cfg = TrainConfig(steps=0, eval_latents_count=4, lambda_ortho=0.0, param_kind="plain")
    _, base = train("onestep_fb", THREE, cfg)
    _, reg = train("onestep_fb", THREE, TrainConfig(**{**cfg.as_dict(), "lambda_ortho": 2.5}))
    model = M.init_onestep_model(THREE, 9, 0, "plain")
    ortho = L.ortho_loss(G.Tape().const(model.params["b"]), RHO).value
    assert np.isclose(reg[0].loss - base[0].loss, 2.5 * ortho, rtol=1e-12)


# -- Polyak averaging


def test_polyak_examples():
    online = M.init_onestep_model(THREE, 9, 0)
    target = M.init_onestep_model(THREE, 9, 1)
    before = {k: v.copy() for k, v in target.params.items()}
    L.polyak_update(target, online, 0.0)
    assert all(np.array_equal(target.params[k], before[k]) for k in before)
    mixed = L.polyak_update(target.copy(), online, 0.01)
    np.testing.assert_allclose(mixed.params["f"], 0.99 * before["f"] + 0.01 * online.params["f"], atol=1e-15)
    L.polyak_update(target, online, 1.0)
    assert all(np.array_equal(target.params[k], online.params[k]) for k in before)


def test_polyak_rejects_mismatched_models():
    with pytest.raises(UsageError):
        L.polyak_update(M.init_onestep_model(THREE, 9, 0, "svd"), M.init_onestep_model(THREE, 9, 0), 0.5)
    with pytest.raises(UsageError):
        L.polyak_update(M.init_onestep_model(THREE, 4, 0), M.init_onestep_model(THREE, 9, 0), 0.5)
    with pytest.raises(UsageError):
        L.polyak_update(M.init_onestep_model(THREE, 9, 0), M.init_onestep_model(THREE, 9, 0), 1.5)


# -- data


def test_deterministic_rollouts_repeat_one_transition():
    t = np.ones((1, 2, 1))
    cmp = Cmp(t, np.array([1.0]), 0.9)
    data = L.generate_dataset(cmp, np.array([[0.0, 1.0]]), 500, make_rng(0))
    assert len(data) == 500
    assert np.all(data.sa == 1) and np.all(data.next_sa == 1)


def test_dataset_is_seeded():
    a = L.generate_dataset(THREE, BEH, 300, make_rng(2))
    b = L.generate_dataset(THREE, BEH, 300, make_rng(2))
    assert np.array_equal(a.sa, b.sa) and np.array_equal(a.next_sa, b.next_sa)
    s1 = a.sample(50, make_rng(3), RHO)
    s2 = b.sample(50, make_rng(3), RHO)
    assert np.array_equal(s1.future_sa, s2.future_sa)


def test_dataset_transitions_respect_the_support():
    cmp = five_state_circular_cmp()
    beh = np.tile([0.3, 0.7], (5, 1))
    data = L.generate_dataset(cmp, beh, 5000, make_rng(4), horizon=20)
    p = build_transition_matrix(cmp, beh)
    assert np.all(p[data.sa, data.next_sa] > 0)
    # each episode continues from the previous next pair
    ep = data.sa.reshape(-1, 20), data.next_sa.reshape(-1, 20)
    assert np.array_equal(ep[0][:, 1:], ep[1][:, :-1])


def test_dataset_frequencies_match_exact_probabilities():
    cmp = five_state_circular_cmp()
    beh = np.tile([0.4, 0.6], (5, 1))
    data = L.generate_dataset(cmp, beh, 100_000, make_rng(5))
    counts = data.frequencies() * len(data)
    p = build_transition_matrix(cmp, beh)
    n_sa = counts.sum(axis=1)
    assert np.all(n_sa > 0)
    expected = n_sa[:, None] * p
    sigma = np.sqrt(n_sa[:, None] * p * (1 - p))
    assert np.all(np.abs(counts - expected) <= 3 * sigma + 1e-9)


def test_future_samples_follow_rho():
    data = L.generate_dataset(THREE, BEH, 100, make_rng(6))
    rho = _random_rho(np.random.default_rng(7), 9)
    batch = data.sample(100_000, make_rng(8), rho)
    freq = np.bincount(batch.future_sa, minlength=9) / 100_000
    assert np.all(np.abs(freq - rho) <= 4 * np.sqrt(rho * (1 - rho) / 100_000))


def test_dataset_errors():
    with pytest.raises(ConfigError):
        L.generate_dataset(THREE, BEH, 0, make_rng(0))
    with pytest.raises(ConfigError):
        L.generate_dataset(THREE, np.ones((3, 3)), 10, make_rng(0))


# -- training loop


def test_monotone_descent_after_burn_in():
    model = M.init_onestep_model(THREE, 9, 0, "plain")
    opt = AdamW()
    trace = []
    for _ in range(12_000):
        loss = L.mc_onestep_loss(model, TARGET, model.leaves(G.Tape()))
        trace.append(float(loss.value))
        opt.step(model.params, L.named_grads(loss))
    late = np.array(trace[5000:])
    assert np.all(late[1000:] <= late[:-1000] + 1e-9)


def test_zero_steps_returns_the_init_model():
    cfg = TrainConfig(steps=0, eval_latents_count=8)
    model, recs = train("onestep_fb", THREE, cfg)
    init = M.init_onestep_model(THREE, 9, 0, "svd")
    assert len(recs) == 1 and recs[0].step == 0
    assert all(np.array_equal(model.params[k], init.params[k]) for k in init.params)


def test_training_records_on_the_eval_grid():
    cfg = TrainConfig(steps=25, eval_interval=10, eval_latents_count=8, param_kind="plain")
    _, recs = train("onestep_fb", THREE, cfg)
    assert [r.step for r in recs] == [0, 10, 20, 25]


def test_training_is_deterministic():
    cfg = TrainConfig(steps=20, eval_interval=10, eval_latents_count=8, batch_size=16, loss_mode="td", d=4,
                      n_transitions=500)
    m1, r1 = train("fb", THREE, cfg)
    m2, r2 = train("fb", THREE, cfg)
    assert [repr(x.as_row()) for x in r1] == [repr(x.as_row()) for x in r2]
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_loss_aborts_with_records():
    cfg = TrainConfig(steps=50, eval_interval=1, eval_latents_count=4, lr=1e200, weight_decay=0.0,
                      param_kind="plain")
    with pytest.raises(TrainingAborted) as info:
        train("onestep_fb", THREE, cfg)
    assert info.value.records and info.value.records[0].step == 0


@pytest.mark.parametrize("field,value", [
    ("steps", -1), ("batch_size", 0), ("lambda_ortho", -1.0), ("target_polyak", 0.0), ("loss_mode", "gd"),
    ("eval_interval", 0), ("gamma", 1.0), ("tau_policy_train", 0.0), ("d", -2),
])
def test_invalid_train_config(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value}).validate()


def test_unknown_algo():
    with pytest.raises(ConfigError):
        train("sac", THREE, TrainConfig(steps=0))
