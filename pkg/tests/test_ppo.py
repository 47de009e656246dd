import math

import numpy as np
import pytest

import oracles
from crs_underground.actions import ActionLayout, Strategy
from crs_underground.config import load_config
from crs_underground.environment import Environment
from crs_underground.ppo import (PolicyNetworks, PpoHyper, PpoTrainer, RunningNorm, TrajectoryBatch,
                                 act, active_gradient_mask, clip_grad_norm, clipped_loss, compute_gae,
                                 joint_log_prob, load_checkpoint, save_checkpoint, theta_log_jacobian,
                                 train)

SMALL = dict(hidden=(8, 6))


def tiny_env(strategy="crs", **extra):
    overrides = {"ppo.hidden": "16,8", "ppo.batch": 32, "ppo.epochs": 3, "seed": 4, **extra}
    return Environment(load_config("desk", overrides=overrides), strategy)


def tiny_nets(env, seed=0, log_std=-0.5):
    return PolicyNetworks(env.state_dim, env.layout, np.random.default_rng(seed), (8, 6), log_std)


def crafted_batch(nets, rng, n=12):
    states = rng.standard_normal((n, nets.state_dim))
    raws = rng.standard_normal((n, nets.layout.raw_dim))
    dists, values, _ = nets.forward(states, keep_cache=False)
    logp = joint_log_prob(dists, raws, nets.layout)
    batch = TrajectoryBatch(states, raws, logp.copy(), rng.random(n), values, 0.1,
                            np.full(n, 0.5), np.zeros(n))
    batch.advantages = rng.standard_normal(n)
    batch.returns = rng.standard_normal(n)
    return batch


@pytest.mark.parametrize("seed", range(100))
def test_gae_matches_double_sum(seed):
    rng = np.random.default_rng(seed)
    t_b = int(rng.integers(1, 65))
    rewards, values = rng.standard_normal(t_b), rng.standard_normal(t_b)
    boot, eta, lam = float(rng.standard_normal()), float(rng.uniform(0.01, 0.99)), float(rng.random())
    got = compute_gae(rewards, values, boot, eta, lam)
    want = oracles.gae_naive(rewards, values, boot, eta, lam)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_gae_lambda_edges():
    r, v = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.1, -0.2])
    assert np.allclose(compute_gae(r, v, 0.7, 0.9, 0.0), r + 0.9 * np.array([0.1, -0.2, 0.7]) - v)
    full = compute_gae(r, v, 0.7, 0.9, 1.0)
    discounted = [sum(0.9 ** k * r[t + k] for k in range(3 - t)) + 0.9 ** (3 - t) * 0.7 - v[t] for t in range(3)]
    assert np.allclose(full, discounted, rtol=1e-14)


def test_hyper_validation():
    for bad in (dict(discount=1.0), dict(gae=1.5), dict(clip=0.0), dict(batch=0)):
        with pytest.raises(ValueError):
            PpoHyper(**bad)
    assert PpoHyper(update_rounds=0).update_rounds == 0


def test_theta_jacobian_matches_sigmoid_derivative():
    x = np.array([-1.0, 0.0, 2.5])
    s = 1 / (1 + np.exp(-x))
    assert np.allclose(theta_log_jacobian(x), -np.log(s * (1 - s)), rtol=1e-13)
    # finite where sigmoid saturates in float64
    assert np.all(np.isfinite(theta_log_jacobian(np.array([-800.0, 800.0]))))


def test_act_log_prob_agrees_with_batch_log_prob():
    env = tiny_env()
    nets = tiny_nets(env)
    rng = np.random.default_rng(1)
    state = rng.standard_normal(env.state_dim)
    step = act(nets, state, rng, env.total_power)
    dists, values, _ = nets.forward(state[None, :], keep_cache=False)
    assert math.isclose(joint_log_prob(dists, step.raw[None, :], nets.layout)[0], step.log_prob, rel_tol=1e-12)
    assert math.isclose(values[0], step.value, rel_tol=1e-12, abs_tol=1e-14)
    det = act(nets, state, None, env.total_power, deterministic=True)
    assert np.allclose(det.raw, dists["power"].mean.tolist()[0] + dists["split"].mean.tolist()[0]
                       + dists["theta"].mean.tolist()[0], rtol=1e-12)


def test_ratio_is_one_before_update():
    nets = tiny_nets(tiny_env())
    batch = crafted_batch(nets, np.random.default_rng(2))
    report = clipped_loss(nets, batch, PpoHyper(**SMALL))
    assert report.ratio_max_dev < 1e-12


def test_active_mask_at_clip_boundary():
    eps = 0.2
    ratio = np.array([1.2, 0.8, 1.2, 0.8, 1.1, 1.3, 0.7])
    adv = np.array([1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0])
    assert active_gradient_mask(ratio, adv, eps).tolist() == [False, False, True, True, True, False, False]
    assert not active_gradient_mask(np.array([1.0]), np.array([0.0]), eps)[0]


def test_clipped_rows_give_zero_actor_gradient():
    nets = tiny_nets(tiny_env())
    rng = np.random.default_rng(3)
    batch = crafted_batch(nets, rng)
    hyper = PpoHyper(**SMALL)
    n = len(batch)
    # push every row past the boundary on the side that clips its advantage sign
    adv = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    batch.log_probs = batch.log_probs - np.where(adv > 0, math.log(1.25), math.log(0.75))
    report = clipped_loss(nets, batch, hyper, entropy_coef=0.0, advantages=adv)
    for name, g in report.grads.items():
        if name.startswith(("head.", "log_std.")):
            assert np.all(g == 0.0), name


def test_loss_gradient_matches_finite_differences():
    env = tiny_env()
    nets = tiny_nets(env)
    batch = crafted_batch(nets, np.random.default_rng(4))
    batch.log_probs = batch.log_probs + np.random.default_rng(5).uniform(-0.05, 0.05, len(batch))
    hyper = PpoHyper(**SMALL)
    report = clipped_loss(nets, batch, hyper, entropy_coef=0.03)
    params = nets.parameters()
    h = 1e-6
    worst = 0.0
    for name in ("trunk.0.weight", "trunk.1.ln_gain", "head.power.0.weight", "head.theta.0.bias",
                 "log_std.split", "value.0.weight"):
        arr = params[name]
        for idx in list(np.ndindex(arr.shape))[:10]:
            old = arr[idx]
            arr[idx] = old + h
            up = clipped_loss(nets, batch, hyper, entropy_coef=0.03).combined
            arr[idx] = old - h
            down = clipped_loss(nets, batch, hyper, entropy_coef=0.03).combined
            arr[idx] = old
            num = (up - down) / (2 * h)
            g = report.grads[name][idx]
            worst = max(worst, abs(num - g) / max(abs(num), abs(g), 1e-7))
    assert worst < 1e-5


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == 5.0
    assert math.isclose(math.hypot(grads["a"][0], grads["b"][0]), 1.0, rel_tol=1e-9)
    grads = {"a": np.array([0.3])}
    clip_grad_norm(grads, 1.0)
    assert grads["a"][0] == 0.3


def test_running_norm_welford():
    rng = np.random.default_rng(6)
    x = rng.normal(3.0, 2.0, (500, 4))
    norm = RunningNorm(4)
    for row in x:
        norm.update(row)
    assert np.allclose(norm.mean, x.mean(axis=0), rtol=1e-12)
    assert np.allclose(norm.std, x.std(axis=0), rtol=1e-9)
    assert np.all(np.abs(norm(np.full(4, 1e9))) <= norm.clip)


def test_sync_and_old_networks():
    nets = tiny_nets(tiny_env())
    before = {k: v.copy() for k, v in nets.actor_parameters().items()}
    nets.parameters()["head.power.0.bias"] += 1.0
    old = nets.old_networks()
    assert np.array_equal(old.parameters()["head.power.0.bias"], before["head.power.0.bias"])
    nets.sync_old()
    assert np.array_equal(nets.old["head.power.0.bias"], nets.parameters()["head.power.0.bias"])


def test_zero_update_rounds_leave_parameters_unchanged():
    env = tiny_env()
    nets = tiny_nets(env)
    before = {k: v.copy() for k, v in nets.parameters().items()}
    hyper = PpoHyper(epochs=2, batch=16, update_rounds=0, **SMALL)
    curve = train(env, nets, hyper, np.random.default_rng(7))
    assert all(np.array_equal(before[k], v) for k, v in nets.parameters().items())
    assert len(curve) == 2 and math.isnan(curve[0].actor_loss)


def test_training_is_deterministic_and_checks_ratio():
    def run():
        env = tiny_env()
        nets = tiny_nets(env)
        hyper = PpoHyper(epochs=3, batch=32, **SMALL)
        return train(env, nets, hyper, np.random.default_rng(8)), nets

    a, na = run()
    b, nb = run()
    assert [s.mean_reward for s in a] == [s.mean_reward for s in b]
    assert all(np.array_equal(na.parameters()[k], nb.parameters()[k]) for k in na.parameters())
    assert all(s.ratio_max_dev < 1e-6 for s in a)


def test_stale_old_policy_is_detected():
    env = tiny_env()
    nets = tiny_nets(env)
    trainer = PpoTrainer(env, nets, PpoHyper(epochs=1, batch=16, **SMALL), np.random.default_rng(9))
    batch = trainer.collect()
    nets.parameters()["head.power.0.bias"] += 0.5
    with pytest.raises(RuntimeError, match="ratio"):
        trainer.update(batch, 0.01)


@pytest.mark.parametrize("strategy", ["rsma", "sdma"])
def test_baseline_strategies_train(strategy):
    env = tiny_env(strategy)
    nets = tiny_nets(env)
    assert nets.layout == ActionLayout(Strategy(strategy), env.layout.num_uds)
    curve = train(env, nets, PpoHyper(epochs=2, batch=16, **SMALL), np.random.default_rng(10))
    assert all(c.mean_theta == 1.0 for c in curve)


def test_checkpoint_round_trip(tmp_path):
    env = tiny_env()
    nets = tiny_nets(env)
    train(env, nets, PpoHyper(epochs=2, batch=16, **SMALL), np.random.default_rng(11))
    path = tmp_path / "policy.npz"
    save_checkpoint(path, nets, PpoHyper(**SMALL))
    fresh = tiny_nets(env, seed=99)
    meta = load_checkpoint(path, fresh)
    assert meta["strategy"] == "crs"
    assert all(np.array_equal(nets.parameters()[k], fresh.parameters()[k]) for k in nets.parameters())
    state = np.ones(env.state_dim)
    assert np.array_equal(nets.normalizer(state), fresh.normalizer(state))
