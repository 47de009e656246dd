"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together in
the "acceptance criteria" section at the end of the pytest session.
"""

import json
import math
import time

import numpy as np
import pytest

import oracles
from crs_underground import cli
from crs_underground.actions import ActionLayout, ResourceAction, Strategy, squash_action, validate_action
from crs_underground.channel import (DielectricTable, LinkRealization, SoilProfile, attenuation_constants,
                                     friis_gain, refraction_loss, sample_rician, soil_loss)
from crs_underground.config import load_config
from crs_underground.harness import evaluate_policy, fixed_policy, summarize, train_cell, uniform_action
from crs_underground.neural import backward, forward, init_mlp, named_grads
from crs_underground.ppo import (PolicyNetworks, PpoHyper, TrajectoryBatch, clipped_loss, compute_gae,
                                 joint_log_prob, surrogate_logp_grad, train)
from crs_underground.rate_engine import evaluate_crs

SEEDS = (0, 1, 2)


def crit(k):
    def mark(fn):
        fn.criterion_id = k
        return fn
    return mark


def cn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


@crit(1)
def test_c1_channel_oracle(criterion):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        er, ei = rng.uniform(1.0, 40.0), rng.uniform(0.0, 20.0)
        mu, f, d = rng.uniform(0.5, 2.0), 10 ** rng.uniform(8, 9.5), rng.uniform(0.05, 2.0)
        s = SoilProfile(eps_real=er, eps_imag=ei, burial_depth=d, mu_r=mu)
        alpha, beta = attenuation_constants(s, f)
        a_ref, b_ref = oracles.alpha_beta(er, ei, mu, f)
        g_tx, g_rx = rng.uniform(0, 30), rng.uniform(0, 10)
        dist, ple = 10 ** rng.uniform(1, 6), rng.uniform(2.0, 4.0)
        errs = [oracles.rel_err(alpha, a_ref), oracles.rel_err(beta, b_ref),
                oracles.rel_err(refraction_loss(s), oracles.refraction(er, ei)),
                oracles.rel_err(soil_loss(s, f, d), oracles.soil(er, ei, mu, f, d)),
                oracles.rel_err(friis_gain(10 ** (g_tx / 10), 10 ** (g_rx / 10), f, dist, ple),
                                oracles.friis_db(g_tx, g_rx, f, dist, ple))]
        worst = max(worst, *errs)
    unit = refraction_loss(SoilProfile(eps_real=1.0, eps_imag=0.0, burial_depth=1.0))
    lossless = attenuation_constants(SoilProfile(eps_real=7.0, eps_imag=0.0, burial_depth=1.0), 433e6)[0]
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and unit == 0.25 and lossless == 0.0 and elapsed < 1.0
    criterion(1, ok, f"max rel err {worst:.2e} over 100 draws, L^r(1)={unit}, alpha(eps''=0)={lossless}, "
                     f"{elapsed:.2f}s")
    assert ok


@crit(2)
def test_c2_rician_statistics(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    powers = {}
    for k in (0.0, 3.0, 10.0):
        d = sample_rician(k, 1_000_000, rng, los_phase=rng.uniform(0, 2 * np.pi))
        powers[k] = float(np.mean(np.abs(d) ** 2))
    elapsed = time.perf_counter() - start
    ok = all(abs(p - 1.0) < 0.01 for p in powers.values()) and elapsed < 10.0
    criterion(2, ok, "E|d|^2 " + ", ".join(f"K={k:g}: {p:.4f}" for k, p in powers.items())
              + f", {elapsed:.2f}s")
    assert ok


def _random_instance(rng):
    links = LinkRealization(h_ar=cn(rng, 2) * rng.uniform(0.5, 3), h_ud=cn(rng, 2, 2) * rng.uniform(0.1, 1),
                            h_relay_ud=cn(rng, 2) * rng.uniform(0.1, 1))
    p = rng.random(4)
    c = rng.random(4)
    action = ResourceAction(power=p / p.sum() * rng.uniform(0.5, 2), common_split=(c / c.sum())[:3],
                            theta=float(rng.random()))
    return links, action, 10 ** rng.uniform(-3, -1), rng.uniform(0.01, 1.0)


_FIELDS = ("sinr_common_relay", "sinr_common_ud", "sinr_priv_relay", "sinr_priv_ud", "rate_common",
           "rate_coop_ud", "rate_total", "min_rate")


def _closed_forms(rng):
    """Degenerate settings against their closed forms, compared exactly."""
    failures = []
    for _ in range(10):
        links, a, noise, p_r = _random_instance(rng)
        base = evaluate_crs(links, a, noise_power=noise, relay_power=p_r)

        r = evaluate_crs(links, ResourceAction(a.power, a.common_split, 0.0), noise_power=noise, relay_power=p_r)
        if not (r.rate_common == 0 and np.all(r.rate_total == 0) and r.min_rate == 0):
            failures.append("theta=0")

        r = evaluate_crs(links, ResourceAction(a.power, a.common_split, 1.0), noise_power=noise, relay_power=p_r)
        direct = min(np.log2(1 + r.sinr_common_relay), *np.log2(1 + r.sinr_common_ud))
        if not (np.all(r.rate_coop_ud == 0) and r.rate_common == direct):
            failures.append("theta=1")

        p0 = a.power.copy()
        p0[0] = 0.0
        r = evaluate_crs(links, ResourceAction(p0, a.common_split, a.theta), noise_power=noise, relay_power=p_r)
        priv = np.concatenate([[r.rate_priv_relay], r.rate_priv_ud])
        if not (r.sinr_common_relay == 0 and np.all(r.sinr_common_ud == 0) and r.rate_common == 0
                and np.array_equal(r.rate_total, priv)):
            failures.append("P_c=0")

        r = evaluate_crs(links, a, noise_power=noise, relay_power=0.0)
        direct = min(a.theta * np.log2(1 + r.sinr_common_relay), *(a.theta * np.log2(1 + r.sinr_common_ud)))
        if not (np.all(r.rate_coop_ud == 0) and r.rate_common == direct
                and np.array_equal(r.sinr_common_ud, base.sinr_common_ud)):
            failures.append("P_R=0")
    return failures


@crit(3)
def test_c3_rate_chain_oracle(criterion):
    rng = np.random.default_rng(303)
    instances = [_random_instance(rng) for _ in range(50)]
    start = time.perf_counter()
    reports = [evaluate_crs(l, a, noise_power=n, relay_power=p) for l, a, n, p in instances]
    failures = _closed_forms(rng)
    elapsed = time.perf_counter() - start
    worst = 0.0
    for (links, a, noise, p_r), rep in zip(instances, reports):
        ref = oracles.crs_report(links.h_ar, links.h_ud, links.h_relay_ud, a.power, a.common_split,
                                 a.theta, noise, p_r)
        for name in _FIELDS:
            got, want = np.atleast_1d(getattr(rep, name)), ref[name]
            want = want if isinstance(want, list) else [want]
            worst = max(worst, *(oracles.rel_err(g, w) for g, w in zip(got, want)))
    ok = worst < 1e-12 and not failures and elapsed < 1.0
    criterion(3, ok, f"max rel err {worst:.2e} over 50 instances, closed-form failures {failures or 'none'}, "
                     f"engine time {elapsed:.3f}s")
    assert ok


@crit(4)
def test_c4_constraint_closure(criterion):
    rng = np.random.default_rng(404)
    lay = ActionLayout(Strategy.CRS, 3)
    total = load_config("desk").gains.tx_power_sat
    scales = 10 ** rng.uniform(-2, 2, 100_000)
    raws = rng.standard_normal((100_000, lay.raw_dim)) * scales[:, None]
    violations, worst_sum = 0, 0.0
    for raw in raws:
        a = squash_action(raw, lay, total)
        try:
            validate_action(a, lay, total, rtol=0.0)
        except ValueError:
            violations += 1
        worst_sum = max(worst_sum, abs(a.power.sum() - total))
    ok = violations == 0 and worst_sum <= 1e-12
    criterion(4, ok, f"1e5 raw actions, {violations} violations, max |sum P - P_t| = {worst_sum:.1e}")
    assert ok


@crit(5)
def test_c5_gradient_check(criterion):
    rng = np.random.default_rng(505)
    params = init_mlp(rng, [6, 16, 16, 3], output_gain=1.0)
    for layer in params.layers:
        layer.bias += rng.normal(0, 0.1, layer.bias.shape)
        if layer.ln_gain is not None:
            layer.ln_gain += rng.normal(0, 0.2, layer.ln_gain.shape)
            layer.ln_offset += rng.normal(0, 0.2, layer.ln_offset.shape)
    x = rng.standard_normal((5, 6))
    w = rng.standard_normal((5, 3))
    _, cache = forward(params, x)
    grads = named_grads(backward(params, cache, w)[0])
    h, worst, count = 1e-6, 0.0, 0
    for name, arr in params.named_arrays().items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = float(np.sum(forward(params, x, keep_cache=False)[0] * w))
            arr[idx] = old - h
            down = float(np.sum(forward(params, x, keep_cache=False)[0] * w))
            arr[idx] = old
            num, ana = (up - down) / (2 * h), grads[name][idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
            count += 1
    ok = worst < 1e-5
    criterion(5, ok, f"max rel err {worst:.2e} over {count} parameters (2 hidden layers of 16)")
    assert ok


@crit(6)
def test_c6_gae_equivalence(criterion):
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(100):
        t_b = int(rng.integers(1, 65))
        r, v = rng.standard_normal(t_b), rng.standard_normal(t_b)
        boot, eta, lam = float(rng.standard_normal()), float(rng.uniform(0, 0.999)), float(rng.random())
        got = compute_gae(r, v, boot, eta, lam)
        want = np.array(oracles.gae_naive(r, v, boot, eta, lam))
        worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0))))
    ok = worst < 1e-12
    criterion(6, ok, f"max err {worst:.2e} over 100 random batches")
    assert ok


@crit(7)
def test_c7_ratio_identity_and_clip_boundary(criterion):
    cfg = load_config("desk", overrides={"ppo.epochs": 20, "ppo.batch": 128})
    from crs_underground.environment import Environment

    env = Environment(cfg)
    nets = PolicyNetworks(env.state_dim, env.layout, np.random.default_rng(0), cfg.hyper.hidden,
                          cfg.hyper.init_log_std)
    curve = train(env, nets, cfg.hyper, np.random.default_rng(1))
    max_dev = max(s.ratio_max_dev for s in curve)

    # exactly at the boundary, and beyond it on the side the advantage pushes
    eps = cfg.hyper.clip
    boundary = surrogate_logp_grad(np.array([1 + eps, 1 - eps, 1 + 2 * eps, 1 - 2 * eps]),
                                   np.array([2.0, -2.0, 1.0, -1.0]), eps)

    # crafted batch: every row lies past the boundary on its clipped side
    rng = np.random.default_rng(7)
    n = 16
    states = rng.standard_normal((n, nets.state_dim))
    raws = rng.standard_normal((n, nets.layout.raw_dim))
    dists, values, _ = nets.forward(states, keep_cache=False)
    logp = joint_log_prob(dists, raws, nets.layout)
    adv = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    target = np.where(adv > 0, 1 + 2 * eps, 1 - 2 * eps) * rng.uniform(1.0, 1.5, n) ** adv
    batch = TrajectoryBatch(states, raws, logp - np.log(target), rng.random(n), values, 0.0,
                            np.full(n, 0.5), np.zeros(n), advantages=adv, returns=rng.random(n))
    hyper = PpoHyper(hidden=cfg.hyper.hidden)
    report = clipped_loss(nets, batch, hyper, entropy_coef=0.0, advantages=adv)
    actor_grad = max(float(np.max(np.abs(g))) for k, g in report.grads.items()
                     if k.startswith(("head.", "log_std.")))
    ok = max_dev < 1e-6 and actor_grad == 0.0 and np.all(boundary == 0.0)
    criterion(7, ok, f"max |r-1| on first round over {len(curve)} episodes {max_dev:.1e}, "
                     f"boundary weights {boundary.tolist()}, actor gradient on clipped batch {actor_grad}")
    assert ok


@crit(8)
def test_c8_training_ordering(criterion):
    cfg = load_config("desk")
    start = time.perf_counter()
    finals, initials = {}, {}
    for seed in SEEDS:
        for strategy in ("crs", "rsma", "sdma", "greedy"):
            initials[strategy, seed], finals[strategy, seed] = summarize(
                train_cell(cfg, strategy, seed).rewards())
    elapsed = time.perf_counter() - start
    passing = []
    for seed in SEEDS:
        crs = finals["crs", seed]
        ordered = all(crs > finals[b, seed] for b in ("rsma", "sdma", "greedy"))
        improved = crs >= 1.5 * initials["crs", seed]
        passing.append(ordered and improved)
    detail = "; ".join(
        f"seed {s}: crs {initials['crs', s]:.3f}->{finals['crs', s]:.3f} "
        f"rsma {finals['rsma', s]:.3f} sdma {finals['sdma', s]:.3f} greedy {finals['greedy', s]:.3f}"
        for s in SEEDS)
    ok = sum(passing) >= 2 and elapsed < 900
    criterion(8, ok, f"{sum(passing)}/3 seeds satisfy ordering and >=50% gain ({detail}), {elapsed:.0f}s")
    assert ok


@crit(9)
def test_c9_physical_monotonicity(criterion):
    start = time.perf_counter()
    base = load_config("desk")
    vwc_grid = DielectricTable().vwc

    def mean_rate(overrides, strategy, seed):
        cfg = base.override(overrides)
        return float(evaluate_policy(cfg, strategy, fixed_policy(uniform_action(cfg, strategy)),
                                     seed, 512).mean())

    votes = {"depth": 0, "vwc": 0, "ud_count": 0}
    checks = 0
    for strategy in ("crs", "rsma", "sdma"):
        tally = {"depth": 0, "vwc": 0, "ud_count": 0}
        for seed in SEEDS:
            depth = [mean_rate({"soil.burial_depth_m": d}, strategy, seed) for d in (0.4, 0.6, 0.8)]
            vwc = [mean_rate({"soil.vwc": v}, strategy, seed) for v in vwc_grid]
            uds = [mean_rate({"ud.count": n}, strategy, seed) for n in (3, 5)]
            tally["depth"] += all(a > b for a, b in zip(depth, depth[1:]))
            tally["vwc"] += all(a > b for a, b in zip(vwc, vwc[1:]))
            tally["ud_count"] += uds[1] <= uds[0]
        for key in votes:
            votes[key] += tally[key] >= 2
        checks += 1
    elapsed = time.perf_counter() - start
    ok = all(v == checks for v in votes.values()) and elapsed < 120
    criterion(9, ok, f"uniform fixed policy, 512 draws, seed-majority holds for "
                     f"depth {votes['depth']}/3, vwc {votes['vwc']}/3, N {votes['ud_count']}/3 strategies, "
                     f"{elapsed:.0f}s")
    assert ok


@crit(10)
def test_c10_cli_determinism(criterion, tmp_path, capsys):
    tiny = [f"--set={k}" for k in ("ppo.epochs=3", "ppo.batch=32", "ppo.hidden=32,16", "eval.draws=32")]
    tiny.append("--quiet")
    dump = tmp_path / "dump.json"
    rng = np.random.default_rng(10)
    pairs = lambda z: [[float(x.real), float(x.imag)] for x in np.ravel(z)]
    dump.write_text(json.dumps({
        "noise_power": 0.01, "relay_power": 0.3, "h_ar": pairs(cn(rng, 2)),
        "h_ud": [pairs(h) for h in cn(rng, 2, 2)], "h_relay_ud": pairs(cn(rng, 2)),
        "power": [0.4, 0.2, 0.2, 0.2], "common_split": [0.2, 0.3, 0.3], "theta": 0.7}))
    commands = {
        "train": lambda d: ["train", "--strategy", "crs", "--seed", "5", "--out", str(d), *tiny],
        "train-greedy": lambda d: ["train", "--strategy", "greedy", "--seed", "5", "--out", str(d), *tiny],
        "convergence": lambda d: ["convergence", "--seeds", "0", "1", "--out", str(d), *tiny],
        "sweep": lambda d: ["sweep", "--var", "depth", "--values", "0.4", "0.8", "--strategies", "crs",
                            "sdma", "--out", str(d), *tiny],
        "trajectory": lambda d: ["trajectory", "--steps", "64", "--out", str(d / "traj.csv"), *tiny],
    }
    mismatched, n_files = [], 0
    for name, build in commands.items():
        outputs = []
        for run in ("a", "b"):
            d = tmp_path / name / run
            d.mkdir(parents=True)
            assert cli.main(build(d)) == 0, name
            capsys.readouterr()
            outputs.append({p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*.csv"))})
        n_files += len(outputs[0])
        if not outputs[0] or outputs[0] != outputs[1]:
            mismatched.append(name)
    printed = []
    for _ in range(2):
        assert cli.main(["rate-eval", "--in", str(dump)]) == 0
        printed.append(capsys.readouterr().out)
    if printed[0] != printed[1]:
        mismatched.append("rate-eval")
    ok = not mismatched
    criterion(10, ok, f"{len(commands) + 1} commands run twice, {n_files} CSVs compared, "
                      f"mismatches: {mismatched or 'none'}")
    assert ok
