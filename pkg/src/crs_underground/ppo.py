"""PPO with a shared trunk, three Gaussian actor branches and a value head."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import neural
from .actions import ActionLayout, ResourceAction, squash_action
from .neural import DiagGaussian, MlpParams

BRANCHES = ("power", "split", "theta")


@dataclass
class PpoHyper:
    epochs: int = 2000
    batch: int = 512
    update_rounds: int = 3
    discount: float = 0.9
    gae: float = 0.95
    clip: float = 0.2
    lr: float = 1e-4
    entropy_coef: float = 0.01
    adv_norm: bool = True
    max_grad_norm: float = 0.5
    weight_decay: float = 1e-4
    hidden: tuple[int, ...] = (512, 256)
    init_log_std: float = -0.5

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if not 0.0 <= self.gae <= 1.0:
            raise ValueError("gae must lie in [0, 1]")
        if not self.clip > 0:
            raise ValueError("clip must be > 0")
        if self.epochs < 1 or self.batch < 1 or self.update_rounds < 0:
            raise ValueError("epochs and batch must be >= 1, update_rounds >= 0")
        self.hidden = tuple(int(h) for h in self.hidden)


class RunningNorm:
    """Running mean/variance state normalizer (Welford); freeze for evaluation."""

    def __init__(self, dim: int, clip: float = 10.0):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.clip = clip
        self.frozen = False

    def update(self, x: np.ndarray) -> None:
        if self.frozen:
            return
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    @property
    def std(self) -> np.ndarray:
        var = self.m2 / self.count if self.count > 1 else np.ones_like(self.mean)
        return np.sqrt(var + 1e-8)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / self.std, -self.clip, self.clip)


class PolicyNetworks:
    """Shared feature trunk feeding three actor branches and a critic.

    ``old`` holds a frozen copy of every array taken at the last sync.
    """

    def __init__(self, state_dim: int, layout: ActionLayout, rng: np.random.Generator,
                 hidden=(512, 256), init_log_std: float = -0.5):
        self.layout = layout
        self.state_dim = state_dim
        self.trunk = neural.init_mlp(rng, [state_dim, *hidden], output_gain=None)
        width = hidden[-1]
        self.dims = {"power": layout.power_dim, "split": layout.split_dim,
                     "theta": int(layout.has_theta)}
        self.branches = [b for b in BRANCHES if self.dims[b] > 0]
        self.heads = {b: neural.init_mlp(rng, [width, self.dims[b]], output_gain=0.01)
                      for b in self.branches}
        self.value_head = neural.init_mlp(rng, [width, 1], output_gain=1.0)
        self.log_std = {b: np.full(self.dims[b], float(init_log_std)) for b in self.branches}
        self.normalizer = RunningNorm(state_dim)
        self.old: dict[str, np.ndarray] = {}
        self.sync_old()

    def parameters(self) -> dict[str, np.ndarray]:
        params = dict(self.trunk.named_arrays("trunk."))
        for b in self.branches:
            params.update(self.heads[b].named_arrays(f"head.{b}."))
            params[f"log_std.{b}"] = self.log_std[b]
        params.update(self.value_head.named_arrays("value."))
        return params

    def actor_parameters(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.parameters().items() if not k.startswith("value.")}

    def sync_old(self) -> None:
        self.old = {k: v.copy() for k, v in self.actor_parameters().items()}

    def old_networks(self) -> "PolicyNetworks":
        """A detached copy carrying the synced old-actor parameters."""
        twin = copy.deepcopy(self)
        params = twin.parameters()
        for k, v in self.old.items():
            params[k][...] = v
        return twin

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks {sorted(missing)}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"checkpoint shape mismatch for {k}")
            p[...] = arrays[k]

    def forward(self, states: np.ndarray, keep_cache: bool = True):
        """Returns (dists per branch, values, caches)."""
        feats, trunk_cache = neural.forward(self.trunk, states, keep_cache)
        dists, head_caches = {}, {}
        for b in self.branches:
            mean, head_caches[b] = neural.forward(self.heads[b], feats, keep_cache)
            dists[b] = DiagGaussian(mean, self.log_std[b])
        value, value_cache = neural.forward(self.value_head, feats, keep_cache)
        return dists, value[:, 0], (trunk_cache, head_caches, value_cache)

    def backward(self, caches, mean_grads: dict[str, np.ndarray], value_grad: np.ndarray,
                 log_std_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        trunk_cache, head_caches, value_cache = caches
        grads: dict[str, np.ndarray] = {}
        feat_grad = None
        for b in self.branches:
            g, d_feat = neural.backward(self.heads[b], head_caches[b], mean_grads[b])
            grads.update(neural.named_grads(g, f"head.{b}."))
            grads[f"log_std.{b}"] = log_std_grads[b]
            feat_grad = d_feat if feat_grad is None else feat_grad + d_feat
        g, d_feat = neural.backward(self.value_head, value_cache, value_grad[:, None])
        grads.update(neural.named_grads(g, "value."))
        feat_grad = feat_grad + d_feat
        g, _ = neural.backward(self.trunk, trunk_cache, feat_grad)
        grads.update(neural.named_grads(g, "trunk."))
        return grads


def _softplus(x):
    return np.logaddexp(0.0, x)


def theta_log_jacobian(raw_theta: np.ndarray) -> np.ndarray:
    """-log dθ/draw for θ = sigmoid(raw); added to the raw log-density."""
    return _softplus(raw_theta) + _softplus(-raw_theta)


def joint_log_prob(dists: dict[str, DiagGaussian], raw: np.ndarray, layout: ActionLayout) -> np.ndarray:
    """Log-density of the executed action: Gaussian branches plus θ's Jacobian."""
    parts = dict(zip(("power", "split", "theta"), layout.split_raw(raw)))
    total = sum(dists[b].log_prob(parts[b]) for b in dists)
    if layout.has_theta:
        total = total + theta_log_jacobian(parts["theta"][..., 0])
    return total


@dataclass
class ActStep:
    raw: np.ndarray
    action: ResourceAction
    log_prob: float
    value: float


class InferenceSnapshot:
    """Frozen single-row evaluator with all heads fused into one matmul.

    Valid only while the parameters it was built from are unchanged.
    """

    def __init__(self, nets: PolicyNetworks):
        self.nets = nets
        self.trunk = [(l.weight.copy(), l.bias.copy(), l.ln_gain.copy(), l.ln_offset.copy())
                      for l in nets.trunk.layers]
        heads = [nets.heads[b].layers[0] for b in nets.branches] + [nets.value_head.layers[0]]
        self.head_w = np.hstack([h.weight for h in heads])
        self.head_b = np.concatenate([h.bias for h in heads])
        log_std = np.concatenate([nets.log_std[b] for b in nets.branches])
        self.log_std = np.clip(log_std, neural.LOG_STD_MIN, neural.LOG_STD_MAX)
        self.std = np.exp(self.log_std)
        self.const = float(-self.log_std.sum() - 0.5 * len(log_std) * DiagGaussian.LOG_2PI)

    def __call__(self, state: np.ndarray) -> tuple[np.ndarray, float]:
        h = state
        for w, b, g, o in self.trunk:
            z = h @ w + b
            d = z - z.mean()
            z = d / np.sqrt((d @ d) / len(d) + neural.LN_EPS) * g + o
            h = neural.gelu(z)
        out = h @ self.head_w + self.head_b
        if not np.isfinite(out).all():
            raise neural.NonFiniteError("non-finite policy output")
        return out[:-1], float(out[-1])


def act(nets: PolicyNetworks, state: np.ndarray, rng: np.random.Generator | None,
        total_power: float, deterministic: bool = False,
        snapshot: InferenceSnapshot | None = None) -> ActStep:
    """Sample (or take the mean of) the policy at one normalized state."""
    snap = snapshot or InferenceSnapshot(nets)
    mean, value = snap(np.asarray(state, dtype=float))
    if deterministic:
        raw = mean.copy()
        noise = np.zeros_like(mean)
    else:
        noise = rng.standard_normal(mean.shape[0])
        raw = mean + snap.std * noise
    log_prob = snap.const - 0.5 * float(noise @ noise)
    if nets.layout.has_theta:
        log_prob += float(theta_log_jacobian(raw[-1]))
    action = squash_action(raw, nets.layout, total_power)
    return ActStep(raw=raw, action=action, log_prob=log_prob, value=value)


@dataclass
class TrajectoryBatch:
    states: np.ndarray
    raw_actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    bootstrap_value: float
    thetas: np.ndarray
    common_fraction: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)


def compute_gae(rewards: np.ndarray, values: np.ndarray, bootstrap_value: float,
                discount: float, gae: float) -> np.ndarray:
    """Advantages by the backward recursion A_t = δ_t + ης A_{t+1}."""
    rewards = np.asarray(rewards, dtype=float)
    v = np.append(np.asarray(values, dtype=float), bootstrap_value)
    deltas = rewards + discount * v[1:] - v[:-1]
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = deltas[t] + discount * gae * running
        adv[t] = running
    return adv


@dataclass
class LossReport:
    actor_objective: float
    critic_loss: float
    entropy: float
    combined: float
    ratio_max_dev: float
    grads: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def active_gradient_mask(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    """Rows where the unclipped term is the minimum and so carries gradient.

    At the boundary itself (ratio exactly 1 +- eps) the clipped branch wins.
    """
    return ((adv > 0) & (ratio < 1.0 + eps)) | ((adv < 0) & (ratio > 1.0 - eps))


def surrogate_logp_grad(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    """Per-row d(-min(rA, clip(r)A))/d log_prob; zero wherever the clipped term is active."""
    return -np.where(active_gradient_mask(ratio, adv, eps), ratio * adv, 0.0)


def clipped_loss(nets: PolicyNetworks, batch: TrajectoryBatch, hyper: PpoHyper,
                 entropy_coef: float | None = None, advantages: np.ndarray | None = None) -> LossReport:
    """Combined loss ``critic/2 - clip_objective - c*entropy`` and its gradients.

    Old-policy log-probs are the ones stored at collection time.
    """
    coef = hyper.entropy_coef if entropy_coef is None else entropy_coef
    adv = batch.advantages if advantages is None else advantages
    n = len(batch)
    dists, values, caches = nets.forward(batch.states)
    log_probs = joint_log_prob(dists, batch.raw_actions, nets.layout)
    ratio = np.exp(log_probs - batch.log_probs)
    eps = hyper.clip
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    objective = float(np.mean(np.minimum(ratio * adv, clipped * adv)))
    d_logp = surrogate_logp_grad(ratio, adv, eps) / n
    td = values - batch.returns
    critic = float(np.mean(td * td))
    entropy = sum(d.entropy() for d in dists.values())
    combined = 0.5 * critic - objective - coef * entropy

    parts = dict(zip(("power", "split", "theta"), nets.layout.split_raw(batch.raw_actions)))
    mean_grads, log_std_grads = {}, {}
    for b in nets.branches:
        d_mean, d_log_std = dists[b].log_prob_grads(parts[b])
        mean_grads[b] = d_logp[:, None] * d_mean
        log_std_grads[b] = (d_logp[:, None] * d_log_std).sum(axis=0) - coef * dists[b].clamp_mask
    value_grad = td / n
    grads = nets.backward(caches, mean_grads, value_grad, log_std_grads)
    return LossReport(objective, critic, float(entropy), float(combined),
                      float(np.max(np.abs(ratio - 1.0))), grads)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class EpisodeStats:
    episode: int
    mean_reward: float
    actor_loss: float
    critic_loss: float
    entropy: float
    mean_theta: float
    mean_Pc_fraction: float
    ratio_max_dev: float = 0.0


class PpoTrainer:
    """Collect -> advantage -> M updates -> sync, one episode at a time."""

    def __init__(self, env, nets: PolicyNetworks, hyper: PpoHyper, rng: np.random.Generator):
        self.env = env
        self.nets = nets
        self.hyper = hyper
        self.rng = rng
        self.opt = neural.AdamWState(lr=hyper.lr, weight_decay=hyper.weight_decay)
        self.raw_state = env.reset()

    def collect(self) -> TrajectoryBatch:
        env, nets, t_b = self.env, self.nets, self.hyper.batch
        total_power = env.total_power
        states = np.empty((t_b, nets.state_dim))
        raws = np.empty((t_b, nets.layout.raw_dim))
        logps, rewards, values = np.empty(t_b), np.empty(t_b), np.empty(t_b)
        thetas, common = np.empty(t_b), np.empty(t_b)
        snap = InferenceSnapshot(nets)
        for t in range(t_b):
            nets.normalizer.update(self.raw_state)
            s = nets.normalizer(self.raw_state)
            step = act(nets, s, self.rng, total_power, snapshot=snap)
            outcome = env.step(step.action)
            states[t], raws[t] = s, step.raw
            logps[t], values[t], rewards[t] = step.log_prob, step.value, outcome.reward
            thetas[t] = step.action.theta
            common[t] = step.action.power[0] / total_power if nets.layout.split_dim else 0.0
            self.raw_state = outcome.next_state
        _, v_last = snap(nets.normalizer(self.raw_state))
        return TrajectoryBatch(states, raws, logps, rewards, values, v_last,
                               thetas, common)

    def update(self, batch: TrajectoryBatch, entropy_coef: float) -> tuple[LossReport | None, float]:
        hyper = self.hyper
        batch.advantages = compute_gae(batch.rewards, batch.values, batch.bootstrap_value,
                                       hyper.discount, hyper.gae)
        batch.returns = batch.advantages + batch.values
        adv = batch.advantages
        if hyper.adv_norm and len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        report, first_dev = None, 0.0
        params = self.nets.parameters()
        for m in range(hyper.update_rounds):
            report = clipped_loss(self.nets, batch, hyper, entropy_coef, adv)
            if m == 0:
                first_dev = report.ratio_max_dev
                if first_dev >= 1e-6:
                    raise RuntimeError(f"policy ratio deviates from 1 by {first_dev} before update")
            clip_grad_norm(report.grads, hyper.max_grad_norm)
            neural.adamw_step(params, report.grads, self.opt)
        self.nets.sync_old()
        return report, first_dev

    def run_episode(self, episode: int) -> EpisodeStats:
        hyper = self.hyper
        coef = hyper.entropy_coef * (1.0 - episode / hyper.epochs)
        try:
            batch = self.collect()
        except Exception as exc:
            raise RuntimeError(f"environment fault in episode {episode}: {exc}") from exc
        report, dev = self.update(batch, coef)
        return EpisodeStats(
            episode=episode,
            mean_reward=float(batch.rewards.mean()),
            actor_loss=float("nan") if report is None else -report.actor_objective,
            critic_loss=float("nan") if report is None else report.critic_loss,
            entropy=float("nan") if report is None else report.entropy,
            mean_theta=float(batch.thetas.mean()),
            mean_Pc_fraction=float(batch.common_fraction.mean()),
            ratio_max_dev=dev,
        )


def train(env, nets: PolicyNetworks, hyper: PpoHyper, rng: np.random.Generator,
          sink=None) -> list[EpisodeStats]:
    """Run ``hyper.epochs`` episodes; ``sink`` receives each EpisodeStats."""
    trainer = PpoTrainer(env, nets, hyper, rng)
    curve = []
    for episode in range(hyper.epochs):
        stats = trainer.run_episode(episode)
        curve.append(stats)
        if sink is not None:
            sink(stats)
    return curve


def save_checkpoint(path, nets: PolicyNetworks, hyper: PpoHyper) -> None:
    arrays = dict(nets.parameters())
    arrays["normalizer.mean"] = nets.normalizer.mean
    arrays["normalizer.m2"] = nets.normalizer.m2
    meta = {"hyper": asdict(hyper), "normalizer_count": nets.normalizer.count,
            "strategy": nets.layout.strategy.value, "num_uds": nets.layout.num_uds,
            "state_dim": nets.state_dim}
    neural.save_arrays(path, arrays, meta)


def load_checkpoint(path, nets: PolicyNetworks) -> dict:
    arrays, meta = neural.load_arrays(path)
    nets.load_parameters(arrays)
    nets.normalizer.mean[...] = arrays["normalizer.mean"]
    nets.normalizer.m2[...] = arrays["normalizer.m2"]
    nets.normalizer.count = int(meta["normalizer_count"])
    nets.sync_old()
    return meta
