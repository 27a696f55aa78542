"""PPO with generalized advantage estimation and preference-reward mixing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import envs as envs_mod
from . import numerics as nx

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    lr: float = 3e-4
    max_grad_norm: float = 1.0
    hidden: list = field(default_factory=lambda: [64, 64])
    init_log_std: float = 0.0
    beta: float = 1.0
    standardize_pref_reward: bool = False

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        self.hidden = [int(h) for h in self.hidden]


def mix_rewards(pref_reward, env_reward, beta):
    return beta * pref_reward + env_reward


class RunningNormalizer:
    """Running mean/variance of observations (parallel Welford update)."""

    def __init__(self, dim, clip=10.0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip

    def update(self, batch):
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.mean.shape[0])
        b_mean, b_var, n = batch.mean(axis=0), batch.var(axis=0), batch.shape[0]
        delta = b_mean - self.mean
        total = self.count + n
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + b_var * n + delta**2 * self.count * n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x):
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)


class MLP(nx.Module):
    def __init__(self, sizes, prefix, rng, out_scale=1.0):
        super().__init__()
        self.n_layers = len(sizes) - 1
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == self.n_layers - 1
            std = (out_scale if last else math.sqrt(2.0)) / math.sqrt(a)
            self.add_param(f"{prefix}.w{i}", rng.normal(0.0, std, size=(a, b)))
            self.add_param(f"{prefix}.b{i}", np.zeros(b))

    def __call__(self, x):
        params = self.parameters()
        for i in range(self.n_layers):
            x = nx.linear(x, params[2 * i], params[2 * i + 1])
            if i < self.n_layers - 1:
                x = nx.elu(x)
        return x


class PolicyBundle:
    """Gaussian policy, value network, observation normalizer and their optimizer."""

    def __init__(self, obs_dim, action_dim, config=None, seed=0):
        self.config = config or PPOConfig()
        self.obs_dim, self.action_dim = obs_dim, action_dim
        rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
        hidden = list(self.config.hidden)
        self.policy = MLP([obs_dim] + hidden + [action_dim], "policy", rng, out_scale=0.01)
        self.value = MLP([obs_dim] + hidden + [1], "value", rng, out_scale=1.0)
        self.log_std = nx.Parameter(np.full(action_dim, self.config.init_log_std), "policy.log_std")
        self.normalizer = RunningNormalizer(obs_dim)
        self.optimizer = nx.Adam(self.parameters(), lr=self.config.lr)

    def parameters(self):
        return self.policy.parameters() + [self.log_std] + self.value.parameters()

    def _log_std(self):
        return nx.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def act(self, obs_norm, rng, deterministic=False):
        """Sample actions for normalized observations; returns (actions, logp, values)."""
        with nx.no_grad():
            mean = self.policy(nx.Tensor(obs_norm)).data
            value = self.value(nx.Tensor(obs_norm)).data[:, 0]
        log_std = np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX)
        if deterministic:
            actions = mean
        else:
            actions = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        z = (actions - mean) / np.exp(log_std)
        logp = np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI, axis=-1)
        return actions, logp, value

    def value_of(self, obs_norm):
        with nx.no_grad():
            return self.value(nx.Tensor(obs_norm)).data[:, 0]

    def evaluate(self, obs_norm, actions):
        """Differentiable (log-prob, mean entropy, value) for stored actions."""
        mean = self.policy(nx.Tensor(obs_norm))
        log_std = self._log_std()
        z = (nx.Tensor(actions) - mean) * nx.exp(-log_std)
        logp = (nx.square(z) * -0.5 - log_std - _HALF_LOG_2PI).sum(axis=-1)
        entropy = (log_std + 0.5 + _HALF_LOG_2PI).sum()
        value = self.value(nx.Tensor(obs_norm)).reshape(-1)
        return logp, entropy, value

    def state_arrays(self, prefix="agent/"):
        out = {}
        for p in self.parameters():
            out[prefix + p.name] = p.data.copy()
        out[prefix + "norm.mean"] = self.normalizer.mean.copy()
        out[prefix + "norm.var"] = self.normalizer.var.copy()
        out[prefix + "norm.count"] = np.array([self.normalizer.count])
        out.update(self.optimizer.state_arrays(prefix + "adam"))
        out[prefix + "adam.step"] = np.array([float(self.optimizer.step_count)])
        return out

    def load_state_arrays(self, arrays, prefix="agent/"):
        for p in self.parameters():
            value = np.array(arrays[prefix + p.name])
            if value.shape != p.data.shape:
                raise nx.ShapeError(f"{p.name}: stored shape {value.shape} != {p.data.shape}")
            p.data = value
            p.zero_grad()
        self.normalizer.mean = np.array(arrays[prefix + "norm.mean"])
        self.normalizer.var = np.array(arrays[prefix + "norm.var"])
        self.normalizer.count = float(arrays[prefix + "norm.count"][0])
        self.optimizer.load_state_arrays(arrays, prefix + "adam", int(arrays[prefix + "adam.step"][0]))


@dataclass
class RolloutBuffer:
    """Per-step records of S parallel environments over T steps, shaped (S, T, ...)."""

    obs: np.ndarray
    obs_normalized: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    env_rewards: np.ndarray
    pref_rewards: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    episode_start: np.ndarray
    channels: dict
    bootstrap_values: np.ndarray
    advantages: np.ndarray = None
    returns: np.ndarray = None

    @property
    def num_envs(self):
        return self.rewards.shape[0]

    @property
    def horizon(self):
        return self.rewards.shape[1]

    def features(self, channel_names, include_actions=False):
        s, t = self.rewards.shape
        cols = [self.channels[n].reshape(s, t, -1) for n in channel_names]
        if include_actions:
            cols.append(self.actions)
        return np.concatenate(cols, axis=-1)


@dataclass
class RewardContext:
    """Trailing per-env feature history so windowed predictors stay causal across epochs."""

    features: np.ndarray = None  # (S, L-1, F)
    episode_start: np.ndarray = None  # (S, L-1)


def predict_pref_rewards(predictor, buffer, context=None):
    """Preference reward per step from the trailing window of each env's stream."""
    cfg = predictor.config
    feats = buffer.features(cfg.channels, cfg.include_actions)
    starts = buffer.episode_start.copy()
    keep = cfg.context_length - 1
    t = feats.shape[1]
    if keep > 0 and context is not None and context.features is not None:
        feats = np.concatenate([context.features, feats], axis=1)
        starts = np.concatenate([context.episode_start, starts], axis=1)
    else:
        starts[:, 0] = True
    with nx.no_grad():
        rewards = predictor.step_rewards(feats, starts).data[:, -t:]
    new_context = None
    if keep > 0:
        new_context = RewardContext(feats[:, -keep:].copy(), starts[:, -keep:].copy())
    return rewards, new_context


def collect_rollout(bundle, env_list, obs, horizon, rng, update_normalizer=True, episode_start=None):
    """Run every env for ``horizon`` steps with the stochastic policy.

    ``obs`` holds the current (S, obs_dim) observations of persistent envs;
    finished episodes are reset in place.  Returns (buffer, next_obs,
    next_episode_start).  Preference rewards are left at zero; see
    ``attach_rewards``.
    """
    s = len(env_list)
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (s, bundle.obs_dim):
        raise ValueError(f"observations have shape {obs.shape}, expected {(s, bundle.obs_dim)}")
    if env_list[0].action_dim != bundle.action_dim:
        raise ValueError(f"env action size {env_list[0].action_dim} != policy action size {bundle.action_dim}")
    start_flags = np.ones(s, dtype=bool) if episode_start is None else np.array(episode_start, dtype=bool)
    obs_buf = np.zeros((s, horizon, bundle.obs_dim))
    obs_n_buf = np.zeros_like(obs_buf)
    act_buf = np.zeros((s, horizon, bundle.action_dim))
    logp_buf = np.zeros((s, horizon))
    val_buf = np.zeros((s, horizon))
    rew_buf = np.zeros((s, horizon))
    done_buf = np.zeros((s, horizon))
    start_buf = np.zeros((s, horizon), dtype=bool)
    channel_rows = []
    for t in range(horizon):
        if update_normalizer:
            bundle.normalizer.update(obs)
        obs_n = bundle.normalizer.normalize(obs)
        actions, logp, values = bundle.act(obs_n, rng)
        obs_buf[:, t], obs_n_buf[:, t], act_buf[:, t] = obs, obs_n, actions
        logp_buf[:, t], val_buf[:, t] = logp, values
        start_buf[:, t] = start_flags
        next_obs = np.empty_like(obs)
        rows = []
        for i, env in enumerate(env_list):
            res = env.step(actions[i])
            rew_buf[i, t] = res.reward
            rows.append(res.info)
            if res.done:
                done_buf[i, t] = 1.0
                next_obs[i] = env.reset()
                start_flags[i] = True
            else:
                next_obs[i] = res.observation
                start_flags[i] = False
        channel_rows.append(rows)
        obs = next_obs
    channels = {
        name: np.stack([np.stack([channel_rows[t][i][name] for t in range(horizon)]) for i in range(s)])
        for name in channel_rows[0][0]
    }
    bootstrap = bundle.value_of(bundle.normalizer.normalize(obs))
    buffer = RolloutBuffer(
        obs=obs_buf,
        obs_normalized=obs_n_buf,
        actions=act_buf,
        log_probs=logp_buf,
        values=val_buf,
        env_rewards=rew_buf,
        pref_rewards=np.zeros_like(rew_buf),
        rewards=rew_buf.copy(),
        dones=done_buf,
        episode_start=start_buf,
        channels=channels,
        bootstrap_values=bootstrap,
    )
    return buffer, obs, start_flags.copy()


def attach_rewards(buffer, pref_rewards, beta):
    buffer.pref_rewards = np.asarray(pref_rewards, dtype=np.float64)
    buffer.rewards = mix_rewards(buffer.pref_rewards, buffer.env_rewards, beta)


def compute_gae(buffer, gamma, lam, bootstrap_values=None):
    """Fill ``buffer.advantages`` and ``buffer.returns`` (unnormalized)."""
    boot = buffer.bootstrap_values if bootstrap_values is None else np.asarray(bootstrap_values, dtype=np.float64)
    r, v, d = buffer.rewards, buffer.values, buffer.dones
    s, t = r.shape
    adv = np.zeros((s, t))
    last = np.zeros(s)
    for k in range(t - 1, -1, -1):
        next_v = boot if k == t - 1 else v[:, k + 1]
        nonterminal = 1.0 - d[:, k]
        delta = r[:, k] + gamma * nonterminal * next_v - v[:, k]
        last = delta + gamma * lam * nonterminal * last
        adv[:, k] = last
    buffer.advantages = adv
    buffer.returns = adv + v


def ppo_update(bundle, buffer, config, rng):
    """Clipped-surrogate PPO over the buffer; returns mean statistics."""
    if buffer.advantages is None:
        raise ValueError("compute_gae must run before ppo_update")
    n = buffer.rewards.size
    obs = buffer.obs_normalized.reshape(n, -1)
    actions = buffer.actions.reshape(n, -1)
    old_logp = buffer.log_probs.reshape(n)
    returns = buffer.returns.reshape(n)
    adv = buffer.advantages.reshape(n)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    params = bundle.parameters()
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "approx_kl": 0.0, "clip_fraction": 0.0}
    count = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for idx in np.array_split(perm, config.minibatches):
            logp, entropy, value = bundle.evaluate(obs[idx], actions[idx])
            ratio = nx.exp(logp - old_logp[idx])
            a = adv[idx]
            surrogate = nx.minimum(ratio * a, nx.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * a)
            policy_loss = -surrogate.mean()
            value_loss = nx.square(value - returns[idx]).mean()
            loss = policy_loss + value_loss * config.value_coef - entropy * config.entropy_coef
            if not math.isfinite(loss.item()):
                log.warning("non-finite PPO loss; aborting update epoch")
                break
            nx.zero_gradients(params)
            nx.backward(loss)
            nx.clip_grad_norm(params, config.max_grad_norm)
            bundle.optimizer.step()
            r = ratio.data
            sums["policy_loss"] += policy_loss.item()
            sums["value_loss"] += value_loss.item()
            sums["entropy"] += entropy.item()
            sums["approx_kl"] += float(np.mean(old_logp[idx] - logp.data))
            sums["clip_fraction"] += float(np.mean(np.abs(r - 1.0) > config.clip))
            count += 1
    return {k: v / max(count, 1) for k, v in sums.items()}


def make_envs(env_config, count, seed):
    seeds = np.random.SeedSequence([seed, 15485863]).generate_state(count)
    env_list = [envs_mod.make_env(env_config, int(s)) for s in seeds]
    obs = np.stack([e.reset() for e in env_list])
    return env_list, obs


def rollout_metrics(buffer, dt):
    """Tracking error, and gait metrics when contacts are recorded."""
    ch = buffer.channels
    v = ch["base_linear_velocity"][..., 0]
    out = {
        "mean_env_reward": float(buffer.env_rewards.mean()),
        "mean_pref_reward": float(buffer.pref_rewards.mean()),
        "tracking_error": float(np.mean(np.abs(ch["commands"] - v))),
    }
    if "feet_contacts" in ch:
        contacts = ch["feet_contacts"]
        out["sync_error"] = float(np.mean([envs_mod.sync_error(c) for c in contacts]))
        out["cadence"] = float(np.mean([envs_mod.cadence(c, dt) for c in contacts]))
    return out


def evaluate_policy(bundle, env_config, episodes=2, seed=0, command=None):
    """Deterministic rollouts of full episodes; gait metrics over whole episodes."""
    env = envs_mod.make_env(env_config, seed)
    tracking, sync, cad, rewards = [], [], [], []
    for _ in range(episodes):
        obs = env.reset()
        if command is not None:
            env.command = float(command)
            obs = env.observation()
        contacts, errs = [], []
        done = False
        while not done:
            obs_n = bundle.normalizer.normalize(obs[None])
            action, _, _ = bundle.act(obs_n, None, deterministic=True)
            res = env.step(action[0])
            errs.append(abs(env.command - env.velocity))
            rewards.append(res.reward)
            if "feet_contacts" in res.info:
                contacts.append(res.info["feet_contacts"])
            obs, done = res.observation, res.done
        tracking.append(np.mean(errs))
        if contacts:
            contacts = np.array(contacts)
            sync.append(envs_mod.sync_error(contacts))
            cad.append(envs_mod.cadence(contacts, env_config.dt))
    out = {"tracking_error": float(np.mean(tracking)), "mean_env_reward": float(np.mean(rewards))}
    if sync:
        out["sync_error"] = float(np.mean(sync))
        out["cadence"] = float(np.mean(cad))
    return out
