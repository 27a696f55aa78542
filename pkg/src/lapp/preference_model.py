"""Trajectory segments, reward predictors and the noise-adjusted preference loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx

DEFAULT_SEGMENT_LENGTH = 24
NON_MARKOVIAN_CONTEXT = 8
LABEL_VALUES = (0.0, 0.5, 1.0)


def is_contact_channel(name):
    return "contact" in name


@dataclass
class TrajectorySegment:
    """A fixed-length window of named per-step channels plus the actions taken.

    ``channels`` maps a name to an array whose first axis is time; a channel
    may be (H,) or (H, k).  ``episode`` and ``start`` record where the window
    was cut from.
    """

    channels: dict
    actions: np.ndarray
    episode: int = 0
    start: int = 0

    def __post_init__(self):
        chans = {}
        length = None
        for name, values in self.channels.items():
            arr = np.asarray(values, dtype=np.float64)
            if arr.ndim == 0:
                raise ValueError(f"channel {name!r} must have a time axis")
            if length is None:
                length = arr.shape[0]
            elif arr.shape[0] != length:
                raise ValueError(f"channel {name!r} has {arr.shape[0]} steps, expected {length}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"channel {name!r} contains non-finite values")
            if is_contact_channel(name) and not np.all((arr == 0.0) | (arr == 1.0)):
                raise ValueError(f"contact channel {name!r} must contain only 0 or 1")
            chans[name] = arr
        actions = np.asarray(self.actions, dtype=np.float64)
        if actions.ndim == 1:
            actions = actions[:, None]
        if length is None:
            length = actions.shape[0]
        if actions.shape[0] != length:
            raise ValueError(f"actions have {actions.shape[0]} steps, expected {length}")
        if not np.all(np.isfinite(actions)):
            raise ValueError("actions contain non-finite values")
        self.channels = chans
        self.actions = actions
        self.episode = int(self.episode)
        self.start = int(self.start)

    @property
    def length(self):
        return self.actions.shape[0]

    def channel(self, name):
        try:
            return self.channels[name]
        except KeyError:
            raise KeyError(f"segment has no channel {name!r}") from None

    def features(self, channel_names, include_actions=False):
        """Concatenate the named channels (and optionally actions) into (H, F)."""
        cols = [self.channel(n).reshape(self.length, -1) for n in channel_names]
        if include_actions:
            cols.append(self.actions)
        return np.concatenate(cols, axis=1) if cols else np.zeros((self.length, 0))

    def to_dict(self):
        return {
            "channels": {k: v.tolist() for k, v in self.channels.items()},
            "actions": self.actions.tolist(),
            "episode": self.episode,
            "start": self.start,
        }

    @classmethod
    def from_dict(cls, record):
        return cls(
            channels=record["channels"],
            actions=np.asarray(record["actions"], dtype=np.float64).reshape(len(record["actions"]), -1),
            episode=record.get("episode", 0),
            start=record.get("start", 0),
        )

    def __eq__(self, other):
        if not isinstance(other, TrajectorySegment):
            return NotImplemented
        return (
            self.episode == other.episode
            and self.start == other.start
            and self.channels.keys() == other.channels.keys()
            and all(np.array_equal(v, other.channels[k]) for k, v in self.channels.items())
            and np.array_equal(self.actions, other.actions)
        )


@dataclass
class PreferenceTriple:
    segment_a: TrajectorySegment
    segment_b: TrajectorySegment
    label: float

    def __post_init__(self):
        if self.label not in LABEL_VALUES:
            raise ValueError(f"label must be one of {LABEL_VALUES}, got {self.label!r}")
        self.label = float(self.label)

    def to_dict(self):
        return {"segment_a": self.segment_a.to_dict(), "segment_b": self.segment_b.to_dict(), "label": self.label}

    @classmethod
    def from_dict(cls, record):
        return cls(
            TrajectorySegment.from_dict(record["segment_a"]),
            TrajectorySegment.from_dict(record["segment_b"]),
            record["label"],
        )


@dataclass
class PredictorConfig:
    """Architecture of one reward predictor.

    ``architecture="mlp"`` is the per-step ablation; it always sees a single
    step regardless of ``mode``.
    """

    mode: str = "non_markovian"
    architecture: str = "transformer"
    width: int = 128
    heads: int = 8
    blocks: int = 6
    channels: list = field(default_factory=list)
    include_actions: bool = False
    epsilon: float = 0.15

    def __post_init__(self):
        if self.mode not in ("markovian", "non_markovian"):
            raise ValueError(f"unknown predictor mode {self.mode!r}")
        if self.architecture not in ("transformer", "mlp"):
            raise ValueError(f"unknown predictor architecture {self.architecture!r}")
        if not 0.0 <= self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in [0, 0.5), got {self.epsilon}")
        if self.architecture == "transformer" and self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        self.channels = list(self.channels)

    @property
    def context_length(self):
        if self.architecture == "mlp" or self.mode == "markovian":
            return 1
        return NON_MARKOVIAN_CONTEXT

    @property
    def causal(self):
        return self.context_length > 1


def causal_windows(x, length, episode_start=None):
    """Right-aligned windows ending at each step, zero-padded on the left.

    x is (B, T, F).  The result is (B, T, length, F) where
    ``out[b, t, length - 1] == x[b, t]``.  With ``episode_start`` (B, T bool)
    a window never reaches back past the most recent episode start.
    """
    b, t, f = x.shape
    offsets = np.arange(length) - (length - 1)
    src = np.arange(t)[:, None] + offsets[None, :]  # (T, L)
    valid = np.broadcast_to(src >= 0, (b, t, length))
    if episode_start is not None:
        idx = np.where(episode_start, np.arange(t)[None, :], 0)
        first = np.maximum.accumulate(idx, axis=1)  # (B, T)
        valid = valid & (src[None, :, :] >= first[:, :, None])
    gathered = x[:, np.clip(src, 0, t - 1), :]  # (B, T, L, F)
    return np.where(valid[..., None], gathered, 0.0)


class RewardPredictor(nx.Module):
    """Per-step scalar reward model: GPT-style transformer or per-step MLP.

    Inputs are standardized with statistics stored on the predictor; the
    decoder's output layer starts at zero so an untrained predictor emits 0.
    """

    def __init__(self, config, input_dim, seed=0):
        super().__init__()
        self.config = config
        self.input_dim = int(input_dim)
        self.feature_mean = np.zeros(self.input_dim)
        self.feature_std = np.ones(self.input_dim)
        rng = np.random.default_rng(seed)
        d = config.width
        f = self.input_dim

        def w(name, shape, std):
            return self.add_param(name, rng.normal(0.0, std, size=shape))

        def zeros(name, shape):
            return self.add_param(name, np.zeros(shape))

        def ones(name, shape):
            return self.add_param(name, np.ones(shape))

        if config.architecture == "mlp":
            w("mlp.w1", (f, d), 1.0 / math.sqrt(max(f, 1)))
            zeros("mlp.b1", d)
            w("mlp.w2", (d, d), 1.0 / math.sqrt(d))
            zeros("mlp.b2", d)
            zeros("head.w", (d, 1))
            zeros("head.b", 1)
            return

        w("embed.w", (f, d), 1.0 / math.sqrt(max(f, 1)))
        zeros("embed.b", d)
        proj_std = 0.02 / math.sqrt(2 * config.blocks)
        for i in range(config.blocks):
            p = f"block{i}."
            ones(p + "ln1.g", d)
            zeros(p + "ln1.b", d)
            for name in ("q", "k", "v"):
                w(p + f"attn.{name}.w", (d, d), 0.02)
                zeros(p + f"attn.{name}.b", d)
            w(p + "attn.out.w", (d, d), proj_std)
            zeros(p + "attn.out.b", d)
            ones(p + "ln2.g", d)
            zeros(p + "ln2.b", d)
            w(p + "mlp.fc.w", (d, 4 * d), 0.02)
            zeros(p + "mlp.fc.b", 4 * d)
            w(p + "mlp.proj.w", (4 * d, d), proj_std)
            zeros(p + "mlp.proj.b", d)
        ones("ln_f.g", d)
        zeros("ln_f.b", d)
        zeros("head.w", (d, 1))
        zeros("head.b", 1)
        self._positions = nx.sinusoidal_positions(config.context_length, d)

    def set_normalization(self, mean, std):
        self.feature_mean = np.asarray(mean, dtype=np.float64).copy()
        std = np.asarray(std, dtype=np.float64).copy()
        std[std < 1e-8] = 1.0
        self.feature_std = std

    def normalize(self, x):
        return (x - self.feature_mean) / self.feature_std

    def _window_forward(self, windows):
        """(N, L, F) normalized windows -> Tensor (N,) reward at the last position."""
        P = self._params
        cfg = self.config
        n, length, _ = windows.shape
        x = nx.Tensor(windows)
        if cfg.architecture == "mlp":
            h = nx.gelu(nx.linear(x[:, -1, :] if length > 1 else x.reshape(n, -1), P["mlp.w1"], P["mlp.b1"]))
            h = nx.gelu(nx.linear(h, P["mlp.w2"], P["mlp.b2"]))
            return nx.linear(h, P["head.w"], P["head.b"]).reshape(n)
        d, heads = cfg.width, cfg.heads
        hd = d // heads
        mask = nx.causal_mask(length) if cfg.causal else None
        h = nx.linear(x, P["embed.w"], P["embed.b"]) + self._positions[:length]
        for i in range(cfg.blocks):
            p = f"block{i}."
            # only the last position feeds the head, so the final block
            # computes queries and the MLP for that position alone
            final = i == cfg.blocks - 1
            rows = 1 if final else length
            a = nx.layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])

            def split(t, steps):
                return t.reshape(n, steps, heads, hd).transpose(0, 2, 1, 3)

            a_q = a[:, length - 1 :, :] if final else a
            q = split(nx.linear(a_q, P[p + "attn.q.w"], P[p + "attn.q.b"]), rows)
            k = split(nx.linear(a, P[p + "attn.k.w"], P[p + "attn.k.b"]), length)
            v = split(nx.linear(a, P[p + "attn.v.w"], P[p + "attn.v.b"]), length)
            att = nx.scaled_dot_product_attention(q, k, v, None if final else mask)
            att = att.transpose(0, 2, 1, 3).reshape(n, rows, d)
            if final:
                h = h[:, length - 1 :, :]
            h = h + nx.linear(att, P[p + "attn.out.w"], P[p + "attn.out.b"])
            m = nx.layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
            m = nx.gelu(nx.linear(m, P[p + "mlp.fc.w"], P[p + "mlp.fc.b"]))
            h = h + nx.linear(m, P[p + "mlp.proj.w"], P[p + "mlp.proj.b"])
        last = h[:, 0, :]
        last = nx.layer_norm(last, P["ln_f.g"], P["ln_f.b"])
        return nx.linear(last, P["head.w"], P["head.b"]).reshape(n)

    def step_rewards(self, features, episode_start=None):
        """(B, H, F) raw features -> Tensor (B, H) per-step rewards."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 3 or features.shape[-1] != self.input_dim:
            raise ValueError(f"expected features of shape (B, H, {self.input_dim}), got {features.shape}")
        b, t, f = features.shape
        z = self.normalize(features)
        length = self.config.context_length
        windows = causal_windows(z, length, episode_start).reshape(b * t, length, f)
        return self._window_forward(windows).reshape(b, t)

    def segment_features(self, segment):
        return segment.features(self.config.channels, self.config.include_actions)

    def state_arrays(self, prefix=""):
        out = super().state_arrays(prefix)
        out[prefix + "norm.mean"] = self.feature_mean.copy()
        out[prefix + "norm.std"] = self.feature_std.copy()
        return out

    def load_state_arrays(self, arrays, prefix=""):
        super().load_state_arrays(arrays, prefix)
        self.feature_mean = np.array(arrays[prefix + "norm.mean"])
        self.feature_std = np.array(arrays[prefix + "norm.std"])


def predict_step_rewards(predictor, segment):
    """Per-step predicted rewards (length H) for one segment."""
    feats = predictor.segment_features(segment)
    if feats.shape[1] != predictor.input_dim:
        raise ValueError(f"segment has feature dimension {feats.shape[1]}, predictor expects {predictor.input_dim}")
    with nx.no_grad():
        return predictor.step_rewards(feats[None])[0].data.copy()


def bt_probability(return_a, return_b):
    """P(a preferred over b) under Bradley-Terry, in the overflow-free logistic form."""
    d = float(return_a) - float(return_b)
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


def adjust_probability(p, epsilon):
    """Mix a preference probability with a fair coin at rate ``epsilon``."""
    if not 0.0 <= epsilon < 0.5:
        raise ValueError(f"epsilon must lie in [0, 0.5), got {epsilon}")
    # written as a shift toward 0.5 so that 0, 0.5 and 1 map to exact decimals
    return p + epsilon * (0.5 - p)


def stack_triples(triples, channels, include_actions=False):
    """Stack triples into (feats_a, feats_b, labels) arrays."""
    fa = np.stack([t.segment_a.features(channels, include_actions) for t in triples])
    fb = np.stack([t.segment_b.features(channels, include_actions) for t in triples])
    y = np.array([t.label for t in triples], dtype=np.float64)
    return fa, fb, y


def preference_loss_from_returns(return_a, return_b, labels, epsilon):
    """Mean noise-adjusted cross-entropy given segment returns as Tensors."""
    logit = return_a - return_b
    y = np.asarray(labels, dtype=np.float64)
    if epsilon == 0.0:
        ll_a = nx.log_sigmoid(logit)
        ll_b = nx.log_sigmoid(-logit)
    else:
        p_a, p_b = nx.sigmoid(logit), nx.sigmoid(-logit)
        ll_a = nx.log(p_a + (0.5 - p_a) * epsilon)
        ll_b = nx.log(p_b + (0.5 - p_b) * epsilon)
    return -(ll_a * (1.0 - y) + ll_b * y).mean()


def preference_loss_arrays(reward_model, feats_a, feats_b, labels, epsilon):
    """Loss for stacked features; ``reward_model.step_rewards`` maps (B,H,F) -> (B,H)."""
    n = feats_a.shape[0]
    if n == 0:
        raise ValueError("preference loss needs a non-empty batch")
    rewards = reward_model.step_rewards(np.concatenate([feats_a, feats_b], axis=0))
    returns = rewards.sum(axis=1)
    return preference_loss_from_returns(returns[:n], returns[n:], labels, epsilon)


def preference_loss(predictor, batch, epsilon=None):
    """Mean noise-adjusted cross-entropy over a list of PreferenceTriple."""
    if not batch:
        raise ValueError("preference loss needs a non-empty batch")
    eps = predictor.config.epsilon if epsilon is None else epsilon
    adjust_probability(0.5, eps)
    fa, fb, y = stack_triples(batch, predictor.config.channels, predictor.config.include_actions)
    return preference_loss_arrays(predictor, fa, fb, y, eps)
