"""The online preference loop: bootstrap labels, then alternate PPO epochs
with periodic annotation and predictor retraining.

All randomness flows through two streams: the policy stream (rollouts and
PPO minibatches) and the preference stream (pair sampling, bootstrap
rollouts, dataset resampling).  Keeping them apart makes a run with
``beta=0`` reproduce the plain PPO baseline exactly.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import rl
from .annotation import AnnotationError, build_annotator, labels_to_triples
from .envs import env_dims
from .preference_model import PredictorConfig, PreferenceTriple, TrajectorySegment
from .trainer import EnsemblePredictor, train_ensemble

log = logging.getLogger(__name__)

DEFAULT_CHANNELS = {
    "gait_walker": [
        "commands",
        "base_linear_velocity",
        "base_angular_velocity",
        "base_height",
        "base_roll_pitch_yaw",
        "feet_contacts",
    ],
    "point_mass": ["commands", "base_linear_velocity"],
}


@dataclass
class LoopConfig:
    epochs: int = 1000
    update_interval: int = 50
    pairs_per_epoch: int = 10
    num_envs: int = 16
    steps_per_epoch: int = 96
    dataset_size: int = 500
    window: str = "latest"
    segment_length: int = 24
    bootstrap_attempt_factor: int = 10
    run_label: str = "lapp"

    def __post_init__(self):
        if self.window not in ("latest", "full_process"):
            raise ValueError(f"unknown dataset window {self.window!r}")
        if self.update_interval * self.pairs_per_epoch > self.dataset_size:
            raise ValueError("dataset_size must hold at least update_interval * pairs_per_epoch triples")
        if self.steps_per_epoch < self.segment_length:
            raise ValueError("steps_per_epoch must be at least segment_length")
        if self.num_envs < 2:
            raise ValueError("pair sampling needs at least two rollouts")

    @property
    def buffer_capacity(self):
        return self.update_interval * self.pairs_per_epoch


class PreferenceBuffer:
    """Unlabeled pairs waiting for the next annotation cycle."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.pairs = []

    def push(self, pairs):
        if len(self.pairs) + len(pairs) > self.capacity:
            raise OverflowError(f"preference buffer holds at most {self.capacity} pairs")
        self.pairs.extend(pairs)

    def clear(self):
        self.pairs = []

    def __len__(self):
        return len(self.pairs)


class SlidingDataset:
    """Most recent labeled triples, oldest evicted first."""

    def __init__(self, max_size, triples=()):
        self.max_size = max_size
        self.triples = deque(triples, maxlen=max_size)

    def extend(self, triples):
        evicted = max(0, len(self.triples) + len(triples) - self.max_size)
        self.triples.extend(triples)
        return evicted

    def training_set(self, rng):
        return list(self.triples)

    def __len__(self):
        return len(self.triples)


class TrajectoryPool:
    """Every labeled triple seen so far; training draws a uniform subset."""

    def __init__(self, sample_size, triples=()):
        self.sample_size = sample_size
        self.triples = list(triples)

    def extend(self, triples):
        self.triples.extend(triples)
        return 0

    def training_set(self, rng):
        if len(self.triples) <= self.sample_size:
            return list(self.triples)
        idx = np.sort(rng.choice(len(self.triples), size=self.sample_size, replace=False))
        return [self.triples[i] for i in idx]

    def __len__(self):
        return len(self.triples)


def _valid_starts(episode_start, horizon, length):
    """Start offsets whose window does not cross an episode reset."""
    inner = np.concatenate([[0], np.cumsum(episode_start[1:].astype(int))])
    starts = np.arange(horizon - length + 1)
    crossings = inner[starts + length - 1] - inner[starts]
    return starts[crossings == 0]


def cut_segment(buffer, env_index, start, length, episode_id):
    channels = {name: arr[env_index, start : start + length] for name, arr in buffer.channels.items()}
    return TrajectorySegment(channels, buffer.actions[env_index, start : start + length], episode_id, start)


def sample_pairs(buffer, count, length, rng, episode_offset=0):
    """``count`` pairs of ``length``-step segments, each pair from two distinct rollouts."""
    s, t = buffer.rewards.shape
    if s < 2:
        raise ValueError("need at least two rollouts to sample pairs")
    if t < length:
        raise ValueError(f"rollouts of {t} steps are shorter than the segment length {length}")
    valid = [_valid_starts(buffer.episode_start[i], t, length) for i in range(s)]
    usable = [i for i in range(s) if len(valid[i])]
    if len(usable) < 2:
        raise ValueError("fewer than two rollouts contain a full segment inside one episode")
    pairs = []
    for _ in range(count):
        i, j = rng.choice(usable, size=2, replace=False)
        si = int(rng.choice(valid[i]))
        sj = int(rng.choice(valid[j]))
        pairs.append(
            (
                cut_segment(buffer, i, si, length, episode_offset + int(i)),
                cut_segment(buffer, j, sj, length, episode_offset + int(j)),
            )
        )
    return pairs


class BootstrapError(RuntimeError):
    def __init__(self, message, partial=()):
        super().__init__(message)
        self.partial = list(partial)


@dataclass
class LoopSettings:
    """Everything one run needs; mirrors the sections of the run config file."""

    env: object
    predictor: PredictorConfig
    trainer: object
    ppo: rl.PPOConfig
    loop: LoopConfig
    annotator: object
    seed: int = 0


def resolve_predictor_config(predictor, env_config):
    if predictor.channels:
        return predictor
    cfg = PredictorConfig(**{**predictor.__dict__, "channels": DEFAULT_CHANNELS[env_config.kind]})
    return cfg


class LappRun:
    """State of one training run (policy, envs, preference data, predictor).

    ``baseline=True`` skips every preference component and trains on the
    environment reward alone.
    """

    def __init__(self, settings, baseline=False, annotator=None, bundle=None):
        self.settings = settings
        self.baseline = baseline
        self.predictor_config = resolve_predictor_config(settings.predictor, settings.env)
        cfg = settings.loop
        seed = settings.seed
        obs_dim, act_dim = env_dims(settings.env)
        self.bundle = bundle or rl.PolicyBundle(obs_dim, act_dim, settings.ppo, seed)
        self.envs, self.obs = rl.make_envs(settings.env, cfg.num_envs, seed)
        self.episode_start = np.ones(cfg.num_envs, dtype=bool)
        self.policy_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.pref_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        self.reward_context = None
        self.pref_normalizer = rl.RunningNormalizer(1)
        self.annotator = annotator or build_annotator(settings.annotator, settings.env.dt, cfg.segment_length)
        self.buffer = PreferenceBuffer(cfg.buffer_capacity)
        if cfg.window == "latest":
            self.dataset = SlidingDataset(cfg.dataset_size)
        else:
            self.dataset = TrajectoryPool(cfg.dataset_size)
        self.ensemble = None
        self.epoch = 0
        self.cycle = 0
        self.label_totals = {k: 0 for k in range(4)}

    @property
    def beta(self):
        return 0.0 if self.baseline else self.settings.ppo.beta

    # preference data

    def _label(self, pairs):
        outcome = labels_to_triples(pairs, self.annotator.label_pairs(pairs))
        for k, v in outcome.counts.items():
            self.label_totals[k] += v
        return outcome

    def bootstrap(self):
        """Label an initial dataset from rollouts of the current policy and fit the first ensemble."""
        cfg = self.settings.loop
        target = cfg.dataset_size
        boot_seed = int(self.pref_rng.integers(2**31))
        env_list, obs = rl.make_envs(self.settings.env, cfg.num_envs, boot_seed)
        start = np.ones(cfg.num_envs, dtype=bool)
        triples, attempts = [], 0
        cap = cfg.bootstrap_attempt_factor * target
        self.annotator.set_stage(0)
        while len(triples) < target:
            if attempts >= cap:
                raise BootstrapError(
                    f"bootstrap labeled only {len(triples)} of {target} triples after {attempts} annotated pairs",
                    triples,
                )
            buf, obs, start = rl.collect_rollout(
                self.bundle, env_list, obs, cfg.steps_per_epoch, self.pref_rng, update_normalizer=False, episode_start=start
            )
            want = min(target - len(triples), 2 * cfg.num_envs, cap - attempts)
            pairs = sample_pairs(buf, want, cfg.segment_length, self.pref_rng)
            try:
                outcome = self._label(pairs)
            except AnnotationError as exc:
                raise BootstrapError(f"annotator failed during bootstrap: {exc}", triples) from exc
            attempts += len(pairs)
            triples.extend(outcome.triples)
        self.dataset.extend(triples[:target])
        self._fit_predictor()
        return self.ensemble

    def _fit_predictor(self):
        data = self.dataset.training_set(self.pref_rng)
        seed = int(np.random.SeedSequence([self.settings.seed, 3, self.cycle]).generate_state(1)[0])
        result = train_ensemble(data, self.predictor_config, self.settings.trainer, seed=seed)
        self.ensemble = result.ensemble
        self.last_fit = result
        return result

    def update_predictor_cycle(self):
        """Annotate the buffered pairs, refresh the dataset and retrain the ensemble."""
        pairs = list(self.buffer.pairs)
        self.annotator.set_stage(self.cycle + 1)
        try:
            outcome = self._label(pairs)
        except AnnotationError as exc:
            log.warning("annotation failed, keeping the previous predictor: %s", exc)
            self.buffer.clear()
            return None
        self.dataset.extend(outcome.triples)
        self.cycle += 1
        result = self._fit_predictor()
        self.buffer.clear()
        return outcome, result

    # policy optimisation

    def run_epoch(self):
        cfg = self.settings.loop
        ppo = self.settings.ppo
        buf, self.obs, self.episode_start = rl.collect_rollout(
            self.bundle, self.envs, self.obs, cfg.steps_per_epoch, self.policy_rng, episode_start=self.episode_start
        )
        if self.ensemble is not None and not self.baseline:
            r_p, self.reward_context = rl.predict_pref_rewards(self.ensemble, buf, self.reward_context)
            if ppo.standardize_pref_reward:
                self.pref_normalizer.update(r_p.reshape(-1, 1))
                r_p = (r_p - self.pref_normalizer.mean[0]) / math.sqrt(self.pref_normalizer.var[0] + 1e-8)
        else:
            r_p = np.zeros_like(buf.env_rewards)
        rl.attach_rewards(buf, r_p, self.beta)
        rl.compute_gae(buf, ppo.gamma, ppo.lam)
        stats = rl.ppo_update(self.bundle, buf, ppo, self.policy_rng)
        row = {"epoch": self.epoch}
        row.update(rl.rollout_metrics(buf, self.settings.env.dt))
        row.update(stats)
        update = None
        if not self.baseline:
            pairs = sample_pairs(buf, cfg.pairs_per_epoch, cfg.segment_length, self.pref_rng, self.epoch * cfg.num_envs)
            self.buffer.push(pairs)
            if (self.epoch + 1) % cfg.update_interval == 0:
                update = self.update_predictor_cycle()
        self.epoch += 1
        row["predictor_updated"] = 0.0 if update is None else 1.0
        if update is not None:
            outcome, result = update
            row["predictor_val_loss"] = float(np.mean(result.ensemble.val_losses))
            for k, v in outcome.counts.items():
                row[f"label_{k}"] = float(v)
        else:
            row["predictor_val_loss"] = float("nan")
            for k in range(4):
                row[f"label_{k}"] = 0.0
        row["dataset_size"] = float(len(self.dataset))
        return row

    def train(self, epochs, callback=None, stop=None):
        """Run ``epochs`` epochs (bootstrapping first if needed); returns metric rows."""
        if not self.baseline and self.ensemble is None:
            self.bootstrap()
        rows = []
        for _ in range(epochs):
            row = self.run_epoch()
            rows.append(row)
            if callback is not None:
                callback(self, row)
            if stop is not None and stop(row):
                break
        return rows

    # persistence

    def state(self):
        """(arrays, meta) capturing everything needed to resume bit-exactly."""
        arrays = dict(self.bundle.state_arrays())
        arrays["run/obs"] = self.obs.copy()
        arrays["run/episode_start"] = self.episode_start.astype(np.float64)
        arrays["run/pref_norm"] = np.array(
            [self.pref_normalizer.mean[0], self.pref_normalizer.var[0], self.pref_normalizer.count]
        )
        if self.reward_context is not None:
            arrays["run/context_features"] = self.reward_context.features
            arrays["run/context_start"] = self.reward_context.episode_start.astype(np.float64)
        if self.ensemble is not None:
            arrays.update(self.ensemble.state_arrays("ensemble/"))
        arrays.update(pack_triples("dataset", list(self.dataset.triples)))
        arrays.update(pack_pairs("buffer", self.buffer.pairs))
        meta = {
            "epoch": self.epoch,
            "cycle": self.cycle,
            "baseline": self.baseline,
            "label_totals": self.label_totals,
            "policy_rng": self.policy_rng.bit_generator.state,
            "pref_rng": self.pref_rng.bit_generator.state,
            "envs": [e.get_state() for e in self.envs],
            "ensemble": None
            if self.ensemble is None
            else {"count": len(self.ensemble.members), "input_dim": self.ensemble.input_dim},
            "dataset_count": len(self.dataset),
            "buffer_count": len(self.buffer),
            "has_context": self.reward_context is not None,
        }
        return arrays, meta

    def load_state(self, arrays, meta):
        self.bundle.load_state_arrays(arrays)
        self.obs = np.array(arrays["run/obs"])
        self.episode_start = arrays["run/episode_start"].astype(bool)
        pn = arrays["run/pref_norm"]
        self.pref_normalizer.mean[0], self.pref_normalizer.var[0], self.pref_normalizer.count = pn[0], pn[1], float(pn[2])
        self.reward_context = None
        if meta["has_context"]:
            self.reward_context = rl.RewardContext(
                np.array(arrays["run/context_features"]), arrays["run/context_start"].astype(bool)
            )
        self.ensemble = None
        if meta["ensemble"] is not None:
            self.ensemble = EnsemblePredictor.from_state_arrays(
                arrays, self.predictor_config, meta["ensemble"]["input_dim"], meta["ensemble"]["count"], "ensemble/"
            )
        triples = unpack_triples("dataset", arrays, meta["dataset_count"])
        cfg = self.settings.loop
        if cfg.window == "latest":
            self.dataset = SlidingDataset(cfg.dataset_size, triples)
        else:
            self.dataset = TrajectoryPool(cfg.dataset_size, triples)
        self.buffer = PreferenceBuffer(cfg.buffer_capacity)
        self.buffer.pairs = unpack_pairs("buffer", arrays, meta["buffer_count"])
        self.epoch = meta["epoch"]
        self.cycle = meta["cycle"]
        self.baseline = meta["baseline"]
        self.label_totals = {int(k): v for k, v in meta["label_totals"].items()}
        self.policy_rng.bit_generator.state = meta["policy_rng"]
        self.pref_rng.bit_generator.state = meta["pref_rng"]
        for env, st in zip(self.envs, meta["envs"]):
            env.set_state(st)
        self.annotator.set_stage(self.cycle)


def pack_segments(prefix, segments):
    if not segments:
        return {}
    out = {}
    for name in segments[0].channels:
        out[f"{prefix}/ch/{name}"] = np.stack([s.channels[name] for s in segments])
    out[f"{prefix}/actions"] = np.stack([s.actions for s in segments])
    out[f"{prefix}/episode"] = np.array([s.episode for s in segments], dtype=np.float64)
    out[f"{prefix}/start"] = np.array([s.start for s in segments], dtype=np.float64)
    return out


def unpack_segments(prefix, arrays, count):
    if count == 0:
        return []
    names = [k[len(prefix) + 4 :] for k in arrays if k.startswith(prefix + "/ch/")]
    return [
        TrajectorySegment(
            {n: arrays[f"{prefix}/ch/{n}"][i] for n in names},
            arrays[f"{prefix}/actions"][i],
            int(arrays[f"{prefix}/episode"][i]),
            int(arrays[f"{prefix}/start"][i]),
        )
        for i in range(count)
    ]


def pack_pairs(prefix, pairs):
    out = pack_segments(prefix + "/a", [p[0] for p in pairs])
    out.update(pack_segments(prefix + "/b", [p[1] for p in pairs]))
    return out


def unpack_pairs(prefix, arrays, count):
    a = unpack_segments(prefix + "/a", arrays, count)
    b = unpack_segments(prefix + "/b", arrays, count)
    return list(zip(a, b))


def pack_triples(prefix, triples):
    out = pack_pairs(prefix, [(t.segment_a, t.segment_b) for t in triples])
    if triples:
        out[prefix + "/labels"] = np.array([t.label for t in triples])
    return out


def unpack_triples(prefix, arrays, count):
    pairs = unpack_pairs(prefix, arrays, count)
    if not pairs:
        return []
    labels = arrays[prefix + "/labels"]
    return [PreferenceTriple(a, b, float(y)) for (a, b), y in zip(pairs, labels)]


@dataclass
class TransferResult:
    run: LappRun
    rows: list = field(default_factory=list)


def transfer_finetune(source_arrays, target_settings, epochs, callback=None, stop=None):
    """Continue a source policy in a changed environment with a fresh preference dataset."""
    run = LappRun(target_settings)
    try:
        run.bundle.load_state_arrays(source_arrays)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"checkpoint does not match the target configuration: {exc}") from exc
    rows = run.train(epochs, callback=callback, stop=stop)
    return TransferResult(run, rows)
