"""Ensemble training of reward predictors with validation-based early stopping.

A pool of predictors is trained on one split of the preference data; each
member stops once its validation loss exceeds ``alpha`` times its training
loss (after a minimum number of epochs).  The members with the lowest
validation losses are kept and averaged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .preference_model import RewardPredictor, preference_loss_arrays, stack_triples

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    pool_size: int = 9
    select: int = 3
    min_epochs: int = 30
    max_epochs: int = 90
    alpha: float = 1.3
    val_fraction: float = 0.1
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.select <= self.pool_size:
            raise ValueError(f"need 1 <= select <= pool_size, got {self.select} and {self.pool_size}")
        if self.min_epochs > self.max_epochs:
            raise ValueError("min_epochs must not exceed max_epochs")
        if self.alpha <= 1.0:
            raise ValueError(f"alpha must exceed 1, got {self.alpha}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


def split_dataset(dataset, rng, val_fraction=0.1):
    """Shuffle and split into (train, validation); validation gets round(n * fraction)."""
    n = len(dataset)
    if n < 10:
        raise ValueError(f"need at least 10 triples to split, got {n}")
    n_val = int(math.floor(n * val_fraction + 0.5))
    n_val = min(max(n_val, 1), n - 1)
    order = rng.permutation(n)
    val = [dataset[i] for i in order[:n_val]]
    train = [dataset[i] for i in order[n_val:]]
    return train, val


def should_stop(epoch, train_loss, val_loss, alpha, min_epochs):
    return val_loss > alpha * train_loss and epoch > min_epochs


def run_early_stopping(epoch_fn, min_epochs, max_epochs, alpha):
    """Drive ``epoch_fn(m) -> (train_loss, val_loss)`` for m = 0..max_epochs-1.

    Returns (last epoch run, validation loss recorded there, history).
    """
    history = []
    for m in range(max_epochs):
        train_loss, val_loss = epoch_fn(m)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingError(f"non-finite loss at epoch {m}: train={train_loss}, val={val_loss}")
        history.append((m, train_loss, val_loss))
        if should_stop(m, train_loss, val_loss, alpha, min_epochs):
            return m, val_loss, history
    return max_epochs - 1, history[-1][2], history


@dataclass
class PreferenceArrays:
    feats_a: np.ndarray
    feats_b: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return PreferenceArrays(self.feats_a[idx], self.feats_b[idx], self.labels[idx])

    @classmethod
    def from_triples(cls, triples, channels, include_actions=False):
        return cls(*stack_triples(triples, channels, include_actions))


def normalization_stats(arrays):
    rows = np.concatenate([arrays.feats_a, arrays.feats_b], axis=0)
    rows = rows.reshape(-1, rows.shape[-1])
    return rows.mean(axis=0), rows.std(axis=0)


def evaluate_loss(model, arrays, epsilon, batch_size=256):
    with nx.no_grad():
        total = 0.0
        for i in range(0, len(arrays), batch_size):
            part = arrays.take(slice(i, i + batch_size))
            total += preference_loss_arrays(model, part.feats_a, part.feats_b, part.labels, epsilon).item() * len(part)
    return total / len(arrays)


def train_member(predictor, train, val, config, rng, epsilon=None):
    """Train one predictor with Adam until the early-stop rule fires.

    ``train``/``val`` are PreferenceArrays.  Returns (predictor, final
    validation loss, per-epoch history).
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    eps = predictor.config.epsilon if epsilon is None else epsilon
    opt = nx.Adam(predictor.parameters(), lr=config.lr)

    def epoch_fn(m):
        order = rng.permutation(len(train))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            batch = train.take(order[i : i + config.batch_size])
            opt.zero_grad()
            loss = preference_loss_arrays(predictor, batch.feats_a, batch.feats_b, batch.labels, eps)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite training loss at epoch {m}")
            nx.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
        return total / len(train), evaluate_loss(predictor, val, eps)

    stop_epoch, val_loss, history = run_early_stopping(epoch_fn, config.min_epochs, config.max_epochs, config.alpha)
    log.debug("member stopped at epoch %d with val loss %.4f", stop_epoch, val_loss)
    return predictor, val_loss, history


def select_indices(losses, count):
    """Indices of the ``count`` smallest losses; ties go to the lower index."""
    if len(losses) < count:
        raise ValueError(f"need at least {count} members, got {len(losses)}")
    return sorted(range(len(losses)), key=lambda i: (losses[i], i))[:count]


class EnsemblePredictor:
    """Mean of the selected reward predictors, sorted by ascending validation loss."""

    def __init__(self, members, val_losses, indices=None):
        if not members:
            raise ValueError("ensemble needs at least one member")
        first = members[0]
        for m in members[1:]:
            if m.config != first.config or m.input_dim != first.input_dim:
                raise ValueError("ensemble members must share one predictor config")
        self.members = list(members)
        self.val_losses = [float(v) for v in val_losses]
        self.indices = list(indices) if indices is not None else list(range(len(members)))

    @property
    def config(self):
        return self.members[0].config

    @property
    def input_dim(self):
        return self.members[0].input_dim

    def segment_features(self, segment):
        return self.members[0].segment_features(segment)

    def step_rewards(self, features, episode_start=None):
        """(B, H, F) -> Tensor (B, H), averaged over members."""
        total = None
        for m in self.members:
            r = m.step_rewards(features, episode_start)
            total = r if total is None else total + r
        return total * (1.0 / len(self.members))

    def state_arrays(self, prefix="ensemble/"):
        out = {}
        for i, m in enumerate(self.members):
            out.update(m.state_arrays(f"{prefix}{i}/"))
        out[prefix + "val_losses"] = np.array(self.val_losses)
        out[prefix + "indices"] = np.array(self.indices, dtype=np.float64)
        return out

    @classmethod
    def from_state_arrays(cls, arrays, config, input_dim, count, prefix="ensemble/"):
        members = []
        for i in range(count):
            m = RewardPredictor(config, input_dim)
            m.load_state_arrays(arrays, f"{prefix}{i}/")
            members.append(m)
        return cls(members, arrays[prefix + "val_losses"].tolist(), arrays[prefix + "indices"].astype(int).tolist())


def select_and_ensemble(members, losses, count):
    idx = select_indices(losses, count)
    return EnsemblePredictor([members[i] for i in idx], [losses[i] for i in idx], idx)


def ensemble_predict(ensemble, segment):
    feats = ensemble.segment_features(segment)
    with nx.no_grad():
        return ensemble.step_rewards(feats[None])[0].data.copy()


def member_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class EnsembleResult:
    ensemble: EnsemblePredictor
    member_losses: list
    curves: list = field(default_factory=list)  # rows of (member, epoch, train_loss, val_loss)


def train_ensemble(dataset, predictor_config, config, seed=None):
    """Full pool training on a list of PreferenceTriple.

    Normalization statistics come from the training split and are shared by
    all members.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    train, val = split_dataset(list(dataset), rng, config.val_fraction)
    channels, acts = predictor_config.channels, predictor_config.include_actions
    train_arr = PreferenceArrays.from_triples(train, channels, acts)
    val_arr = PreferenceArrays.from_triples(val, channels, acts)
    mean, std = normalization_stats(train_arr)
    members, losses, curves = [], [], []
    for i in range(config.pool_size):
        s = member_seed(seed, i)
        predictor = RewardPredictor(predictor_config, train_arr.feats_a.shape[-1], seed=s)
        predictor.set_normalization(mean, std)
        member_rng = np.random.default_rng(s)
        predictor, val_loss, history = train_member(predictor, train_arr, val_arr, config, member_rng)
        members.append(predictor)
        losses.append(val_loss)
        curves.extend((i, m, tr, va) for m, tr, va in history)
    return EnsembleResult(select_and_ensemble(members, losses, config.select), losses, curves)
