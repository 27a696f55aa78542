"""Preference annotation: prompt rendering, reply parsing, label aggregation.

Three interchangeable backends label pairs of segments with raw labels
0 (first better), 1 (second better), 2 (equal) or 3 (incomparable):

* ``OracleAnnotator`` scores each segment with weighted behaviour features.
* ``ReplayAnnotator`` looks labels up in a JSONL file keyed by pair hash.
* ``LLMAnnotator`` posts rendered prompts to an HTTP endpoint, samples
  several replies per batch and keeps the per-pair mode.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import string
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import envs
from .preference_model import PreferenceTriple

log = logging.getLogger(__name__)

RAW_LABELS = (0, 1, 2, 3)
EQUAL = 2
INCOMPARABLE = 3
API_KEY_ENV = "ANNOTATOR_API_KEY"

_INT_LIST = re.compile(r"\[\s*(-?\d+(?:\s*,\s*-?\d+)*)\s*\]")


class LabelParseError(ValueError):
    pass


class AnnotationError(RuntimeError):
    pass


def parse_label_list(reply, expected_count):
    """First bracketed integer list in ``reply``, validated as raw labels."""
    match = _INT_LIST.search(reply)
    if match is None:
        raise LabelParseError("no bracketed integer list in reply")
    values = [int(v) for v in match.group(1).split(",")]
    if len(values) != expected_count:
        raise LabelParseError(f"expected {expected_count} labels, got {len(values)}")
    bad = [v for v in values if v not in RAW_LABELS]
    if bad:
        raise LabelParseError(f"labels out of range 0..3: {bad}")
    return values


def aggregate_mode(samples):
    """Most frequent raw label; a tie at the top resolves to 2."""
    if not samples:
        raise ValueError("cannot aggregate an empty sample list")
    counts = Counter(samples).most_common()
    top = counts[0][1]
    winners = [label for label, c in counts if c == top]
    return winners[0] if len(winners) == 1 else EQUAL


def map_label(raw):
    """Raw label -> y in {0, 1, 0.5}, or None for an incomparable pair."""
    return {0: 0.0, 1: 1.0, 2: 0.5, 3: None}[raw]


@dataclass
class LabelOutcome:
    triples: list
    counts: dict
    discarded: int

    @property
    def annotated(self):
        return sum(self.counts.values())


def labels_to_triples(pairs, raw_labels):
    if len(pairs) != len(raw_labels):
        raise ValueError("one label per pair is required")
    counts = {k: 0 for k in RAW_LABELS}
    triples = []
    for (a, b), raw in zip(pairs, raw_labels):
        counts[raw] += 1
        y = map_label(raw)
        if y is not None:
            triples.append(PreferenceTriple(a, b, y))
    return LabelOutcome(triples, counts, counts[INCOMPARABLE])


def segment_bytes(segment):
    return json.dumps(segment.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def pair_hash(segment_a, segment_b):
    """Stable 64-bit hex digest of both segments, order-sensitive."""
    h = hashlib.blake2b(digest_size=8)
    h.update(segment_bytes(segment_a))
    h.update(b"\x00")
    h.update(segment_bytes(segment_b))
    return h.hexdigest()


# prompt rendering


@dataclass
class ChannelDoc:
    name: str
    description: str
    integer: bool = False


@dataclass
class PromptTemplate:
    """Plain-text prompt with ``$placeholders`` plus channel docs and criteria."""

    text: str
    task: str
    channels: list
    criteria: list
    precision: int = 3
    horizon: int = 24

    @classmethod
    def from_file(cls, path, **kwargs):
        with open(path, encoding="utf-8") as fh:
            return cls(text=fh.read(), **kwargs)

    @classmethod
    def builtin(cls, name="locomotion", **kwargs):
        text = resources.files("lapp.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")
        return cls(text=text, **kwargs)

    def system_text(self, batch_size):
        docs = "\n".join(f'{i}) "{c.name}": {c.description}' for i, c in enumerate(self.channels, 1))
        crit = "\n".join(f"{i}) {c}" for i, c in enumerate(self.criteria, 1))
        example = "[" + ", ".join(str(v) for v in _example_labels(batch_size)) + "]"
        return string.Template(self.text).substitute(
            task=self.task,
            horizon=self.horizon,
            channel_docs=docs,
            criteria=crit,
            batch_size=batch_size,
            example=example,
        )

    def _format(self, values, integer):
        if values.ndim == 1:
            if integer:
                return "[" + ", ".join(str(int(v)) for v in values) + "]"
            return "[" + ", ".join(f"{v:.{self.precision}f}" for v in values) + "]"
        return "[" + ", ".join(self._format(row, integer) for row in values) + "]"

    def user_text(self, pairs):
        blocks = []
        for i, pair in enumerate(pairs, 1):
            blocks.append(f"Pair {i}:")
            for j, seg in enumerate(pair):
                blocks.append(f"Trajectory {j}:")
                for c in self.channels:
                    if c.name not in seg.channels:
                        raise KeyError(f"segment is missing channel {c.name!r} required by the prompt")
                    blocks.append(f'"{c.name}": {self._format(seg.channels[c.name], c.integer)}')
        return "\n".join(blocks)


def _example_labels(n):
    base = (0, 0, 1, 2, 3)
    return [base[i % len(base)] for i in range(n)]


def render_messages(template, pairs):
    return template.system_text(len(pairs)), template.user_text(pairs)


def render_prompt(template, pairs):
    """Deterministic full prompt text for one batch of pairs."""
    system, user = render_messages(template, pairs)
    return system + "\n\n" + user + "\n"


# backends


@dataclass
class Criterion:
    feature: str
    weight: float


def segment_score(segment, criteria, dt):
    total = 0.0
    for c in criteria:
        value = envs.segment_feature(c.feature, segment, dt)
        if math.isnan(value):
            raise ValueError(f"feature {c.feature!r} is NaN")
        total += c.weight * value
    return total


def oracle_annotate(pair, criteria, tie_tolerance=0.0, dt=envs.DEFAULT_DT):
    """Higher weighted score wins; a score gap within ``tie_tolerance`` is a tie."""
    a, b = pair
    gap = segment_score(a, criteria, dt) - segment_score(b, criteria, dt)
    if abs(gap) <= tie_tolerance:
        return EQUAL
    return 0 if gap > 0 else 1


class OracleAnnotator:
    """Deterministic scripted labeler.

    ``schedule`` optionally maps a training stage (predictor update cycle) to
    a criteria list; the highest stage not above the current one applies.
    """

    name = "oracle"

    def __init__(self, criteria, tie_tolerance=0.0, dt=envs.DEFAULT_DT, schedule=None):
        self.schedule = sorted(schedule.items()) if schedule else [(0, list(criteria))]
        self.tie_tolerance = tie_tolerance
        self.dt = dt
        self.stage = 0

    def set_stage(self, stage):
        self.stage = stage

    @property
    def criteria(self):
        current = self.schedule[0][1]
        for start, crit in self.schedule:
            if start <= self.stage:
                current = crit
        return current

    def label_pairs(self, pairs):
        return [oracle_annotate(p, self.criteria, self.tie_tolerance, self.dt) for p in pairs]


class ReplayAnnotator:
    """Labels from a JSONL file of {"pair_hash": hex, "label": int} records."""

    name = "replay"

    def __init__(self, labels):
        self.labels = dict(labels)

    @classmethod
    def from_file(cls, path):
        labels = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                label = int(rec["label"])
                if label not in RAW_LABELS:
                    raise ValueError(f"{path}:{lineno}: label {label} out of range")
                labels[rec["pair_hash"]] = label
        return cls(labels)

    def set_stage(self, stage):
        pass

    def label_pairs(self, pairs):
        out = []
        for a, b in pairs:
            key = pair_hash(a, b)
            if key not in self.labels:
                raise AnnotationError(f"no replay label for pair {key}")
            out.append(self.labels[key])
        return out


@dataclass
class LLMConfig:
    base_url: str = "http://127.0.0.1:8000/v1/preference"
    model: str = ""
    temperature: float = 0.7
    samples: int = 15
    batch_size: int = 5
    max_retries: int = 3
    timeout: float = 60.0
    max_in_flight: int = 4


class LLMAnnotator:
    """Queries an HTTP endpoint with rendered prompts.

    Wire format: POST JSON {"system", "user", "temperature"[, "model"]},
    reply JSON {"text"}.  The bearer token comes from ANNOTATOR_API_KEY.
    """

    name = "llm"

    def __init__(self, template, config=None):
        self.template = template
        self.config = config or LLMConfig()
        self.failed_samples = 0

    def set_stage(self, stage):
        pass

    def _post(self, system, user):
        body = {"system": system, "user": user, "temperature": self.config.temperature}
        if self.config.model:
            body["model"] = self.config.model
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(
            self.config.base_url, data=json.dumps(body).encode(), headers=headers, method="POST"
        )
        with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
            return json.loads(resp.read().decode())["text"]

    def _sample(self, system, user, count):
        network_failures = 0
        for attempt in range(self.config.max_retries + 1):
            try:
                text = self._post(system, user)
            except (urllib.error.URLError, OSError) as exc:
                network_failures += 1
                log.warning("annotator request failed (attempt %d): %s", attempt + 1, exc)
                continue
            except (ValueError, KeyError, TypeError) as exc:
                log.warning("malformed annotator response (attempt %d): %s", attempt + 1, exc)
                continue
            try:
                return parse_label_list(str(text), count)
            except LabelParseError as exc:
                log.warning("unparseable annotator reply (attempt %d): %s", attempt + 1, exc)
        if network_failures == self.config.max_retries + 1:
            raise AnnotationError(f"annotator endpoint {self.config.base_url} unreachable")
        self.failed_samples += 1
        log.warning("substituting label 2 for a failed sample of %d pairs", count)
        return [EQUAL] * count

    def label_batch(self, pairs):
        system, user = render_messages(self.template, pairs)
        n = self.config.samples
        with ThreadPoolExecutor(max_workers=max(1, self.config.max_in_flight)) as pool:
            samples = list(pool.map(lambda _: self._sample(system, user, len(pairs)), range(n)))
        return [aggregate_mode([s[i] for s in samples]) for i in range(len(pairs))]

    def label_pairs(self, pairs):
        out = []
        size = self.config.batch_size
        for i in range(0, len(pairs), size):
            out.extend(self.label_batch(pairs[i : i + size]))
        return out


class FallbackAnnotator:
    """Use ``primary`` and switch to ``fallback`` for batches it cannot label."""

    def __init__(self, primary, fallback):
        self.primary = primary
        self.fallback = fallback
        self.name = f"{primary.name}+{fallback.name}"

    def set_stage(self, stage):
        self.primary.set_stage(stage)
        self.fallback.set_stage(stage)

    def label_pairs(self, pairs):
        try:
            return self.primary.label_pairs(pairs)
        except AnnotationError as exc:
            log.warning("primary annotator failed (%s); using fallback", exc)
            return self.fallback.label_pairs(pairs)


# behaviour presets for the gait walker


WALKER_CHANNEL_DOCS = [
    ChannelDoc("commands", "forward velocity command in m/s, one value per step."),
    ChannelDoc("base_linear_velocity", "body-frame x, y, z velocity in m/s, shape (H, 3)."),
    ChannelDoc("base_angular_velocity", "body roll, pitch and yaw rates in rad/s, shape (H, 3)."),
    ChannelDoc("base_height", "torso height in m, one value per step."),
    ChannelDoc("base_roll_pitch_yaw", "torso roll, pitch and yaw in rad, shape (H, 3)."),
    ChannelDoc(
        "feet_contacts",
        "ground contact flags (1 touching, 0 airborne), shape (H, 4), feet ordered front-left, front-right, rear-left, rear-right.",
        integer=True,
    ),
]

BEHAVIOURS = {
    "walk": (
        "walk forward at the commanded speed.",
        ["Forward velocity (first entry of base_linear_velocity) should match the command closely."],
        [Criterion("tracking_error", -1.0)],
    ),
    "high_cadence": (
        "walk forward at the commanded speed while stepping with a high cadence.",
        [
            "Forward velocity should match the command closely.",
            "More frequent steps are better: each foot's contact flag should switch between 0 and 1 often.",
        ],
        [Criterion("tracking_error", -1.0), Criterion("cadence", 1.0)],
    ),
    "low_cadence": (
        "walk forward at the commanded speed while stepping with a low cadence.",
        [
            "Forward velocity should match the command closely.",
            "Fewer, longer steps are better: each foot's contact flag should switch between 0 and 1 rarely.",
        ],
        [Criterion("tracking_error", -1.0), Criterion("cadence", -1.0)],
    ),
    "bounding": (
        "move forward at the commanded speed with a bounding gait.",
        [
            "Forward velocity should match the command closely.",
            "Front feet should touch down and lift off together, and so should the rear feet.",
        ],
        [Criterion("tracking_error", -1.0), Criterion("sync_error", -1.0)],
    ),
}


def behaviour_template(behaviour, horizon=24, precision=3):
    task, criteria_text, _ = BEHAVIOURS[behaviour]
    return PromptTemplate.builtin(
        "locomotion",
        task=task,
        channels=list(WALKER_CHANNEL_DOCS),
        criteria=list(criteria_text),
        precision=precision,
        horizon=horizon,
    )


def behaviour_criteria(behaviour, weights=None):
    crit = BEHAVIOURS[behaviour][2]
    if weights:
        crit = [Criterion(c.feature, weights.get(c.feature, c.weight)) for c in crit]
    return list(crit)


@dataclass
class AnnotatorConfig:
    backend: str = "oracle"
    behaviour: str = "walk"
    weights: dict = field(default_factory=dict)
    tie_tolerance: float = 0.0
    replay_path: str = ""
    fallback_to_oracle: bool = False
    llm: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in ("oracle", "replay", "llm"):
            raise ValueError(f"unknown annotator backend {self.backend!r}")
        if self.behaviour not in BEHAVIOURS:
            raise ValueError(f"unknown behaviour {self.behaviour!r}")


def build_annotator(config, dt=envs.DEFAULT_DT, horizon=24):
    oracle = OracleAnnotator(behaviour_criteria(config.behaviour, config.weights), config.tie_tolerance, dt)
    if config.backend == "oracle":
        return oracle
    if config.backend == "replay":
        if not config.replay_path:
            raise ValueError("replay annotator needs replay_path")
        primary = ReplayAnnotator.from_file(config.replay_path)
    else:
        primary = LLMAnnotator(behaviour_template(config.behaviour, horizon), LLMConfig(**config.llm))
    return FallbackAnnotator(primary, oracle) if config.fallback_to_oracle else primary


def segment_summary(segment, dt=envs.DEFAULT_DT):
    """Behaviour features of a segment, for logging and inspection."""
    out = {}
    for name in envs.SEGMENT_FEATURES:
        try:
            out[name] = envs.segment_feature(name, segment, dt)
        except KeyError:
            continue
    return out


def noisy_labels(true_labels, epsilon, rng):
    """Replace each label by a uniform coin flip with probability ``epsilon``."""
    labels = np.array(true_labels, dtype=np.float64)
    flip = rng.random(len(labels)) < epsilon
    labels[flip] = rng.integers(0, 2, size=int(flip.sum())).astype(np.float64)
    return labels
