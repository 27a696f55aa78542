"""Sample segment pairs from walker rollouts, render the annotation prompt, and label them.

Run: python demos/03_label_protocol.py
The oracle annotator stands in for a language model; set annotator.backend to
"llm" in a config to query a real endpoint instead.
"""

import numpy as np

from lapp import rl
from lapp.annotation import (
    OracleAnnotator,
    aggregate_mode,
    behaviour_criteria,
    behaviour_template,
    labels_to_triples,
    parse_label_list,
    render_prompt,
)
from lapp.envs import EnvConfig
from lapp.loop import sample_pairs

env_cfg = EnvConfig()
bundle = rl.PolicyBundle(19, 5, rl.PPOConfig(), seed=0)
envs, obs = rl.make_envs(env_cfg, 8, seed=0)
buf, _, _ = rl.collect_rollout(bundle, envs, obs, 48, np.random.default_rng(0))
pairs = sample_pairs(buf, 5, 24, np.random.default_rng(1))

prompt = render_prompt(behaviour_template("high_cadence"), pairs)
print(prompt[:1200], "...\n")

# A model reply is parsed into one label per pair; fifteen replies are reduced by majority.
print(parse_label_list("The answer is [0, 1, 2, 0, 3]", 5))
print("mode of 8x0, 7x1:", aggregate_mode([0] * 8 + [1] * 7), "| 7x0, 7x1, 1x3:", aggregate_mode([0] * 7 + [1] * 7 + [3]))

oracle = OracleAnnotator(behaviour_criteria("high_cadence", {"cadence": 3.0}))
labels = oracle.label_pairs(pairs)
outcome = labels_to_triples(pairs, labels)
print("oracle labels:", labels, "| kept", len(outcome.triples), "discarded", outcome.discarded)
