"""How two segment returns become a preference probability and a loss.

Run: python demos/01_preference_loss.py
"""

import math

import numpy as np

from lapp import numerics as nx
from lapp.preference_model import (
    PredictorConfig,
    PreferenceTriple,
    RewardPredictor,
    TrajectorySegment,
    adjust_probability,
    bt_probability,
    predict_step_rewards,
    preference_loss,
)

# Bradley-Terry: the probability that segment A is preferred depends only on the return gap.
for gap in (-2.0, 0.0, 2.0, 10.0):
    print(f"return gap {gap:5.1f} -> P(A preferred) = {bt_probability(gap, 0.0):.4f}")

# The annotator is assumed to answer at random 15% of the time, so no prediction is
# ever fully certain and the per-pair loss is bounded below by -ln(0.925).
eps = 0.15
print("adjusted probabilities:", [adjust_probability(p, eps) for p in (0.0, 0.5, 1.0)])
print(f"loss floor: {-math.log(0.925):.6f}")

# A small transformer predictor scores each step from the window of steps before it.
rng = np.random.default_rng(0)
cfg = PredictorConfig(width=16, heads=2, blocks=2, channels=["obs"])
model = RewardPredictor(cfg, input_dim=3, seed=0)
for p in model.parameters():
    p.data = rng.normal(0.0, 0.3, p.data.shape)


def segment():
    return TrajectorySegment({"obs": rng.normal(size=(12, 3))}, np.zeros((12, 1)))


a, b = segment(), segment()
print("per-step rewards of A:", np.round(predict_step_rewards(model, a), 3))
batch = [PreferenceTriple(a, b, 0.0), PreferenceTriple(b, a, 1.0)]
loss = preference_loss(model, batch)
nx.zero_gradients(model.parameters())
nx.backward(loss)
print(f"loss {loss.item():.4f}; gradient norm {math.sqrt(sum(float(np.sum(p.grad**2)) for p in model.parameters())):.4f}")
