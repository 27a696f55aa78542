"""Fit a predictor ensemble to noisy synthetic preferences and measure ranking accuracy.

Run: python demos/02_train_predictor.py
"""

import numpy as np

from lapp.preference_model import PredictorConfig, PreferenceTriple, TrajectorySegment
from lapp.trainer import TrainerConfig, ensemble_predict, train_ensemble

WEIGHTS = np.array([1.0, -0.5, 0.8, 0.3])


def make(n, rng, noise):
    out = []
    for _ in range(n):
        xa, xb = rng.normal(size=(12, 4)), rng.normal(size=(12, 4))
        label = 0.0 if (xa @ WEIGHTS).sum() > (xb @ WEIGHTS).sum() else 1.0
        if rng.random() < noise:
            label = float(rng.integers(0, 2))
        seg = lambda x: TrajectorySegment({"x": x}, np.zeros((12, 1)))
        out.append(PreferenceTriple(seg(xa), seg(xb), label))
    return out


train = make(500, np.random.default_rng(0), noise=0.15)
test = make(500, np.random.default_rng(1), noise=0.0)

for arch in ("mlp", "transformer"):
    pcfg = PredictorConfig(mode="markovian", architecture=arch, width=16, heads=2, blocks=1, channels=["x"])
    tcfg = TrainerConfig(pool_size=3, select=2, min_epochs=10, max_epochs=40, lr=3e-3)
    result = train_ensemble(train, pcfg, tcfg, seed=0)
    ens = result.ensemble
    correct = [
        (ensemble_predict(ens, t.segment_a).sum() > ensemble_predict(ens, t.segment_b).sum()) == (t.label == 0.0)
        for t in test
    ]
    print(f"{arch:12s} members kept {ens.indices}, val losses {np.round(result.member_losses, 3)}, accuracy {np.mean(correct):.3f}")
