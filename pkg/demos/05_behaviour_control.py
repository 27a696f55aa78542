"""Steer the walker's gait with preference labels and compare against plain PPO.

Run: python demos/05_behaviour_control.py [high_cadence|low_cadence|bounding] [seed]
Each run trains for the preset's epoch count (200 or 400, a few minutes on one core).
"""

import sys
from pathlib import Path

from lapp import rl
from lapp.config import load_config
from lapp.loop import LappRun

behaviour = sys.argv[1] if len(sys.argv) > 1 else "high_cadence"
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
config = load_config(Path(__file__).parents[1] / "configs" / f"walker_{behaviour}.yaml").replace(seed=seed)


def train(baseline):
    run = LappRun(config.settings(), baseline=baseline)

    def report(r, row):
        if row["epoch"] % 40 == 0:
            print(f"  epoch {row['epoch']:3d}  tracking {row['tracking_error']:.3f}  cadence {row['cadence']:.2f}  sync {row['sync_error']:.2f}")

    run.train(config.loop.epochs, callback=report)
    return rl.evaluate_policy(run.bundle, config.env, episodes=4, seed=1000 + seed)


print("plain PPO")
base = train(True)
print(f"preference loop ({behaviour})")
lapp = train(False)
for key in ("tracking_error", "cadence", "sync_error"):
    print(f"{key:15s} baseline {base[key]:.3f}   preference {lapp[key]:.3f}   ratio {lapp[key] / base[key]:.2f}")
