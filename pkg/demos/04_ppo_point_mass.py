"""Plain PPO on the 1-D velocity tracking task.

Run: python demos/04_ppo_point_mass.py
"""

from pathlib import Path

from lapp.config import load_config
from lapp.loop import LappRun

config = load_config(Path(__file__).parents[1] / "configs" / "point_mass.yaml")
run = LappRun(config.settings(), baseline=True)


def report(r, row):
    if row["epoch"] % 25 == 0:
        print(f"epoch {row['epoch']:4d}  |c - v| {row['tracking_error']:.3f}  reward {row['mean_env_reward']:.3f}")


rows = run.train(500, callback=report, stop=lambda row: row["tracking_error"] < 0.1)
print(f"reached tracking error {rows[-1]['tracking_error']:.3f} after {len(rows)} epochs")
