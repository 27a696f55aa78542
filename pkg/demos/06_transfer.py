"""Reuse a walking policy after the environment's drag doubles.

Run: python demos/06_transfer.py [seed]
"""

import sys
from pathlib import Path

from lapp.config import load_config
from lapp.loop import LappRun, transfer_finetune

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
configs = Path(__file__).parents[1] / "configs"
source_cfg = load_config(configs / "walker_walk.yaml").replace(seed=seed)
target_cfg = load_config(configs / "walker_walk_high_drag.yaml").replace(seed=seed)

source = LappRun(source_cfg.settings())
source.train(100)
print(f"source policy trained (drag {source_cfg.env.drag})")

done = lambda row: row["tracking_error"] < 0.15
tuned = transfer_finetune(source.bundle.state_arrays(), target_cfg.settings(), 300, stop=done).rows
scratch = LappRun(target_cfg.settings()).train(300, stop=done)
print(f"drag {target_cfg.env.drag}: fine-tuned reached tracking < 0.15 in {len(tuned)} epochs, from scratch in {len(scratch)}")
