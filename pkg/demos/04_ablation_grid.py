"""Sweep loss settings and collect one row per configuration.

Each cell trains briefly and reports base, novel and HM accuracy, keyed by
a hash of its full configuration. A cell that crashes is recorded with its
error rather than stopping the sweep.
"""

from pathlib import Path

import yaml

from attrprompt.config import load_config
from attrprompt.pipeline import train_and_evaluate
from attrprompt.trainer import run_ablation_grid

here = Path(__file__).parent
config = load_config(here / "configs" / "synthetic.yaml").with_overrides({"train": {"epochs": 10}})
grid = yaml.safe_load((here / "configs" / "grid_fg.yaml").read_text())

rows = run_ablation_grid(config, grid, train_and_evaluate)
print(f"{'f':>2} {'g':>2} {'base':>7} {'novel':>7} {'HM':>7}  config")
for r in rows:
    if r["error"]:
        print(f"{r['f']:>2} {r['g']:>2}  failed: {r['error']}")
    else:
        print(f"{r['f']:>2} {r['g']:>2} {r['base']:7.2f} {r['novel']:7.2f} {r['hm']:7.2f}  {r['config_hash'][:10]}")
