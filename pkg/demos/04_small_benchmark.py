"""
The full benchmark at toy scale
===============================

Runs the same generate / train / eval / timing steps as the ``bnkf`` command,
but in-process and on a small configuration, then prints the summary table.
Everything lands in ``./bnkf-demo-run`` (delete it to start over).

At this size the network has seen too few flights for the correction to buy much
at the high tier; the desk-scale run is where BNKF pulls clear of the BNN.
"""

import shutil
from pathlib import Path

import pandas as pd

from bnkf import config, pipeline

out = Path("bnkf-demo-run")
shutil.rmtree(out, ignore_errors=True)

cfg = config.from_dict({
    "n_trajectories": 40,
    "tiers": ["medium", "high"],
    "trajectory": {"duration": 30.0},
    # beta/N held near the desk-scale value (see 03_bnn_and_correction.py)
    "bnn": {"beta": 500.0 * 40 / 500},
}).validate()

for step in (pipeline.generate, pipeline.train_models, pipeline.evaluate, pipeline.timing):
    failed = step(cfg, out)
    print(f"{step.__name__}: {'ok' if not failed else failed}")

pd.set_option("display.width", 140)
summary = pd.read_csv(out / "reports" / "summary.csv")
print(summary[summary.rate == "all"][["method", "tier", "ED_mean", "ED_std", "MD_mean", "Det_mean"]]
      .to_string(index=False))
print()
print(pd.read_csv(out / "reports" / "q_tuning.csv").query("selected")[["tier", "method", "q"]]
      .to_string(index=False))
print()
print(pd.read_csv(out / "reports" / "timing.csv")[["method", "n_measurements", "median_s"]]
      .to_string(index=False))
