"""
How much the flight envelope matters
====================================

The default generator keeps each flight inside a small loiter box (a few meters
of center spread, ~12 m swings). Widen that box and the network sees a larger
spread of positions for the same number of training pairs, so its prior gets
looser while the UKF does not care. This demo runs UKF, BNN and BNKF on the
High tier for the default envelope and a moderate one and prints mean
Euclidean error side by side.

Runs land in ``./bnkf-envelope-run``; about two minutes on one core.  Expect the
BNN error to roughly double in the moderate envelope while the UKF barely moves.
"""

import shutil
from pathlib import Path

import pandas as pd

from bnkf import config, pipeline

N_TRAJ, DURATION = 60, 60.0
root = Path("bnkf-envelope-run")
shutil.rmtree(root, ignore_errors=True)

envelopes = {
    "compact": {},
    "moderate": {"center_spread": [10.0, 10.0, 5.0], "amplitude": [30.0, 30.0, 10.0]},
}

rows = []
for name, overrides in envelopes.items():
    cfg = config.from_dict({
        "n_trajectories": N_TRAJ,
        "tiers": ["high"],
        "methods": ["UKF", "BNN", "BNKF"],
        "trajectory": {"duration": DURATION, **overrides},
        # same beta/N as the 500-flight, 60 s default run
        "bnn": {"beta": 500.0 * N_TRAJ * DURATION / (500 * 60.0)},
    })
    out = root / name
    for step in (pipeline.generate, pipeline.train_models, pipeline.evaluate):
        failed = step(cfg, out)
        if failed:
            print(f"{name}: {step.__name__} checks failed: {failed}")
    s = pd.read_csv(out / "reports" / "summary.csv").query("rate == 'all'")
    rows.append(s.assign(envelope=name)[["envelope", "method", "ED_mean", "MD_mean"]])

table = pd.concat(rows).pivot(index="method", columns="envelope", values="ED_mean")
print("mean Euclidean error (m), High tier")
print(table.round(2).to_string())
