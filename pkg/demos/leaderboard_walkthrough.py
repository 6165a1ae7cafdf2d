"""
A full leaderboard in a scratch directory
=========================================

Train the seven built-in bundles, rank them on Test2 and on the external
site, and print how far the two orderings agree.
"""

import tempfile

from flchallenge.harness import build_config, run_challenge
from flchallenge.harness.commands import EXTERNAL, INTERNAL

out = tempfile.mkdtemp(prefix="flchallenge-")
cfg = build_config({"seed": 0, "output_dir": out, "rounds": {"n_rounds": 40},
                    "leaderboard": {"n_trials": 200}})
summary = run_challenge(cfg)

internal = summary["leaderboards"][INTERNAL]
external = summary["leaderboards"][EXTERNAL]
print(internal.to_csv())
print(external.to_csv())

###############################################################################
# Bootstrap rank frequencies show how settled each position is.

boot = internal.bootstrap["linear"]
for name, median, (lo, hi) in zip(boot.algorithms, boot.median_rank, boot.interval):
    print(f"{name:32s} median {median:.1f}  95% [{lo:.1f}, {hi:.1f}]")

print("spearman internal vs external:", round(summary["comparison"]["spearman"], 3))
print("all outputs under", out)
