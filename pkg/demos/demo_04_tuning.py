"""
Hyper-parameter search with TPE and median pruning
==================================================

The search space is learning rate and weight decay on log scales plus the
optimizer choice. Objectives are maximized; an objective can report
intermediate values and stop early when the median rule says so.
"""

import math

import numpy as np

from fusionbench.hpo import (
    MedianPruner,
    NopPruner,
    RandomSampler,
    SearchSpace,
    TPESampler,
    TrialPruned,
    run_study,
)

space = SearchSpace.default()
print(space.to_dict())


def objective(trial):
    p = trial.params
    return -(math.log(p["lr"]) - math.log(1e-4)) ** 2 - (math.log(p["weight_decay"]) - math.log(1e-4)) ** 2


# median best over 20 seeded 50-trial studies
for name, make in (("tpe", TPESampler), ("random", RandomSampler)):
    best = [run_study(objective, space, 50, make(seed=s), NopPruner()).best_value for s in range(20)]
    print(f"{name:6s} median best {np.median(best):.4f}")


# learning curves that rise toward each trial's final value
def curve(trial, steps=20):
    final = -(math.log(trial.params["lr"]) - math.log(1e-4)) ** 2
    for step in range(steps):
        trial.report(final * (1 - math.exp(-(step + 1) / 4)), step)
        if trial.should_prune():
            raise TrialPruned()
    return final


res = run_study(curve, space, 30, RandomSampler(seed=0), MedianPruner(warmup_steps=3))
steps = sum(len(t.intermediate) for t in res.trials)
print(f"pruned {sum(t.state == 'pruned' for t in res.trials)} of 30 trials, {steps} of 600 steps run, "
      f"best trial {res.best_trial}")
