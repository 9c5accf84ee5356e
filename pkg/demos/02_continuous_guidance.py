"""
Guiding a continuous sampler toward a count target
==================================================

Samples are 16-dimensional draws from a two-component Gaussian mixture with
means at -1 and +1.  The objective asks for exactly 12 coordinates above
zero, which the unguided model almost never produces.
"""
import numpy as np

from treeg.config import build_task, load_config
from treeg.guidance import GuidanceConfig
from treeg.tree_search import run_tree_search

cfg = load_config("toy-continuous-count")
task = build_task(cfg)
seeds = range(20)


def loss(guidance, A, K):
    return np.mean([-run_tree_search(task.core, task.objective, guidance, A, K, s, record=False)[1].final_fy
                    for s in seeds])


# unguided: one path, no branching
print("unguided loss           %.3f" % loss(GuidanceConfig(family="none"), 1, 1))

# sample-destination: K candidate endpoints per step, best one steers the step
print("destination, no DSG     %.3f" % loss(cfg.guidance.with_(dsg=False), 1, 16))
print("destination, DSG        %.3f" % loss(cfg.guidance, 1, 16))

# gradient guidance through the closed-form denoiser VJP
print("gradient, gamma=2       %.3f" % np.mean([
    -run_tree_search(task.core, task.objective, GuidanceConfig(family="gradient", gamma=2.0), 1, 1, s,
                     predictor=task.predictor, record=False)[1].final_fy for s in seeds]))
