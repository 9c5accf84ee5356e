"""
Sample-current guidance on a token-count task
=============================================

The target is six copies of a token the data rarely uses.  At each step every
active sequence proposes K next states, each is scored by a Monte-Carlo
estimate of the objective under the denoiser, and the best A survive.
"""
import numpy as np

from treeg.config import build_task, load_config
from treeg.guidance import GuidanceConfig
from treeg.tree_search import run_tree_search

task = build_task(load_config("toy-discrete-count"))
seeds = range(30)

for name, g, A, K in [("unguided", GuidanceConfig(family="none"), 1, 1),
                      ("current K=2", GuidanceConfig(n_mc=16), 1, 2),
                      ("current K=8", GuidanceConfig(n_mc=16), 1, 8),
                      ("destination K=8", GuidanceConfig(family="sample-destination"), 1, 8)]:
    mae = [task.objective.abs_error(run_tree_search(task.core, task.objective, g, A, K, s, record=False)[0])
           for s in seeds]
    print("%-16s MAE %.2f" % (name, np.mean(mae)))

# a single guided run keeps a per-step record of candidate values and the kept set
x, trace = run_tree_search(task.core, task.objective, GuidanceConfig(), 2, 3, 0)
print("sample", x, "final f_y", trace.final_fy)
print("step 10 values", np.round(trace.steps[10].values, 2), "kept", trace.steps[10].selected)
print("cost", trace.cost)
