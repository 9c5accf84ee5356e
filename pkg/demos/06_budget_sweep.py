"""
Splitting a fixed budget between width and depth
================================================

For a budget A*K of candidates per step we can keep many paths with little
branching (A large) or few paths with heavy branching (K large).  The sweep
runs every power-of-two split and marks the best one per budget.
"""
from treeg import harness
from treeg.config import load_config
from treeg.tree_search import predict_cost

cfg = load_config("toy-discrete-count").with_guidance(n_mc=4)
rows = harness.cli_sweep(cfg, [1, 4, 16], csv_path=False, seeds=range(20))
print("budget   A   K   mean f_y")
for r in rows:
    print("%6d %3d %3d %10.3f%s" % (r["budget"], r["A"], r["K"], r["mean_fy"], "  *" if r["frontier"] else ""))

# predicted cost units for one run of each split at budget 16
for A, K in [(1, 16), (4, 4), (16, 1)]:
    print((A, K), predict_cost(cfg.guidance, A, K, cfg.schedule["T"]))
