"""
Configs, CSV output and checks
==============================

Experiments are YAML files with task, schedule, objective, guidance, search
and output blocks.  The same entry points back the ``treeg`` command.
"""
import tempfile
from pathlib import Path

from treeg import harness
from treeg.cli import main
from treeg.config import ConfigError, load_config

cfg = load_config("toy-discrete-count").with_search(seeds=5)
out = Path(tempfile.mkdtemp())
rows = harness.cli_run(cfg, out_root=out)
print((out / "toy-discrete-count" / "results.csv").read_text())

# typos are rejected with the field path and line
bad = out / "bad.yaml"
bad.write_text("task:\n  id: x\n  core: discrete-tabular\n  D: 2\n  S: 2\n  data: {family: table, table: [[.25, .25], [.25, .25]]}\n"
               "schedule: {T: 4}\nobjective: {kind: token-count, token: 0, target: 1}\nguidance: {familly: none}\n")
try:
    load_config(bad)
except ConfigError as e:
    print("config error:", e)

# the exact invariant suite
main(["verify"])
