"""
Three-seed protocol, result store and tables
===========================================

``cmd_run`` loads or generates a dataset, optionally tunes, then trains and
tests with three consecutive seeds. Each run appends one record to
``results.jsonl``; ``cmd_report`` renders the latest record per
(dataset, architecture) as ``mean (std)`` with population std.
"""

import tempfile
from pathlib import Path

from fusionbench import harness

config = harness.load_config(Path(__file__).parent / "configs" / "toy.yaml")
out = tempfile.mkdtemp()

for arch in ("concat", "caf", "logit_sum"):
    cfg = harness.parse_config({**config.raw, "model": {**config.raw["model"], "architecture": arch}})
    rec = harness.cmd_run(cfg, out=out)
    print(arch, rec.seeds, rec.config_hash[:10], rec.aggregate["accuracy"])

store = Path(out) / harness.RESULTS_FILE
print(harness.cmd_report(store, "md"))
print(harness.cmd_report(store, "csv"))

# redundancy sweep: accuracy per architecture with the gain over concat
sweep = harness.cmd_redundancy_sweep(config, redundancy=[0.0, 1.0], architectures=["caf"],
                                     out=tempfile.mkdtemp())
print(sweep.table())
