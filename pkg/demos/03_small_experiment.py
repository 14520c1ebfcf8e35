"""The whole protocol on the smoke-test config: data, two encoders, heads,
four scenarios, and the aggregated table.

Artifacts are cached in ./work_demo, so a second run only redoes the attacks.

Run: python demos/03_small_experiment.py [config]
"""
import sys
from pathlib import Path

from frozenadv.harness import ExperimentConfig, report_csv, run_experiment

cfg_path = sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent.parent / "configs" / "small.cfg"
cfg = ExperimentConfig.from_file(cfg_path)
print(f"{cfg.n_reps} reps x {cfg.n_items} items, eps={cfg.epsilon}, targets {cfg.targets}")

report = run_experiment(cfg, workdir="work_demo")
print(report_csv(report))

# degradation per scenario, relative to clean, for target a
for task in cfg.tasks:
    clean = report.cell("clean", task, "a")["metric_mean"]
    row = [f"{s}: {report.cell(s, task, 'a')['metric_mean'] - clean:+.1f}" for s in cfg.scenarios[1:]]
    print(task, "  ".join(row))
