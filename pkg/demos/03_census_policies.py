# %% [markdown]
# # End-to-end: cardinality estimation under a drifted insert
#
# Full pipeline on a (reduced) census-like table: train an autoregressive
# model, stream in a 20% insert whose joint distribution was permuted,
# and compare four update policies on a frozen query workload.
#
# Scaled down to run in a couple of minutes; the acceptance suite runs
# the full 48842-row version.

# %%
import json
from pathlib import Path

from shiftup.experiment import ExperimentConfig, run_experiment

cfg = ExperimentConfig.from_json({
    "name": "demo-census-darn",
    "dataset": {"generator": "census", "rows": 12000, "seed": 0},
    "family": "darn",
    "model": {"hidden": [128, 128], "seed": 0},
    "train": {"epochs": 20, "batch_size": 512, "base_lr": 2e-3},
    "stream": {"fraction": 0.2, "n_batches": 1, "drift": True},
    "detector": {"n_resamples": 500, "resample_size": 120},
    "update": {"epochs": 12, "batch_size": 256, "lr": 5e-4, "lambda_": 0.5,
               "transfer_fraction": 0.1},
    "workload": {"n": 400, "style": "naru", "filter_count_range": [2, 6],
                 "n_samples": 512},
    "policies": ["ddup", "baseline", "stale", "retrain"],
    "seed": 0,
    "output_dir": "demo_runs",
})
run_dir = run_experiment(cfg)
print("artifacts under", run_dir)

# %% [markdown]
# ## What happened
#
# The detector flags the drifted batch, the distillation branch runs,
# and the updated model tracks retrain-level accuracy at a fraction of
# the cost, while plain fine-tuning wrecks the unchanged queries.

# %%
for policy in cfg.policies:
    lines = (run_dir / "steps" / f"{policy}.jsonl").read_text().splitlines()
    rec = json.loads(lines[-1])
    summary = rec["metrics"]["summary"]
    groups = rec["metrics"]["groups"]
    print(f"{policy:>9}: decision={rec['decision'] or '-':>4} "
          f"median={summary['median']:.2f} p99={summary['p99']:.1f} "
          f"unchanged-queries median={groups['fixed']['median']:.2f} "
          f"wall={rec['wall_time']:.1f}s")

print("\nsummary.csv / timings.csv / plots/ hold the full breakdown")
