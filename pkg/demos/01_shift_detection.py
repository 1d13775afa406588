# %% [markdown]
# # Detecting out-of-distribution insert batches from model losses
#
# A trained density model maps rows to one-dimensional loss values.  On
# data resembling the training distribution the average loss stays near
# its calibrated mean; on shifted data it rises sharply.  This demo
# builds the bootstrap sampling distribution of the mean loss offline,
# then scores insert batches online with a single forward pass each.

# %%
import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from shiftup import MDNModel, TrainConfig, offline_calibrate, online_test
from shiftup.datasets import make_mog_table, make_mog_update

base = make_mog_table(n_per_category=1000, seed=0)
print(f"base table: {base.row_count} rows, schema {base.schema.names}")

model = MDNModel(base.schema, "x", "y", n_components=10, hidden=64, seed=0)
model.fit(base, TrainConfig(epochs=60, batch_size=256, base_lr=2e-3, seed=0))
print(f"trained, final loss {model.loss_trace[-1]:.3f}")

# %% [markdown]
# ## Offline: bootstrap the sampling distribution of the mean loss
#
# Resamples of the historical data give the null distribution of the
# statistic.  The decision threshold is two standard deviations above
# the mean (the 95% rule).

# %%
state = offline_calibrate(model, base, n_resamples=1000, resample_size=256, seed=1)
print(f"boot mean {state.boot_mean:.4f}, boot std {state.boot_std:.4f}, "
      f"threshold {state.threshold:.4f}")

# %% [markdown]
# ## Online: one forward pass per insert batch

# %%
rng = np.random.default_rng(2)
ind_batch = base.take(rng.choice(base.row_count, 256, replace=False))
ood_batch = make_mog_update(26, seed=3).sample(256, seed=4)

for name, batch in (("in-distribution", ind_batch), ("shifted-means", ood_batch)):
    result = online_test(state, model, batch)
    print(f"{name:>16}: d = {result.d:8.4f} vs threshold {result.threshold:.4f} "
          f"-> {result.decision}")

# %% [markdown]
# ## Sensitivity to batch size
#
# Small batches carry noisy means; rates improve quickly with size.

# %%
sizes = [8, 16, 32, 64, 128, 256, 512]
type1, power = [], []
for size in sizes:
    flags_ind = flags_ood = 0
    for trial in range(100):
        sample = base.take(rng.choice(base.row_count, size, replace=False))
        flags_ind += online_test(state, model, sample).is_ood
        shifted = make_mog_update(max(1, size // 10 + 1), seed=500 + trial)
        flags_ood += online_test(state, model, shifted.sample(size, seed=trial)).is_ood
    type1.append(flags_ind / 100)
    power.append(flags_ood / 100)
    print(f"batch {size:4d}: false-positive rate {type1[-1]:.2f}, "
          f"detection rate {power[-1]:.2f}")

fig, ax = plt.subplots(figsize=(6, 4))
ax.plot(sizes, type1, "o-", label="false positives (IND flagged)")
ax.plot(sizes, [1 - p for p in power], "s-", label="false negatives (OOD missed)")
ax.set_xscale("log")
ax.set_xlabel("batch size")
ax.set_ylabel("rate")
ax.legend()
fig.tight_layout()
fig.savefig("demo_01_rates.png", dpi=120)
print("wrote demo_01_rates.png")
