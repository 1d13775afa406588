# %% [markdown]
# # Updating a mixture density network without forgetting
#
# A 10-component MDN is trained on a 5-peak mixture, then hit with 50
# insert batches drawn from a 2-peak mixture at new locations.  Three
# update policies are compared:
#
# - **distill**: each batch trains a clone of the current model on the
#   combined objective (distillation + old-sample loss + new-batch
#   loss); the clone becomes the next teacher.
# - **fine-tune**: plain SGD on each new batch with the size-scaled
#   learning rate.
# - **stale**: never update.
#
# The punchline: distillation keeps all five original peaks while
# growing the two new ones; plain fine-tuning forgets old peaks.

# %%
import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from shiftup import (DistillConfig, InsertionBatch, TrainConfig, TransferSet,
                     concat_tables, distill_update)
from shiftup.datasets import (MOG_N_CATEGORIES, MOG_NEW_MEANS, MOG_OLD_MEANS,
                              make_mog_table, make_mog_update)
from shiftup.models import MDNModel

base = make_mog_table(n_per_category=1000, seed=0)
model0 = MDNModel(base.schema, "x", "y", n_components=10, hidden=64, seed=0)
model0.fit(base, TrainConfig(epochs=80, batch_size=256, base_lr=2e-3, seed=0))
model0.fit(base, TrainConfig(epochs=60, batch_size=256, base_lr=5e-4, seed=1))
model0.meta["row_count"] = base.row_count

# %% [markdown]
# ## Replay 50 shifted batches under each policy

# %%
cfg = DistillConfig(lambda_=0.5, temperature=2.0, epochs=15, batch_size=128,
                    lr=2e-4, seed=0)
distilled = model0.clone()
distilled.meta["row_count"] = base.row_count
tuned = model0.clone()
tuned.meta["row_count"] = base.row_count
history = base

for t in range(50):
    data = make_mog_update(10, seed=100 + t)  # 100 rows from the new mixture
    tr = TransferSet(history.sample(1000, seed=200 + t), created_at=t)
    distilled = distill_update(distilled, tr,
                               InsertionBatch(t=t + 1, data=data), cfg).new_model
    distilled.register_insert(data.row_count)
    tuned.fine_tune(data, old_size=tuned.meta["row_count"],
                    new_size=data.row_count,
                    cfg=TrainConfig(epochs=15, batch_size=128, base_lr=2e-3,
                                    seed=300 + t))
    tuned.register_insert(data.row_count)
    history = concat_tables([history, data])
print("replayed 50 update batches")

# %% [markdown]
# ## Compare generated samples

# %%
def pooled_sample(model, n_per_category=2000, seed=9):
    return np.concatenate([model.sample_y(str(c + 1), n_per_category, seed=seed + c)
                           for c in range(MOG_N_CATEGORIES)])

fig, axes = plt.subplots(1, 3, figsize=(15, 4), sharey=True)
for ax, (name, model) in zip(axes, (("distill", distilled),
                                    ("fine-tune", tuned),
                                    ("stale", model0))):
    ax.hist(pooled_sample(model), bins=128, color="steelblue")
    for mean in MOG_OLD_MEANS:
        ax.axvline(mean, color="green", alpha=0.4, linestyle="--")
    for mean in MOG_NEW_MEANS:
        ax.axvline(mean, color="red", alpha=0.5, linestyle="--")
    ax.set_title(name)
    ax.set_xlabel("y")
fig.suptitle("green = original peaks, red = inserted peaks")
fig.tight_layout()
fig.savefig("demo_02_peaks.png", dpi=120)
print("wrote demo_02_peaks.png")

# %% [markdown]
# ## Loss on held-out old data
#
# Distillation keeps the old-data loss close to the starting point;
# plain fine-tuning drifts away.

# %%
held_out = base.sample(2000, seed=7)
for name, model in (("start", model0), ("distill", distilled), ("fine-tune", tuned)):
    print(f"{name:>10}: held-out old-data loss "
          f"{model.batch_loss(held_out).mean_loss:.3f}")
