# %% [markdown]
# # The other two tasks: approximate aggregates and synthetic data
#
# The same detect-and-update machinery serves three model families.
# This demo tours the task-specific surfaces: COUNT/SUM/AVG estimation
# from a mixture density network, and synthetic-row generation plus
# classifier-based fidelity scoring from a tabular VAE.

# %%
import numpy as np

from shiftup import (FrequencyTable, MDNModel, TVAEModel, TrainConfig,
                     aqp_avg, aqp_count, aqp_sum, fidelity_eval)
from shiftup.datasets import (CENSUS_TARGET_COLUMN, CENSUS_X_COLUMN,
                              CENSUS_Y_COLUMN, make_census_like)
from shiftup.workload import Query, ground_truth

base = make_census_like(12000, seed=0)

# %% [markdown]
# ## Approximate query processing with an MDN
#
# One categorical attribute conditions a numeric one; aggregates come
# from the mixture density and a frequency table, no table scan.

# %%
mdn = MDNModel(base.schema, CENSUS_X_COLUMN, CENSUS_Y_COLUMN,
               n_components=10, hidden=64, seed=0)
mdn.fit(base, TrainConfig(epochs=25, batch_size=512, base_lr=2e-3, seed=0))
ft = FrequencyTable.from_table(base, CENSUS_X_COLUMN)

for cat, lb, ub in (("hs-grad", 30, 50), ("bachelors", 25, 45), ("masters", 40, 70)):
    filters = ((CENSUS_X_COLUMN, "=", cat), (CENSUS_Y_COLUMN, ">=", float(lb)),
               (CENSUS_Y_COLUMN, "<=", float(ub)))
    truth_count = ground_truth(base, Query(filters))
    truth_avg = ground_truth(base, Query(filters, agg="AVG",
                                         agg_column=CENSUS_Y_COLUMN))
    est_count = aqp_count(mdn, ft, cat, lb, ub)
    est_sum = aqp_sum(mdn, ft, cat, lb, ub)
    est_avg = aqp_avg(mdn, ft, cat, lb, ub)
    print(f"{cat:>12} age in [{lb},{ub}]: COUNT {est_count:8.1f} (true {truth_count:.0f})"
          f"  AVG {est_avg:6.2f} (true {truth_avg:.2f})  SUM {est_sum:10.0f}")

# %% [markdown]
# ## Synthetic data generation with a tabular VAE
#
# After training, the decoder alone generates schema-valid rows.  The
# usual fidelity check: a classifier trained on synthetic rows should
# predict held-out real rows nearly as well as one trained on real rows.

# %%
tvae = TVAEModel(base.schema, latent_dim=16, hidden=128, seed=0)
tvae.fit(base, TrainConfig(epochs=20, batch_size=512, base_lr=1e-3, seed=0))

rng = np.random.default_rng(1)
idx = rng.permutation(base.row_count)
holdout = base.take(idx[:3600])
real_train = base.take(idx[3600:])
synth = tvae.sample_rows(real_train.row_count, seed=2)
print(f"sampled {synth.row_count} synthetic rows; "
      f"age range {synth.values('age').min():.0f}..{synth.values('age').max():.0f}")

f1_real, f1_synth = fidelity_eval(real_train, synth, holdout,
                                  target_column=CENSUS_TARGET_COLUMN)
print(f"income classifier micro-f1: trained on real {f1_real:.3f}, "
      f"trained on synthetic {f1_synth:.3f}")
