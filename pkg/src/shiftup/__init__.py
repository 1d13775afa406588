"""shiftup: keep learned database models accurate under streaming inserts.

Detects out-of-distribution insert batches with a bootstrap two-sample
test over model losses and updates models through sequential
self-distillation, with instantiations for approximate query processing
(mixture density network), cardinality estimation (masked autoregressive
network), and synthetic data generation (tabular VAE).
"""

from .data import (
    CATEGORICAL, NUMERIC, Column, InsertionBatch, SamplePair, Schema, Table,
    concat_tables, graded_perturbation_pool, load_stream, load_table,
    make_update_stream, materialize_join_delta, save_stream, synthesize_drift,
)
from .detector import (
    DetectorState, TestResult, evaluate_rates, loss_difference,
    offline_calibrate, online_test,
)
from .distill import (
    DistillConfig, TransferSet, UpdateOutcome, annealed_ce, distill_update,
    logit_mse, pipeline_step, total_update_loss,
)
from .models import (
    DARNModel, FrequencyTable, LearnedModel, LossReport, MDNModel, TVAEModel,
    TrainConfig, TrainingDiverged, aqp_avg, aqp_count, aqp_sum, fidelity_eval,
    tvae_distill_loss,
)
from .workload import (
    MetricsReport, Query, generate_workload, ground_truth, q_error,
    relative_error, transfer_metrics,
)

__version__ = "0.1.0"
