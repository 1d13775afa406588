from .base import LearnedModel, LossReport, TrainConfig, TrainingDiverged
from .darn import DARNModel
from .mdn import FrequencyTable, MDNModel, aqp_avg, aqp_count, aqp_sum
from .tvae import TVAEModel, fidelity_eval, gaussian_kl_standard, tvae_distill_loss

__all__ = [
    "LearnedModel", "LossReport", "TrainConfig", "TrainingDiverged",
    "DARNModel", "MDNModel", "FrequencyTable", "aqp_avg", "aqp_count", "aqp_sum",
    "TVAEModel", "fidelity_eval", "gaussian_kl_standard", "tvae_distill_loss",
]
