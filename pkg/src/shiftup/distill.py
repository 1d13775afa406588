"""Model updating: distillation losses, the combined update objective,
the sequential self-distillation step, and the detect-then-update driver.

The combined objective weighs three parts: a distillation term and a
plain loss term on a transfer set sampled from historical data, plus a
plain loss term on the new insert batch, with the new-data weight alpha:

    (1 - alpha) * mean_tr[ lambda * L_d + (1 - lambda) * L ]
        + alpha * mean_up[ L ]

alpha defaults to the insert-batch fraction of the historical row count,
so the objective's optimum tracks the true post-insert mixture of old
and new data.  The teacher is never touched by gradients.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .data import InsertionBatch, Table, concat_tables
from .detector import DetectorState, TestResult, offline_calibrate, online_test
from .losses import annealed_ce, logit_mse
from .models.base import TrainConfig, TrainingDiverged, _EARLY_STOP_PATIENCE, _EARLY_STOP_REL


@dataclass
class DistillConfig:
    alpha: float | None = None  # new-data weight; None: insert / historical size
    lambda_: float = 5 / 6
    temperature: float = 2.0
    transfer_fraction: float = 0.10
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.alpha is not None and not (0 <= self.alpha <= 1):
            raise ValueError("alpha must be in [0, 1]")
        if not (0 <= self.lambda_ <= 1):
            raise ValueError("lambda_ must be in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not (0 < self.transfer_fraction <= 1):
            raise ValueError("transfer_fraction must be in (0, 1]")


@dataclass
class TransferSet:
    """Sample of historical data fed through teacher and student."""

    data: Table
    created_at: int = 0

    def __post_init__(self):
        if self.data.row_count == 0:
            raise ValueError("transfer set must be nonempty")


@dataclass
class UpdateOutcome:
    new_model: object
    branch: str  # fine_tune | distill | none
    wall_time: float
    loss_trace: list
    test: TestResult | None = None
    detector: DetectorState | None = None
    history: Table | None = None
    transfer: TransferSet | None = None

    def log_record(self, t: int) -> dict:
        return {
            "t": t,
            "branch": self.branch,
            "d": None if self.test is None else self.test.d,
            "threshold": None if self.test is None else self.test.threshold,
            "wall_time": self.wall_time,
            "loss_trace": [float(x) for x in self.loss_trace[-5:]],
        }


def resolve_alpha(cfg: DistillConfig, update_rows: int, historical_rows: int) -> float:
    if cfg.alpha is not None:
        return cfg.alpha
    if historical_rows <= 0:
        raise ValueError("historical row count unknown; set cfg.alpha explicitly")
    return min(1.0, update_rows / historical_rows)


def total_update_loss(teacher, student, tr, up, cfg: DistillConfig,
                      distill_fn=None) -> torch.Tensor:
    """Combined update objective over the full transfer set and insert
    batch; differentiable w.r.t. the student only."""
    tr_table = tr.data if isinstance(tr, TransferSet) else tr
    up_table = up.data if isinstance(up, InsertionBatch) else up
    if tr_table.row_count == 0 or up_table.row_count == 0:
        raise ValueError("transfer set and update batch must be nonempty")
    alpha = resolve_alpha(cfg, up_table.row_count, teacher.meta.get("row_count", 0))

    enc_tr = student._encode(tr_table)
    enc_up = student._encode(up_table)
    plain_tr = student._example_losses(enc_tr).mean()
    plain_up = student._example_losses(enc_up).mean()
    if distill_fn is not None:
        l_d = distill_fn(teacher, student, tr_table, cfg.temperature)
    else:
        l_d = student.distill_loss(teacher, enc_tr, cfg.temperature)
    return ((1 - alpha) * (cfg.lambda_ * l_d + (1 - cfg.lambda_) * plain_tr)
            + alpha * plain_up)


# ---------------------------------------------------------------------
# the update branches
# ---------------------------------------------------------------------

def distill_update(teacher, tr: TransferSet, up, cfg: DistillConfig) -> UpdateOutcome:
    """One sequential self-distillation step: clone the teacher, train the
    clone on the combined objective, return it as the next-generation
    model.  The teacher's parameters are left bit-identical."""
    up_table = up.data if isinstance(up, InsertionBatch) else up
    if up_table.row_count == 0:
        raise ValueError("empty update batch")
    start = time.perf_counter()

    student = teacher.clone()
    alpha = resolve_alpha(cfg, up_table.row_count, teacher.meta.get("row_count", 0))
    opt = torch.optim.RMSprop(list(student.update_parameters()), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)

    enc_tr = student._encode(tr.data)
    enc_up = student._encode(up_table)
    n_up, n_tr = up_table.row_count, tr.data.row_count

    trace = []
    stall = 0
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n_up, generator=gen)
        total = 0.0
        for startpos in range(0, n_up, cfg.batch_size):
            up_idx = perm[startpos:startpos + cfg.batch_size]
            tr_idx = torch.randint(0, n_tr, (min(cfg.batch_size, n_tr),), generator=gen)
            opt.zero_grad()
            plain_tr = student._example_losses(
                student._take_encoded(enc_tr, tr_idx)).mean()
            plain_up = student._example_losses(
                student._take_encoded(enc_up, up_idx)).mean()
            l_d = student.distill_loss(
                teacher, student._take_encoded(enc_tr, tr_idx), cfg.temperature)
            loss = ((1 - alpha) * (cfg.lambda_ * l_d + (1 - cfg.lambda_) * plain_tr)
                    + alpha * plain_up)
            loss.backward()
            opt.step()
            total += loss.detach().item() * len(up_idx)
        epoch_loss = total / n_up
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(epoch)
        trace.append(epoch_loss)
        if len(trace) > 1:
            rel = (trace[-2] - epoch_loss) / max(abs(trace[-2]), 1e-12)
            stall = stall + 1 if rel < _EARLY_STOP_REL else 0
            if stall >= _EARLY_STOP_PATIENCE:
                break

    student.loss_trace = trace
    return UpdateOutcome(
        new_model=student,
        branch="distill",
        wall_time=time.perf_counter() - start,
        loss_trace=trace,
    )


def pipeline_step(model, detector_state: DetectorState, history_sample: Table,
                  tr: TransferSet, batch: InsertionBatch, cfg: DistillConfig,
                  *, fine_tune_on_ind: bool = True, test_fraction: float = 1.0,
                  seed: int | None = None) -> UpdateOutcome:
    """Detect-then-update for one insert batch.

    Runs the online test; on IND either fine-tunes a copy with the
    size-ratio learning rate or leaves parameters untouched (metadata is
    refreshed either way), on OOD runs a distillation update.  Afterwards
    the history sample and transfer set are re-drawn proportionally from
    old and new rows, and the detector is recalibrated against the new
    model generation.
    """
    seed = cfg.seed if seed is None else seed
    n_new = batch.data.row_count
    old_rows = model.meta.get("row_count", 0)

    if test_fraction >= 1.0:
        test_sample = batch.data
    else:
        k = max(1, int(round(test_fraction * n_new)))
        test_sample = batch.data.sample(k, seed=seed + 17)
    test = online_test(detector_state, model, test_sample)

    start = time.perf_counter()
    if test.is_ood:
        outcome = distill_update(model, tr, batch, cfg)
        new_model, branch, trace = outcome.new_model, "distill", outcome.loss_trace
    elif fine_tune_on_ind:
        new_model = model.clone()
        new_model.fine_tune(
            batch.data, old_size=old_rows, new_size=n_new,
            cfg=TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                            base_lr=cfg.lr, seed=seed),
        )
        branch, trace = "fine_tune", new_model.loss_trace
    else:
        new_model, branch, trace = model, "none", []
    wall = time.perf_counter() - start

    new_model.register_insert(n_new)

    # proportional refresh of the maintained samples
    frac_new = n_new / max(1, old_rows + n_new)
    new_history = _proportional_refresh(history_sample, batch.data, frac_new, seed + 31)
    new_tr = TransferSet(
        data=_proportional_refresh(tr.data, batch.data, frac_new, seed + 47),
        created_at=batch.t,
    )
    new_state = offline_calibrate(
        new_model, new_history,
        n_resamples=detector_state.n_resamples,
        resample_size=detector_state.resample_size,
        seed=seed + 59,
        threshold_mult=detector_state.threshold_mult,
        calibrated_at=batch.t,
    )
    return UpdateOutcome(
        new_model=new_model, branch=branch, wall_time=wall, loss_trace=trace,
        test=test, detector=new_state, history=new_history, transfer=new_tr,
    )


def _proportional_refresh(old_sample: Table, new_rows: Table, frac_new: float,
                          seed: int) -> Table:
    """Re-draw a fixed-size sample mixing old sample and new rows in
    proportion to the underlying data sizes."""
    n = old_sample.row_count
    k_new = min(new_rows.row_count, int(round(frac_new * n)))
    if k_new == 0:
        return old_sample
    keep_old = old_sample.sample(n - k_new, seed=seed) if n > k_new else None
    take_new = new_rows.sample(k_new, seed=seed + 1)
    return concat_tables([keep_old, take_new]) if keep_old is not None else take_new
