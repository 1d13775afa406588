"""Shift detection for insert batches via a bootstrap two-sample test
over average model losses.

All loss signals are oriented lower-is-better, so the statistic
d = mean_loss(new sample) - bootstrap mean is positive when new data fits
worse, and the test is one-sided: a batch is flagged OOD iff d exceeds
`threshold_mult` bootstrap standard deviations (default 2, the 95% rule).

Calibration (the expensive bootstrap) is strictly offline; the online
test costs a single model evaluation pass over the new sample.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .data import Table

IND = "IND"
OOD = "OOD"


@dataclass(frozen=True)
class DetectorState:
    """Moments of the bootstrap sampling distribution of the mean loss."""

    boot_mean: float
    boot_std: float
    n_resamples: int
    resample_size: int
    threshold_mult: float = 2.0
    calibrated_at: int = 0

    def __post_init__(self):
        if self.boot_std < 0:
            raise ValueError("boot_std must be >= 0")
        if self.n_resamples < 1:
            raise ValueError("n_resamples must be >= 1")

    @property
    def threshold(self) -> float:
        return self.threshold_mult * self.boot_std

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "DetectorState":
        return cls(**doc)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "DetectorState":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TestResult:
    d: float
    threshold: float
    decision: str
    old_mean_loss: float
    new_mean_loss: float

    def __post_init__(self):
        expected = OOD if self.d > self.threshold else IND
        if self.decision != expected:
            raise ValueError("decision inconsistent with d vs threshold")

    @property
    def is_ood(self) -> bool:
        return self.decision == OOD


def loss_difference(model, s_old: Table, s_new: Table) -> float:
    """Raw two-sample statistic: mean loss of the new sample minus mean
    loss of the old sample (zero for identical samples)."""
    return model.batch_loss(s_new).mean_loss - model.batch_loss(s_old).mean_loss


def bootstrap_means(model, old_data: Table, n_resamples: int,
                    resample_size: int, seed: int = 0) -> np.ndarray:
    """Mean losses of `n_resamples` with-replacement resamples of
    `old_data`, each of `resample_size` rows.

    Per-example losses are computed once and resampled as a vector; the
    result is identical to scoring each resample separately because the
    batch loss is the arithmetic mean of per-example losses.
    """
    losses = model.batch_loss(old_data).per_example
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(losses), size=(n_resamples, resample_size))
    return losses[idx].mean(axis=1)


def offline_calibrate(model, old_data: Table, n_resamples: int = 1000,
                      resample_size: int | None = None, seed: int = 0,
                      threshold_mult: float = 2.0,
                      calibrated_at: int = 0) -> DetectorState:
    """Build the sampling distribution of the mean loss on historical data.

    `resample_size` defaults to a 1% slice of the data (at least 2 rows).
    """
    if n_resamples < 2:
        raise ValueError("need at least 2 resamples to estimate a std")
    if old_data.row_count == 0:
        raise ValueError("empty calibration data")
    if resample_size is None:
        resample_size = max(2, int(round(0.01 * old_data.row_count)))
    means = bootstrap_means(model, old_data, n_resamples, resample_size, seed)
    return DetectorState(
        boot_mean=float(means.mean()),
        boot_std=float(means.std(ddof=1)),
        n_resamples=n_resamples,
        resample_size=resample_size,
        threshold_mult=threshold_mult,
        calibrated_at=calibrated_at,
    )


def online_test(state: DetectorState, model, new_sample: Table) -> TestResult:
    """Score one insert batch: a single forward pass, no bootstrap work."""
    if new_sample.row_count == 0:
        raise ValueError("empty new sample")
    new_mean = model.batch_loss(new_sample).mean_loss
    d = new_mean - state.boot_mean
    return TestResult(
        d=d,
        threshold=state.threshold,
        decision=OOD if d > state.threshold else IND,
        old_mean_loss=state.boot_mean,
        new_mean_loss=new_mean,
    )


def evaluate_rates(state: DetectorState, model, ind_pool: Table,
                   ood_pool: Table, batch_size: int, n_batches: int,
                   seed: int = 0) -> tuple[float, float]:
    """False-positive and false-negative rates over random batches drawn
    from an in-distribution pool and a shifted pool."""
    for pool in (ind_pool, ood_pool):
        if pool.row_count == 0:
            raise ValueError("empty pool")
        if batch_size > pool.row_count:
            raise ValueError("batch_size exceeds pool size")
    rng = np.random.default_rng(seed)
    fp = fn = 0
    for _ in range(n_batches):
        ind_batch = ind_pool.take(rng.choice(ind_pool.row_count, batch_size, replace=False))
        if online_test(state, model, ind_batch).is_ood:
            fp += 1
        ood_batch = ood_pool.take(rng.choice(ood_pool.row_count, batch_size, replace=False))
        if not online_test(state, model, ood_batch).is_ood:
            fn += 1
    return fp / n_batches, fn / n_batches
