"""Shared trainable-model contract for the MDN / DARN / TVAE families.

Every model exposes the same surface: seeded training with early stop,
per-example losses (the detector's signal; lower is better for all
families), the size-ratio fine-tune rule, cloning, and checkpointing.
Training mutates; everything else is read-only.
"""
from __future__ import annotations

import abc
import copy
from dataclasses import dataclass

import numpy as np
import torch

from ..data import Table


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    base_lr: float = 1e-3
    weight_penalty: float = 0.0  # L2 coefficient, applied as optimizer weight decay
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.weight_penalty < 0:
            raise ValueError("weight_penalty must be >= 0")


@dataclass
class LossReport:
    mean_loss: float
    per_example: np.ndarray | None = None


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


# convergence rule: stop once relative improvement stays under 0.1%
# for three consecutive epochs
_EARLY_STOP_REL = 1e-3
_EARLY_STOP_PATIENCE = 3

_FAMILIES: dict[str, type] = {}


def register_family(cls):
    _FAMILIES[cls.family] = cls
    return cls


class LearnedModel(abc.ABC):
    """Density/conditional model with a per-example training loss."""

    family: str
    task_tag: str

    def __init__(self):
        self.meta: dict = {"row_count": 0}
        self.loss_trace: list[float] = []

    # -- family hooks ----------------------------------------------------

    @abc.abstractmethod
    def _encode(self, data: Table):
        """Table -> model-ready tensors (validates encoder domains)."""

    @abc.abstractmethod
    def _example_losses(self, encoded) -> torch.Tensor:
        """Differentiable [B] tensor of per-example training losses."""

    @abc.abstractmethod
    def distill_loss(self, teacher: "LearnedModel", encoded,
                     temperature: float) -> torch.Tensor:
        """Family-specific distillation term, averaged over the batch;
        the teacher side is evaluated without gradient flow."""

    @abc.abstractmethod
    def _descriptor(self) -> dict:
        """Constructor arguments for checkpointing."""

    def update_parameters(self):
        """Parameters trained during a distillation update (all by default)."""
        return self.net.parameters()

    # -- shared API -------------------------------------------------------

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def fit(self, data: Table, cfg: TrainConfig) -> "LearnedModel":
        """Train to convergence (fixed budget + early stop); deterministic
        for equal seeds."""
        if data.row_count == 0:
            raise ValueError("empty training data")
        encoded = self._encode(data)
        self._run_sgd(encoded, data.row_count, cfg, lr=cfg.base_lr)
        self.meta["row_count"] = data.row_count
        return self

    def fine_tune(self, new_data: Table, old_size: int, new_size: int,
                  cfg: TrainConfig) -> "LearnedModel":
        """Continue training on new data with lr scaled by new/old size."""
        if old_size <= 0:
            raise ValueError("old_size must be positive")
        lr = (new_size / old_size) * cfg.base_lr
        encoded = self._encode(new_data)
        self._run_sgd(encoded, new_data.row_count, cfg, lr=lr)
        return self

    def _run_sgd(self, encoded, n_rows: int, cfg: TrainConfig, lr: float):
        opt = torch.optim.RMSprop(self.net.parameters(), lr=lr,
                                  weight_decay=cfg.weight_penalty)
        gen = torch.Generator().manual_seed(cfg.seed)
        trace, stall = [], 0
        for epoch in range(cfg.epochs):
            perm = torch.randperm(n_rows, generator=gen)
            total = 0.0
            for start in range(0, n_rows, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                opt.zero_grad()
                loss = self._example_losses(self._take_encoded(encoded, idx)).mean()
                loss.backward()
                opt.step()
                total += loss.detach().item() * len(idx)
            epoch_loss = total / n_rows
            if not np.isfinite(epoch_loss):
                raise TrainingDiverged(epoch)
            trace.append(epoch_loss)
            if len(trace) > 1:
                prev = trace[-2]
                rel = (prev - epoch_loss) / max(abs(prev), 1e-12)
                stall = stall + 1 if rel < _EARLY_STOP_REL else 0
                if stall >= _EARLY_STOP_PATIENCE:
                    break
        self.loss_trace = trace

    @staticmethod
    def _take_encoded(encoded, idx):
        if isinstance(encoded, tuple):
            return tuple(e[idx] for e in encoded)
        return encoded[idx]

    def per_example_losses(self, data: Table) -> np.ndarray:
        with torch.no_grad():
            return self._example_losses(self._encode(data)).double().numpy()

    def batch_loss(self, data: Table) -> LossReport:
        """Average per-example loss; read-only."""
        if data.row_count == 0:
            raise ValueError("empty batch")
        losses = self.per_example_losses(data)
        return LossReport(mean_loss=float(losses.mean()), per_example=losses)

    def clone(self) -> "LearnedModel":
        return copy.deepcopy(self)

    def register_insert(self, n_rows: int):
        """Refresh cardinality metadata after an accepted insert."""
        self.meta["row_count"] = self.meta.get("row_count", 0) + int(n_rows)

    # -- checkpointing ------------------------------------------------------

    def save(self, path):
        torch.save({
            "format_version": 1,
            "family": self.family,
            "descriptor": self._descriptor(),
            "state_dict": self.net.state_dict(),
            "meta": self.meta,
        }, path)

    @classmethod
    def load(cls, path) -> "LearnedModel":
        try:
            blob = torch.load(path, weights_only=False)
            family = blob["family"]
            descriptor = blob["descriptor"]
            state = blob["state_dict"]
        except Exception as exc:
            raise ValueError(f"corrupt checkpoint {path}: {exc}") from exc
        if family not in _FAMILIES:
            raise ValueError(f"unknown model family {family!r}")
        model = _FAMILIES[family]._from_descriptor(descriptor)
        model.net.load_state_dict(state)
        model.meta = dict(blob.get("meta", {}))
        return model

    @classmethod
    def _from_descriptor(cls, descriptor: dict) -> "LearnedModel":
        return cls(**descriptor)


class seeded_init:
    """Scope with the global torch RNG pinned to `seed`, for deterministic
    weight initialization that does not disturb outer RNG state."""

    def __init__(self, seed: int):
        self.seed = seed
        self._fork = torch.random.fork_rng(enabled=True)

    def __enter__(self):
        self._fork.__enter__()
        torch.manual_seed(self.seed)
        return self

    def __exit__(self, *exc):
        return self._fork.__exit__(*exc)
