import numpy as np
import pytest
import torch

from shiftup.data import CATEGORICAL, NUMERIC, Column, Schema, Table


def finite_diff_check(loss_fn, params, eps=1e-5, rel_tol=1e-4, scale_floor=1e-5):
    """Compare autograd gradients of `loss_fn()` (a closure over `params`)
    against central finite differences, parameter by parameter.

    The comparison is relative at `rel_tol` for gradients above
    `scale_floor`; below it, truncation noise in the difference quotient
    dominates, so near-zero partials are gated absolutely at
    scale_floor * rel_tol."""
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    n_checked = 0
    for p in params:
        grad = torch.zeros_like(p) if p.grad is None else p.grad.clone()
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                hi = float(loss_fn().detach())
                flat[i] = orig - eps
                lo = float(loss_fn().detach())
                flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            ag = float(grad.view(-1)[i])
            scale = max(abs(fd), abs(ag), scale_floor)
            assert abs(fd - ag) / scale < rel_tol, (
                f"gradient mismatch at {i}: fd={fd} autograd={ag}")
            n_checked += 1
    return n_checked


@pytest.fixture
def pair_schema():
    return Schema([
        Column("k", CATEGORICAL, ("a", "b", "c")),
        Column("v", NUMERIC, (-100.0, 100.0)),
    ])


@pytest.fixture
def pair_table(pair_schema):
    rng = np.random.default_rng(7)
    codes = rng.integers(0, 3, size=200)
    values = codes * 10.0 + rng.normal(0, 1, size=200)
    return Table(pair_schema, {"k": codes, "v": values})


class ColumnLossModel:
    """Stub model whose per-example loss is a designated numeric column,
    optionally shifted; used to test the detector with known loss
    populations."""

    def __init__(self, column="v", shift=0.0):
        self.column = column
        self.shift = shift
        self.meta = {"row_count": 0}
        self.calls = 0

    def per_example_losses(self, data):
        self.calls += 1
        return data.values(self.column).astype(np.float64) + self.shift

    def batch_loss(self, data):
        from shiftup.models.base import LossReport
        if data.row_count == 0:
            raise ValueError("empty batch")
        losses = self.per_example_losses(data)
        return LossReport(mean_loss=float(losses.mean()), per_example=losses)


@pytest.fixture
def column_loss_model():
    return ColumnLossModel()
