import math

import numpy as np
import pytest
import torch

from shiftup.data import InsertionBatch, Table
from shiftup.datasets import make_mog_table, make_mog_update
from shiftup.detector import DetectorState
from shiftup.distill import (
    DistillConfig, TransferSet, UpdateOutcome, annealed_ce, distill_update,
    logit_mse, pipeline_step, resolve_alpha, total_update_loss,
)
from shiftup.models import MDNModel, TrainConfig

from conftest import finite_diff_check


@pytest.fixture(scope="module")
def mog_teacher():
    table = make_mog_table(300, seed=0)
    model = MDNModel(table.schema, "x", "y", n_components=8, hidden=32, seed=0)
    model.fit(table, TrainConfig(epochs=20, batch_size=256, seed=0))
    return model, table


def _double_mdn(table, m=2, hidden=4, seed=0):
    model = MDNModel(table.schema, "x", "y", n_components=m, hidden=hidden, seed=seed)
    model.net.double()
    return model


# ---------------------------------------------------------------------
# annealed cross-entropy
# ---------------------------------------------------------------------

def test_annealed_ce_uniform_logits_give_ln2():
    for temp in (0.5, 1.0, 2.0, 7.0):
        out = float(annealed_ce(torch.zeros(2), torch.zeros(2), temp))
        assert out == pytest.approx(math.log(2), rel=1e-6)


def test_annealed_ce_known_value():
    z = torch.tensor([math.log(3.0), 0.0])
    # softmax -> (0.75, 0.25); self-CE = entropy = 0.562335
    expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert float(annealed_ce(z, z, 1.0)) == pytest.approx(expected, rel=1e-6)
    assert expected == pytest.approx(0.5623, abs=1e-4)


def test_annealed_ce_validation():
    with pytest.raises(ValueError):
        annealed_ce(torch.zeros(3), torch.zeros(3), temperature=0.0)
    with pytest.raises(ValueError):
        annealed_ce(torch.zeros(3), torch.zeros(2), temperature=1.0)
    with pytest.raises(ValueError):
        annealed_ce(torch.zeros(1), torch.zeros(1), temperature=1.0)


def test_annealed_ce_minimized_when_softened_match():
    # Gibbs: CE(p_t, p_s) >= H(p_t), equality iff p_s = p_t
    z_t = torch.tensor([1.0, -0.5, 0.25], dtype=torch.float64)
    z_s = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
    opt = torch.optim.Adam([z_s], lr=0.05)
    for _ in range(800):
        opt.zero_grad()
        loss = annealed_ce(z_t, z_s, temperature=2.0)
        loss.backward()
        opt.step()
    p_t = torch.softmax(z_t / 2.0, -1)
    p_s = torch.softmax(z_s.detach() / 2.0, -1)
    assert torch.allclose(p_t, p_s, atol=1e-4)
    floor = float(-(p_t * torch.log(p_t)).sum())
    assert float(annealed_ce(z_t, z_s.detach(), 2.0)) == pytest.approx(floor, abs=1e-6)


def test_annealed_ce_gradient_matches_finite_differences():
    z_t = torch.tensor([0.3, -1.2, 0.8, 0.0], dtype=torch.float64)
    z_s = torch.nn.Parameter(torch.tensor([0.1, 0.4, -0.2, 0.9], dtype=torch.float64))
    checked = finite_diff_check(lambda: annealed_ce(z_t, z_s, 2.0), [z_s])
    assert checked == 4


# ---------------------------------------------------------------------
# logit MSE
# ---------------------------------------------------------------------

def test_logit_mse_values():
    assert float(logit_mse(torch.tensor([1.0, 2.0]), torch.tensor([1.0, 2.0]))) == 0.0
    assert float(logit_mse(torch.tensor([1.0, 2.0]), torch.tensor([0.0, 0.0]))) == 5.0


def test_logit_mse_shape_mismatch():
    with pytest.raises(ValueError):
        logit_mse(torch.zeros(2), torch.zeros(3))


def test_logit_mse_gradient_matches_finite_differences():
    z_t = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    z_s = torch.nn.Parameter(torch.tensor([0.2, 0.1, -0.5], dtype=torch.float64))
    checked = finite_diff_check(lambda: logit_mse(z_t, z_s), [z_s])
    assert checked == 3


# ---------------------------------------------------------------------
# the combined update objective
# ---------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(alpha=1.5)
    with pytest.raises(ValueError):
        DistillConfig(lambda_=-0.1)
    with pytest.raises(ValueError):
        DistillConfig(temperature=0.0)
    with pytest.raises(ValueError):
        DistillConfig(transfer_fraction=0.0)
    with pytest.raises(ValueError):
        TransferSet(data=make_mog_table(10, seed=0).take([]))


def test_resolve_alpha_rule():
    assert resolve_alpha(DistillConfig(alpha=0.4), 10, 100) == 0.4
    assert resolve_alpha(DistillConfig(), 20, 100) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        resolve_alpha(DistillConfig(), 20, 0)


def test_total_loss_lambda_zero_reduces_to_plain_mixture():
    table = make_mog_table(40, seed=1)
    teacher = _double_mdn(table, seed=1)
    student = _double_mdn(table, seed=2)
    teacher.meta["row_count"] = 100
    tr, up = table.take(range(20)), table.take(range(20, 40))
    cfg = DistillConfig(alpha=0.3, lambda_=0.0)
    total = float(total_update_loss(teacher, student, tr, up, cfg).detach())
    plain_tr = student.batch_loss(tr).mean_loss
    plain_up = student.batch_loss(up).mean_loss
    # alpha is the new-data weight
    assert total == pytest.approx(0.7 * plain_tr + 0.3 * plain_up, rel=1e-12)


def test_total_loss_alpha_endpoints():
    table = make_mog_table(40, seed=2)
    teacher = _double_mdn(table, seed=3)
    student = _double_mdn(table, seed=4)
    teacher.meta["row_count"] = 100
    tr, up = table.take(range(20)), table.take(range(20, 40))

    pure_up = float(total_update_loss(teacher, student, tr, up,
                                      DistillConfig(alpha=1.0, lambda_=0.7)))
    assert pure_up == pytest.approx(student.batch_loss(up).mean_loss, rel=1e-12)

    pure_tr = float(total_update_loss(teacher, student, tr, up,
                                      DistillConfig(alpha=0.0, lambda_=1.0)))
    with torch.no_grad():
        l_d = float(student.distill_loss(teacher, student._encode(tr), 2.0))
    assert pure_tr == pytest.approx(l_d, rel=1e-12)


def test_total_loss_self_distillation_floor():
    table = make_mog_table(30, seed=3)
    teacher = _double_mdn(table, m=3, seed=5)
    student = teacher.clone()
    teacher.meta["row_count"] = 100
    tr = table.take(range(15))
    up = table.take(range(15, 30))
    cfg = DistillConfig(alpha=0.0, lambda_=1.0, temperature=2.0)
    total = float(total_update_loss(teacher, student, tr, up, cfg))
    # MSE terms vanish for a clone; the CE term equals the softened
    # self-entropy of the teacher's mixture weights
    with torch.no_grad():
        w_logits, _, _ = teacher._forward(teacher._encode(tr)[0])
        p = torch.softmax(w_logits / 2.0, dim=-1)
        entropy = float((-(p * torch.log(p)).sum(dim=-1)).mean())
    assert total == pytest.approx(entropy, rel=1e-10)


def test_total_loss_rejects_empty():
    table = make_mog_table(10, seed=4)
    teacher = _double_mdn(table)
    teacher.meta["row_count"] = 10
    with pytest.raises(ValueError):
        total_update_loss(teacher, teacher.clone(), table.take([]), table,
                          DistillConfig(alpha=0.5))


def test_total_loss_gradient_matches_finite_differences():
    # toy with ~90 parameters, double precision
    table = make_mog_table(12, seed=5)
    teacher = _double_mdn(table, m=2, hidden=3, seed=6)
    student = _double_mdn(table, m=2, hidden=3, seed=7)
    teacher.meta["row_count"] = 50
    tr, up = table.take(range(6)), table.take(range(6, 12))
    cfg = DistillConfig(alpha=0.4, lambda_=0.6, temperature=2.0)
    params = list(student.net.parameters())
    assert sum(p.numel() for p in params) <= 200
    checked = finite_diff_check(
        lambda: total_update_loss(teacher, student, tr, up, cfg), params,
        eps=1e-6, rel_tol=1e-4)
    assert checked > 50


def test_total_loss_custom_distill_fn():
    table = make_mog_table(20, seed=6)
    teacher = _double_mdn(table, seed=8)
    student = _double_mdn(table, seed=9)
    teacher.meta["row_count"] = 100
    tr, up = table.take(range(10)), table.take(range(10, 20))
    cfg = DistillConfig(alpha=0.0, lambda_=1.0)
    out = float(total_update_loss(teacher, student, tr, up, cfg,
                                  distill_fn=lambda t, s, tbl, temp: torch.tensor(7.0)))
    assert out == pytest.approx(7.0)


# ---------------------------------------------------------------------
# distillation updates
# ---------------------------------------------------------------------

def test_distill_update_freezes_teacher(mog_teacher):
    teacher, table = mog_teacher
    before = [p.detach().clone() for p in teacher.net.parameters()]
    tr = TransferSet(table.sample(60, seed=1))
    up = InsertionBatch(t=1, data=make_mog_update(30, seed=2))
    outcome = distill_update(teacher, tr, up,
                             DistillConfig(epochs=3, batch_size=64, lr=1e-3, seed=0))
    assert outcome.branch == "distill"
    for p0, p1 in zip(before, teacher.net.parameters()):
        assert torch.equal(p0, p1)
    assert outcome.new_model is not teacher
    assert outcome.wall_time > 0
    assert len(outcome.loss_trace) >= 1


def test_distill_update_near_noop_for_in_distribution_batch(mog_teacher):
    teacher, table = mog_teacher
    held_out = table.sample(300, seed=3)
    before = teacher.batch_loss(held_out).mean_loss
    tr = TransferSet(table.sample(100, seed=4))
    up = InsertionBatch(t=1, data=table.sample(100, seed=5))
    cfg = DistillConfig(alpha=0.5, lambda_=0.8, epochs=3, batch_size=64,
                        lr=2e-4, seed=0)
    outcome = distill_update(teacher, tr, up, cfg)
    after = outcome.new_model.batch_loss(held_out).mean_loss
    assert abs(after - before) < 0.05


def test_monotone_interpolation_alpha_endpoints(mog_teacher):
    teacher, table = mog_teacher
    tr = TransferSet(table.sample(150, seed=6))
    up = InsertionBatch(t=1, data=make_mog_update(100, seed=7))
    shared = dict(epochs=5, batch_size=64, lr=1e-3, seed=0)
    keep_old = distill_update(teacher, tr, up,
                              DistillConfig(alpha=0.0, lambda_=1.0, **shared))
    fit_new = distill_update(teacher, tr, up,
                             DistillConfig(alpha=1.0, lambda_=1.0, **shared))
    loss_keep = keep_old.new_model.batch_loss(tr.data).mean_loss
    loss_new = fit_new.new_model.batch_loss(tr.data).mean_loss
    assert loss_keep <= loss_new + 1e-6


def test_sequential_distillation_no_compounding_forgetting(mog_teacher):
    teacher, table = mog_teacher
    held_out = table.sample(300, seed=8)
    base_loss = teacher.batch_loss(held_out).mean_loss
    model = teacher
    cfg = DistillConfig(lambda_=0.8, epochs=3, batch_size=64, lr=2e-4, seed=0)
    losses = [base_loss]
    for step in range(3):
        tr = TransferSet(table.sample(100, seed=20 + step))
        up = InsertionBatch(t=step + 1, data=table.sample(100, seed=40 + step))
        model = distill_update(model, tr, up, cfg).new_model
        model.register_insert(100)
        losses.append(model.batch_loss(held_out).mean_loss)
    steps = np.abs(np.diff(losses))
    assert steps.max() < 0.08  # per-step drift stays small
    assert abs(losses[-1] - base_loss) < 0.15


# ---------------------------------------------------------------------
# the pipeline driver
# ---------------------------------------------------------------------

def _forced_state(decide_ood: bool) -> DetectorState:
    # boot_mean far below (or above) any achievable mean loss forces the branch
    return DetectorState(boot_mean=-1e9 if decide_ood else 1e9, boot_std=1.0,
                         n_resamples=100, resample_size=32)


def test_pipeline_ind_branch_fine_tunes(mog_teacher):
    teacher, table = mog_teacher
    model = teacher.clone()
    model.meta["row_count"] = table.row_count
    tr = TransferSet(table.sample(80, seed=1))
    history = table.sample(200, seed=2)
    batch = InsertionBatch(t=1, data=table.sample(60, seed=3))
    out = pipeline_step(model, _forced_state(False), history, tr, batch,
                        DistillConfig(epochs=2, batch_size=64, lr=1e-4, seed=0))
    assert out.branch == "fine_tune"
    assert out.test.decision == "IND"
    assert out.new_model.meta["row_count"] == table.row_count + 60
    assert out.detector.calibrated_at == 1
    assert out.transfer.created_at == 1
    # recalibration happened against the new generation
    assert out.detector.boot_mean != -1e9


def test_pipeline_ind_branch_none_when_fine_tune_disabled(mog_teacher):
    teacher, table = mog_teacher
    model = teacher.clone()
    model.meta["row_count"] = table.row_count
    params_before = [p.detach().clone() for p in model.net.parameters()]
    tr = TransferSet(table.sample(80, seed=1))
    batch = InsertionBatch(t=1, data=table.sample(60, seed=3))
    out = pipeline_step(model, _forced_state(False), table.sample(200, seed=2),
                        tr, batch, DistillConfig(epochs=2, seed=0),
                        fine_tune_on_ind=False)
    assert out.branch == "none"
    assert out.new_model is model  # parameters untouched, metadata refreshed
    for p0, p1 in zip(params_before, model.net.parameters()):
        assert torch.equal(p0, p1)
    assert model.meta["row_count"] == table.row_count + 60


def test_pipeline_ood_branch_distills(mog_teacher):
    teacher, table = mog_teacher
    model = teacher.clone()
    model.meta["row_count"] = table.row_count
    tr = TransferSet(table.sample(80, seed=1))
    batch = InsertionBatch(t=2, data=make_mog_update(50, seed=4))
    out = pipeline_step(model, _forced_state(True), table.sample(200, seed=2),
                        tr, batch, DistillConfig(epochs=2, batch_size=64,
                                                 lr=1e-4, seed=0))
    assert out.branch == "distill"
    assert out.test.decision == "OOD"
    assert out.new_model is not model
    assert out.history.row_count == 200  # proportional refresh keeps size


def test_update_outcome_log_record(mog_teacher):
    teacher, table = mog_teacher
    model = teacher.clone()
    model.meta["row_count"] = table.row_count
    tr = TransferSet(table.sample(80, seed=1))
    batch = InsertionBatch(t=1, data=table.sample(60, seed=3))
    out = pipeline_step(model, _forced_state(False), table.sample(200, seed=2),
                        tr, batch, DistillConfig(epochs=1, seed=0))
    rec = out.log_record(t=1)
    assert set(rec) == {"t", "branch", "d", "threshold", "wall_time", "loss_trace"}
    assert rec["t"] == 1 and rec["branch"] == "fine_tune"
