"""Distillation loss primitives shared by the update machinery and the
model families.  Teacher-side tensors never receive gradients."""
from __future__ import annotations

import torch


def annealed_ce(teacher_logits, student_logits, temperature: float) -> torch.Tensor:
    """Cross-entropy between temperature-softened softmaxes of teacher and
    student logits.  Accepts [k] vectors or [B, k] batches (averaged over
    the batch)."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z_t = torch.as_tensor(teacher_logits).detach()
    z_s = torch.as_tensor(student_logits)
    if z_t.shape != z_s.shape:
        raise ValueError(f"logit shapes differ: {tuple(z_t.shape)} vs {tuple(z_s.shape)}")
    if z_t.shape[-1] < 2:
        raise ValueError("need at least 2 logits")
    p_t = torch.softmax(z_t / temperature, dim=-1)
    log_p_s = torch.log_softmax(z_s / temperature, dim=-1)
    return -(p_t * log_p_s).sum(dim=-1).mean()


def logit_mse(teacher_logits, student_logits) -> torch.Tensor:
    """Sum of squared logit differences; [B, k] inputs are averaged over
    the batch."""
    z_t = torch.as_tensor(teacher_logits).detach()
    z_s = torch.as_tensor(student_logits)
    if z_t.shape != z_s.shape:
        raise ValueError(f"logit shapes differ: {tuple(z_t.shape)} vs {tuple(z_s.shape)}")
    return ((z_t - z_s) ** 2).sum(dim=-1).mean()
