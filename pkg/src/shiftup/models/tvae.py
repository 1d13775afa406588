"""Tabular variational autoencoder: ELBO training, shared-noise
distillation, decoder-side sampling, and classifier-based fidelity
scoring.

Numerics are min-max scaled to [0, 1] with a learnable per-column
reconstruction scale; categoricals are one-hot in and softmax out.  By
default only the decoder receives gradients during distillation updates;
set `update_encoder=True` to route the encoder MSE term's gradient too.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.ensemble import HistGradientBoostingClassifier
from sklearn.metrics import f1_score

from ..data import Schema, Table
from ..losses import logit_mse
from .base import LearnedModel, register_family, seeded_init

_LOG_2PI = math.log(2 * math.pi)


def gaussian_kl_standard(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) per row, summed over latent dims."""
    return 0.5 * (mu ** 2 + torch.exp(2 * log_sigma) - 1 - 2 * log_sigma).sum(dim=-1)


class _TVAENet(nn.Module):
    def __init__(self, in_dim, hidden, latent_dim, n_numeric):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 2 * latent_dim))
        self.decoder = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.ReLU(), nn.Linear(hidden, in_dim))
        self.num_log_sigma = nn.Parameter(torch.full((max(n_numeric, 1),), -2.0))


@register_family
class TVAEModel(LearnedModel):
    family = "tvae"
    task_tag = "DG"

    def __init__(self, schema: Schema, latent_dim: int = 16, hidden: int = 128,
                 seed: int = 0, update_encoder: bool = False,
                 sigma_floor: float = 1e-3):
        super().__init__()
        self.schema = schema
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.seed = seed
        self.update_encoder = update_encoder
        self.sigma_floor = sigma_floor

        self.numeric_cols = [c.name for c in schema.columns if not c.is_categorical]
        self.cat_cols = [c.name for c in schema.columns if c.is_categorical]
        self.cat_sizes = [schema.column(n).domain_size for n in self.cat_cols]
        self.in_dim = len(self.numeric_cols) + int(sum(self.cat_sizes))
        self._cat_offsets = len(self.numeric_cols) + np.concatenate(
            [[0], np.cumsum(self.cat_sizes)])
        with seeded_init(seed):
            self.net = _TVAENet(self.in_dim, hidden, latent_dim, len(self.numeric_cols))
        self._noise_counter = seed * 100003 + 1

    def _descriptor(self):
        return {
            "schema": self.schema.to_json(),
            "latent_dim": self.latent_dim,
            "hidden": self.hidden,
            "seed": self.seed,
            "update_encoder": self.update_encoder,
            "sigma_floor": self.sigma_floor,
        }

    @classmethod
    def _from_descriptor(cls, d):
        d = dict(d)
        d["schema"] = Schema.from_json(d["schema"])
        return cls(**d)

    def update_parameters(self):
        params = list(self.net.decoder.parameters()) + [self.net.num_log_sigma]
        if self.update_encoder:
            params += list(self.net.encoder.parameters())
        return params

    # -- encoding ----------------------------------------------------------

    def _scale_numeric(self, name, values):
        lo, hi = self.schema.column(name).domain
        span = hi - lo
        return (np.asarray(values, dtype=np.float64) - lo) / span if span else \
            np.zeros_like(np.asarray(values, dtype=np.float64))

    def _unscale_numeric(self, name, scaled):
        lo, hi = self.schema.column(name).domain
        return np.asarray(scaled, dtype=np.float64) * (hi - lo) + lo

    def _encode(self, data: Table):
        num = (np.column_stack([self._scale_numeric(n, data.values(n))
                                for n in self.numeric_cols])
               if self.numeric_cols else np.zeros((data.row_count, 0)))
        cat = (np.column_stack([data.codes(n) for n in self.cat_cols])
               if self.cat_cols else np.zeros((data.row_count, 0), dtype=np.int64))
        return (torch.from_numpy(num).to(self.dtype), torch.from_numpy(cat))

    def _input_tensor(self, encoded):
        num, cat = encoded
        parts = [num]
        for j, size in enumerate(self.cat_sizes):
            parts.append(F.one_hot(cat[:, j], size).to(self.dtype))
        return torch.cat(parts, dim=1) if parts else num

    def _encoder_params(self, x):
        z_e = self.net.encoder(x)
        mu, log_sigma = z_e.chunk(2, dim=-1)
        return z_e, mu, log_sigma

    # -- losses --------------------------------------------------------------

    def _recon_nll(self, dec_out, encoded):
        num, cat = encoded
        nll = torch.zeros(dec_out.shape[0], dtype=dec_out.dtype)
        if self.numeric_cols:
            means = dec_out[:, :len(self.numeric_cols)]
            sigma = torch.exp(self.net.num_log_sigma).clamp(min=self.sigma_floor)
            nll = nll + (0.5 * ((num - means) / sigma) ** 2
                         + torch.log(sigma) + 0.5 * _LOG_2PI).sum(dim=-1)
        for j in range(len(self.cat_cols)):
            logits = dec_out[:, self._cat_offsets[j]:self._cat_offsets[j + 1]]
            nll = nll + F.cross_entropy(logits, cat[:, j], reduction="none")
        return nll

    def _elbo_losses(self, encoded, generator) -> torch.Tensor:
        x = self._input_tensor(encoded)
        _, mu, log_sigma = self._encoder_params(x)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + torch.exp(log_sigma) * eps
        dec_out = self.net.decoder(z)
        return self._recon_nll(dec_out, encoded) + gaussian_kl_standard(mu, log_sigma)

    def _example_losses(self, encoded) -> torch.Tensor:
        if self.net.training:
            gen = torch.Generator().manual_seed(self._noise_counter)
            self._noise_counter += 1
        else:
            # evaluation noise is pinned so batch_loss is a pure function
            gen = torch.Generator().manual_seed(0)
        return self._elbo_losses(encoded, gen)

    def elbo_loss(self, data: Table, seed: int = 0) -> float:
        """Mean ELBO loss (reconstruction NLL + KL) with seeded noise."""
        with torch.no_grad():
            gen = torch.Generator().manual_seed(seed)
            return float(self._elbo_losses(self._encode(data), gen).mean())

    def distill_loss(self, teacher, encoded, temperature, generator=None):
        """Shared-noise logit matching; `temperature` is unused (MSE form)."""
        if generator is None:
            generator = torch.Generator().manual_seed(self._noise_counter)
            self._noise_counter += 1
        x = self._input_tensor(encoded)
        z_e_s, mu_s, log_sig_s = self._encoder_params(x)
        if not self.update_encoder:
            z_e_s, mu_s, log_sig_s = z_e_s.detach(), mu_s.detach(), log_sig_s.detach()
        eps = torch.randn(mu_s.shape, generator=generator, dtype=mu_s.dtype)
        z_d_s = self.net.decoder(mu_s + torch.exp(log_sig_s) * eps)
        with torch.no_grad():
            z_e_t, mu_t, log_sig_t = teacher._encoder_params(x)
            z_d_t = teacher.net.decoder(mu_t + torch.exp(log_sig_t) * eps)
        return 0.5 * (logit_mse(z_e_t, z_e_s) + logit_mse(z_d_t, z_d_s))

    # -- generation -----------------------------------------------------------

    def sample_rows(self, n: int, seed: int = 0) -> Table:
        """Decode n standard-normal latent draws into schema-valid rows."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            z = torch.randn(n, self.latent_dim, generator=gen, dtype=self.dtype)
            dec = self.net.decoder(z)
            cols = {}
            if self.numeric_cols:
                sigma = torch.exp(self.net.num_log_sigma).clamp(min=self.sigma_floor)
                noise = torch.randn(n, len(self.numeric_cols), generator=gen,
                                    dtype=self.dtype)
                scaled = dec[:, :len(self.numeric_cols)] + sigma * noise
                scaled = scaled.clamp(0.0, 1.0).double().numpy()
                for j, name in enumerate(self.numeric_cols):
                    cols[name] = self._unscale_numeric(name, scaled[:, j])
            for j, name in enumerate(self.cat_cols):
                logits = dec[:, self._cat_offsets[j]:self._cat_offsets[j + 1]]
                if n == 0:
                    cols[name] = np.zeros(0, dtype=np.int64)
                else:
                    probs = torch.softmax(logits, dim=-1)
                    cols[name] = torch.multinomial(
                        probs, 1, generator=gen).squeeze(-1).numpy().astype(np.int64)
        return Table(self.schema, cols)


def tvae_distill_loss(teacher: TVAEModel, student: TVAEModel, tr: Table,
                      seed: int = 0) -> float:
    """Shared-noise distillation loss over a transfer sample; deterministic
    for a given seed."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        return float(student.distill_loss(teacher, student._encode(tr),
                                          temperature=1.0, generator=gen))


def fidelity_eval(real_train: Table, synth_train: Table, holdout: Table,
                  target_column: str) -> tuple[float, float]:
    """Train one tree-ensemble classifier on real rows and one on
    synthetic rows; report micro-f1 of each on the holdout."""
    def split(table):
        target_idx = table.schema.index(target_column)
        m = table.matrix()
        x = np.delete(m, target_idx, axis=1)
        y = m[:, target_idx].astype(np.int64)
        return x, y

    x_hold, y_hold = split(holdout)
    scores = []
    for train in (real_train, synth_train):
        x, y = split(train)
        clf = HistGradientBoostingClassifier(random_state=0)
        clf.fit(x, y)
        scores.append(float(f1_score(y_hold, clf.predict(x_hold), average="micro")))
    return scores[0], scores[1]
