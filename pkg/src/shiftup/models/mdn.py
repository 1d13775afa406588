"""Gaussian mixture density network over (categorical x, numeric y),
plus frequency-table-based COUNT/SUM/AVG estimators.

The dependent value is modeled in an affine [-1, 1] scaling of its
schema range; densities reported in raw units carry the Jacobian
correction.  Mixture weights live on the simplex via a softmax head and
scales stay positive via a floored exponential.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.integrate import simpson

from ..data import Table, Schema
from ..losses import annealed_ce, logit_mse
from .base import LearnedModel, register_family, seeded_init

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2 * math.pi)


class _MDNNet(nn.Module):
    def __init__(self, x_dim, hidden, m):
        super().__init__()
        self.feat = nn.Sequential(nn.Linear(x_dim, hidden), nn.Tanh())
        self.w_head = nn.Linear(hidden, m)
        self.mu_head = nn.Linear(hidden, m)
        self.log_sigma_head = nn.Linear(hidden, m)

    def forward(self, x_onehot):
        h = self.feat(x_onehot)
        return self.w_head(h), self.mu_head(h), self.log_sigma_head(h)


@register_family
class MDNModel(LearnedModel):
    family = "mdn"
    task_tag = "AQP"

    def __init__(self, schema: Schema, x_column: str, y_column: str,
                 n_components: int = 10, hidden: int = 64, seed: int = 0,
                 sigma_floor: float = 1e-3):
        super().__init__()
        self.schema = schema
        self.x_column = x_column
        self.y_column = y_column
        self.m = n_components
        self.hidden = hidden
        self.seed = seed
        self.sigma_floor = sigma_floor
        x_col = schema.column(x_column)
        if not x_col.is_categorical:
            raise ValueError("x_column must be categorical")
        y_col = schema.column(y_column)
        if y_col.is_categorical:
            raise ValueError("y_column must be numeric")
        self.x_dim = x_col.domain_size
        self.y_lo, self.y_hi = y_col.domain
        with seeded_init(seed):
            self.net = _MDNNet(self.x_dim, hidden, self.m)

    def _descriptor(self):
        return {
            "schema": self.schema.to_json(),
            "x_column": self.x_column,
            "y_column": self.y_column,
            "n_components": self.m,
            "hidden": self.hidden,
            "seed": self.seed,
            "sigma_floor": self.sigma_floor,
        }

    @classmethod
    def _from_descriptor(cls, d):
        d = dict(d)
        d["schema"] = Schema.from_json(d["schema"])
        return cls(**d)

    # -- scaling ---------------------------------------------------------

    def scale_y(self, y):
        span = self.y_hi - self.y_lo
        if span == 0:
            return np.zeros_like(np.asarray(y, dtype=np.float64))
        return 2.0 * (np.asarray(y, dtype=np.float64) - self.y_lo) / span - 1.0

    def unscale_y(self, s):
        return (np.asarray(s, dtype=np.float64) + 1.0) * (self.y_hi - self.y_lo) / 2.0 + self.y_lo

    @property
    def _jacobian(self):
        # d(scaled)/d(raw): densities in raw units are this factor smaller
        span = self.y_hi - self.y_lo
        return 2.0 / span if span else 1.0

    # -- model hooks -------------------------------------------------------

    def _encode(self, data: Table):
        x = torch.from_numpy(np.ascontiguousarray(data.codes(self.x_column)))
        y = torch.from_numpy(self.scale_y(data.values(self.y_column))).to(self.dtype)
        return x, y

    def _forward(self, x_codes):
        onehot = F.one_hot(x_codes, self.x_dim).to(self.dtype)
        w_logits, mu, log_sigma = self.net(onehot)
        sigma = torch.exp(log_sigma.clamp(math.log(self.sigma_floor), 8.0))
        return w_logits, mu, sigma

    def _log_pdf(self, x_codes, y_scaled):
        w_logits, mu, sigma = self._forward(x_codes)
        y = y_scaled.unsqueeze(-1)
        log_norm = -0.5 * ((y - mu) / sigma) ** 2 - torch.log(sigma) - 0.5 * _LOG_2PI
        return torch.logsumexp(torch.log_softmax(w_logits, dim=-1) + log_norm, dim=-1)

    def _example_losses(self, encoded):
        x, y = encoded
        return -self._log_pdf(x, y)

    def distill_loss(self, teacher, encoded, temperature):
        x = encoded[0]
        with torch.no_grad():
            w_t, mu_t, sig_t = teacher._forward(x)
        w_s, mu_s, sig_s = self._forward(x)
        return (annealed_ce(w_t, w_s, temperature)
                + logit_mse(mu_t, mu_s) + logit_mse(sig_t, sig_s))

    # -- inference ----------------------------------------------------------

    def mixture_params(self, x_value: str):
        """(weights, means, stds) in scaled y-space for one category."""
        code = self.schema.code(self.x_column, x_value)
        with torch.no_grad():
            w_logits, mu, sigma = self._forward(torch.tensor([code]))
            w = torch.softmax(w_logits, dim=-1)
        return (w[0].double().numpy(), mu[0].double().numpy(), sigma[0].double().numpy())

    def pdf(self, x_value: str, y_value: float, raw_units: bool = True) -> float:
        """Mixture density at (x, y); `raw_units=False` evaluates in the
        scaled space at an already-scaled y."""
        code = self.schema.code(self.x_column, x_value)
        y = float(y_value) if not raw_units else float(self.scale_y(y_value))
        with torch.no_grad():
            lp = self._log_pdf(torch.tensor([code]),
                               torch.tensor([y], dtype=self.dtype))
        density = float(torch.exp(lp)[0])
        return density * self._jacobian if raw_units else density

    def prob_range(self, x_value: str, lb: float, ub: float) -> float:
        """P(lb <= y <= ub | x) from the mixture CDF (raw bounds)."""
        if lb > ub:
            raise ValueError("lb must be <= ub")
        w, mu, sigma = self.mixture_params(x_value)
        s_lb, s_ub = self.scale_y(lb), self.scale_y(ub)
        z_hi = (s_ub - mu) / (sigma * math.sqrt(2))
        z_lo = (s_lb - mu) / (sigma * math.sqrt(2))
        from scipy.special import erf
        prob = float((w * 0.5 * (erf(z_hi) - erf(z_lo))).sum())
        return min(max(prob, 0.0), 1.0)

    def sample_y(self, x_value: str, n: int, seed: int = 0) -> np.ndarray:
        """Draw raw-unit y values for one category."""
        w, mu, sigma = self.mixture_params(x_value)
        rng = np.random.default_rng(seed)
        comp = rng.choice(len(w), size=n, p=w / w.sum())
        return self.unscale_y(mu[comp] + sigma[comp] * rng.standard_normal(n))


# ---------------------------------------------------------------------
# frequency tables and aggregate estimators
# ---------------------------------------------------------------------

@dataclass
class FrequencyTable:
    counts: dict
    total: int = 0

    def __post_init__(self):
        self.total = int(sum(self.counts.values()))

    @classmethod
    def from_table(cls, data: Table, column: str) -> "FrequencyTable":
        col = data.schema.column(column)
        codes = data.codes(column)
        bins = np.bincount(codes, minlength=col.domain_size)
        return cls({col.domain[i]: int(bins[i]) for i in range(col.domain_size)})

    def merged(self, other: "FrequencyTable") -> "FrequencyTable":
        counts = dict(self.counts)
        for k, v in other.counts.items():
            counts[k] = counts.get(k, 0) + v
        return FrequencyTable(counts)

    def get(self, category: str) -> int:
        return int(self.counts.get(category, 0))

    def to_json(self) -> dict:
        return {"counts": self.counts, "total": self.total}

    @classmethod
    def from_json(cls, doc: dict) -> "FrequencyTable":
        return cls(dict(doc["counts"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "FrequencyTable":
        return cls.from_json(json.loads(Path(path).read_text()))


_QUAD_INTERVALS = 256


def aqp_count(model: MDNModel, ft: FrequencyTable, x_eq: str,
              lb: float, ub: float) -> float:
    """COUNT(*) WHERE x = x_eq AND lb <= y <= ub."""
    if lb > ub:
        raise ValueError("lb must be <= ub")
    if x_eq not in ft.counts or x_eq not in model.schema.column(model.x_column).domain:
        log.warning("aqp_count: unknown category %r", x_eq)
        return 0.0
    return ft.get(x_eq) * model.prob_range(x_eq, lb, ub)


def aqp_sum(model: MDNModel, ft: FrequencyTable, x_eq: str,
            lb: float, ub: float) -> float:
    """SUM(y) over the same predicate, by composite Simpson quadrature of
    y * pdf.  Each mixture component is integrated on its own grid over
    [mu - 8 sigma, mu + 8 sigma] clipped to the range, so narrow
    components near the scale floor are still resolved."""
    if lb > ub:
        raise ValueError("lb must be <= ub")
    if x_eq not in ft.counts or x_eq not in model.schema.column(model.x_column).domain:
        log.warning("aqp_sum: unknown category %r", x_eq)
        return 0.0
    w, mu, sigma = model.mixture_params(x_eq)
    s_lb, s_ub = float(model.scale_y(lb)), float(model.scale_y(ub))
    total = 0.0
    for w_i, mu_i, sig_i in zip(w, mu, sigma):
        a = max(s_lb, mu_i - 8 * sig_i)
        b = min(s_ub, mu_i + 8 * sig_i)
        if a >= b:
            continue  # component mass in the range is negligible
        grid = np.linspace(a, b, _QUAD_INTERVALS + 1)
        z = (grid - mu_i) / sig_i
        pdf_scaled = w_i * np.exp(-0.5 * z * z) / (sig_i * math.sqrt(2 * math.pi))
        total += float(simpson(model.unscale_y(grid) * pdf_scaled, x=grid))
    return ft.get(x_eq) * total


def aqp_avg(model: MDNModel, ft: FrequencyTable, x_eq: str,
            lb: float, ub: float) -> float:
    """AVG(y) = SUM / COUNT; undefined when the count estimate vanishes."""
    count = aqp_count(model, ft, x_eq, lb, ub)
    if count <= 1e-9:
        raise ValueError("AVG undefined: COUNT estimate is ~0 for this predicate")
    return aqp_sum(model, ft, x_eq, lb, ub) / count
