"""Masked deep autoregressive network over all table columns, with
progressive-sampling cardinality estimation.

Each column is treated as discrete: categoricals use their schema code
book, numerics are dictionary-encoded over the distinct values seen at
construction time.  Output logits for column i depend only on columns
before i in schema order (enforced by connectivity masks), so the joint
factorizes exactly into per-column conditionals.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..data import Schema, Table
from ..losses import annealed_ce
from .base import LearnedModel, register_family, seeded_init


class MaskedLinear(nn.Linear):
    def __init__(self, in_features, out_features):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", torch.ones(out_features, in_features))

    def set_mask(self, mask: np.ndarray):
        """mask has shape [out_features, in_features]."""
        self.mask.data.copy_(torch.from_numpy(mask.astype(np.float32)))

    def forward(self, x):
        return F.linear(x, self.mask * self.weight, self.bias)


def _connectivity_degrees(n_cols: int, hidden_sizes) -> list[np.ndarray]:
    """Degree labels per layer; hidden degrees cycle 0..n_cols-2 so every
    conditional keeps full connectivity without any mask randomness."""
    degrees = []
    for h in hidden_sizes:
        if n_cols > 1:
            degrees.append(np.arange(h) % (n_cols - 1))
        else:
            degrees.append(np.full(h, -1))
    return degrees


class _DARNNet(nn.Module):
    def __init__(self, domain_sizes, hidden_sizes):
        super().__init__()
        n_cols = len(domain_sizes)
        in_deg = np.repeat(np.arange(n_cols), domain_sizes)
        out_deg = in_deg
        hidden_deg = _connectivity_degrees(n_cols, hidden_sizes)

        dims = [int(in_deg.size)] + list(hidden_sizes) + [int(out_deg.size)]
        layers = [MaskedLinear(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        degs = [in_deg] + hidden_deg
        for i, layer in enumerate(layers[:-1]):
            layer.set_mask(degs[i][None, :] <= degs[i + 1][:, None])
        layers[-1].set_mask(degs[-1][None, :] < out_deg[:, None])

        self.layers = nn.ModuleList(layers)
        self.act = nn.ReLU()

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)


@register_family
class DARNModel(LearnedModel):
    family = "darn"
    task_tag = "CE"

    def __init__(self, schema: Schema, training_data: Table | None = None,
                 hidden: tuple = (128, 128), seed: int = 0,
                 numeric_values: dict | None = None):
        super().__init__()
        self.schema = schema
        self.hidden = tuple(hidden)
        self.seed = seed
        self.column_order = list(schema.names)

        # per-column code books: schema domain for categoricals, distinct
        # training values for numerics
        self.numeric_values = {}
        for col in schema.columns:
            if col.is_categorical:
                continue
            if numeric_values is not None and col.name in numeric_values:
                vals = np.asarray(numeric_values[col.name], dtype=np.float64)
            elif training_data is not None:
                vals = np.unique(training_data.values(col.name))
            else:
                raise ValueError(
                    f"numeric column {col.name!r} needs training data or an "
                    "explicit value dictionary")
            self.numeric_values[col.name] = np.sort(vals)

        self.domain_sizes = [
            col.domain_size if col.is_categorical else len(self.numeric_values[col.name])
            for col in schema.columns
        ]
        self.offsets = np.concatenate([[0], np.cumsum(self.domain_sizes)])
        self.total_dim = int(self.offsets[-1])
        with seeded_init(seed):
            self.net = _DARNNet(self.domain_sizes, self.hidden)

    def _descriptor(self):
        return {
            "schema": self.schema.to_json(),
            "hidden": list(self.hidden),
            "seed": self.seed,
            "numeric_values": {k: v.tolist() for k, v in self.numeric_values.items()},
        }

    @classmethod
    def _from_descriptor(cls, d):
        return cls(Schema.from_json(d["schema"]), hidden=tuple(d["hidden"]),
                   seed=d["seed"], numeric_values=d["numeric_values"])

    # -- encoding ----------------------------------------------------------

    def _numeric_codes(self, name: str, values: np.ndarray) -> np.ndarray:
        vals = self.numeric_values[name]
        pos = np.searchsorted(vals, values)
        bad = (pos >= len(vals)) | (vals[np.minimum(pos, len(vals) - 1)] != values)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValueError(
                f"column {name!r}: value {values[i]!r} outside encoder domain")
        return pos.astype(np.int64)

    def _encode(self, data: Table) -> torch.Tensor:
        cols = []
        for col in self.schema.columns:
            if col.is_categorical:
                cols.append(data.codes(col.name))
            else:
                cols.append(self._numeric_codes(col.name, data.values(col.name)))
        return torch.from_numpy(np.column_stack(cols))

    def _onehot(self, codes: torch.Tensor) -> torch.Tensor:
        flat = codes + torch.from_numpy(self.offsets[:-1]).to(codes.dtype)
        out = torch.zeros(codes.shape[0], self.total_dim, dtype=self.dtype)
        return out.scatter_(1, flat, 1.0)

    def _forward(self, codes: torch.Tensor) -> torch.Tensor:
        return self.net(self._onehot(codes))

    def logits_for_col(self, i: int, logits: torch.Tensor) -> torch.Tensor:
        return logits[:, self.offsets[i]:self.offsets[i + 1]]

    # -- losses --------------------------------------------------------------

    def _example_losses(self, encoded) -> torch.Tensor:
        logits = self._forward(encoded)
        nll = torch.zeros(encoded.shape[0], dtype=logits.dtype)
        for i in range(len(self.domain_sizes)):
            nll = nll + F.cross_entropy(self.logits_for_col(i, logits),
                                        encoded[:, i], reduction="none")
        return nll

    def joint_logprob(self, data: Table) -> np.ndarray:
        """Sum of per-column conditional log-probabilities per row."""
        with torch.no_grad():
            return -self._example_losses(self._encode(data)).double().numpy()

    def conditional_probs(self, data: Table, i: int) -> np.ndarray:
        """softmax(z_i) per row, for inspection and tests."""
        with torch.no_grad():
            logits = self._forward(self._encode(data))
            return torch.softmax(self.logits_for_col(i, logits), dim=-1).double().numpy()

    def distill_loss(self, teacher, encoded, temperature):
        with torch.no_grad():
            logits_t = teacher._forward(encoded)
        logits_s = self._forward(encoded)
        terms = [
            annealed_ce(teacher.logits_for_col(i, logits_t),
                        self.logits_for_col(i, logits_s), temperature)
            for i in range(len(self.domain_sizes))
        ]
        return torch.stack(terms).mean()

    # -- cardinality estimation ------------------------------------------------

    def _valid_mask(self, col_idx: int, filters) -> np.ndarray:
        col = self.schema.columns[col_idx]
        if col.is_categorical:
            domain_codes = np.arange(col.domain_size)
            mask = np.ones(col.domain_size, dtype=bool)
            for op, value in filters:
                if op != "=":
                    raise ValueError(f"categorical column {col.name!r} supports '=' only")
                mask &= domain_codes == self.schema.code(col.name, value)
        else:
            vals = self.numeric_values[col.name]
            mask = np.ones(len(vals), dtype=bool)
            for op, value in filters:
                value = float(value)
                if op == "=":
                    mask &= vals == value
                elif op == ">=":
                    mask &= vals >= value
                elif op == "<=":
                    mask &= vals <= value
                else:
                    raise ValueError(f"unsupported operator {op!r}")
        return mask

    def ce_estimate(self, query, n_samples: int = 512, seed: int = 0) -> float:
        """Progressive-sampling selectivity times the maintained row count,
        ceiled to whole rows.

        Filtered columns contribute the conditional mass of their valid
        values; unfiltered columns are sampled to condition the rest.
        Deterministic for a given seed.
        """
        by_col: dict[int, list] = {}
        for f in query.filters:
            by_col.setdefault(self.schema.index(f[0]), []).append((f[1], f[2]))
        masks = {i: self._valid_mask(i, fs) for i, fs in by_col.items()}
        if any(not m.any() for m in masks.values()):
            return 0.0
        row_count = self.meta.get("row_count", 0)
        if not masks:
            return float(row_count)
        last = max(masks)

        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            inp = torch.zeros(n_samples, self.total_dim, dtype=self.dtype)
            p_acc = torch.ones(n_samples, dtype=torch.float64)
            for i in range(last + 1):
                logits = self.net(inp)
                probs = torch.softmax(self.logits_for_col(i, logits), dim=-1)
                if i in masks:
                    valid = torch.from_numpy(masks[i]).to(probs.dtype)
                    probs = probs * valid
                    mass = probs.sum(dim=-1)
                    p_acc = p_acc * mass.double()
                    # keep vanished paths sampleable; their weight is ~0 already
                    probs = torch.where(mass.unsqueeze(-1) > 0, probs,
                                        torch.ones_like(probs))
                if i < last:
                    codes = torch.multinomial(probs, 1, generator=gen).squeeze(-1)
                    inp[:, self.offsets[i]:self.offsets[i + 1]] = 0.0
                    inp.scatter_(1, (codes + int(self.offsets[i])).unsqueeze(-1), 1.0)
        return float(np.ceil(float(p_acc.mean()) * row_count))
