"""Query workloads, exact ground truth, and error metrics.

Queries are structured records (no SQL): conjunctive filters from
{=, >=, <=} plus a COUNT/SUM/AVG aggregate.  Workloads are generated once
against the base table and reused across updates; only the truths are
recomputed after each insert, which is what splits queries into the
changed/unchanged groups behind the FWT/BWT summaries.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Table

log = logging.getLogger(__name__)

OPS = ("=", ">=", "<=")
AGGS = ("COUNT", "SUM", "AVG")

#: columns with fewer distinct values than this get equality filters only
EQUALITY_ONLY_BELOW = 10


@dataclass(frozen=True)
class Query:
    filters: tuple  # ((column, op, value), ...)
    agg: str = "COUNT"
    agg_column: str | None = None

    def __post_init__(self):
        if self.agg not in AGGS:
            raise ValueError(f"unknown aggregate {self.agg!r}")
        if self.agg in ("SUM", "AVG") and self.agg_column is None:
            raise ValueError(f"{self.agg} requires agg_column")
        seen = set()
        for col, op, _ in self.filters:
            if op not in OPS:
                raise ValueError(f"unknown operator {op!r}")
            if (col, op) in seen:
                raise ValueError(f"column {col!r} filtered twice with {op!r}")
            seen.add((col, op))
        object.__setattr__(self, "filters", tuple(tuple(f) for f in self.filters))

    def to_json(self) -> dict:
        return {"filters": [list(f) for f in self.filters],
                "agg": self.agg, "agg_column": self.agg_column}

    @classmethod
    def from_json(cls, doc: dict) -> "Query":
        return cls(tuple(tuple(f) for f in doc["filters"]),
                   agg=doc.get("agg", "COUNT"), agg_column=doc.get("agg_column"))


def save_workload(queries, path):
    with open(path, "w") as fh:
        for q in queries:
            fh.write(json.dumps(q.to_json()) + "\n")


def load_workload(path):
    return [Query.from_json(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------

def generate_workload(table: Table, n: int, style: str, seed: int = 0,
                      filter_count_range: tuple | None = None,
                      dbest_columns: tuple | None = None,
                      agg: str = "COUNT", max_attempts_per_query: int = 200):
    """Random queries with nonzero ground truth.

    naru style: pick a filter count, anchor a uniform row, assign random
    operators per filtered column (equality only for small domains).
    dbest style: one categorical equality plus one numeric range.
    Zero-answer queries are discarded and regenerated.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if style not in ("naru", "dbest"):
        raise ValueError(f"unknown style {style!r}")
    rng = np.random.default_rng(seed)
    queries, attempts = [], 0
    budget = max_attempts_per_query * n
    while len(queries) < n:
        if attempts >= budget:
            raise RuntimeError(
                f"could not generate {n} nonzero-answer queries in {budget} attempts")
        attempts += 1
        q = (_naru_query(table, rng, filter_count_range, agg) if style == "naru"
             else _dbest_query(table, rng, dbest_columns, agg))
        if ground_truth(table, q) > 0:
            queries.append(q)
    return queries


def _distinct_counts(table: Table):
    return {
        c.name: (c.domain_size if c.is_categorical
                 else len(np.unique(table.values(c.name))))
        for c in table.schema.columns
    }


def _naru_query(table, rng, filter_count_range, agg):
    names = table.schema.names
    lo, hi = filter_count_range or (min(3, len(names)), len(names))
    lo, hi = max(1, lo), min(hi, len(names))
    k = int(rng.integers(lo, hi + 1))
    cols = rng.choice(len(names), size=k, replace=False)
    anchor = int(rng.integers(0, table.row_count))
    distinct = _distinct_counts(table)
    filters = []
    agg_column = None
    for ci in cols:
        col = table.schema.columns[ci]
        value = table.columns[col.name][anchor]
        if col.is_categorical:
            filters.append((col.name, "=", col.domain[int(value)]))
        elif distinct[col.name] < EQUALITY_ONLY_BELOW:
            filters.append((col.name, "=", float(value)))
        else:
            op = OPS[int(rng.integers(0, 3))]
            filters.append((col.name, op, float(value)))
    if agg in ("SUM", "AVG"):
        numeric = [c.name for c in table.schema.columns if not c.is_categorical]
        agg_column = numeric[int(rng.integers(0, len(numeric)))]
    return Query(tuple(filters), agg=agg, agg_column=agg_column)


def _dbest_query(table, rng, dbest_columns, agg):
    if dbest_columns is None:
        cat = next(c.name for c in table.schema.columns if c.is_categorical)
        num = next(c.name for c in table.schema.columns if not c.is_categorical)
    else:
        cat, num = dbest_columns
    cat_col = table.schema.column(cat)
    code = int(table.codes(cat)[int(rng.integers(0, table.row_count))])
    v1, v2 = table.values(num)[rng.integers(0, table.row_count, size=2)]
    lb, ub = (float(min(v1, v2)), float(max(v1, v2)))
    return Query(
        ((cat, "=", cat_col.domain[code]), (num, ">=", lb), (num, "<=", ub)),
        agg=agg, agg_column=num if agg in ("SUM", "AVG") else None,
    )


# ---------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------

def query_mask(table: Table, query: Query) -> np.ndarray:
    mask = np.ones(table.row_count, dtype=bool)
    for name, op, value in query.filters:
        col = table.schema.column(name)
        arr = table.columns[name]
        if col.is_categorical:
            if op != "=":
                raise ValueError(f"categorical column {name!r} supports '=' only")
            mask &= arr == table.schema.code(name, value)
        else:
            value = float(value)
            mask &= arr == value if op == "=" else \
                (arr >= value if op == ">=" else arr <= value)
    return mask


def ground_truth(table: Table, query: Query) -> float:
    """Exact scan result."""
    mask = query_mask(table, query)
    if query.agg == "COUNT":
        return float(mask.sum())
    values = table.values(query.agg_column)[mask]
    if query.agg == "SUM":
        return float(values.sum())
    return float(values.mean()) if len(values) else 0.0


def q_error(pred: float, truth: float) -> float:
    """max/min ratio; nonpositive predictions are clamped to one row."""
    if truth <= 0:
        raise ValueError("q_error needs positive truth")
    if pred <= 0:
        log.debug("q_error: clamping nonpositive estimate %r to 1", pred)
        pred = 1.0
    return max(pred, truth) / min(pred, truth)


def relative_error(pred: float, truth: float) -> float:
    """|pred - truth| / truth as a percentage."""
    if truth == 0:
        raise ValueError("relative_error undefined for zero truth")
    return abs(pred - truth) / abs(truth) * 100.0


def error_for(query: Query, pred: float, truth: float) -> float:
    """COUNT queries are scored by q-error, SUM/AVG by relative error."""
    return q_error(pred, truth) if query.agg == "COUNT" else relative_error(pred, truth)


# ---------------------------------------------------------------------
# grouped summaries
# ---------------------------------------------------------------------

def summarize(errors) -> dict:
    errors = np.asarray(list(errors), dtype=np.float64)
    if errors.size == 0:
        return {"count": 0, "median": None, "p95": None, "p99": None, "max": None}
    return {
        "count": int(errors.size),
        "median": float(np.quantile(errors, 0.5)),
        "p95": float(np.quantile(errors, 0.95)),
        "p99": float(np.quantile(errors, 0.99)),
        "max": float(errors.max()),
    }


@dataclass
class MetricsReport:
    per_query: list  # (index, truth, estimate, error)
    summary: dict
    groups: dict  # {"all": .., "fixed": .., "changed": ..}

    def to_json(self) -> dict:
        return {"per_query": self.per_query, "summary": self.summary,
                "groups": self.groups}


def transfer_metrics(workload, truths_now, truths_prev, estimates) -> MetricsReport:
    """Split queries by whether an insert changed their truth, then score
    each group: the overall summary plus forward transfer (changed
    queries) and backward transfer (unchanged queries)."""
    n = len(workload)
    if not (len(truths_now) == len(truths_prev) == len(estimates) == n):
        raise ValueError("length mismatch")
    per_query, all_err, fwt_err, bwt_err = [], [], [], []
    for i, query in enumerate(workload):
        err = error_for(query, estimates[i], truths_now[i])
        changed = truths_now[i] != truths_prev[i]
        per_query.append((i, float(truths_now[i]), float(estimates[i]), float(err)))
        all_err.append(err)
        (fwt_err if changed else bwt_err).append(err)
    return MetricsReport(
        per_query=per_query,
        summary=summarize(all_err),
        groups={
            "all": summarize(all_err),
            "changed": summarize(fwt_err),
            "fixed": summarize(bwt_err),
        },
    )
