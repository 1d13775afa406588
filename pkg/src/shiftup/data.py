"""Columnar tables, insertion streams, drift synthesis, and join deltas.

Tables are immutable after construction and store categoricals as
dictionary-encoded int64 codes (the code book is the schema domain) and
numerics as float64.  All randomized operations take an explicit seed and
are bit-reproducible.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CATEGORICAL = "categorical"
NUMERIC = "numeric"


class SchemaError(ValueError):
    pass


class TableLoadError(ValueError):
    pass


@dataclass(frozen=True)
class Column:
    """One attribute: a finite category set or a bounded numeric range."""

    name: str
    kind: str
    domain: tuple

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, NUMERIC):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            values = tuple(str(v) for v in self.domain)
            if len(values) == 0:
                raise SchemaError(f"column {self.name!r}: empty categorical domain")
            if len(set(values)) != len(values):
                raise SchemaError(f"column {self.name!r}: duplicate categories")
            object.__setattr__(self, "domain", values)
        else:
            lo, hi = (float(self.domain[0]), float(self.domain[1]))
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise SchemaError(
                    f"column {self.name!r}: numeric domain must be finite with min <= max"
                )
            object.__setattr__(self, "domain", (lo, hi))

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def domain_size(self) -> int:
        """Category count; undefined for numeric columns."""
        if not self.is_categorical:
            raise SchemaError(f"column {self.name!r} is numeric, has no category count")
        return len(self.domain)


class Schema:
    """Ordered column list with unique names."""

    def __init__(self, columns):
        columns = [c if isinstance(c, Column) else Column(*c) for c in columns]
        names = [c.name for c in columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names")
        self.columns = columns
        self._index = {c.name: i for i, c in enumerate(columns)}

    @property
    def names(self):
        return [c.name for c in self.columns]

    def __len__(self):
        return len(self.columns)

    def __contains__(self, name):
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, Schema) and self.columns == other.columns

    def column(self, name: str) -> Column:
        try:
            return self.columns[self._index[name]]
        except KeyError:
            raise SchemaError(f"unknown column {name!r}") from None

    def index(self, name: str) -> int:
        if name not in self._index:
            raise SchemaError(f"unknown column {name!r}")
        return self._index[name]

    def code(self, name: str, value) -> int:
        """Dictionary code of a raw categorical value."""
        col = self.column(name)
        try:
            return col.domain.index(str(value))
        except ValueError:
            raise SchemaError(f"column {name!r}: unknown category {value!r}") from None

    def to_json(self) -> dict:
        return {
            "columns": [
                {"name": c.name, "kind": c.kind, "domain": list(c.domain)}
                for c in self.columns
            ]
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Schema":
        return cls([(c["name"], c["kind"], tuple(c["domain"])) for c in doc["columns"]])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "Schema":
        return cls.from_json(json.loads(Path(path).read_text()))


class Table:
    """Columnar store tied to a schema.

    `columns` maps name -> np.ndarray: int64 codes for categoricals,
    float64 for numerics.  Construction validates domains; instances are
    treated as immutable afterwards.
    """

    def __init__(self, schema: Schema, columns: dict, rejected_rows: int = 0, validate=True):
        self.schema = schema
        self.columns = {}
        lengths = set()
        for col in schema.columns:
            if col.name not in columns:
                raise SchemaError(f"missing column {col.name!r}")
            arr = np.asarray(columns[col.name])
            if col.is_categorical:
                arr = arr.astype(np.int64, copy=False)
                if validate and arr.size and (arr.min() < 0 or arr.max() >= col.domain_size):
                    raise SchemaError(f"column {col.name!r}: code outside domain")
            else:
                arr = arr.astype(np.float64, copy=False)
                lo, hi = col.domain
                if validate and arr.size and (arr.min() < lo or arr.max() > hi):
                    raise SchemaError(f"column {col.name!r}: value outside domain [{lo}, {hi}]")
            lengths.add(len(arr))
            self.columns[col.name] = arr
        if len(lengths) > 1:
            raise SchemaError(f"ragged columns: lengths {sorted(lengths)}")
        self.row_count = lengths.pop() if lengths else 0
        self.rejected_rows = rejected_rows

    # -- constructors --------------------------------------------------

    @classmethod
    def from_raw_columns(cls, schema: Schema, raw: dict) -> "Table":
        """Encode raw values (categories as strings) into a Table."""
        cols = {}
        for col in schema.columns:
            values = raw[col.name]
            if col.is_categorical:
                lut = {v: i for i, v in enumerate(col.domain)}
                try:
                    cols[col.name] = np.array([lut[str(v)] for v in values], dtype=np.int64)
                except KeyError as exc:
                    raise SchemaError(
                        f"column {col.name!r}: unknown category {exc.args[0]!r}"
                    ) from None
            else:
                cols[col.name] = np.asarray(values, dtype=np.float64)
        return cls(schema, cols)

    @classmethod
    def from_rows(cls, schema: Schema, rows) -> "Table":
        raw = {c.name: [r[i] for r in rows] for i, c in enumerate(schema.columns)}
        return cls.from_raw_columns(schema, raw)

    # -- access --------------------------------------------------------

    def __len__(self):
        return self.row_count

    def codes(self, name: str) -> np.ndarray:
        if not self.schema.column(name).is_categorical:
            raise SchemaError(f"column {name!r} is numeric")
        return self.columns[name]

    def values(self, name: str) -> np.ndarray:
        return self.columns[name]

    def decoded(self, name: str):
        """Raw values: category strings for categoricals, floats otherwise."""
        col = self.schema.column(name)
        arr = self.columns[name]
        if col.is_categorical:
            return [col.domain[i] for i in arr]
        return list(arr)

    def row(self, i: int) -> tuple:
        return tuple(
            col.domain[self.columns[col.name][i]] if col.is_categorical
            else self.columns[col.name][i]
            for col in self.schema.columns
        )

    def iter_rows(self):
        for i in range(self.row_count):
            yield self.row(i)

    def matrix(self) -> np.ndarray:
        """[n, m] float64 matrix of codes/values in schema order."""
        return np.column_stack([self.columns[n] for n in self.schema.names]) \
            if len(self.schema) else np.empty((self.row_count, 0))

    # -- derivation ----------------------------------------------------

    def take(self, indices) -> "Table":
        idx = np.asarray(indices, dtype=np.int64)
        return Table(self.schema,
                     {n: a[idx] for n, a in self.columns.items()}, validate=False)

    def sample(self, n: int, seed: int, replace: bool = False) -> "Table":
        rng = np.random.default_rng(seed)
        idx = rng.choice(self.row_count, size=n, replace=replace)
        return self.take(idx)

    def drop_column(self, name: str) -> "Table":
        schema = Schema([c for c in self.schema.columns if c.name != name])
        return Table(schema, {n: a for n, a in self.columns.items() if n != name},
                     validate=False)

    def to_csv(self, path, delimiter=","):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter)
            w.writerow(self.schema.names)
            decoded = [self.decoded(n) for n in self.schema.names]
            for i in range(self.row_count):
                w.writerow([d[i] for d in decoded])

    def __eq__(self, other):
        return (
            isinstance(other, Table)
            and self.schema == other.schema
            and all(np.array_equal(self.columns[n], other.columns[n])
                    for n in self.schema.names)
        )


def concat_tables(tables) -> Table:
    tables = list(tables)
    if not tables:
        raise ValueError("nothing to concatenate")
    schema = tables[0].schema
    for t in tables[1:]:
        if t.schema != schema:
            raise SchemaError("schema mismatch in concat")
    cols = {n: np.concatenate([t.columns[n] for t in tables]) for n in schema.names}
    return Table(schema, cols, validate=False)


@dataclass
class InsertionBatch:
    """One append-only insert at timestep t."""

    t: int
    data: Table
    provenance: str = "raw"

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("timestep must be >= 1")
        if self.provenance not in ("raw", "join-delta"):
            raise ValueError(f"bad provenance {self.provenance!r}")


@dataclass
class SamplePair:
    """Samples of historical data and of the newest batch."""

    s_old: Table
    s_new: Table

    def __post_init__(self):
        if len(self.s_old) == 0 or len(self.s_new) == 0:
            raise ValueError("samples must be nonempty")
        if self.s_old.schema != self.s_new.schema:
            raise SchemaError("sample schemas differ")


# ---------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------

def load_table(path, schema: Schema, delimiter: str = ",") -> Table:
    """Parse a delimited file with header row into a Table.

    Values that cannot be parsed for their column kind raise
    TableLoadError naming the row and column.  Rows whose values parse
    but fall outside the schema domain (e.g. an unseen category) are
    rejected; the count is logged and stored on the result as
    `rejected_rows`.
    """
    path = Path(path)
    if not path.exists():
        raise TableLoadError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise TableLoadError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for name in header:
            if name not in schema:
                raise TableLoadError(f"{path}: unknown column {name!r}")
        for name in schema.names:
            if name not in header:
                raise TableLoadError(f"{path}: missing column {name!r}")
        positions = [header.index(n) for n in schema.names]

        luts = {
            c.name: {v: i for i, v in enumerate(c.domain)}
            for c in schema.columns if c.is_categorical
        }
        out = {n: [] for n in schema.names}
        rejected = 0
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            parsed = {}
            ok = True
            for col, pos in zip(schema.columns, positions):
                cell = row[pos].strip()
                if col.is_categorical:
                    code = luts[col.name].get(cell)
                    if code is None:
                        ok = False  # support violation: reject the row
                        break
                    parsed[col.name] = code
                else:
                    try:
                        value = float(cell)
                    except ValueError:
                        raise TableLoadError(
                            f"{path}: row {rownum}, column {col.name!r}: "
                            f"cannot parse {cell!r} as numeric"
                        ) from None
                    lo, hi = col.domain
                    if not (lo <= value <= hi):
                        ok = False
                        break
                    parsed[col.name] = value
            if ok:
                for n, v in parsed.items():
                    out[n].append(v)
            else:
                rejected += 1
    cols = {
        c.name: np.asarray(out[c.name],
                           dtype=np.int64 if c.is_categorical else np.float64)
        for c in schema.columns
    }
    if rejected:
        log.warning("%s: rejected %d rows violating the schema domain", path, rejected)
    return Table(schema, cols, rejected_rows=rejected, validate=False)


# ---------------------------------------------------------------------
# drift synthesis and update streams
# ---------------------------------------------------------------------

def synthesize_drift(table: Table, columns=None, seed: int = 0) -> Table:
    """Permute the joint distribution while preserving every marginal.

    Each selected column is independently sorted in place, then the rows
    of the whole copy are shuffled with the given seed.  Per-column value
    multisets are preserved exactly.
    """
    names = list(table.schema.names) if columns is None else list(columns)
    for n in names:
        table.schema.column(n)  # raises on unknown column
    cols = {n: a.copy() for n, a in table.columns.items()}
    for n in names:
        cols[n].sort()
    perm = np.random.default_rng(seed).permutation(table.row_count)
    cols = {n: a[perm] for n, a in cols.items()}
    return Table(table.schema, cols, validate=False)


def graded_perturbation_pool(table: Table, columns, fraction: float = 0.1,
                             seed: int = 0) -> Table:
    """Shifted pool built from increasingly perturbed copies.

    For k = 1..len(columns), sort the first k columns of a copy and
    append a `fraction` sample of it; the result concatenates all grades,
    so mild and severe shifts are both represented.
    """
    parts = []
    n = max(1, int(round(fraction * table.row_count)))
    for k in range(1, len(columns) + 1):
        drifted = synthesize_drift(table, columns[:k], seed=seed + k)
        parts.append(drifted.sample(n, seed=seed + 1000 + k))
    return concat_tables(parts)


def make_update_stream(base: Table, fraction: float, n_batches: int,
                       drift: bool, seed: int, drift_columns=None):
    """Split a sampled-without-replacement slice of `base` (optionally
    drift-synthesized first) into near-equal insertion batches."""
    if base.row_count == 0:
        raise ValueError("empty base table")
    if not (0 < fraction <= 1):
        raise ValueError("fraction must be in (0, 1]")
    n_total = int(round(fraction * base.row_count))
    if n_total < n_batches:
        raise ValueError(f"need at least {n_batches} rows, got {n_total}")
    source = synthesize_drift(base, drift_columns, seed=seed) if drift else base
    rng = np.random.default_rng(seed + 1)
    picked = rng.choice(source.row_count, size=n_total, replace=False)
    chunks = np.array_split(picked, n_batches)
    return [
        InsertionBatch(t=i + 1, data=source.take(chunk), provenance="raw")
        for i, chunk in enumerate(chunks)
    ]


# ---------------------------------------------------------------------
# join deltas
# ---------------------------------------------------------------------

def materialize_join_delta(joined_old: Table, dim_tables, fact_delta: Table,
                           join_keys) -> Table:
    """New joined rows contributed by a fact-table delta.

    `join_keys` lists one (fact_column, dim_column) pair per dimension
    table.  Assuming the delta is disjoint from prior fact partitions,
    the delta of the join is exactly dim_1 |><| ... |><| dim_k |><| delta,
    computed here with exact hash joins.  Output schema equals
    `joined_old.schema`; every output column must resolve by name to the
    fact delta or to exactly one dimension table.
    """
    join_keys = list(join_keys)
    if len(join_keys) != len(dim_tables):
        raise SchemaError("need one (fact_key, dim_key) pair per dimension table")

    # start from the delta rows; progressively attach matching dim rows
    current = {n: fact_delta.columns[n] for n in fact_delta.schema.names}
    n_rows = fact_delta.row_count
    for dim, (fact_key, dim_key) in zip(dim_tables, join_keys):
        if fact_key not in fact_delta.schema:
            raise SchemaError(f"join key {fact_key!r} missing from fact delta")
        if dim_key not in dim.schema:
            raise SchemaError(f"join key {dim_key!r} missing from dimension table")
        index = {}
        dim_keys = dim.columns[dim_key]
        for i in range(dim.row_count):
            index.setdefault(_key_of(dim.schema.column(dim_key), dim_keys[i]), []).append(i)
        fact_col = current[fact_key]
        fact_kind = fact_delta.schema.column(fact_key)
        left_idx, right_idx = [], []
        for i in range(n_rows):
            for j in index.get(_key_of(fact_kind, fact_col[i]), ()):
                left_idx.append(i)
                right_idx.append(j)
        left_idx = np.asarray(left_idx, dtype=np.int64)
        right_idx = np.asarray(right_idx, dtype=np.int64)
        current = {n: a[left_idx] for n, a in current.items()}
        for n in dim.schema.names:
            if n == dim_key and n in current:
                continue
            if n in current:
                raise SchemaError(f"ambiguous column {n!r} appears in two inputs")
            current[n] = dim.columns[n][right_idx]
        n_rows = len(left_idx)

    out = {}
    for col in joined_old.schema.columns:
        if col.name not in current:
            raise SchemaError(f"output column {col.name!r} not found in join inputs")
        out[col.name] = current[col.name]
    return Table(joined_old.schema, out, validate=False)


def _key_of(column: Column, stored_value):
    # categorical codes are only comparable within one code book, so join
    # on the raw category string; numerics join on the float value
    return column.domain[int(stored_value)] if column.is_categorical else float(stored_value)


# ---------------------------------------------------------------------
# stream manifests
# ---------------------------------------------------------------------

def save_stream(stream, out_dir, schema: Schema) -> Path:
    """Write batches as CSV plus a manifest JSON; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schema.save(out_dir / "schema.json")
    entries = []
    for batch in stream:
        name = f"batch_{batch.t:04d}.csv"
        batch.data.to_csv(out_dir / name)
        entries.append({
            "t": batch.t,
            "path": name,
            "provenance": batch.provenance,
            "rows": batch.data.row_count,
        })
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"schema": "schema.json", "batches": entries}, indent=2))
    return manifest


def load_stream(manifest_path):
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    schema = Schema.load(manifest_path.parent / doc["schema"])
    return [
        InsertionBatch(
            t=e["t"],
            data=load_table(manifest_path.parent / e["path"], schema),
            provenance=e["provenance"],
        )
        for e in doc["batches"]
    ]
