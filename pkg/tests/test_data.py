import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from shiftup.data import (
    CATEGORICAL, NUMERIC, Column, InsertionBatch, SamplePair, Schema,
    SchemaError, Table, TableLoadError, concat_tables, load_stream,
    load_table, make_update_stream, materialize_join_delta, save_stream,
    synthesize_drift,
)
from shiftup.datasets import make_census_like


@pytest.fixture
def two_col_schema():
    return Schema([
        Column("age", NUMERIC, (0.0, 120.0)),
        Column("country", CATEGORICAL, ("uk", "de", "fr")),
    ])


# ---------------------------------------------------------------------
# schema and table basics
# ---------------------------------------------------------------------

def test_schema_rejects_duplicates():
    with pytest.raises(SchemaError):
        Schema([Column("a", NUMERIC, (0, 1)), Column("a", NUMERIC, (0, 1))])


def test_schema_rejects_bad_numeric_domain():
    with pytest.raises(SchemaError):
        Column("a", NUMERIC, (2.0, 1.0))


def test_schema_json_roundtrip(two_col_schema, tmp_path):
    two_col_schema.save(tmp_path / "s.json")
    assert Schema.load(tmp_path / "s.json") == two_col_schema


def test_table_validates_domains(two_col_schema):
    with pytest.raises(SchemaError):
        Table(two_col_schema, {"age": [5.0], "country": [7]})
    with pytest.raises(SchemaError):
        Table(two_col_schema, {"age": [500.0], "country": [0]})


def test_table_round_trip_decode(two_col_schema):
    t = Table.from_rows(two_col_schema, [(31, "uk"), (42, "de")])
    assert t.row_count == 2
    assert t.row(0) == (31.0, "uk")
    assert t.decoded("country") == ["uk", "de"]


def test_insertion_batch_invariants(two_col_schema):
    t = Table.from_rows(two_col_schema, [(1, "uk")])
    with pytest.raises(ValueError):
        InsertionBatch(t=0, data=t)
    with pytest.raises(ValueError):
        InsertionBatch(t=1, data=t, provenance="weird")
    with pytest.raises(ValueError):
        SamplePair(s_old=t, s_new=t.take([]))


# ---------------------------------------------------------------------
# load_table
# ---------------------------------------------------------------------

def test_load_two_row_csv(tmp_path, two_col_schema):
    p = tmp_path / "t.csv"
    p.write_text("age,country\n30,uk\n40,de\n")
    t = load_table(p, two_col_schema)
    assert t.row_count == 2
    assert t.rejected_rows == 0


def test_load_census_scale(tmp_path):
    census = make_census_like(48842, seed=0)
    path = tmp_path / "census.csv"
    census.to_csv(path)
    loaded = load_table(path, census.schema)
    assert loaded.row_count == 48842
    assert len(loaded.schema) == 13
    assert loaded == census


def test_load_unparseable_numeric_names_row_and_column(tmp_path, two_col_schema):
    p = tmp_path / "bad.csv"
    p.write_text("age,country\n30,uk\nabc,de\n")
    with pytest.raises(TableLoadError) as err:
        load_table(p, two_col_schema)
    assert "row 2" in str(err.value)
    assert "age" in str(err.value)


def test_load_rejects_domain_violations_with_count(tmp_path, two_col_schema):
    p = tmp_path / "r.csv"
    p.write_text("age,country\n30,uk\n31,mars\n999,de\n32,fr\n")
    t = load_table(p, two_col_schema)
    assert t.row_count == 2
    assert t.rejected_rows == 2


def test_load_missing_file(two_col_schema):
    with pytest.raises(TableLoadError):
        load_table("/nonexistent/file.csv", two_col_schema)


def test_load_unknown_column(tmp_path, two_col_schema):
    p = tmp_path / "u.csv"
    p.write_text("age,country,bogus\n30,uk,1\n")
    with pytest.raises(TableLoadError, match="bogus"):
        load_table(p, two_col_schema)


# ---------------------------------------------------------------------
# drift synthesis
# ---------------------------------------------------------------------

def test_drift_sorts_both_columns(two_col_schema):
    t = Table.from_rows(two_col_schema, [(1, "de"), (2, "uk")])
    # codes: de=1, uk=0 -> sorted value column (1, 2), sorted codes (0, 1)
    drifted = synthesize_drift(t, seed=5)
    rows = set(drifted.iter_rows())
    assert rows == {(1.0, "uk"), (2.0, "de")}


def test_drift_single_column_is_permutation(two_col_schema):
    t = Table.from_rows(two_col_schema, [(5, "uk"), (1, "de"), (3, "fr")])
    drifted = synthesize_drift(t, columns=["age"], seed=1)
    assert sorted(drifted.values("age")) == [1.0, 3.0, 5.0]


def test_drift_decorrelates_but_preserves_marginals():
    rng = np.random.default_rng(0)
    schema = Schema([Column("x", NUMERIC, (-10, 10)), Column("y", NUMERIC, (-40, 40))])
    x = rng.normal(0, 1, 1000).clip(-10, 10)
    y = (0.9 * x + np.sqrt(1 - 0.9 ** 2) * rng.normal(0, 1, 1000)).clip(-40, 40)
    t = Table(schema, {"x": x, "y": y})
    rho_orig = np.corrcoef(x, y)[0, 1]
    assert rho_orig > 0.85

    # oracle for the pre-shuffle state: sorting both columns aligns ranks
    rho_sorted = np.corrcoef(np.sort(x), np.sort(y))[0, 1]
    assert rho_sorted > 0.99

    drifted = synthesize_drift(t, seed=3)
    # marginals preserved exactly (direct multiset comparison)
    assert np.array_equal(np.sort(drifted.values("x")), np.sort(x))
    assert np.array_equal(np.sort(drifted.values("y")), np.sort(y))
    # shuffle does not change the joint relation created by sorting
    order = np.argsort(drifted.values("x"))
    rho_drift = np.corrcoef(drifted.values("x")[order], drifted.values("y")[order])[0, 1]
    assert rho_drift == pytest.approx(rho_sorted, abs=1e-12)


def test_drift_unknown_column(two_col_schema):
    t = Table.from_rows(two_col_schema, [(1, "uk")])
    with pytest.raises(SchemaError):
        synthesize_drift(t, columns=["nope"], seed=0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=60),
       st.integers(0, 2 ** 31))
def test_drift_marginal_invariance_property(codes, seed):
    schema = Schema([Column("c", CATEGORICAL, ("0", "1", "2", "3", "4")),
                     Column("n", NUMERIC, (0, 100))])
    t = Table(schema, {"c": codes, "n": np.arange(len(codes), dtype=float)})
    drifted = synthesize_drift(t, seed=seed)
    assert sorted(drifted.codes("c")) == sorted(codes)
    assert sorted(drifted.values("n")) == sorted(t.values("n"))


# ---------------------------------------------------------------------
# update streams
# ---------------------------------------------------------------------

def test_stream_single_batch_size():
    base = make_census_like(10000, seed=1)
    stream = make_update_stream(base, fraction=0.2, n_batches=1, drift=False, seed=0)
    assert len(stream) == 1
    assert stream[0].data.row_count == 2000


def test_stream_five_batches_partition():
    base = make_census_like(5000, seed=2)
    stream = make_update_stream(base, fraction=0.2, n_batches=5, drift=False, seed=0)
    sizes = [b.data.row_count for b in stream]
    assert sum(sizes) == 1000
    assert max(sizes) - min(sizes) <= 1
    assert [b.t for b in stream] == [1, 2, 3, 4, 5]


def test_stream_no_duplicate_rows_within_stream():
    schema = Schema([Column("id", NUMERIC, (0, 10 ** 7))])
    base = Table(schema, {"id": np.arange(5000, dtype=float)})
    stream = make_update_stream(base, fraction=0.5, n_batches=5, drift=False, seed=3)
    ids = np.concatenate([b.data.values("id") for b in stream])
    assert len(np.unique(ids)) == len(ids)


def test_stream_ind_batches_pass_univariate_two_sample_check():
    base = make_census_like(8000, seed=4)
    stream = make_update_stream(base, fraction=0.2, n_batches=1, drift=False, seed=5)
    batch = stream[0].data
    for col in base.schema.columns:
        if col.is_categorical:
            base_counts = np.bincount(base.codes(col.name), minlength=col.domain_size)
            got = np.bincount(batch.codes(col.name), minlength=col.domain_size)
            keep = base_counts > 0
            expected = base_counts[keep] / base_counts.sum() * got.sum()
            _, p = stats.chisquare(got[keep], expected)
        else:
            _, p = stats.ks_2samp(base.values(col.name), batch.values(col.name))
        assert p > 0.01, f"column {col.name} failed the two-sample check"


def test_stream_reproducible():
    base = make_census_like(2000, seed=6)
    a = make_update_stream(base, 0.2, 2, drift=True, seed=42)
    b = make_update_stream(base, 0.2, 2, drift=True, seed=42)
    assert all(x.data == y.data for x, y in zip(a, b))


def test_stream_errors():
    schema = Schema([Column("id", NUMERIC, (0, 10))])
    empty = Table(schema, {"id": np.array([])})
    with pytest.raises(ValueError):
        make_update_stream(empty, 0.2, 1, drift=False, seed=0)
    small = Table(schema, {"id": np.arange(5, dtype=float)})
    with pytest.raises(ValueError):
        make_update_stream(small, 0.2, 3, drift=False, seed=0)


# ---------------------------------------------------------------------
# join deltas
# ---------------------------------------------------------------------

def _join_fixture():
    fact_schema = Schema([Column("k", NUMERIC, (0, 100)),
                          Column("f", NUMERIC, (0, 1000))])
    dim_schema = Schema([Column("k", NUMERIC, (0, 100)),
                         Column("v", CATEGORICAL, ("x", "y", "z"))])
    joined_schema = Schema([Column("k", NUMERIC, (0, 100)),
                            Column("f", NUMERIC, (0, 1000)),
                            Column("v", CATEGORICAL, ("x", "y", "z"))])
    return fact_schema, dim_schema, joined_schema


def test_join_delta_empty():
    fact_schema, dim_schema, joined_schema = _join_fixture()
    dim = Table.from_rows(dim_schema, [(1, "x"), (2, "y")])
    empty_delta = Table(fact_schema, {"k": np.array([]), "f": np.array([])})
    joined_old = Table(joined_schema, {"k": [], "f": [], "v": []})
    out = materialize_join_delta(joined_old, [dim], empty_delta, [("k", "k")])
    assert out.row_count == 0


def test_join_delta_enumerable():
    fact_schema, dim_schema, joined_schema = _join_fixture()
    dim = Table.from_rows(dim_schema, [(1, "x"), (2, "y"), (3, "z")])
    joined_old = Table.from_rows(joined_schema, [(1, 10, "x"), (2, 20, "y")])
    delta = Table.from_rows(fact_schema, [(3, 30)])
    out = materialize_join_delta(joined_old, [dim], delta, [("k", "k")])
    assert list(out.iter_rows()) == [(3.0, 30.0, "z")]


def test_join_delta_matches_full_join_recompute():
    # 3-table toy: fact(100) joins dim1(10) and dim2(10)
    rng = np.random.default_rng(9)
    fact_schema = Schema([Column("k1", NUMERIC, (0, 9)), Column("k2", NUMERIC, (0, 9)),
                          Column("m", NUMERIC, (0, 10 ** 6))])
    dim1_schema = Schema([Column("k1", NUMERIC, (0, 9)), Column("a", NUMERIC, (0, 100))])
    dim2_schema = Schema([Column("k2", NUMERIC, (0, 9)), Column("b", NUMERIC, (0, 100))])
    joined_schema = Schema([
        Column("k1", NUMERIC, (0, 9)), Column("k2", NUMERIC, (0, 9)),
        Column("m", NUMERIC, (0, 10 ** 6)),
        Column("a", NUMERIC, (0, 100)), Column("b", NUMERIC, (0, 100)),
    ])
    dim1 = Table(dim1_schema, {"k1": np.arange(10, dtype=float),
                               "a": rng.integers(0, 100, 10).astype(float)})
    dim2 = Table(dim2_schema, {"k2": np.arange(10, dtype=float),
                               "b": rng.integers(0, 100, 10).astype(float)})
    fact_old = Table(fact_schema, {
        "k1": rng.integers(0, 10, 100).astype(float),
        "k2": rng.integers(0, 10, 100).astype(float),
        "m": np.arange(100, dtype=float)})
    fact_delta = Table(fact_schema, {
        "k1": rng.integers(0, 10, 20).astype(float),
        "k2": rng.integers(0, 10, 20).astype(float),
        "m": np.arange(100, 120, dtype=float)})

    def full_join(fact):
        rows = []
        d1 = {dim1.values("k1")[i]: dim1.values("a")[i] for i in range(10)}
        d2 = {dim2.values("k2")[i]: dim2.values("b")[i] for i in range(10)}
        for i in range(fact.row_count):
            k1, k2 = fact.values("k1")[i], fact.values("k2")[i]
            rows.append((k1, k2, fact.values("m")[i], d1[k1], d2[k2]))
        return rows

    joined_old = Table.from_rows(joined_schema, full_join(fact_old))
    out = materialize_join_delta(joined_old, [dim1, dim2], fact_delta,
                                 [("k1", "k1"), ("k2", "k2")])

    full_new = full_join(concat_tables([fact_old, fact_delta]))
    full_old = full_join(fact_old)
    # multiset difference
    from collections import Counter
    expected = Counter(full_new) - Counter(full_old)
    assert Counter(out.iter_rows()) == expected


def test_join_delta_key_errors():
    fact_schema, dim_schema, joined_schema = _join_fixture()
    dim = Table.from_rows(dim_schema, [(1, "x")])
    delta = Table.from_rows(fact_schema, [(1, 10)])
    joined_old = Table(joined_schema, {"k": [], "f": [], "v": []})
    with pytest.raises(SchemaError):
        materialize_join_delta(joined_old, [dim], delta, [("missing", "k")])


# ---------------------------------------------------------------------
# stream manifests
# ---------------------------------------------------------------------

def test_stream_manifest_roundtrip(tmp_path):
    base = make_census_like(1000, seed=7)
    stream = make_update_stream(base, 0.2, 2, drift=True, seed=8)
    manifest = save_stream(stream, tmp_path / "stream", base.schema)
    loaded = load_stream(manifest)
    assert len(loaded) == 2
    for orig, back in zip(stream, loaded):
        assert back.t == orig.t
        assert back.provenance == orig.provenance
        assert back.data.row_count == orig.data.row_count
        assert np.array_equal(back.data.codes("education"), orig.data.codes("education"))
