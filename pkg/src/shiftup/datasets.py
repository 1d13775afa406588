"""Bundled synthetic datasets.

The sandbox has no real-world files, so `make_census_like` synthesizes a
49K-row, 13-column table with the shape and dependence structure of the
usual census benchmark: one latent factor drives age, education, hours,
capital gains and income, so column-wise sorting (drift synthesis)
destroys a lot of joint structure while leaving marginals intact.
"""
from __future__ import annotations

import numpy as np

from .data import CATEGORICAL, NUMERIC, Column, Schema, Table

_EDU_LEVELS = [
    "preschool", "1st-4th", "5th-6th", "7th-8th", "9th", "10th", "11th", "12th",
    "hs-grad", "some-college", "assoc-voc", "assoc-acdm", "bachelors", "masters",
    "prof-school", "doctorate",
]
_WORKCLASS = ["private", "self-emp", "self-emp-inc", "federal-gov", "local-gov",
              "state-gov", "without-pay", "never-worked", "other"]
_MARITAL = ["never-married", "married", "divorced", "separated", "widowed",
            "married-af", "married-absent"]
_OCCUPATION = [f"occ-{i:02d}" for i in range(15)]
_RELATIONSHIP = ["husband", "wife", "own-child", "unmarried", "not-in-family",
                 "other-relative"]
_RACE = ["white", "black", "asian", "amer-indian", "other"]
_SEX = ["male", "female"]
_COUNTRY = [f"country-{i:02d}" for i in range(42)]
_INCOME = ["<=50K", ">50K"]

#: MDN query-template columns for the census-like dataset
CENSUS_X_COLUMN = "education"
CENSUS_Y_COLUMN = "age"
#: classification target for the data-generation task
CENSUS_TARGET_COLUMN = "income"


def census_schema() -> Schema:
    return Schema([
        Column("age", NUMERIC, (17.0, 90.0)),
        Column("workclass", CATEGORICAL, tuple(_WORKCLASS)),
        Column("education", CATEGORICAL, tuple(_EDU_LEVELS)),
        Column("education_num", NUMERIC, (1.0, 16.0)),
        Column("marital_status", CATEGORICAL, tuple(_MARITAL)),
        Column("occupation", CATEGORICAL, tuple(_OCCUPATION)),
        Column("relationship", CATEGORICAL, tuple(_RELATIONSHIP)),
        Column("race", CATEGORICAL, tuple(_RACE)),
        Column("sex", CATEGORICAL, tuple(_SEX)),
        Column("capital_gain", NUMERIC, (0.0, 20000.0)),
        Column("hours_per_week", NUMERIC, (1.0, 99.0)),
        Column("country", CATEGORICAL, tuple(_COUNTRY)),
        Column("income", CATEGORICAL, tuple(_INCOME)),
    ])


# fixed scrambles decoupling dependence structure from code/value order, so
# that per-column sorting (drift synthesis) genuinely permutes the joint
# instead of approximately reconstructing a comonotone coupling
def _scramble(n: int, salt: int) -> np.ndarray:
    return np.random.default_rng(987654321 + salt).permutation(n)


_AGE_BAND_OF_EDU = _scramble(16, 1)
_OCC_OF_EDU = _scramble(15, 2)
_MARITAL_OF_BAND = _scramble(7, 3)
_REL_OF_BAND = _scramble(6, 4)


def make_census_like(n_rows: int = 48842, seed: int = 0) -> Table:
    rng = np.random.default_rng(seed)
    schema = census_schema()
    u = rng.uniform(0.0, 1.0, size=n_rows)  # latent socioeconomic factor

    edu = np.clip(np.rint(u * 15 + rng.normal(0, 1.6, n_rows)), 0, 15).astype(np.int64)
    education_num = edu + 1.0
    # tight age bands per education level, deliberately not ordered by level
    age = np.clip(np.rint(21 + 4.0 * _AGE_BAND_OF_EDU[edu]
                          + rng.normal(0, 2.5, n_rows)), 17, 90)

    occupation = _OCC_OF_EDU[(edu + rng.integers(0, 3, n_rows)) % 15]
    workclass = np.minimum((occupation // 2 + rng.integers(0, 4, n_rows)) % 12, 8)

    age_band = np.digitize(age, [30, 42, 55, 70, 80, 86])  # 0..6
    marital = _MARITAL_OF_BAND[np.clip(age_band + rng.integers(-1, 2, n_rows), 0, 6)]
    relationship = _REL_OF_BAND[np.clip(
        np.minimum(age_band, 5) - rng.integers(0, 3, n_rows), 0, 5)]

    race = rng.choice(5, size=n_rows, p=[0.72, 0.12, 0.08, 0.04, 0.04])
    sex = rng.integers(0, 2, n_rows)

    has_gain = rng.uniform(size=n_rows) < 0.15 + 0.25 * u
    gain_steps = np.clip(np.rint(u * 30 + rng.normal(0, 4, n_rows)), 1, 40)
    capital_gain = np.where(has_gain, gain_steps * 500.0, 0.0)

    # tent shape keeps hours strongly dependent on u but non-monotone
    tent = 1.0 - np.abs(2.0 * u - 1.0)
    hours = np.clip(np.rint(22 + 55 * tent + rng.normal(0, 6, n_rows)), 1, 99)

    country_weights = 0.96 ** np.arange(42)
    country = rng.choice(42, size=n_rows, p=country_weights / country_weights.sum())

    logit = 14.0 * (u - 0.55) + 1.5 * (capital_gain > 0)
    income = (rng.uniform(size=n_rows) < 1 / (1 + np.exp(-logit))).astype(np.int64)

    return Table(schema, {
        "age": age,
        "workclass": workclass,
        "education": edu,
        "education_num": education_num,
        "marital_status": marital,
        "occupation": occupation,
        "relationship": relationship,
        "race": race,
        "sex": sex,
        "capital_gain": capital_gain,
        "hours_per_week": hours,
        "country": country,
        "income": income,
    })


# ---------------------------------------------------------------------
# mixture-of-Gaussians toy: 10 categories, 5-peak values per category
# ---------------------------------------------------------------------

MOG_OLD_MEANS = (-8.0, -4.0, 0.0, 4.0, 8.0)
MOG_NEW_MEANS = (12.0, 16.0)
MOG_STD = 0.5
MOG_N_CATEGORIES = 10


def mog_schema() -> Schema:
    return Schema([
        Column("x", CATEGORICAL, tuple(str(i) for i in range(1, MOG_N_CATEGORIES + 1))),
        Column("y", NUMERIC, (-12.0, 20.0)),
    ])


def _mog_rows(n_per_category: int, means, std: float, rng) -> Table:
    schema = mog_schema()
    lo, hi = schema.column("y").domain
    xs, ys = [], []
    for cat in range(MOG_N_CATEGORIES):
        comp = rng.integers(0, len(means), size=n_per_category)
        y = np.clip(np.asarray(means)[comp] + rng.normal(0, std, n_per_category), lo, hi)
        xs.append(np.full(n_per_category, cat, dtype=np.int64))
        ys.append(y)
    return Table(schema, {"x": np.concatenate(xs), "y": np.concatenate(ys)})


def make_mog_table(n_per_category: int = 1000, seed: int = 0) -> Table:
    """Balanced base table: each category holds a 5-peak value mixture."""
    return _mog_rows(n_per_category, MOG_OLD_MEANS, MOG_STD, np.random.default_rng(seed))


def make_mog_update(n_per_category: int = 100, seed: int = 1) -> Table:
    """Update batch drawn from a 2-peak mixture with shifted means."""
    return _mog_rows(n_per_category, MOG_NEW_MEANS, MOG_STD, np.random.default_rng(seed))


# ---------------------------------------------------------------------
# fully enumerable 3-column toy for exact-oracle comparisons
# ---------------------------------------------------------------------

TOY_C_VALUES = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0)


def toy_schema() -> Schema:
    return Schema([
        Column("a", CATEGORICAL, ("a0", "a1", "a2")),
        Column("b", CATEGORICAL, ("b0", "b1", "b2")),
        Column("c", NUMERIC, (0.0, 90.0)),
    ])


_TOY_CLUSTER_OF = _scramble(8, 5)


def make_enumerable_toy(n_rows: int = 1000, seed: int = 0) -> Table:
    """<=1000 rows over a 3 x 3 x 8 domain with every nonzero joint cell
    well populated (~a dozen cells, none rare), so empirical cell
    frequencies are stable oracles and exact-match tolerances are
    reachable.  The (a, b) -> c-cluster map is scrambled so drift
    synthesis really permutes the joint."""
    rng = np.random.default_rng(seed)
    schema = toy_schema()
    a = rng.choice(3, size=n_rows, p=[0.42, 0.33, 0.25])
    b = (a + rng.choice(2, size=n_rows, p=[0.68, 0.32])) % 3
    base = (2 * a + b) % 8
    c_idx = _TOY_CLUSTER_OF[(base + rng.choice(2, size=n_rows,
                                               p=[0.7, 0.3])) % 8]
    c = np.asarray(TOY_C_VALUES)[c_idx]
    return Table(schema, {"a": a, "b": b, "c": c})
