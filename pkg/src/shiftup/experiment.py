"""End-to-end experiment driver: train a base model, replay an insert
stream under one or more update policies, score workloads after every
step, and write all artifacts into a self-describing run directory.

Policies:
    ddup      detect-then-update (fine-tune on IND, distill on OOD)
    baseline  always fine-tune on the new batch (size-ratio learning rate)
    stale     never touch the model
    retrain   train from scratch on all data seen so far

All policies consume identical streams and workloads (shared seeds), so
comparisons are paired.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (Schema, Table, concat_tables, graded_perturbation_pool,
                   load_table, make_update_stream)
from .datasets import (CENSUS_TARGET_COLUMN, CENSUS_X_COLUMN, CENSUS_Y_COLUMN,
                       make_census_like, make_enumerable_toy, make_mog_table)
from .detector import evaluate_rates, offline_calibrate
from .distill import DistillConfig, TransferSet, pipeline_step
from .models import (DARNModel, FrequencyTable, MDNModel, TVAEModel,
                     TrainConfig, aqp_avg, aqp_count, aqp_sum, fidelity_eval)
from .workload import (Query, generate_workload, ground_truth, save_workload,
                       transfer_metrics)

log = logging.getLogger(__name__)

POLICIES = ("ddup", "baseline", "stale", "retrain")
FAMILIES = ("mdn", "darn", "tvae")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str = "run"
    dataset: dict = field(default_factory=lambda: {"generator": "census"})
    family: str = "darn"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    stream: dict = field(default_factory=lambda: {"fraction": 0.2, "n_batches": 1,
                                                  "drift": True})
    detector: dict = field(default_factory=dict)
    update: dict = field(default_factory=dict)
    workload: dict = field(default_factory=lambda: {"n": 2000, "style": "naru"})
    policies: tuple = POLICIES
    fidelity: dict = field(default_factory=dict)
    detector_sweep: dict | None = None
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if not self.policies:
            raise ConfigError("policies must be nonempty")
        for p in self.policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}")
        self.policies = tuple(self.policies)
        if "generator" not in self.dataset:
            for key in ("table", "schema"):
                if key not in self.dataset:
                    raise ConfigError(f"dataset needs {key!r} (or a generator)")
                if not Path(self.dataset[key]).exists():
                    raise ConfigError(f"dataset {key} file missing: {self.dataset[key]}")

    def to_json(self) -> dict:
        return {
            "name": self.name, "dataset": self.dataset, "family": self.family,
            "model": self.model, "train": self.train, "stream": self.stream,
            "detector": self.detector, "update": self.update,
            "workload": self.workload, "policies": list(self.policies),
            "fidelity": self.fidelity, "detector_sweep": self.detector_sweep,
            "seed": self.seed, "output_dir": self.output_dir,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file missing: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
        return cls.from_json(doc)


# ---------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------

def resolve_dataset(cfg: ExperimentConfig) -> Table:
    ds = cfg.dataset
    if "generator" in ds:
        gen = ds["generator"]
        seed = ds.get("seed", cfg.seed)
        if gen == "census":
            return make_census_like(ds.get("rows", 48842), seed=seed)
        if gen == "mog":
            return make_mog_table(ds.get("rows_per_category", 1000), seed=seed)
        if gen == "toy":
            return make_enumerable_toy(ds.get("rows", 960), seed=seed)
        raise ConfigError(f"unknown dataset generator {gen!r}")
    schema = Schema.load(ds["schema"])
    return load_table(ds["table"], schema)


def build_model(cfg: ExperimentConfig, base: Table):
    m = dict(cfg.model)
    seed = m.pop("seed", cfg.seed)
    if cfg.family == "mdn":
        return MDNModel(
            base.schema,
            x_column=m.pop("x_column", _default_x(base)),
            y_column=m.pop("y_column", _default_y(base)),
            n_components=m.pop("n_components", 10),
            hidden=m.pop("hidden", 64), seed=seed, **m)
    if cfg.family == "darn":
        return DARNModel(base.schema, base,
                         hidden=tuple(m.pop("hidden", (128, 128))), seed=seed, **m)
    return TVAEModel(base.schema, latent_dim=m.pop("latent_dim", 16),
                     hidden=m.pop("hidden", 128), seed=seed, **m)


def _default_x(base: Table) -> str:
    if CENSUS_X_COLUMN in base.schema:
        return CENSUS_X_COLUMN
    return next(c.name for c in base.schema.columns if c.is_categorical)


def _default_y(base: Table) -> str:
    if CENSUS_Y_COLUMN in base.schema:
        return CENSUS_Y_COLUMN
    return next(c.name for c in base.schema.columns if not c.is_categorical)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = dict(cfg.train)
    t.setdefault("seed", cfg.seed)
    return TrainConfig(**t)


def update_config(cfg: ExperimentConfig) -> DistillConfig:
    u = dict(cfg.update)
    u.setdefault("seed", cfg.seed)
    return DistillConfig(**u)


def estimate_query(family: str, model, ft, query: Query, seed: int = 0,
                   n_samples: int = 512) -> float:
    if family == "darn":
        return model.ce_estimate(query, n_samples=n_samples, seed=seed)
    if family == "mdn":
        x_eq = next(v for c, op, v in query.filters if op == "=" and
                    model.schema.column(c).is_categorical)
        bounds = {op: float(v) for c, op, v in query.filters
                  if not model.schema.column(c).is_categorical}
        lb = bounds.get(">=", model.y_lo)
        ub = bounds.get("<=", model.y_hi)
        fn = {"COUNT": aqp_count, "SUM": aqp_sum, "AVG": aqp_avg}[query.agg]
        return fn(model, ft, x_eq, lb, ub)
    raise ValueError(f"no query estimator for family {family!r}")


# ---------------------------------------------------------------------
# the run loop
# ---------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> Path:
    run_dir = Path(cfg.output_dir) / cfg.name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_json(), indent=2))

    base = resolve_dataset(cfg)
    log.info("base table: %d rows x %d columns", base.row_count, len(base.schema))
    base.schema.save(run_dir / "schema.json")

    stream = make_update_stream(base, seed=cfg.stream.get("seed", cfg.seed),
                                fraction=cfg.stream.get("fraction", 0.2),
                                n_batches=cfg.stream.get("n_batches", 1),
                                drift=cfg.stream.get("drift", True),
                                drift_columns=cfg.stream.get("drift_columns"))

    tcfg = train_config(cfg)
    ucfg = update_config(cfg)

    workload = None
    if cfg.family in ("mdn", "darn"):
        w = dict(cfg.workload)
        style = w.get("style", "naru" if cfg.family == "darn" else "dbest")
        workload = generate_workload(
            base, n=w.get("n", 2000), style=style, seed=w.get("seed", cfg.seed),
            filter_count_range=tuple(w["filter_count_range"]) if "filter_count_range" in w else None,
            dbest_columns=tuple(w["dbest_columns"]) if "dbest_columns" in w else
            ((cfg.model.get("x_column", _default_x(base)),
              cfg.model.get("y_column", _default_y(base))) if style == "dbest" else None),
            agg=w.get("agg", "COUNT"))
        save_workload(workload, run_dir / "workload.jsonl")

    log.info("training base model (%s)", cfg.family)
    t0 = time.perf_counter()
    model0 = build_model(cfg, base).fit(base, tcfg)
    base_train_time = time.perf_counter() - t0
    model0.save(run_dir / "model_0.pt")

    old_eval = base.sample(min(2000, base.row_count), seed=cfg.seed + 3)
    steps_dir = run_dir / "steps"
    steps_dir.mkdir(exist_ok=True)

    # the t=0 evaluation and the per-step truths are identical for every
    # policy (shared stream); compute them once
    truths0 = ([ground_truth(base, q) for q in workload]
               if workload is not None else None)
    base_record = _evaluate_step(cfg, "base", model0, base, workload, truths0,
                                 old_eval, new_batch=None, t=0,
                                 branch="train", wall=base_train_time, test=None)
    truths_by_t = {0: truths0}
    if workload is not None:
        cumulative = base
        for b in stream:
            cumulative = concat_tables([cumulative, b.data])
            truths_by_t[b.t] = [ground_truth(cumulative, q) for q in workload]

    for policy in cfg.policies:
        records = _replay_policy(cfg, policy, base, stream, model0, workload,
                                 old_eval, tcfg, ucfg, base_record, truths_by_t)
        with open(steps_dir / f"{policy}.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        log.info("policy %s done (%d steps)", policy, len(records) - 1)

    if cfg.detector_sweep is not None:
        rates = run_detector_sweep(cfg, model0, base)
        (run_dir / "detector_rates.json").write_text(json.dumps(rates, indent=2))

    report(run_dir)
    return run_dir


def _replay_policy(cfg, policy, base, stream, model0, workload, old_eval,
                   tcfg, ucfg, base_record, truths_by_t):
    family = cfg.family
    model = model0.clone()
    cumulative = base

    # detect-and-update state (ddup only)
    detector = history = transfer = None
    if policy == "ddup":
        dcfg = dict(cfg.detector)
        history = base.sample(
            max(2, int(dcfg.get("history_fraction", 0.1) * base.row_count)),
            seed=cfg.seed + 11)
        transfer = TransferSet(base.sample(
            max(2, int(ucfg.transfer_fraction * base.row_count)),
            seed=cfg.seed + 13), created_at=0)
        detector = offline_calibrate(
            model, history,
            n_resamples=dcfg.get("n_resamples", 1000),
            resample_size=dcfg.get("resample_size"),
            seed=dcfg.get("seed", cfg.seed),
            threshold_mult=dcfg.get("threshold_mult", 2.0))

    records = [dict(base_record, policy=policy)]

    for batch in stream:
        if policy == "stale":
            branch, wall, test = "none", 0.0, None
        elif policy == "baseline":
            # the reference update: fine-tune to convergence on the new batch
            # with the size-scaled learning rate
            t0 = time.perf_counter()
            old_rows = model.meta.get("row_count", cumulative.row_count)
            model.fine_tune(batch.data, old_size=old_rows,
                            new_size=batch.data.row_count,
                            cfg=TrainConfig(epochs=tcfg.epochs,
                                            batch_size=ucfg.batch_size,
                                            base_lr=tcfg.base_lr,
                                            seed=cfg.seed + batch.t))
            model.register_insert(batch.data.row_count)
            branch, wall, test = "fine_tune", time.perf_counter() - t0, None
        elif policy == "retrain":
            t0 = time.perf_counter()
            grown = concat_tables([cumulative, batch.data])
            model = build_model(cfg, grown).fit(grown, tcfg)
            branch, wall, test = "retrain", time.perf_counter() - t0, None
        else:  # ddup
            outcome = pipeline_step(
                model, detector, history, transfer, batch, ucfg,
                fine_tune_on_ind=cfg.detector.get("fine_tune_on_ind", True),
                test_fraction=cfg.detector.get("test_fraction", 1.0),
                seed=cfg.seed + 1000 * batch.t)
            model, detector = outcome.new_model, outcome.detector
            history, transfer = outcome.history, outcome.transfer
            branch, wall, test = outcome.branch, outcome.wall_time, outcome.test

        cumulative = concat_tables([cumulative, batch.data])
        records.append(_evaluate_step(cfg, policy, model, cumulative, workload,
                                      truths_by_t.get(batch.t - 1), old_eval,
                                      batch, batch.t, branch, wall, test,
                                      truths_now=truths_by_t.get(batch.t)))
    return records


def _evaluate_step(cfg, policy, model, cumulative, workload, truths_prev,
                   old_eval, new_batch, t, branch, wall, test, truths_now=None):
    family = cfg.family
    rec = {
        "t": t, "policy": policy, "branch": branch,
        "wall_time": round(wall, 4),
        "rows_total": cumulative.row_count,
        "d": None if test is None else test.d,
        "threshold": None if test is None else test.threshold,
        "decision": None if test is None else test.decision,
        "loss_old": model.batch_loss(old_eval).mean_loss,
        "loss_new": (model.batch_loss(new_batch.data).mean_loss
                     if new_batch is not None else None),
    }
    if workload is not None:
        if truths_now is None:
            truths_now = [ground_truth(cumulative, q) for q in workload]
        ft = (FrequencyTable.from_table(cumulative, model.x_column)
              if family == "mdn" else None)
        if family == "mdn" and policy == "stale" and t > 0:
            # an untouched model keeps its stale metadata too
            ft = FrequencyTable.from_table(
                cumulative.take(np.arange(model.meta["row_count"])), model.x_column)
        n_samples = cfg.workload.get("n_samples", 512)
        estimates = [estimate_query(family, model, ft, q, seed=cfg.seed + 7 * i,
                                    n_samples=n_samples)
                     for i, q in enumerate(workload)]
        m = transfer_metrics(workload, truths_now, truths_prev, estimates)
        rec["metrics"] = {"summary": m.summary, "groups": m.groups}
    if family == "tvae" and cfg.fidelity:
        rec["fidelity"] = _fidelity_step(cfg, model, cumulative, t)
    return rec


def _fidelity_step(cfg, model, cumulative, t):
    target = cfg.fidelity.get("target_column", CENSUS_TARGET_COLUMN)
    holdout_fraction = cfg.fidelity.get("holdout_fraction", 0.3)
    rng = np.random.default_rng(cfg.seed + 101)
    n = cumulative.row_count
    idx = rng.permutation(n)
    n_hold = int(round(holdout_fraction * n))
    holdout = cumulative.take(idx[:n_hold])
    real_train = cumulative.take(idx[n_hold:])
    synth = model.sample_rows(real_train.row_count, seed=cfg.seed + 31 + t)
    f1_real, f1_synth = fidelity_eval(real_train, synth, holdout, target)
    return {"f1_real": f1_real, "f1_synth": f1_synth}


# ---------------------------------------------------------------------
# detector rate sweep
# ---------------------------------------------------------------------

def run_detector_sweep(cfg: ExperimentConfig, model, base: Table) -> list:
    sweep = dict(cfg.detector_sweep or {})
    batch_sizes = sweep.get("batch_sizes", [8, 32, 128, 512, 2000])
    n_batches = sweep.get("n_batches", 200)
    resample_size = sweep.get("resample_size", 32)
    n_resamples = sweep.get("n_resamples", 1000)
    columns = sweep.get("perturb_columns") or base.schema.names[:5]
    seed = sweep.get("seed", cfg.seed)

    ind_pool = base.sample(base.row_count // 2, seed=seed + 1)
    ood_pool = graded_perturbation_pool(base, columns, fraction=0.1, seed=seed + 2)
    state = offline_calibrate(model, base, n_resamples=n_resamples,
                              resample_size=resample_size, seed=seed + 3)
    rates = []
    for bs in batch_sizes:
        fpr, fnr = evaluate_rates(state, model, ind_pool, ood_pool,
                                  batch_size=bs, n_batches=n_batches,
                                  seed=seed + 5)
        rates.append({"batch_size": bs, "fpr": fpr, "fnr": fnr})
        log.info("sweep batch_size=%d fpr=%.3f fnr=%.3f", bs, fpr, fnr)
    return rates


# ---------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------

def report(run_dir) -> list:
    """Summaries and plots from a finished run directory; deterministic
    for fixed inputs."""
    run_dir = Path(run_dir)
    steps_dir = run_dir / "steps"
    if not steps_dir.is_dir():
        raise FileNotFoundError(f"no steps/ directory under {run_dir}")
    by_policy = {}
    for path in sorted(steps_dir.glob("*.jsonl")):
        by_policy[path.stem] = [json.loads(line)
                                for line in path.read_text().splitlines() if line]
    written = []

    summary_path = run_dir / "summary.csv"
    with open(summary_path, "w") as fh:
        fh.write("policy,t,branch,decision,median,p95,p99,max,"
                 "fwt_median,bwt_median,changed,fixed,f1_real,f1_synth,"
                 "loss_old,loss_new\n")
        for policy in sorted(by_policy):
            for rec in by_policy[policy]:
                m = rec.get("metrics") or {}
                s = m.get("summary") or {}
                g = m.get("groups") or {}
                fid = rec.get("fidelity") or {}
                row = [
                    policy, rec["t"], rec["branch"], rec.get("decision") or "",
                    _fmt(s.get("median")), _fmt(s.get("p95")), _fmt(s.get("p99")),
                    _fmt(s.get("max")),
                    _fmt((g.get("changed") or {}).get("median")),
                    _fmt((g.get("fixed") or {}).get("median")),
                    (g.get("changed") or {}).get("count", ""),
                    (g.get("fixed") or {}).get("count", ""),
                    _fmt(fid.get("f1_real")), _fmt(fid.get("f1_synth")),
                    _fmt(rec.get("loss_old")), _fmt(rec.get("loss_new")),
                ]
                fh.write(",".join(str(x) for x in row) + "\n")
    written.append(summary_path)

    timings_path = run_dir / "timings.csv"
    retrain_wall = {rec["t"]: rec["wall_time"]
                    for rec in by_policy.get("retrain", [])}
    with open(timings_path, "w") as fh:
        fh.write("policy,t,wall_time,speedup_vs_retrain\n")
        for policy in sorted(by_policy):
            for rec in by_policy[policy]:
                speedup = ""
                if (policy == "ddup" and rec["t"] >= 1
                        and rec["t"] in retrain_wall and rec["wall_time"] > 0):
                    speedup = _fmt(retrain_wall[rec["t"]] / rec["wall_time"])
                fh.write(f"{policy},{rec['t']},{_fmt(rec['wall_time'])},{speedup}\n")
    written.append(timings_path)

    rates_file = run_dir / "detector_rates.json"
    if rates_file.exists():
        rates = json.loads(rates_file.read_text())
        rates_csv = run_dir / "detector_rates.csv"
        with open(rates_csv, "w") as fh:
            fh.write("batch_size,fpr,fnr\n")
            for r in rates:
                fh.write(f"{r['batch_size']},{_fmt(r['fpr'])},{_fmt(r['fnr'])}\n")
        written.append(rates_csv)

    written.extend(_plots(run_dir, by_policy))
    return written


def _fmt(x) -> str:
    return "" if x is None else format(float(x), ".6g")


def _plots(run_dir: Path, by_policy: dict) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    plots_dir = run_dir / "plots"
    plots_dir.mkdir(exist_ok=True)

    has_metrics = any(rec.get("metrics") for recs in by_policy.values() for rec in recs)
    if has_metrics:
        fig, ax = plt.subplots(figsize=(7, 4))
        for policy, recs in sorted(by_policy.items()):
            ts = [r["t"] for r in recs if r.get("metrics")]
            med = [r["metrics"]["summary"]["median"] for r in recs if r.get("metrics")]
            ax.plot(ts, med, marker="o", label=policy)
        ax.set_xlabel("update step")
        ax.set_ylabel("median error")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        path = plots_dir / "error_vs_step.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    for policy, recs in sorted(by_policy.items()):
        ts = [r["t"] for r in recs]
        ax.plot(ts, [r["loss_old"] for r in recs], marker="o",
                label=f"{policy} (old data)")
        if any(r["loss_new"] is not None for r in recs):
            ax.plot([r["t"] for r in recs if r["loss_new"] is not None],
                    [r["loss_new"] for r in recs if r["loss_new"] is not None],
                    marker="x", linestyle="--", label=f"{policy} (new data)")
    ax.set_xlabel("update step")
    ax.set_ylabel("mean loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = plots_dir / "loss_vs_step.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    rates_file = run_dir / "detector_rates.json"
    if rates_file.exists():
        rates = json.loads(rates_file.read_text())
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([r["batch_size"] for r in rates], [r["fpr"] for r in rates],
                marker="o", label="FPR")
        ax.plot([r["batch_size"] for r in rates], [r["fnr"] for r in rates],
                marker="s", label="FNR")
        ax.set_xscale("log")
        ax.set_xlabel("batch size")
        ax.set_ylabel("rate")
        ax.legend()
        fig.tight_layout()
        path = plots_dir / "detector_rates.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
