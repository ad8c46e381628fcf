"""Grid experiments: train per objective and unit-cost cell, roll forward, write reports."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import panel as pnl
from .diffengine import ContractViolation
from .forecast import ForecastTensor, init_model, save_checkpoint
from .inventory import CostParams, true_lead_demand
from .trainloop import Adam, TrainConfig, evaluate_forecasts, fit, manifest, roll_forward

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["model", "objective", "c_h", "c_s", "c_v", "C_h", "C_s", "C_v", "TC", "RRMS",
                  "MSE", "sMAPE"]
COST_AGNOSTIC = ("mse", "rrms")


@dataclass
class ExperimentSpec:
    data: str | None = None
    schema: str = "long"
    synth: dict = field(default_factory=lambda: {
        "n": 20, "t_len": 120, "base": 100.0, "amplitude": 30.0, "trend": 0.2, "noise_sd": 10.0})
    model: str = "seasonal_scaler"
    objectives: tuple = ("mse", "tc")
    c_h: tuple = (1.0, 2.0, 10.0)
    c_s: tuple = (1.0, 2.0, 10.0)
    c_v: tuple = (1e-6, 1e-5)
    service_level: float = 0.5
    lead_time: int = 6
    horizon: int = 12
    window: int = 24
    period: int = 12
    cutoffs: tuple | None = None
    seed: int = 0
    lr: tuple = (0.01,)
    steps_per_update: int = 5
    init_steps: int = 100
    hidden: int = 20
    batch_size: int | None = None
    mode: str = "local"
    jobs: int = 1
    aggregate: str = "mean"
    out: str = "runs/out"

    def validate(self):
        for name in ("c_h", "c_s", "c_v", "objectives", "lr"):
            if not getattr(self, name):
                raise ContractViolation(f"{name}: grid must be non-empty")
        if self.data is not None and not Path(self.data).exists():
            raise ContractViolation(f"data: file {self.data} does not exist")
        if self.model not in ("seasonal_scaler", "naive_seasonal", "lstm"):
            raise ContractViolation(f"model: unknown kind {self.model!r}")
        if self.mode not in ("local", "global"):
            raise ContractViolation(f"mode: must be 'local' or 'global', got {self.mode!r}")
        if self.aggregate not in ("mean", "sum"):
            raise ContractViolation(f"aggregate: must be 'mean' or 'sum', got {self.aggregate!r}")
        for o in self.objectives:
            if o not in ("mse", "tc", "rrms"):
                raise ContractViolation(f"objectives: unknown objective {o!r}")
        CostParams(self.c_h[0], self.c_s[0], self.c_v[0], self.service_level, self.lead_time)

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        raw = json.loads(Path(path).read_text())
        known = set(cls.__dataclass_fields__)
        bad = set(raw) - known
        if bad:
            raise ContractViolation(f"{sorted(bad)[0]}: unknown spec field")
        for k in ("objectives", "c_h", "c_s", "c_v", "lr", "cutoffs"):
            if k in raw and raw[k] is not None:
                raw[k] = tuple(raw[k])
        return cls(**raw)

    def grid(self):
        return list(itertools.product(self.c_h, self.c_s, self.c_v))


def load_panel(spec: ExperimentSpec) -> pnl.DemandPanel:
    if spec.data:
        return pnl.ingest_csv(spec.data, spec.schema, spec.period, spec.cutoffs)
    s = spec.synth
    return pnl.synth_seasonal(s["n"], s["t_len"], spec.period, s["base"], s["amplitude"],
                              s.get("trend", 0.0), s.get("noise_sd", 0.0), spec.seed,
                              spec.cutoffs)


def series_seed(seed: int, series_id: str) -> int:
    """Stable per-series seed (independent of PYTHONHASHSEED)."""
    return zlib.crc32(f"{seed}:{series_id}".encode()) & 0x7FFFFFFF


def _make_model(spec, seed):
    hyper = {"period": spec.period}
    if spec.model == "lstm":
        hyper = {"window": spec.window, "hidden": spec.hidden}
    return init_model(spec.model, seed, **hyper)


def _config(spec, objective, costs, lr, seed):
    return TrainConfig(objective=objective, costs=costs, window=spec.window,
                       horizon=spec.horizon if spec.mode == "local" else spec.lead_time,
                       period=spec.period, lr=lr, steps_per_update=spec.steps_per_update,
                       init_steps=spec.init_steps, batch_size=spec.batch_size,
                       rollout="double" if spec.mode == "local" else "single", seed=seed)


def _train_one(job):
    """Train on a sub-panel and roll forward over [train_cutoff, T)."""
    spec, sub, objective, costs, lr, seed = job
    model = _make_model(spec, seed)
    config = _config(spec, objective, costs, lr, seed)
    opt = Adam(lr, max_grad_norm=config.max_grad_norm)
    rng = np.random.default_rng(seed)
    if model.params:
        fit(model, sub, config, sub.train_cutoff, spec.init_steps, opt, rng)
    ft, _ = roll_forward(model, sub, config, sub.train_cutoff, sub.length, opt, rng)
    beta = float(model.params["beta"]) if "beta" in model.params else None
    return ft.values, beta, model


def train_objective(spec, panel, objective, costs, lr):
    """Forecast tensor over [train_cutoff, T), per-series betas and the trained models."""
    if spec.mode == "global":
        jobs = [(spec, panel, objective, costs, lr, spec.seed)]
    else:
        jobs = [(spec, panel.subset(i), objective, costs, lr, series_seed(spec.seed, sid))
                for i, sid in enumerate(panel.series_ids)]
    if spec.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(spec.jobs) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    values = np.concatenate([r[0] for r in results], axis=0)
    betas = [r[1] for r in results]
    if spec.mode == "global":
        betas = betas * panel.n_series
    return ForecastTensor(values, panel.train_cutoff), betas, [r[2] for r in results]


_VAL_KEY = {"mse": "MSE", "tc": "TC", "rrms": "RRMS"}


def _atomic_write(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _cell_name(objective, ch, cs, cv):
    return f"{objective}_ch{ch!r}_cs{cs!r}_cv{cv!r}"


def run_experiment(spec: ExperimentSpec) -> int:
    """Run every (objective, cost cell); returns the number of failed cells."""
    spec.validate()
    panel = load_panel(spec)
    out = Path(spec.out)
    (out / "forecasts").mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(parents=True, exist_ok=True)
    pnl.emit_csv(panel, out / "demand.csv", "long")
    val_rng = (panel.train_cutoff, panel.val_cutoff)
    test_rng = (panel.val_cutoff, panel.length)
    if test_rng[0] >= test_rng[1]:
        raise ContractViolation("cutoffs: val_cutoff must leave a non-empty test range")

    metric_rows, beta_rows, avg_rows, failures = [], [], [], 0
    results = {}
    cache = {}
    for objective in spec.objectives:
        for ch, cs, cv in spec.grid():
            costs = CostParams(ch, cs, cv, spec.service_level, spec.lead_time)
            train_costs = costs
            key = (objective, ch, cs, cv)
            if objective in COST_AGNOSTIC:
                # unit costs do not enter these objectives (rel cancels them), train once
                train_costs = CostParams(1.0, 1.0, 1.0, spec.service_level, spec.lead_time)
                key = (objective,)
            try:
                if key not in cache:
                    best = None
                    for lr in spec.lr:
                        ft, betas, models = train_objective(spec, panel, objective, train_costs, lr)
                        if len(spec.lr) > 1:
                            score = evaluate_forecasts(ft, panel, train_costs, *val_rng)
                            val = score[_VAL_KEY[objective]]
                        else:
                            val = 0.0
                        if best is None or val < best[0]:
                            best = (val, ft, betas, models, lr)
                    cache[key] = best
                _, ft, betas, models, lr = cache[key]
                metrics = evaluate_forecasts(ft, panel, costs, *test_rng, how=spec.aggregate)
            except (ContractViolation, FloatingPointError) as exc:
                log.error("cell %s failed: %s", key, exc)
                failures += 1
                continue
            name = _cell_name(objective, ch, cs, cv)
            ft.to_csv(out / "forecasts" / f"{name}.csv", panel.series_ids)
            if spec.mode == "global":
                save_checkpoint(models[0], out / "models" / f"{name}.npz")
            results[(objective, ch, cs, cv)] = metrics
            metric_rows.append([spec.model, objective, ch, cs, cv] + [
                metrics[k] for k in METRIC_COLUMNS[5:]])
            if betas[0] is not None:
                b = np.array(betas, dtype=np.float64)
                beta_rows.append([objective, ch, cs, cv, ch / cs, float(b.mean()), float(b.std())])
            avg_rows.extend(_average_lead(objective, ch, cs, cv, ft, panel, spec.lead_time,
                                          test_rng))
            _atomic_write(out / "metrics.csv", _csv_text(
                METRIC_COLUMNS, [[_fmt(x) for x in r] for r in metric_rows]))

    _atomic_write(out / "metrics.csv", _csv_text(
        METRIC_COLUMNS, [[_fmt(x) for x in r] for r in metric_rows]))
    _atomic_write(out / "improvement.csv", improvement_table(metric_rows))
    _atomic_write(out / "betas.csv", _csv_text(
        ["objective", "c_h", "c_s", "c_v", "ch_over_cs", "beta_mean", "beta_std"],
        [[_fmt(x) for x in r] for r in beta_rows]))
    _atomic_write(out / "avg_forecast.csv", _csv_text(
        ["objective", "c_h", "c_s", "c_v", "t", "forecast_lead_mean", "true_lead_mean"],
        [[_fmt(x) for x in r] for r in avg_rows]))
    spec_dict = asdict(spec)
    spec_dict.pop("out")
    spec_dict.pop("jobs")
    _atomic_write(out / "manifest.json", manifest(
        _config(spec, spec.objectives[0], CostParams(spec.c_h[0], spec.c_s[0], spec.c_v[0],
                                                     spec.service_level, spec.lead_time),
                spec.lr[0], spec.seed),
        {"values": panel.values, "mask": panel.mask},
        {"experiment": spec_dict, "failed_cells": failures,
         "eval": {"validation": list(val_rng), "test": list(test_rng)}}))
    return failures


def _average_lead(objective, ch, cs, cv, ft, panel, lead_time, test_rng):
    """Series-averaged forecast vs realised lead-time demand over the test origins."""
    true_lead, valid = true_lead_demand(panel.values, lead_time)
    rows = []
    for t in range(*test_rng):
        j = t - ft.start
        col = valid[:, t]
        rows.append([objective, ch, cs, cv, t, float(ft.values[:, j, :lead_time].sum(axis=1).mean()),
                     float(true_lead[col, t].mean()) if col.any() else None])
    return rows


def improvement_table(metric_rows) -> str:
    """Percentage test-TC improvement of the TC objective over MSE (and RRMS) per cell."""
    by = {}
    for r in metric_rows:
        model, objective, ch, cs, cv = r[:5]
        by[(objective, float(ch), float(cs), float(cv))] = float(r[8])
    rows = []
    cells = sorted({k[1:] for k in by if k[0] == "tc"})
    for ch, cs, cv in cells:
        tc = by[("tc", ch, cs, cv)]
        row = [ch, cs, cv, ch / cs, tc]
        for ref in ("mse", "rrms"):
            base = by.get((ref, ch, cs, cv))
            row += [base, None if base in (None, 0.0) else 100.0 * (base - tc) / base]
        rows.append(row)
    header = ["c_h", "c_s", "c_v", "ch_over_cs", "TC_tc", "TC_mse", "improvement_vs_mse_pct",
              "TC_rrms", "improvement_vs_rrms_pct"]
    return _csv_text(header, [[_fmt(x) for x in r] for r in rows])


def report_from_metrics(metrics_path, out_path):
    """Rebuild the improvement table from an existing metrics CSV."""
    with open(metrics_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRIC_COLUMNS:
            raise ValueError(f"{metrics_path}: unexpected header {header}")
        rows = [r for r in reader if r]
    _atomic_write(Path(out_path), improvement_table(rows))
