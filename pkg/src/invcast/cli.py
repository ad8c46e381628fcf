"""Command-line entry point: ``invcast {ingest,synth,run,evaluate,report}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys

from . import panel as pnl
from .diffengine import ContractViolation
from .experiment import ExperimentSpec, METRIC_COLUMNS, report_from_metrics, run_experiment
from .forecast import ForecastTensor
from .inventory import CostParams
from .trainloop import evaluate_forecasts


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _words(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _cutoffs(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("cutoffs must be TRAIN,VAL")
    return int(parts[0]), int(parts[1])


def _add_inventory_flags(p):
    p.add_argument("--lead-time", type=int, default=6)
    p.add_argument("--service-level", type=float, default=0.5)
    p.add_argument("--period", type=int, default=12)


def build_parser():
    parser = argparse.ArgumentParser(prog="invcast", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a demand CSV and write it in canonical form")
    p.add_argument("path")
    p.add_argument("--schema", choices=("long", "wide"), default="long")
    p.add_argument("--period", type=int, default=12)
    p.add_argument("--cutoffs", type=_cutoffs)
    p.add_argument("--out", help="canonical output file")
    p.add_argument("--out-schema", choices=("long", "wide"), default="long")

    p = sub.add_parser("synth", help="write a synthetic seasonal panel")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--t-len", type=int, default=120)
    p.add_argument("--period", type=int, default=12)
    p.add_argument("--base", type=float, default=100.0)
    p.add_argument("--amplitude", type=float, default=30.0)
    p.add_argument("--trend", type=float, default=0.2)
    p.add_argument("--noise-sd", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schema", choices=("long", "wide"), default="long")
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="train and evaluate over a unit-cost grid")
    p.add_argument("--spec", help="JSON experiment spec; flags given explicitly override it")
    p.add_argument("--data")
    p.add_argument("--schema", choices=("long", "wide"))
    p.add_argument("--synth-n", type=int)
    p.add_argument("--synth-t", type=int)
    p.add_argument("--model", choices=("seasonal_scaler", "naive_seasonal", "lstm"))
    p.add_argument("--objectives", type=_words)
    p.add_argument("--ch", type=_floats)
    p.add_argument("--cs", type=_floats)
    p.add_argument("--cv", type=_floats)
    p.add_argument("--service-level", type=float)
    p.add_argument("--lead-time", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--period", type=int)
    p.add_argument("--cutoffs", type=_cutoffs)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=_floats)
    p.add_argument("--steps-per-update", type=int)
    p.add_argument("--init-steps", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mode", choices=("local", "global"))
    p.add_argument("--jobs", type=int)
    p.add_argument("--sum", action="store_true", help="report panel sums instead of means")
    p.add_argument("--out")

    p = sub.add_parser("evaluate", help="score a forecast CSV through the inventory pipeline")
    p.add_argument("--forecasts", required=True, help="series_id,t,k,forecast CSV")
    p.add_argument("--demand", required=True)
    p.add_argument("--schema", choices=("long", "wide"), default="long")
    p.add_argument("--ch", type=float, default=1.0)
    p.add_argument("--cs", type=float, default=1.0)
    p.add_argument("--cv", type=float, default=0.0)
    _add_inventory_flags(p)
    p.add_argument("--eval-start", type=int, help="first scored origin (default: first forecast)")
    p.add_argument("--eval-stop", type=int)
    p.add_argument("--sum", action="store_true")
    p.add_argument("--out", help="write the report CSV here instead of stdout")

    p = sub.add_parser("report", help="rebuild the improvement table from metrics.csv")
    p.add_argument("metrics")
    p.add_argument("--out", required=True)
    return parser


_RUN_FIELDS = {
    "data": "data", "schema": "schema", "model": "model", "objectives": "objectives",
    "ch": "c_h", "cs": "c_s", "cv": "c_v", "service_level": "service_level",
    "lead_time": "lead_time", "horizon": "horizon", "window": "window", "period": "period",
    "cutoffs": "cutoffs", "seed": "seed", "lr": "lr", "steps_per_update": "steps_per_update",
    "init_steps": "init_steps", "hidden": "hidden", "batch_size": "batch_size", "mode": "mode",
    "jobs": "jobs", "out": "out",
}


def spec_from_args(args) -> ExperimentSpec:
    spec = ExperimentSpec.from_json(args.spec) if args.spec else ExperimentSpec()
    for flag, name in _RUN_FIELDS.items():
        val = getattr(args, flag)
        if val is not None:
            setattr(spec, name, val)
    if args.synth_n is not None:
        spec.synth = dict(spec.synth, n=args.synth_n)
    if args.synth_t is not None:
        spec.synth = dict(spec.synth, t_len=args.synth_t)
    if args.sum:
        spec.aggregate = "sum"
    return spec


def cmd_ingest(args):
    panel = pnl.ingest_csv(args.path, args.schema, args.period, args.cutoffs)
    print(f"series={panel.n_series} T={panel.length} masked={int((~panel.mask).sum())} "
          f"train_cutoff={panel.train_cutoff} val_cutoff={panel.val_cutoff}")
    if args.out:
        pnl.emit_csv(panel, args.out, args.out_schema)
    return 0


def cmd_synth(args):
    panel = pnl.synth_seasonal(args.n, args.t_len, args.period, args.base, args.amplitude,
                               args.trend, args.noise_sd, args.seed)
    pnl.emit_csv(panel, args.out, args.schema)
    return 0


def cmd_run(args):
    spec = spec_from_args(args)
    failures = run_experiment(spec)
    if failures:
        logging.getLogger("invcast").error("%d grid cell(s) failed", failures)
        return 1
    return 0


def cmd_evaluate(args):
    panel = pnl.ingest_csv(args.demand, args.schema, args.period, (1, 2))
    try:
        ft = ForecastTensor.from_csv(args.forecasts, panel.series_ids)
    except ValueError as exc:
        raise ContractViolation(str(exc)) from None
    if ft.values.shape[2] < args.lead_time:
        raise ContractViolation(
            f"forecast file has horizon {ft.values.shape[2]} < lead time {args.lead_time}")
    costs = CostParams(args.ch, args.cs, args.cv, args.service_level, args.lead_time)
    m = evaluate_forecasts(ft, panel, costs, args.eval_start, args.eval_stop,
                           "sum" if args.sum else "mean")
    row = ["external", "-", args.ch, args.cs, args.cv] + [m[k] for k in METRIC_COLUMNS[5:]]
    cells = [repr(x) if isinstance(x, float) else str(x) for x in row]
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            w.writerow(cells)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerow(cells)
    return 0


def cmd_report(args):
    report_from_metrics(args.metrics, args.out)
    return 0


COMMANDS = {"ingest": cmd_ingest, "synth": cmd_synth, "run": cmd_run, "evaluate": cmd_evaluate,
            "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ContractViolation, pnl.PanelParseError, pnl.PanelValidationError,
            FileNotFoundError) as exc:
        print(f"invcast {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
