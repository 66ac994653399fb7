"""Command-line interface.

Subcommands: ``estimate`` (two-stage), ``twfe`` (naive one-step
comparator), ``weights`` (cell-weight diagnostic), ``simulate``
(generate a panel with known truth) and ``compare`` (aligned event-study
series from all estimators).

Exit codes are a stable contract: 0 success, 2 usage error, 3 data
error, 4 estimation error. Failures print one machine-readable line
``E_CODE: message`` to stderr. Event-study runs can emit a plot-data
CSV (term, estimate, ci_low, ci_high, estimator) and render a PNG next
to it.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import __version__
from .dgp import DEFAULT_GROUPS, DgpConfig, GroupSpec, simulate
from .errors import EstimationError, InvalidSharesError, PanelDataError
from .estimator import (
    EstimateResult,
    SecondStageSpec,
    compute_twfe_weights,
    estimate_imputation,
    estimate_twfe,
    estimate_two_stage,
    panel_fe_spec,
)
from .inference import InferenceSpec
from .panel import ColumnSpec, derive_event_time, load_csv, write_csv

SCHEMA_VERSION = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"E_PARSE: {message}", file=sys.stderr)
        raise SystemExit(2)


def _parse_ref(value: str) -> float:
    v = value.strip().lower()
    if v == "inf":
        return math.inf
    try:
        return float(int(v))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"reference level must be an integer or 'inf', got {value!r}"
        )


def _parse_group(value: str) -> GroupSpec:
    parts = value.split(":")
    if len(parts) not in (2, 4, 5):
        raise argparse.ArgumentTypeError(
            "group spec must be G0:SHARE[:BASE:SLOPE[:FE_MEAN]]"
        )
    g0 = math.inf if parts[0].strip().lower() == "inf" else float(int(parts[0]))
    share = float(parts[1])
    base = float(parts[2]) if len(parts) > 2 else 0.0
    slope = float(parts[3]) if len(parts) > 3 else 0.0
    fe_mean = float(parts[4]) if len(parts) > 4 else 0.0
    return GroupSpec(g0, share, base, slope, fe_mean)


def _add_data_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="input panel CSV")
    p.add_argument("--y", required=True, help="outcome column")
    p.add_argument("--unit", required=True, help="unit identifier column")
    p.add_argument("--time", required=True, help="period column (integers)")
    p.add_argument("--group", required=True,
                   help="first-treatment period column ('inf' = never treated)")
    p.add_argument("--cluster", default=None,
                   help="cluster column (default: the unit column)")
    p.add_argument("--weight", default=None, help="weight column")
    p.add_argument("--delimiter", default=",", help="CSV delimiter")
    p.add_argument("--never-sentinel", type=float, default=None,
                   help="numeric group value to treat as never treated")
    p.add_argument("--anticipation", type=int, default=0,
                   help="shift treatment starts this many periods earlier")


def _add_mode_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--event-study", action="store_true",
                   help="estimate one coefficient per relative time")
    p.add_argument("--ref", action="append", type=_parse_ref, default=None,
                   help="reference level (repeatable; default -1 and inf)")
    p.add_argument("--horizon", nargs=2, type=int, metavar=("MIN", "MAX"),
                   default=None, help="report only relative times in this window")
    p.add_argument("--output", default="-", help="result path (default stdout)")
    p.add_argument("--plot-data", default=None,
                   help="write event-study plot data CSV here")
    p.add_argument("--figure", default=None,
                   help="render the event-study figure to this PNG")
    p.add_argument("--no-figure", action="store_true",
                   help="suppress the figure even when plot data is written")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twostage-did",
                     description="Two-stage difference-in-differences estimation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    est = sub.add_parser("estimate", help="two-stage estimate")
    _add_data_arguments(est)
    _add_mode_arguments(est)
    est.add_argument("--first-stage-fe", choices=("unit", "group"), default="unit",
                     help="first-stage effects: unit+time or group+time")
    est.add_argument("--bootstrap", action="store_true",
                     help="cluster-bootstrap standard errors instead of the "
                          "corrected sandwich")
    est.add_argument("--bootstraps", type=int, default=250,
                     help="bootstrap replicate count")
    est.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    est.add_argument("--cluster-correction", action="store_true",
                     help="apply the G/(G-1) small-sample factor")
    est.add_argument("--threads", type=int, default=None,
                     help="bootstrap worker threads (default: all cores)")

    twfe = sub.add_parser("twfe", help="one-step TWFE comparator")
    _add_data_arguments(twfe)
    _add_mode_arguments(twfe)

    wts = sub.add_parser("weights", help="cell weights of the naive regression")
    _add_data_arguments(wts)
    wts.add_argument("--output", default="-", help="result path (default stdout)")
    wts.add_argument("--format", choices=("csv", "json"), default="csv")

    sim = sub.add_parser("simulate", help="generate a panel with known truth")
    sim.add_argument("--output", required=True, help="output CSV path")
    sim.add_argument("--units", type=int, default=5000)
    sim.add_argument("--start", type=int, default=1990)
    sim.add_argument("--end", type=int, default=2020)
    sim.add_argument("--seed", type=int, default=42)
    sim.add_argument("--noise-sd", type=float, default=1.0)
    sim.add_argument("--unit-fe-sd", type=float, default=1.0)
    sim.add_argument("--time-fe-slope", type=float, default=0.1)
    sim.add_argument("--group-spec", action="append", type=_parse_group,
                     default=None, metavar="G0:SHARE:BASE:SLOPE[:FE_MEAN]",
                     help="adoption cohort (repeatable; default: built-in trio)")

    cmp_ = sub.add_parser("compare", help="event-study series from all estimators")
    _add_data_arguments(cmp_)
    _add_mode_arguments(cmp_)
    cmp_.add_argument("--first-stage-fe", choices=("unit", "group"), default="unit")
    cmp_.add_argument("--bootstrap", action="store_true")
    cmp_.add_argument("--bootstraps", type=int, default=250)
    cmp_.add_argument("--seed", type=int, default=0)
    cmp_.add_argument("--cluster-correction", action="store_true")
    cmp_.add_argument("--threads", type=int, default=None)
    return parser


def _load_panel(args):
    schema = ColumnSpec(
        unit=args.unit,
        time=args.time,
        outcome=args.y,
        group=args.group,
        cluster=args.cluster,
        weight=args.weight,
        delimiter=args.delimiter,
        never_sentinel=args.never_sentinel,
    )
    data = load_csv(args.data, schema)
    if args.anticipation:
        data = derive_event_time(data, args.anticipation)
    return data


def _second_stage_spec(args) -> SecondStageSpec:
    refs = tuple(args.ref) if args.ref else (-1.0, math.inf)
    horizon = tuple(args.horizon) if args.horizon else None
    return SecondStageSpec(
        kind="event_study" if args.event_study else "static",
        references=refs,
        horizon=horizon,
    )


def _inference_spec(args) -> InferenceSpec:
    return InferenceSpec(
        method="bootstrap" if args.bootstrap else "gmm",
        n_bootstraps=args.bootstraps,
        seed=args.seed,
        small_sample=args.cluster_correction,
        threads=args.threads or os.cpu_count(),
    )


def _result_document(result: EstimateResult, args, command: str) -> dict:
    table = []
    for i, term in enumerate(result.terms):
        row = {
            "term": term,
            "estimate": float(result.point[i]),
            "std_error": None,
            "t_value": None,
            "ci_low": None,
            "ci_high": None,
        }
        if result.se is not None:
            row["std_error"] = float(result.se[i])
            t = result.t_values[i]
            row["t_value"] = None if not math.isfinite(t) else float(t)
            row["ci_low"] = float(result.ci_low[i])
            row["ci_high"] = float(result.ci_high[i])
        table.append(row)
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "anticipation": args.anticipation,
        "references": [
            "inf" if math.isinf(r) else int(r)
            for r in (args.ref or (-1.0, math.inf))
        ] if getattr(args, "event_study", False) else None,
        "table": table,
        "result": result.to_dict(),
    }


def _emit(text: str, output: str) -> None:
    if output == "-":
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        Path(output).write_text(text if text.endswith("\n") else text + "\n")


def _plot_data_rows(results: list[EstimateResult]) -> list[str]:
    lines = ["term,estimate,ci_low,ci_high,estimator"]
    for res in results:
        lo = res.ci_low
        hi = res.ci_high
        for i, term in enumerate(res.terms):
            low = "" if lo is None else repr(float(lo[i]))
            high = "" if hi is None else repr(float(hi[i]))
            lines.append(
                f"{term},{float(res.point[i])!r},{low},{high},{res.estimator}"
            )
    return lines


def _maybe_figure(args, results: list[EstimateResult], title: str) -> Path | None:
    if args.no_figure:
        return None
    target = args.figure
    if target is None and args.plot_data:
        target = str(Path(args.plot_data).with_suffix(".png"))
    if target is None:
        return None
    from .plots import EventStudySeries, save_event_study_figure

    series = []
    for res in results:
        if res.rel_times is None:
            continue
        series.append(
            EventStudySeries(
                label=res.estimator,
                rel_times=list(res.rel_times),
                estimates=[float(v) for v in res.point],
                ci_low=None if res.ci_low is None else [float(v) for v in res.ci_low],
                ci_high=None if res.ci_high is None else [float(v) for v in res.ci_high],
            )
        )
    if not series:
        return None
    return save_event_study_figure(series, target, title=title)


def _run_single_estimate(args, command: str) -> int:
    data = _load_panel(args)
    second = _second_stage_spec(args)
    if command == "estimate":
        fe = ("unit", "time") if args.first_stage_fe == "unit" else ("group", "time")
        result = estimate_two_stage(
            data,
            first_stage=panel_fe_spec(data, effects=fe),
            second_stage=second,
            inference=_inference_spec(args),
        )
    else:
        result = estimate_twfe(data, second_stage=second)
    doc = _result_document(result, args, command)
    _emit(json.dumps(doc, indent=2), args.output)
    if second.kind == "event_study" and args.plot_data:
        Path(args.plot_data).write_text("\n".join(_plot_data_rows([result])) + "\n")
    if second.kind == "event_study":
        fig = _maybe_figure(args, [result], title=f"Event study: {result.estimator}")
        if fig is not None:
            print(f"figure written to {fig}", file=sys.stderr)
    return 0


def _run_weights(args) -> int:
    data = _load_panel(args)
    decomp = compute_twfe_weights(data)
    negative = decomp.negative_cells
    if args.format == "json":
        doc = {
            "schema_version": SCHEMA_VERSION,
            "command": "weights",
            "cells": [
                {"group": c.group, "time": c.time, "n_rows": c.n_rows,
                 "weight": c.weight}
                for c in decomp.cells
            ],
            "sum_w": decomp.sum_w,
            "n_negative": len(negative),
        }
        _emit(json.dumps(doc, indent=2), args.output)
    else:
        lines = ["group,time,n_rows,weight"]
        lines += [
            f"{c.group},{c.time},{c.n_rows},{c.weight!r}" for c in decomp.cells
        ]
        _emit("\n".join(lines), args.output)
    print(
        f"{len(decomp.cells)} treated cells, {len(negative)} negative weights, "
        f"sum {decomp.sum_w:.12f}",
        file=sys.stderr,
    )
    return 0


def _run_simulate(args) -> int:
    groups = tuple(args.group_spec) if args.group_spec else DEFAULT_GROUPS
    config = DgpConfig(
        n_units=args.units,
        periods=(args.start, args.end),
        groups=groups,
        unit_fe_sd=args.unit_fe_sd,
        time_fe_slope=args.time_fe_slope,
        noise_sd=args.noise_sd,
        seed=args.seed,
    )
    data, truth = simulate(config)
    write_csv(
        data,
        args.output,
        extra_columns={
            "te": truth.te,
            "te_dynamic": truth.te_dynamic,
            "counterfactual": truth.counterfactual,
        },
    )
    print(f"wrote {data.n_obs} rows to {args.output}")
    print(f"tau_overall {truth.tau_overall!r}")
    print("k,tau_k")
    for k in sorted(truth.tau_k):
        print(f"{k},{truth.tau_k[k]!r}")
    return 0


def _run_compare(args) -> int:
    data = _load_panel(args)
    args.event_study = True
    second = _second_stage_spec(args)
    fe = ("unit", "time") if args.first_stage_fe == "unit" else ("group", "time")
    two_stage = estimate_two_stage(
        data,
        first_stage=panel_fe_spec(data, effects=fe),
        second_stage=second,
        inference=_inference_spec(args),
    )
    twfe = estimate_twfe(data, second_stage=second)
    imput = estimate_imputation(
        data, first_stage=panel_fe_spec(data, effects=fe), second_stage=second
    )
    results = [two_stage, twfe, imput]

    lines = ["estimator,term,estimate,std.error"]
    for res in results:
        for i, term in enumerate(res.terms):
            se = "" if res.se is None else repr(float(res.se[i]))
            lines.append(f"{res.estimator},{term},{float(res.point[i])!r},{se}")
    _emit("\n".join(lines), args.output)

    if args.plot_data:
        Path(args.plot_data).write_text("\n".join(_plot_data_rows(results)) + "\n")
    fig = _maybe_figure(args, results, title="Event study: estimator comparison")
    if fig is not None:
        print(f"figure written to {fig}", file=sys.stderr)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "estimate":
            return _run_single_estimate(args, "estimate")
        if args.command == "twfe":
            return _run_single_estimate(args, "twfe")
        if args.command == "weights":
            return _run_weights(args)
        if args.command == "simulate":
            return _run_simulate(args)
        if args.command == "compare":
            return _run_compare(args)
        parser.error(f"unknown command {args.command!r}")
    except InvalidSharesError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 2
    except PanelDataError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 3
    except EstimationError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"E_PARSE: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
