"""Command-line interface: estimate, select, simulate.

Every run prints its fully resolved configuration into the output header so
that a run can be reproduced from its own output.  Exit codes: 0 success,
2 input/configuration error, 3 numerical/convergence failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time

import numpy as np

from .data import CsvSchema, ModelSpec, design_matrix, delta as delta_of, load_csv, split_blocks
from .errors import DataError, NumericalError, SpecError
from .estimator import PsMode, fit_theta
from .propensity import Weighting, fit_cbd, fit_mle, predict_e1
from .selection import (
    CriterionKind,
    PsConfig,
    evaluate_criterion,
    forward_select,
    proposed_for,
)
from .simlab import TABLE_IDS, render_report, run_table

__all__ = ["main"]


class _CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbdid",
        description="Doubly robust difference-in-differences estimation, "
        "model selection, and simulation tables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value file; command-line flags win")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", choices=("csv", "md", "json"), default="md")
        p.add_argument("--out", help="output path (default: stdout)")
        p.add_argument("--no-banner", action="store_true",
                       help="suppress the timestamp line for byte-identical reruns")

    def add_data(p):
        p.add_argument("--data", required=True, help="CSV input path")
        p.add_argument("--treat", required=True, help="treatment indicator column")
        p.add_argument("--ypre", help="pre-period outcome column")
        p.add_argument("--ypost", help="post-period outcome column")
        p.add_argument("--delta", help="outcome-change column (alternative to ypre/ypost)")
        p.add_argument("--covars", required=True, help="comma-separated covariate columns")
        p.add_argument("--ps", default="cbd",
                       help="propensity mode: known:<col> | mle | cbd")
        p.add_argument("--weighting", choices=("identity", "optimal"), default="identity")
        p.add_argument("--ps-intercept", action="store_true",
                       help="include the intercept in the propensity design")

    est = sub.add_parser("estimate", help="fit the effect model on the full covariate set")
    add_data(est)
    add_common(est)

    sel = sub.add_parser("select", help="forward selection of effect-model covariates")
    add_data(sel)
    sel.add_argument("--criterion", choices=("proposed", "qicw"), default="proposed")
    sel.add_argument("--blocks", type=int, default=1,
                     help="split rows round-robin into this many blocks and select per block")
    sel.add_argument("--fixed-ps", action="store_true", default=True,
                     help="fit the scores once on the full candidate design (default)")
    sel.add_argument("--refit-ps", action="store_true",
                     help="refit the scores for every candidate spec")
    sel.add_argument("--qicw-count-intercept", action=argparse.BooleanOptionalAction,
                     default=True, help="count the intercept in the qicw penalty dimension")
    add_common(sel)

    sim = sub.add_parser("simulate", help="run one simulation-study table grid")
    sim.add_argument("--table", required=True,
                     help=f"table id, one of: {', '.join(sorted(TABLE_IDS))}")
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--paper", action="store_true", help="full 3000-replication run")
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--dump-raw", action="store_true",
                     help="include raw per-replication values (json format)")
    add_common(sim)
    return parser


def _apply_config_file(argv: list[str]) -> list[str]:
    """Prepend options from a --config file; explicit flags win (parsed later)."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    try:
        path = argv[idx + 1]
    except IndexError:
        raise _CliError("--config needs a file path", 2) from None
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    except OSError as err:
        raise _CliError(f"cannot read config file: {err}", 2) from None
    extra: list[str] = []
    for line in lines:
        if "=" not in line:
            raise _CliError(f"config line is not key=value: {line!r}", 2)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if value.lower() in ("true", ""):
            extra.append(f"--{key}")
        elif value.lower() == "false":
            extra.append(f"--no-{key}")
        else:
            extra.extend([f"--{key}", value])
    # Insert after the subcommand so argparse attaches them to it.
    return argv[:1] + extra + argv[1:]


def _parse_ps(value: str):
    if value == "mle":
        return PsMode.MLE, None
    if value == "cbd":
        return PsMode.CBD, None
    if value.startswith("known:"):
        col = value.split(":", 1)[1]
        if not col:
            raise _CliError("--ps known:<col> needs a column name", 2)
        return PsMode.KNOWN, col
    raise _CliError(f"invalid --ps value {value!r}; use known:<col>, mle, or cbd", 2)


def _read_column(path: str, column: str) -> np.ndarray:
    with open(path, encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if column not in header:
            raise _CliError(f"column {column!r} not found in {path}", 2)
        j = header.index(column)
        values = []
        for row in reader:
            if not row or all(c.strip() == "" for c in row):
                continue
            try:
                values.append(float(row[j]))
            except ValueError:
                raise _CliError(
                    f"row {len(values) + 1}: cannot parse {column}={row[j]!r}", 2
                ) from None
    return np.asarray(values)


def _load_dataset(args):
    covars = tuple(c.strip() for c in args.covars.split(",") if c.strip())
    if not covars:
        raise _CliError("--covars must name at least one column", 2)
    try:
        schema = CsvSchema(
            treat_col=args.treat,
            covariate_cols=covars,
            y_pre_col=args.ypre,
            y_post_col=args.ypost,
            delta_col=args.delta,
        )
        dataset = load_csv(args.data, schema)
    except FileNotFoundError:
        raise _CliError(f"no such file: {args.data}", 2) from None
    except DataError as err:
        raise _CliError(str(err), 2) from None
    return dataset


def _resolve_ps(args, dataset):
    mode, known_col = _parse_ps(args.ps)
    e1_known = None
    if mode is PsMode.KNOWN:
        e1_known = _read_column(args.data, known_col)
        if e1_known.shape[0] != dataset.n:
            raise _CliError("propensity column length does not match the data", 2)
        if not np.all(np.isfinite(e1_known)) or np.any(e1_known <= 0.0) or np.any(e1_known >= 1.0):
            raise _CliError("known propensity scores must lie strictly inside (0, 1)", 2)
    weighting = Weighting(args.weighting)
    return mode, e1_known, weighting


_CONFIG_EXCLUDE = ("command", "out", "config")


def _resolved_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())
            if k not in _CONFIG_EXCLUDE and v is not None}


def _config_lines(args) -> list[str]:
    return [f"{k.replace('_', '-')}={v}" for k, v in _resolved_config(args).items()]


def _emit(args, title: str, rows: list[dict], json_payload: dict):
    lines = []
    if not args.no_banner:
        lines.append(f"# generated {time.strftime('%Y-%m-%d %H:%M:%S')}")
    lines.append("# config: " + " ".join(_config_lines(args)))
    if args.format == "json":
        payload = {"schema": 1, "title": title,
                   "config": {k: str(v) for k, v in _resolved_config(args).items()},
                   **json_payload}
        body = json.dumps(payload, indent=2)
        text = "\n".join(lines[:1]) + ("\n" if lines[:1] else "") + body + "\n" \
            if not args.no_banner else body + "\n"
    else:
        header = list(rows[0]) if rows else []
        if args.format == "csv":
            buf = io.StringIO()
            writer = csv.writer(buf)
            writer.writerow(header)
            for r in rows:
                writer.writerow([r.get(h, "") for h in header])
            text = "\n".join(lines) + "\n" + buf.getvalue()
        else:
            widths = {h: max(len(h), *(len(str(r.get(h, ""))) for r in rows)) for h in header} if rows else {}
            md = ["| " + " | ".join(h.ljust(widths[h]) for h in header) + " |",
                  "|" + "|".join("-" * (widths[h] + 2) for h in header) + "|"] if rows else []
            for r in rows:
                md.append("| " + " | ".join(str(r.get(h, "")).ljust(widths[h]) for h in header) + " |")
            text = "\n".join(lines + [f"# {title}"] + md) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _fit_for_cli(dataset, spec, mode, e1_known, weighting, ps_intercept):
    X = design_matrix(dataset, spec)
    ps_spec = ModelSpec(spec.selected, include_intercept=ps_intercept)
    X_ps = design_matrix(dataset, ps_spec) if ps_spec.dimension else X
    d = dataset.treated
    dlt = delta_of(dataset)
    if mode is PsMode.KNOWN:
        e1, ps_fit = e1_known, None
    elif mode is PsMode.MLE:
        ps_fit = fit_mle(X_ps, d)
        e1 = predict_e1(ps_fit.model, X_ps)
    else:
        ps_fit = fit_cbd(X_ps, d, weighting=weighting)
        e1 = predict_e1(ps_fit.model, X_ps)
    if ps_fit is not None and not ps_fit.converged:
        raise NumericalError("propensity fit did not converge")
    theta_fit = fit_theta(X, d, dlt, e1, ps_mode=mode, ps_fit=ps_fit,
                          column_names=spec.column_names(dataset))
    return X, X_ps, e1, ps_fit, theta_fit


def _cmd_estimate(args) -> int:
    dataset = _load_dataset(args)
    mode, e1_known, weighting = _resolve_ps(args, dataset)
    spec = ModelSpec(tuple(range(dataset.n_covariates)))
    config = PsConfig(mode=mode, e1_known=e1_known, weighting=weighting,
                      ps_intercept=args.ps_intercept)
    _, _, e1, ps_fit, theta_fit = _fit_for_cli(
        dataset, spec, mode, e1_known, weighting, args.ps_intercept
    )
    value = evaluate_criterion(dataset, spec, proposed_for(mode), config)

    names = spec.column_names(dataset)
    rows = [{"coefficient": n, "estimate": f"{v:.6g}"}
            for n, v in zip(names, theta_fit.theta)]
    rows.append({"coefficient": "ATT", "estimate": f"{theta_fit.att:.6g}"})
    diagnostics = {
        "att": theta_fit.att,
        "theta": dict(zip(names, map(float, theta_fit.theta))),
        "criterion": {"kind": value.kind.value, "gof": value.gof,
                      "penalty": value.penalty, "total": value.total},
        "normal_eq_residual": theta_fit.normal_eq_residual,
        "condition_number": theta_fit.condition_number,
    }
    if ps_fit is not None and hasattr(ps_fit, "foc_norm"):
        diagnostics["propensity"] = {
            "foc_norm": ps_fit.foc_norm,
            "balance_residual_sup": ps_fit.moment_residual_norm,
            "converged": ps_fit.converged,
            "iterations": ps_fit.iterations,
        }
        rows.append({"coefficient": "balance-residual-sup",
                     "estimate": f"{ps_fit.moment_residual_norm:.3g}"})
        rows.append({"coefficient": "foc-norm", "estimate": f"{ps_fit.foc_norm:.3g}"})
    elif ps_fit is not None:
        diagnostics["propensity"] = {
            "score_norm": ps_fit.score_norm,
            "converged": ps_fit.converged,
            "iterations": ps_fit.iterations,
        }
    rows.append({"coefficient": "criterion-total", "estimate": f"{value.total:.6g}"})
    _emit(args, "estimate", rows, diagnostics)
    return 0


def _cmd_select(args) -> int:
    dataset = _load_dataset(args)
    mode, e1_known, weighting = _resolve_ps(args, dataset)
    if args.criterion == "qicw":
        kind = CriterionKind.QICW
    else:
        kind = proposed_for(mode)
    blocks = split_blocks(dataset, args.blocks) if args.blocks > 1 else [dataset]
    e1_blocks = None
    if e1_known is not None:
        idx = np.arange(dataset.n)
        e1_blocks = [e1_known[idx[idx % args.blocks == b]] for b in range(args.blocks)] \
            if args.blocks > 1 else [e1_known]

    rows, payload = [], {"blocks": []}
    candidates = tuple(range(dataset.n_covariates))
    for b, block in enumerate(blocks, start=1):
        config = PsConfig(
            mode=mode,
            e1_known=None if e1_blocks is None else e1_blocks[b - 1],
            weighting=weighting,
            refit_per_spec=bool(args.refit_ps),
            ps_intercept=args.ps_intercept,
            qicw_count_intercept=bool(args.qicw_count_intercept),
        )
        result = forward_select(block, candidates, kind, config)
        coef = {name: 0.0 for name in ("intercept", *dataset.covariate_names)}
        names = result.final_spec.column_names(block)
        for name, value in zip(names, result.final_fit.theta):
            coef[name] = float(value)
        row = {"block": b}
        row.update({k: f"{v:.4g}" if v else "0" for k, v in coef.items()})
        row["criterion"] = f"{result.path[-1][1].total:.6g}"
        rows.append(row)
        payload["blocks"].append({
            "block": b,
            "selected": [dataset.covariate_names[i] for i in result.final_spec.selected],
            "coefficients": coef,
            "att": result.final_fit.att,
            "path": [
                {"added": None if i is None else dataset.covariate_names[i],
                 "gof": v.gof, "penalty": v.penalty, "total": v.total}
                for i, v in result.path
            ],
            "skipped": [{"covariate": dataset.covariate_names[i], "reason": r}
                        for i, r in result.skipped],
        })
    _emit(args, "select", rows, payload)
    return 0


def _cmd_simulate(args) -> int:
    if args.table not in TABLE_IDS:
        raise _CliError(
            f"unknown table {args.table!r}; valid ids: {', '.join(sorted(TABLE_IDS))}", 2
        )
    reps = 3000 if args.paper else args.reps
    started = time.time()
    try:
        report = run_table(args.table, reps=reps, seed=args.seed, jobs=args.jobs,
                           dump_raw=args.dump_raw)
    except NumericalError as err:
        print(f"simulation failed: {err}", file=sys.stderr)
        return 3
    elapsed = time.time() - started
    failures = sum(len(c.failures) for c in report.cells)
    if args.format == "json":
        payload = report.to_json_dict()
        payload["config"] = {k: str(v) for k, v in _resolved_config(args).items()}
        body = json.dumps(payload, indent=2) + "\n"
    else:
        text = render_report(report, fmt=args.format)
        header = []
        if not args.no_banner:
            header.append(f"# generated {time.strftime('%Y-%m-%d %H:%M:%S')}")
        header.append("# config: " + " ".join(_config_lines(args)))
        body = "\n".join(header) + "\n" + text
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(body)
    else:
        sys.stdout.write(body)
    print(f"table {args.table}: reps={reps} failures={failures} "
          f"({report.failure_rate:.2%}) wall={elapsed:.1f}s", file=sys.stderr)
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        argv = _apply_config_file(argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return 2 if exc.code not in (0, None) else 0
        if args.command == "estimate":
            return _cmd_estimate(args)
        if args.command == "select":
            return _cmd_select(args)
        return _cmd_simulate(args)
    except _CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except (DataError, SpecError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
