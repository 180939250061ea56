"""Data generators, oracles, and the Monte Carlo table harness.

Every generator draws covariates uniformly on (0, 2), assigns treatment by a
logistic rule, and builds two-period outcomes whose change is linear in the
covariates for treated units.  Generators return the dataset together with a
hidden truth record (true scores, true effect curve) that only oracles may
consume, never estimators.

Replication streams are derived from ``(master seed, cell index, replication
index)`` so that results are bit-identical for any worker count.
"""

from __future__ import annotations

import enum
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ModelSpec, design_matrix, delta as delta_of
from .errors import NumericalError, SpecError
from .estimator import PsMode, fit_theta, rho_weights
from .propensity import Weighting, fit_cbd, fit_mle, predict_e1
from .selection import (
    CriterionKind,
    PsConfig,
    forward_select,
    penalty_cbd,
    penalty_known,
    penalty_mle,
    qicw_penalty,
)

__all__ = [
    "DgpFamily",
    "DgpSpec",
    "TruthRecord",
    "generate",
    "working_spec_for",
    "theta_star_exact",
    "theta_star_oracle",
    "bias_term",
    "true_bias_oracle",
    "empirical_risk",
    "tp_fp",
    "run_table",
    "McReport",
    "TABLE_IDS",
]


class DgpFamily(enum.Enum):
    ROBUSTNESS = "robustness"
    CASE_1_1 = "case-1-1"
    CASE_1_2 = "case-1-2"
    CASE_2_1 = "case-2-1"
    CASE_2_2 = "case-2-2"
    CASE_2_3 = "case-2-3"


_N_COVARIATES = {
    DgpFamily.ROBUSTNESS: 2,
    DgpFamily.CASE_1_1: 1,
    DgpFamily.CASE_1_2: 2,
    DgpFamily.CASE_2_1: 4,
    DgpFamily.CASE_2_2: 4,
    DgpFamily.CASE_2_3: 6,
}

#: Covariates with truly nonzero effect slopes (intercept excluded).
_TRUTH_SLOPES = {
    DgpFamily.ROBUSTNESS: (0,),
    DgpFamily.CASE_1_1: (0,),
    DgpFamily.CASE_1_2: (0, 1),
    DgpFamily.CASE_2_1: (0,),
    DgpFamily.CASE_2_2: (0, 1),
    DgpFamily.CASE_2_3: (0, 1),
}


@dataclass(frozen=True)
class DgpSpec:
    """One simulation setting: generator family, effect size, sample size."""

    family: DgpFamily
    beta_star: float
    n: int
    alpha_star: float | None = None

    def __post_init__(self):
        p = _N_COVARIATES[self.family] + 1
        if self.n < 2 * p:
            raise SpecError(f"need n >= {2 * p} units for this family")
        if not np.isfinite(self.beta_star):
            raise SpecError("beta_star must be finite")
        if self.family is DgpFamily.ROBUSTNESS and self.alpha_star is None:
            raise SpecError("the robustness family needs alpha_star")
        if self.family is not DgpFamily.ROBUSTNESS and self.alpha_star is not None:
            raise SpecError("alpha_star only applies to the robustness family")

    @property
    def n_covariates(self) -> int:
        return _N_COVARIATES[self.family]


@dataclass(frozen=True)
class TruthRecord:
    """Hidden per-unit truth for oracles: never fed to estimators."""

    e1_true: np.ndarray
    effect_curve: np.ndarray
    theta_star: np.ndarray
    truth_slopes: tuple[int, ...]


def working_spec_for(family: DgpFamily) -> ModelSpec:
    """Default working model: the covariates the corresponding study fits."""
    if family in (DgpFamily.ROBUSTNESS, DgpFamily.CASE_1_1):
        return ModelSpec((0,))
    if family is DgpFamily.CASE_1_2:
        return ModelSpec((0, 1))
    return ModelSpec(tuple(range(_N_COVARIATES[family])))


def theta_star_exact(spec: DgpSpec) -> np.ndarray:
    """Population working-model coefficients, exact for these generators.

    The effect curve is linear in the working design for every family, so
    the weighted projection equals the generating coefficients and does not
    depend on the weighting.
    """
    b = spec.beta_star
    return {
        DgpFamily.ROBUSTNESS: np.array([0.0, b]),
        DgpFamily.CASE_1_1: np.array([1.0, b]),
        DgpFamily.CASE_1_2: np.array([1.0, b, b]),
        DgpFamily.CASE_2_1: np.array([1.0, b, 0.0, 0.0, 0.0]),
        DgpFamily.CASE_2_2: np.array([1.0, b, b, 0.0, 0.0]),
        DgpFamily.CASE_2_3: np.array([1.0, b, b, 0.0, 0.0, 0.0, 0.0]),
    }[spec.family]


def _true_logit(spec: DgpSpec, x: np.ndarray) -> np.ndarray:
    if spec.family is DgpFamily.ROBUSTNESS:
        return -x[:, 0] + spec.alpha_star * x[:, 1]
    if spec.family in (DgpFamily.CASE_1_1, DgpFamily.CASE_2_1):
        return -x[:, 0]
    return -x[:, 0] + x[:, 1]


def _effect_curve(spec: DgpSpec, x: np.ndarray) -> np.ndarray:
    b = spec.beta_star
    if spec.family is DgpFamily.ROBUSTNESS:
        return b * x[:, 0]
    if spec.family is DgpFamily.CASE_1_1:
        return 1.0 + b * x[:, 0]
    if spec.family is DgpFamily.CASE_1_2:
        return 1.0 + b * (x[:, 0] + x[:, 1])
    full = np.hstack([np.ones((x.shape[0], 1)), x])
    return full @ theta_star_exact(spec)


def generate(spec: DgpSpec, rng: np.random.Generator) -> tuple[Dataset, TruthRecord]:
    """Draw one dataset plus its hidden truth record.

    Draw order is fixed (covariates, assignment, baseline, the two noise
    vectors) so a given stream always yields the same sample.
    """
    n, k = spec.n, spec.n_covariates
    x = rng.uniform(0.0, 2.0, size=(n, k))
    e1 = 1.0 / (1.0 + np.exp(-_true_logit(spec, x)))
    d = rng.random(n) < e1
    y0 = rng.standard_normal(n)
    eps0 = rng.standard_normal(n)
    eps1 = rng.standard_normal(n)
    gain = _effect_curve(spec, x)
    y_post = y0 + np.where(d, gain + eps1, eps0)
    dataset = Dataset(
        covariates=x,
        treated=d,
        y_pre=y0,
        y_post=y_post,
        covariate_names=tuple(f"x{j + 1}" for j in range(k)),
    )
    truth = TruthRecord(
        e1_true=e1,
        effect_curve=gain,
        theta_star=theta_star_exact(spec),
        truth_slopes=_TRUTH_SLOPES[spec.family],
    )
    return dataset, truth


def theta_star_oracle(
    spec: DgpSpec,
    mc_size: int = 10**6,
    seed: int | np.random.Generator = 0,
    working: ModelSpec | None = None,
) -> tuple[np.ndarray, float]:
    """Monte Carlo solve of the population weighted normal equations.

    Integrates over fresh covariate draws using the true scores and the true
    effect curve; returns ``(theta_star, att_star)`` where ``att_star`` is
    the treated-population mean of the fitted curve (computed by importance
    weighting with the true scores, so no assignment draws are needed).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    working = working_spec_for(spec.family) if working is None else working
    x = rng.uniform(0.0, 2.0, size=(mc_size, spec.n_covariates))
    e1 = 1.0 / (1.0 + np.exp(-_true_logit(spec, x)))
    a = _effect_curve(spec, x)
    cols = [np.ones((mc_size, 1))] if working.include_intercept else []
    cols.append(x[:, list(working.selected)])
    Xw = np.hstack(cols)
    gram = Xw.T @ (e1[:, None] * Xw) / mc_size
    rhs = Xw.T @ (e1 * a) / mc_size
    try:
        theta = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        raise NumericalError("singular Monte Carlo Gram matrix; increase mc_size") from None
    att = float((e1 * (Xw @ theta)).sum() / e1.sum())
    return theta, att


def bias_term(X, d, delta, e1_hat, theta_hat, theta_star, weighted: bool) -> float:
    """One replication's contribution to the risk-optimism Monte Carlo.

    ``2 sum_i w_i (rho_i delta_i - x_i' theta*) x_i'(theta_hat - theta*)``
    where ``w_i = e1_hat_i`` when ``weighted`` (estimated-score risk) and
    ``w_i = 1`` otherwise (plain squared-error risk, used with known scores).
    """
    rho = rho_weights(e1_hat, d)
    eps = rho * np.asarray(delta, dtype=float) - X @ theta_star
    shift = X @ (np.asarray(theta_hat) - np.asarray(theta_star))
    w = e1_hat if weighted else np.ones_like(eps)
    return 2.0 * float(np.sum(w * eps * shift))


def empirical_risk(theta_hat, theta_star, X, e1_true) -> float:
    """Weighted squared distance between fitted and true effect curves."""
    X = np.asarray(X, dtype=float)
    gap = X @ (np.asarray(theta_star, dtype=float) - np.asarray(theta_hat, dtype=float))
    return float(np.sum(np.asarray(e1_true, dtype=float) * gap * gap))


def tp_fp(selected: ModelSpec | tuple[int, ...], truth_slopes: tuple[int, ...]) -> dict[str, int]:
    """True/false positive counts of a selected covariate set (intercept excluded)."""
    chosen = set(selected.selected if isinstance(selected, ModelSpec) else selected)
    truth = set(truth_slopes)
    return {"tp": len(chosen & truth), "fp": len(chosen - truth)}


# ---------------------------------------------------------------------------
# Per-replication workers
# ---------------------------------------------------------------------------


def _fit_mode(X, X_ps, d, dlt, mode: PsMode, weighting: Weighting, e1_true=None):
    """Fit the scores (on the slope-only design) and the effect model."""
    if mode is PsMode.KNOWN:
        e1, ps_fit = np.asarray(e1_true, dtype=float), None
    elif mode is PsMode.MLE:
        ps_fit = fit_mle(X_ps, d)
        e1 = predict_e1(ps_fit.model, X_ps)
    else:
        ps_fit = fit_cbd(X_ps, d, weighting=weighting)
        if not ps_fit.converged:
            raise NumericalError("balance-moment fit did not converge")
        e1 = predict_e1(ps_fit.model, X_ps)
    theta_fit = fit_theta(X, d, dlt, e1, ps_mode=mode, ps_fit=ps_fit)
    return e1, ps_fit, theta_fit


def _designs(dataset: Dataset, working: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    X = design_matrix(dataset, working)
    X_ps = design_matrix(dataset, ModelSpec(working.selected, include_intercept=False))
    return X, X_ps


def _rep_att(spec: DgpSpec, rng) -> dict[str, float]:
    dataset, truth = generate(spec, rng)
    working = working_spec_for(spec.family)
    X = design_matrix(dataset, working)
    # The misspecification study models the assignment on the full working
    # design, intercept included.
    X_ps = X
    d = dataset.treated
    dlt = delta_of(dataset)
    out = {}
    for label, mode, weighting in (
        ("cbd-id", PsMode.CBD, Weighting.IDENTITY),
        ("cbd-opt", PsMode.CBD, Weighting.OPTIMAL),
        ("mle", PsMode.MLE, Weighting.IDENTITY),
    ):
        # One estimator failing (typically a degenerate optimal weight) does
        # not discard the replication for the others.
        try:
            _, _, theta_fit = _fit_mode(X, X_ps, d, dlt, mode, weighting)
            out[label] = theta_fit.att
        except NumericalError:
            out[label] = np.nan
    return out


def _rep_bias(spec: DgpSpec, mode: PsMode, weighting: Weighting, rng) -> dict[str, float]:
    dataset, truth = generate(spec, rng)
    working = working_spec_for(spec.family)
    X, X_ps = _designs(dataset, working)
    d = dataset.treated
    dlt = delta_of(dataset)
    e1, ps_fit, theta_fit = _fit_mode(X, X_ps, d, dlt, mode, weighting, e1_true=truth.e1_true)
    theta = theta_fit.theta
    # Known-score cells report the plain squared-error-risk convention
    # (weight_power=1 penalty, unweighted truth term); estimated-score cells
    # report the weighted-risk convention matching their criteria.
    if mode is PsMode.KNOWN:
        proposal = penalty_known(X, d, dlt, e1, theta)
    elif mode is PsMode.MLE:
        proposal = penalty_mle(X, d, dlt, ps_fit, theta, X_ps=X_ps)
    else:
        proposal = penalty_cbd(X, d, dlt, ps_fit, theta, X_ps=X_ps)
    return {
        "true": bias_term(
            X, d, dlt, e1, theta, truth.theta_star, weighted=mode is not PsMode.KNOWN
        ),
        "proposal": proposal,
        "qicw": qicw_penalty(d, dlt, working.dimension),
    }


def _rep_sel(spec: DgpSpec, mode: PsMode, weighting: Weighting, rng) -> dict[str, float]:
    dataset, truth = generate(spec, rng)
    candidates = tuple(range(spec.n_covariates))
    config = PsConfig(
        mode=mode,
        e1_known=truth.e1_true if mode is PsMode.KNOWN else None,
        weighting=weighting,
    )
    full = ModelSpec(candidates)
    X_full = design_matrix(dataset, full)
    cache: dict = {}
    out: dict[str, float] = {}
    kinds = {
        "proposal": {
            PsMode.KNOWN: CriterionKind.PROPOSED_KNOWN,
            PsMode.MLE: CriterionKind.PROPOSED_MLE,
            PsMode.CBD: CriterionKind.PROPOSED_CBD,
        }[mode],
        "qicw": CriterionKind.QICW,
    }
    for label, kind in kinds.items():
        result = forward_select(dataset, candidates, kind, config, cache=cache)
        padded = np.zeros(full.dimension)
        padded[0] = result.final_fit.theta[0]
        for slot, cov in enumerate(result.final_spec.selected, start=1):
            padded[1 + cov] = result.final_fit.theta[slot]
        counts = tp_fp(result.final_spec, truth.truth_slopes)
        out[f"{label}_risk"] = empirical_risk(padded, truth.theta_star, X_full, truth.e1_true)
        out[f"{label}_tp"] = float(counts["tp"])
        out[f"{label}_fp"] = float(counts["fp"])
    return out


def true_bias_oracle(
    spec: DgpSpec,
    mode: PsMode,
    weighting: Weighting = Weighting.IDENTITY,
    reps: int = 1000,
    seed: int = 0,
) -> float:
    """Monte Carlo estimate of the risk optimism of one estimator setup."""
    values = []
    for r in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, r)))
        values.append(_rep_bias(spec, mode, weighting, rng)["true"])
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Table harness
# ---------------------------------------------------------------------------

_BETAS = (0.1, 0.5, 1.0, 3.0)
_ALPHAS = (1.0, 3.0)
_NS = (200, 400, 600)
_BIAS_FAMILIES = (DgpFamily.CASE_1_1, DgpFamily.CASE_1_2)
_SEL_FAMILIES = (DgpFamily.CASE_2_1, DgpFamily.CASE_2_2, DgpFamily.CASE_2_3)


@dataclass(frozen=True)
class _TableDef:
    index: int
    kind: str  # "att" | "bias" | "sel"
    mode: PsMode | None
    weighting: Weighting


TABLE_IDS: dict[str, _TableDef] = {
    "att-comparison": _TableDef(0, "att", None, Weighting.IDENTITY),
    "bias-known": _TableDef(1, "bias", PsMode.KNOWN, Weighting.IDENTITY),
    "bias-cbd-id": _TableDef(2, "bias", PsMode.CBD, Weighting.IDENTITY),
    "bias-mle": _TableDef(3, "bias", PsMode.MLE, Weighting.IDENTITY),
    "sel-known": _TableDef(4, "sel", PsMode.KNOWN, Weighting.IDENTITY),
    "sel-cbd-id": _TableDef(5, "sel", PsMode.CBD, Weighting.IDENTITY),
    "sel-cbd-opt": _TableDef(6, "sel", PsMode.CBD, Weighting.OPTIMAL),
    "sel-mle": _TableDef(7, "sel", PsMode.MLE, Weighting.IDENTITY),
}


def _cells(table: _TableDef) -> list[dict]:
    cells = []
    if table.kind == "att":
        for beta in _BETAS:
            for alpha in _ALPHAS:
                for n in _NS:
                    cells.append(
                        {"family": DgpFamily.ROBUSTNESS, "beta": beta, "alpha": alpha, "n": n}
                    )
    else:
        families = _BIAS_FAMILIES if table.kind == "bias" else _SEL_FAMILIES
        for family in families:
            for beta in _BETAS:
                for n in _NS:
                    cells.append({"family": family, "beta": beta, "alpha": None, "n": n})
    return cells


def _cell_spec(cell: dict) -> DgpSpec:
    return DgpSpec(
        family=cell["family"], beta_star=cell["beta"], n=cell["n"], alpha_star=cell["alpha"]
    )


def _run_one(args) -> tuple[int, int, dict | None, str | None]:
    table_id, cell, master_seed, cell_idx, rep = args
    table = TABLE_IDS[table_id]
    spec = _cell_spec(cell)
    rng = np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(table.index, cell_idx, rep))
    )
    try:
        if table.kind == "att":
            values = _rep_att(spec, rng)
        elif table.kind == "bias":
            values = _rep_bias(spec, table.mode, table.weighting, rng)
        else:
            values = _rep_sel(spec, table.mode, table.weighting, rng)
        return cell_idx, rep, values, None
    except NumericalError as err:
        return cell_idx, rep, None, f"{type(err).__name__}: {err}"


@dataclass
class CellReport:
    key: dict
    stats: dict[str, float]
    reps_used: int
    failures: tuple[tuple[int, str], ...] = ()
    raw: dict[str, list[float]] | None = None


@dataclass
class McReport:
    table_id: str
    reps: int
    seed: int
    cells: list[CellReport] = field(default_factory=list)

    @property
    def failure_rate(self) -> float:
        failed = sum(len(c.failures) for c in self.cells)
        total = self.reps * len(self.cells)
        return failed / total if total else 0.0

    def to_json_dict(self) -> dict:
        return {
            "schema": 1,
            "table": self.table_id,
            "reps": self.reps,
            "seed": self.seed,
            "failure_rate": self.failure_rate,
            "cells": [
                {
                    "key": {
                        k: (v.value if isinstance(v, DgpFamily) else v)
                        for k, v in c.key.items()
                    },
                    "stats": c.stats,
                    "reps_used": c.reps_used,
                    "failures": list(c.failures),
                    **({"raw": c.raw} if c.raw is not None else {}),
                }
                for c in self.cells
            ],
        }


def _aggregate_att(cell, values, att_true) -> dict[str, float]:
    stats = {"true": att_true}
    for label in ("cbd-id", "cbd-opt", "mle"):
        arr = np.array([v[label] for v in values])
        ok = arr[np.isfinite(arr)]
        lo, hi = np.percentile(ok, [2.5, 97.5], method="linear")
        stats[f"{label}_mean"] = float(ok.mean())
        stats[f"{label}_lo"] = float(lo)
        stats[f"{label}_hi"] = float(hi)
        stats[f"{label}_failures"] = float(arr.size - ok.size)
    return stats


def run_table(
    table_id: str,
    reps: int = 500,
    seed: int = 0,
    jobs: int = 1,
    dump_raw: bool = False,
    max_failure_rate: float = 0.01,
) -> McReport:
    """Run every cell of one simulation-study table grid.

    Per-replication streams are keyed by (seed, cell, replication), and the
    aggregation is a fixed-order reduction, so any ``jobs`` count produces
    the same report bit for bit.  A failure rate above ``max_failure_rate``
    raises :class:`NumericalError`.
    """
    if table_id not in TABLE_IDS:
        raise SpecError(f"unknown table {table_id!r}; valid: {sorted(TABLE_IDS)}")
    table = TABLE_IDS[table_id]
    cells = _cells(table)
    work = [
        (table_id, cell, seed, cell_idx, rep)
        for cell_idx, cell in enumerate(cells)
        for rep in range(reps)
    ]
    results: dict[tuple[int, int], tuple[dict | None, str | None]] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell_idx, rep, values, err in pool.map(_run_one, work, chunksize=16):
                results[(cell_idx, rep)] = (values, err)
    else:
        for item in work:
            cell_idx, rep, values, err = _run_one(item)
            results[(cell_idx, rep)] = (values, err)

    report = McReport(table_id=table_id, reps=reps, seed=seed)
    for cell_idx, cell in enumerate(cells):
        values, failures = [], []
        for rep in range(reps):
            v, err = results[(cell_idx, rep)]
            if err is None:
                values.append(v)
            else:
                failures.append((rep, err))
        if table.kind == "att":
            spec = _cell_spec(cell)
            oracle_rng = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(table.index, cell_idx, 1 << 20))
            )
            _, att_true = theta_star_oracle(spec, seed=oracle_rng)
            stats = _aggregate_att(cell, values, att_true)
            for rep, v in enumerate(values):
                for label, value in v.items():
                    if not np.isfinite(value):
                        failures.append((rep, f"{label}: fit failed"))
        else:
            keys = sorted(values[0]) if values else []
            stats = {k: float(np.mean([v[k] for v in values])) for k in keys}
        raw = None
        if dump_raw:
            keys = sorted(values[0]) if values else []
            raw = {k: [float(v[k]) for v in values] for k in keys}
        report.cells.append(
            CellReport(
                key=cell,
                stats=stats,
                reps_used=len(values),
                failures=tuple(failures),
                raw=raw,
            )
        )
    if report.failure_rate > max_failure_rate:
        raise NumericalError(
            f"replication failure rate {report.failure_rate:.2%} exceeds "
            f"{max_failure_rate:.2%}"
        )
    return report


def render_report(report: McReport, fmt: str = "md") -> str:
    """Render a report as aligned markdown, CSV, or JSON text."""
    if fmt == "json":
        return json.dumps(report.to_json_dict(), indent=2)
    rows = []
    header: list[str] = []
    for cell in report.cells:
        key = {
            k: (v.value if isinstance(v, DgpFamily) else v)
            for k, v in cell.key.items()
            if v is not None
        }
        row = {**key, **{k: f"{v:.4g}" for k, v in cell.stats.items()}}
        if not header:
            header = list(row)
        rows.append(row)
    if fmt == "csv":
        lines = [",".join(header)]
        lines += [",".join(str(r.get(h, "")) for h in header) for r in rows]
        return "\n".join(lines) + "\n"
    widths = {h: max(len(h), *(len(str(r.get(h, ""))) for r in rows)) for h in header}
    lines = ["| " + " | ".join(h.ljust(widths[h]) for h in header) + " |"]
    lines.append("|" + "|".join("-" * (widths[h] + 2) for h in header) + "|")
    for r in rows:
        lines.append(
            "| " + " | ".join(str(r.get(h, "")).ljust(widths[h]) for h in header) + " |"
        )
    return "\n".join(lines) + "\n"
