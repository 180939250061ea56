"""Risk-based model selection criteria and the forward-selection driver.

Each criterion is "goodness of fit + penalty", where the penalty is a
plug-in estimate of the optimism (the expected gap between in-sample fit and
risk) of the weighted least-squares effect estimator.  The optimism accounts
for the sampling noise of the inverse-propensity-weighted changes, and, when
the propensity scores are themselves estimated, for the first-order effect of
that estimation step on the fitted coefficients.

Risk conventions
----------------
Every proposed criterion pairs the propensity-weighted goodness of fit with
the optimism estimate of the weighted risk.  :func:`penalty_known` also
offers ``weight_power=1``, the optimism of the plain squared-error risk of
the same weighted fit, which the bias-evaluation study reports.  The
comparator criterion ``qicw`` uses the unweighted goodness of fit with a
variance-times-dimension penalty scaled by the treated share.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import Dataset, ModelSpec, design_matrix, delta as delta_of
from .errors import DegenerateGroupError, NumericalError, RankError, SpecError
from .estimator import PsMode, ThetaFit, fit_theta, rho_weights
from .propensity import CbdFit, MleFit, Weighting, fit_cbd, fit_mle, moment_h, moment_jacobian, predict_e1

__all__ = [
    "CriterionKind",
    "CriterionValue",
    "PsConfig",
    "SelectionResult",
    "gof_weighted",
    "gof_unweighted",
    "penalty_known",
    "penalty_cbd",
    "penalty_mle",
    "penalty_no_correction",
    "proposed_for",
    "sigma_hat_sq",
    "qicw_penalty",
    "qicw",
    "evaluate_criterion",
    "forward_select",
]


class CriterionKind(enum.Enum):
    PROPOSED_KNOWN = "proposed-known"
    PROPOSED_CBD = "proposed-cbd"
    PROPOSED_MLE = "proposed-mle"
    QICW = "qicw"


def proposed_for(mode: PsMode) -> CriterionKind:
    return {
        PsMode.KNOWN: CriterionKind.PROPOSED_KNOWN,
        PsMode.MLE: CriterionKind.PROPOSED_MLE,
        PsMode.CBD: CriterionKind.PROPOSED_CBD,
    }[mode]


def gof_weighted(X, d, delta, e1, theta) -> float:
    """Propensity-weighted squared residual sum of the effect fit."""
    resid = rho_weights(e1, d) * delta - X @ theta
    return float(np.sum(e1 * resid * resid))


def gof_unweighted(X, d, delta, e1, theta) -> float:
    """Plain squared residual sum of the effect fit."""
    resid = rho_weights(e1, d) * delta - X @ theta
    return float(np.sum(resid * resid))


def _weighted_gram(X, e1) -> np.ndarray:
    return X.T @ (e1[:, None] * X)


def penalty_known(X, d, delta, e1, theta, weight_power: int = 1) -> float:
    """Optimism estimate for the fit when the propensity scores are known.

    Computes ``2 tr(S^-1 B)`` with ``S = sum e1 x x'`` and
    ``B = sum (rho^2 delta^2 - (x'theta)^2) e1^w x x'``.  ``weight_power=1``
    (default) targets the plain squared-error risk of the weighted fit;
    ``weight_power=2`` targets the propensity-weighted risk.  The bracket is
    signed, so the value may be negative in finite samples; it is returned
    unmodified.
    """
    X = np.asarray(X, dtype=float)
    e1 = np.asarray(e1, dtype=float)
    rho = rho_weights(e1, d)
    fitted = X @ theta
    bracket = (rho * delta) ** 2 - fitted**2
    S = _weighted_gram(X, e1)
    B = X.T @ ((bracket * e1**weight_power)[:, None] * X)
    try:
        return 2.0 * float(np.trace(np.linalg.solve(S, B)))
    except np.linalg.LinAlgError:
        raise RankError("singular weighted Gram matrix in penalty computation") from None


def _m_matrix(X_work, X_ps, d, delta, e1, theta) -> np.ndarray:
    """Sensitivity of the weighted residual sum to the propensity parameters.

    Row space follows the working design, column space the propensity
    design: (1/n) sum e1 e0 [ (d-1) delta / e0^2 - x_work' theta ] x_work x_ps'.
    """
    e0 = 1.0 - e1
    df = np.asarray(d).astype(float)
    b = (df - 1.0) * delta / (e0 * e0) - X_work @ theta
    w = e1 * e0 * b
    return (X_work.T @ (w[:, None] * X_ps)) / X_work.shape[0]


def _trace_penalty(X_work, e1, V_rows) -> float:
    n = X_work.shape[0]
    L = _weighted_gram(X_work, e1) / n
    Vn = V_rows.T @ V_rows / n
    try:
        return 2.0 * float(np.trace(np.linalg.solve(L, Vn)))
    except np.linalg.LinAlgError:
        raise RankError("singular weighted Gram matrix in penalty computation") from None


def penalty_cbd(
    X, d, delta, cbd: CbdFit, theta, X_ps: np.ndarray | None = None
) -> float:
    """Optimism estimate when the scores come from balance-moment GMM.

    Per-unit influence rows combine the weighted residual term with a
    correction for the GMM estimation step:
    ``V_i = e1 (rho delta - x'theta) x - M (G'WG)^-1 G'W h_i``.
    The penalty is ``2 tr(L^-1 (1/n) sum V_i V_i')`` with
    ``L = (1/n) sum e1 x x'``.
    """
    X = np.asarray(X, dtype=float)
    X_ps = X if X_ps is None else np.asarray(X_ps, dtype=float)
    if not cbd.converged:
        raise NumericalError("penalty_cbd requires a converged GMM fit")
    e1 = predict_e1(cbd.model, X_ps)
    rho = rho_weights(e1, d)
    resid = rho * delta - X @ theta
    H = moment_h(cbd.model.alpha, X_ps, d)
    G = moment_jacobian(cbd.model.alpha, X_ps, d)
    W = cbd.weight_matrix
    GtW = G.T @ W
    try:
        K = np.linalg.solve(GtW @ G, GtW)
    except np.linalg.LinAlgError:
        raise RankError("G'WG is singular in the GMM optimism correction") from None
    M = _m_matrix(X, X_ps, d, delta, e1, theta)
    V = (e1 * resid)[:, None] * X - H @ K.T @ M.T
    return _trace_penalty(X, e1, V)


def penalty_mle(
    X, d, delta, mle: MleFit, theta, X_ps: np.ndarray | None = None
) -> float:
    """Optimism estimate when the scores come from maximum likelihood.

    The estimation-step correction projects the weighted residual influence
    onto the logistic score (d - e1) x, the first-order effect of the MLE:
    ``V_i = e1 (rho delta - x'theta) x + M I^-1 s_i``.  Because
    ``-M = E[(influence)(score)']`` under the model, the correction is a
    projection residual and shrinks the optimism relative to known scores.
    """
    X = np.asarray(X, dtype=float)
    X_ps = X if X_ps is None else np.asarray(X_ps, dtype=float)
    if not mle.converged:
        raise NumericalError("penalty_mle requires a converged likelihood fit")
    e1 = predict_e1(mle.model, X_ps)
    rho = rho_weights(e1, d)
    resid = rho * delta - X @ theta
    score_rows = ((np.asarray(d).astype(float) - e1))[:, None] * X_ps
    M = _m_matrix(X, X_ps, d, delta, e1, theta)
    try:
        correction = score_rows @ np.linalg.solve(mle.fisher_information, M.T)
    except np.linalg.LinAlgError:
        raise RankError("singular Fisher information in the optimism correction") from None
    V = (e1 * resid)[:, None] * X + correction
    return _trace_penalty(X, e1, V)


def sigma_hat_sq(d, delta) -> float:
    """Sum of the within-group population variances of the outcome change."""
    d = np.asarray(d).astype(bool)
    delta = np.asarray(delta, dtype=float)
    n1 = int(d.sum())
    n0 = int((~d).sum())
    if n1 < 2 or n0 < 2:
        raise DegenerateGroupError(
            f"need at least two units per group for the change variance (n1={n1}, n0={n0})"
        )
    v1 = float(np.var(delta[d]))
    v0 = float(np.var(delta[~d]))
    return v1 + v0


def qicw_penalty(d, delta, p_dim: int, count_intercept: bool = True) -> float:
    """Comparator penalty: 2 sigma^2 times the parameter count, scaled by the
    treated share.

    The underlying quasi-likelihood is a treated-group objective, so its
    effective parameter count enters scaled by n1/n.  ``count_intercept``
    controls whether the intercept is part of ``p_dim`` (callers pass the
    full dimension; with ``count_intercept=False`` one slot is removed).
    """
    d = np.asarray(d).astype(bool)
    p_eff = p_dim if count_intercept else max(p_dim - 1, 0)
    share = float(d.mean())
    return 2.0 * sigma_hat_sq(d, delta) * p_eff * share


def qicw(X, d, delta, e1, theta, p_dim: int, count_intercept: bool = True) -> tuple[float, float]:
    """Comparator criterion (gof, penalty): unweighted residual sum plus
    the scaled variance penalty."""
    return (
        gof_unweighted(X, d, delta, e1, theta),
        qicw_penalty(d, delta, p_dim, count_intercept=count_intercept),
    )


@dataclass(frozen=True)
class PsConfig:
    """How propensity scores are produced inside criterion evaluation.

    ``ps_intercept`` controls whether the propensity design carries the
    working model's intercept column.  The default (False) fits the
    assignment model on the covariate columns alone, which keeps the
    log-odds through the origin; the effect model keeps its intercept either
    way.

    ``refit_per_spec`` matters only inside forward selection.  The default
    (False) estimates the scores once on the full candidate design and keeps
    them fixed, so every candidate spec is scored against the same weighted
    risk functional; refitting per spec would change the weights (and hence
    the risk target) between specs and make totals incomparable.
    """

    mode: PsMode
    e1_known: np.ndarray | None = None
    weighting: Weighting = Weighting.IDENTITY
    refit_per_spec: bool = False
    ps_intercept: bool = False
    qicw_count_intercept: bool = True
    tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if self.mode is PsMode.KNOWN and self.e1_known is None:
            raise SpecError("known propensity mode needs the e1_known vector")


@dataclass(frozen=True)
class CriterionValue:
    gof: float
    penalty: float
    kind: CriterionKind
    ps_mode: PsMode
    model_spec: ModelSpec

    @property
    def total(self) -> float:
        return self.gof + self.penalty


@dataclass(frozen=True)
class SelectionResult:
    """Forward-selection trace: the path of accepted additions and the final fit."""

    path: tuple[tuple[int | None, CriterionValue], ...]
    final_spec: ModelSpec
    final_fit: ThetaFit
    skipped: tuple[tuple[int, str], ...] = ()

    @property
    def selected_indices(self) -> tuple[int, ...]:
        return self.final_spec.selected


@dataclass
class _SpecFit:
    """Everything fit once per candidate spec and shared across criteria."""

    spec: ModelSpec
    X: np.ndarray
    X_ps: np.ndarray
    e1: np.ndarray
    ps_fit: CbdFit | MleFit | None
    theta_fit: ThetaFit


def _ps_design(dataset: Dataset, spec: ModelSpec, config: PsConfig) -> np.ndarray:
    ps_spec = ModelSpec(spec.selected, include_intercept=config.ps_intercept)
    if ps_spec.dimension == 0:
        return np.empty((dataset.n, 0))
    return design_matrix(dataset, ps_spec)


def _fit_spec(
    dataset: Dataset,
    spec: ModelSpec,
    config: PsConfig,
    cache: dict | None,
    fixed_ps: _SpecFit | None = None,
) -> _SpecFit:
    key = (spec.selected, spec.include_intercept)
    if cache is not None and key in cache:
        return cache[key]
    X = design_matrix(dataset, spec)
    d = dataset.treated
    dlt = delta_of(dataset)
    if config.mode is PsMode.KNOWN:
        e1, ps_fit, X_ps = np.asarray(config.e1_known, dtype=float), None, X
    elif fixed_ps is not None:
        e1, ps_fit, X_ps = fixed_ps.e1, fixed_ps.ps_fit, fixed_ps.X_ps
    else:
        X_ps = _ps_design(dataset, spec, config)
        if X_ps.shape[1] == 0:
            # No assignment model to fit: a constant score, the treated share.
            e1, ps_fit = np.full(dataset.n, float(d.mean())), None
        elif config.mode is PsMode.MLE:
            ps_fit = fit_mle(X_ps, d, tol=config.tol, max_iter=config.max_iter)
            e1 = predict_e1(ps_fit.model, X_ps)
        else:
            ps_fit = fit_cbd(
                X_ps, d, weighting=config.weighting, tol=config.tol, max_iter=config.max_iter
            )
            e1 = predict_e1(ps_fit.model, X_ps)
    theta_fit = fit_theta(
        X, d, dlt, e1,
        ps_mode=config.mode,
        ps_fit=ps_fit,
        column_names=spec.column_names(dataset),
    )
    bundle = _SpecFit(spec=spec, X=X, X_ps=X_ps, e1=e1, ps_fit=ps_fit, theta_fit=theta_fit)
    if cache is not None:
        cache[key] = bundle
    return bundle


def penalty_no_correction(X, d, delta, e1, theta) -> float:
    """Optimism of the weighted fit with no estimation-step correction.

    The common reduction of :func:`penalty_cbd` and :func:`penalty_mle` when
    the assignment-model sensitivity vanishes (e.g. a constant score).
    """
    resid = rho_weights(e1, d) * np.asarray(delta, dtype=float) - X @ theta
    V = (e1 * resid)[:, None] * X
    return _trace_penalty(X, e1, V)


def _criterion_from_fit(
    dataset: Dataset, bundle: _SpecFit, kind: CriterionKind, config: PsConfig
) -> CriterionValue:
    X, e1, theta = bundle.X, bundle.e1, bundle.theta_fit.theta
    d = dataset.treated
    dlt = delta_of(dataset)
    if kind is CriterionKind.QICW:
        gof, pen = qicw(X, d, dlt, e1, theta, bundle.spec.dimension,
                        count_intercept=config.qicw_count_intercept)
    elif kind is CriterionKind.PROPOSED_KNOWN:
        gof = gof_weighted(X, d, dlt, e1, theta)
        pen = penalty_known(X, d, dlt, e1, theta, weight_power=2)
    elif kind is CriterionKind.PROPOSED_CBD:
        gof = gof_weighted(X, d, dlt, e1, theta)
        if bundle.ps_fit is None:
            pen = penalty_no_correction(X, d, dlt, e1, theta)
        else:
            pen = penalty_cbd(X, d, dlt, bundle.ps_fit, theta, X_ps=bundle.X_ps)
    elif kind is CriterionKind.PROPOSED_MLE:
        gof = gof_weighted(X, d, dlt, e1, theta)
        if bundle.ps_fit is None:
            pen = penalty_no_correction(X, d, dlt, e1, theta)
        else:
            pen = penalty_mle(X, d, dlt, bundle.ps_fit, theta, X_ps=bundle.X_ps)
    else:
        raise SpecError(f"unknown criterion kind {kind}")
    return CriterionValue(gof=gof, penalty=pen, kind=kind, ps_mode=config.mode, model_spec=bundle.spec)


def evaluate_criterion(
    dataset: Dataset,
    spec: ModelSpec,
    kind: CriterionKind,
    config: PsConfig,
    cache: dict | None = None,
) -> CriterionValue:
    """Fit the propensity and effect models on ``spec`` and score them.

    The propensity model is fit on the same design as the working effect
    model (refit for every spec unless ``config.refit_per_spec`` is False, in
    which case callers supply the shared fit through the cache).  A mutable
    ``cache`` dict shares per-spec fits between criterion kinds.
    """
    if kind is not CriterionKind.QICW and kind is not proposed_for(config.mode):
        raise SpecError(f"criterion {kind} does not match propensity mode {config.mode}")
    bundle = _fit_spec(dataset, spec, config, cache)
    return _criterion_from_fit(dataset, bundle, kind, config)


def forward_select(
    dataset: Dataset,
    candidates: tuple[int, ...] | list[int],
    kind: CriterionKind,
    config: PsConfig,
    cache: dict | None = None,
) -> SelectionResult:
    """Greedy covariate addition minimizing the criterion.

    Starts from the intercept-only model; each round scores the current spec
    plus each unused candidate and accepts the best addition only if it
    strictly lowers the criterion (ties break to the lowest candidate
    index).  Candidates whose fit fails (rank loss, separation) are skipped
    with a diagnostic rather than aborting the search.
    """
    if not len(candidates):
        raise SpecError("forward selection needs at least one candidate")
    candidates = sorted(int(c) for c in candidates)
    if cache is None:
        cache = {}

    fixed_ps = None
    if not config.refit_per_spec and config.mode is not PsMode.KNOWN:
        full = ModelSpec(tuple(candidates), include_intercept=True)
        fixed_ps = _fit_spec(dataset, full, config, cache=None)
        cache.setdefault((full.selected, full.include_intercept), fixed_ps)

    def evaluate(spec: ModelSpec) -> CriterionValue:
        key = (spec.selected, spec.include_intercept)
        if key not in cache:
            cache[key] = _fit_spec(dataset, spec, config, cache=None, fixed_ps=fixed_ps)
        return _criterion_from_fit(dataset, cache[key], kind, config)

    spec = ModelSpec((), include_intercept=True)
    current = evaluate(spec)
    path: list[tuple[int | None, CriterionValue]] = [(None, current)]
    skipped: list[tuple[int, str]] = []
    remaining = list(candidates)

    while remaining:
        best: tuple[float, int, CriterionValue] | None = None
        for idx in remaining:
            try:
                value = evaluate(spec.with_added(idx))
            except (NumericalError, SpecError) as err:
                skipped.append((idx, f"{type(err).__name__}: {err}"))
                continue
            if best is None or value.total < best[0]:
                best = (value.total, idx, value)
        if best is None or best[0] >= current.total:
            break
        _, idx, value = best
        spec = spec.with_added(idx)
        current = value
        path.append((idx, value))
        remaining.remove(idx)

    final_key = (spec.selected, spec.include_intercept)
    final_fit = cache[final_key].theta_fit
    return SelectionResult(
        path=tuple(path),
        final_spec=spec,
        final_fit=final_fit,
        skipped=tuple(skipped),
    )
