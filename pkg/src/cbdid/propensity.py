"""Logistic propensity models fit by maximum likelihood or moment balancing.

Two fitting routes are provided for the treatment-assignment model
``e1(x; alpha) = sigmoid(x' alpha)``:

* :func:`fit_mle` -- Newton-Raphson maximum likelihood.
* :func:`fit_cbd` -- GMM on second-order balance moments: the weighted
  cross-moment matrix of the covariates is matched between treatment and
  control groups.  Over-identification (q = p(p+1) moments for p parameters)
  means the moments are driven approximately, not exactly, to zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.optimize
from scipy.special import expit

from .data import _vech_indices
from .errors import DimensionError, RankError, SeparationError

__all__ = [
    "EPS_CLIP",
    "LogisticPropensity",
    "MleFit",
    "CbdFit",
    "Weighting",
    "predict_e1",
    "predict_e0",
    "fit_mle",
    "moment_h",
    "moment_jacobian",
    "gmm_objective",
    "fit_cbd",
]

# Probabilities are clamped away from {0, 1} so that 1/e1 and 1/e0 stay
# finite; clamped predictions are counted in the fit diagnostics.
EPS_CLIP = 1e-10


@dataclass(frozen=True)
class LogisticPropensity:
    """Coefficients of the logistic treatment-assignment model."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if a.ndim != 1:
            raise DimensionError("alpha must be a vector")
        object.__setattr__(self, "alpha", a)

    @property
    def dimension(self) -> int:
        return self.alpha.size


def predict_e1(model: LogisticPropensity, X: np.ndarray) -> np.ndarray:
    """Treatment probabilities sigmoid(X @ alpha), clipped to the open unit interval."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.dimension:
        raise DimensionError(
            f"design has {X.shape} columns, alpha has length {model.dimension}"
        )
    return np.clip(expit(X @ model.alpha), EPS_CLIP, 1.0 - EPS_CLIP)


def predict_e0(model: LogisticPropensity, X: np.ndarray) -> np.ndarray:
    """Control probabilities, identically 1 - e1."""
    return 1.0 - predict_e1(model, X)


def _check_two_groups(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d).astype(bool)
    if d.all():
        raise SeparationError("all units are treated; both groups are required")
    if not d.any():
        raise SeparationError("no unit is treated; both groups are required")
    return d


def _log_likelihood(z: np.ndarray, d: np.ndarray) -> float:
    # log e1 = -log(1 + exp(-z)), log e0 = -log(1 + exp(z))
    return float(-np.sum(np.logaddexp(0.0, np.where(d, -z, z))))


@dataclass(frozen=True)
class MleFit:
    """Maximum-likelihood fit with score and curvature diagnostics."""

    model: LogisticPropensity
    score_norm: float
    fisher_information: np.ndarray
    iterations: int
    converged: bool
    log_likelihood: float


def _column_scales(X: np.ndarray) -> np.ndarray:
    """Root-mean-square column scales, floored away from zero.

    Fitting in unit-RMS columns keeps Newton/BFGS well conditioned and gives
    the absolute convergence tolerances a scale-free meaning; results are
    mapped back to the raw parameterization exactly.
    """
    s = np.sqrt(np.mean(X * X, axis=0))
    return np.where(s > 0, s, 1.0)


def fit_mle(
    X: np.ndarray,
    d: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> MleFit:
    """Newton-Raphson logistic regression of d on X.

    Convergence means the score sum((d - e1) x), taken on the unit-RMS
    rescaled design, has sup-norm below ``tol``.  Raises
    :class:`SeparationError` when a group is missing or the classes are
    perfectly separable, and :class:`RankError` for a singular Hessian.
    """
    X_raw = np.asarray(X, dtype=float)
    d = _check_two_groups(d)
    n, p = X_raw.shape
    if d.shape != (n,):
        raise DimensionError("d must have one entry per design row")
    if np.linalg.matrix_rank(X_raw) < p:
        raise RankError("design matrix is rank deficient")
    scales = _column_scales(X_raw)
    X = X_raw / scales

    df = d.astype(float)
    alpha = np.zeros(p)
    ll = _log_likelihood(X @ alpha, d)
    score_norm = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        z = X @ alpha
        e1 = expit(z)
        score = X.T @ (df - e1)
        score_norm = float(np.max(np.abs(score)))
        if score_norm < tol:
            break
        w = e1 * (1.0 - e1)
        hess = X.T @ (w[:, None] * X)
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise RankError("singular Hessian in logistic fit") from None
        if score_norm < 1e-4:
            # Inside the quadratic basin the likelihood changes by less than
            # float resolution; take pure Newton steps.
            alpha = alpha + step
        else:
            # Backtracking keeps the likelihood non-decreasing.
            t = 1.0
            for _ in range(30):
                candidate = alpha + t * step
                ll_new = _log_likelihood(X @ candidate, d)
                if np.isfinite(ll_new) and ll_new >= ll:
                    break
                t *= 0.5
            alpha = alpha + t * step
        ll = _log_likelihood(X @ alpha, d)
        if not np.all(np.isfinite(alpha)):
            raise SeparationError("logistic fit diverged (perfect separation?)")

    e1 = np.clip(expit(X @ alpha), EPS_CLIP, 1.0 - EPS_CLIP)
    # Under separation the score also vanishes (perfect classification), so
    # convergence alone does not certify an interior maximum.
    pinned = np.all(e1[d] > 1.0 - 1e-6) and np.all(e1[~d] < 1e-6)
    if pinned or np.max(np.abs(alpha)) > 1e6:
        raise SeparationError(
            "probabilities pinned at the clip bounds: classes are separable"
        )
    alpha_raw = alpha / scales
    fisher = (X_raw.T @ ((e1 * (1.0 - e1))[:, None] * X_raw)) / n
    return MleFit(
        model=LogisticPropensity(alpha_raw),
        score_norm=score_norm,
        fisher_information=fisher,
        iterations=iterations,
        converged=score_norm < tol,
        log_likelihood=ll,
    )


def _xx_vech(X: np.ndarray) -> np.ndarray:
    """n x p(p+1)/2 matrix whose row i is vech(x_i x_i')."""
    r, c = _vech_indices(X.shape[1])
    return X[:, r] * X[:, c]


def moment_h(alpha: np.ndarray, X: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Per-unit balance moments, one row per unit, q = p(p+1) columns.

    Row i stacks vech of the treated-side and control-side balance matrices.
    With s = e1(x_i) those reduce to (d_i - s) vech(x x') and
    -(s / (1 - s)) (d_i - s) vech(x x').  Probabilities are clipped at
    ``EPS_CLIP`` before the control-side ratio is formed.
    """
    X = np.asarray(X, dtype=float)
    d = np.asarray(d).astype(float)
    if X.shape[0] != d.shape[0]:
        raise DimensionError("X and d disagree on the number of units")
    e1 = np.clip(expit(X @ np.asarray(alpha, dtype=float)), EPS_CLIP, 1.0 - EPS_CLIP)
    xxv = _xx_vech(X)
    resid = d - e1
    h1 = resid[:, None] * xxv
    h0 = (-(e1 / (1.0 - e1)) * resid)[:, None] * xxv
    return np.hstack([h1, h0])


def moment_jacobian(alpha: np.ndarray, X: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Analytic q x p Jacobian of the averaged balance moments.

    Uses d e1 / d alpha = e1 (1 - e1) x; matches central finite differences
    of the moment average to high relative accuracy.
    """
    X = np.asarray(X, dtype=float)
    d = np.asarray(d).astype(float)
    n = X.shape[0]
    e1 = np.clip(expit(X @ np.asarray(alpha, dtype=float)), EPS_CLIP, 1.0 - EPS_CLIP)
    e0 = 1.0 - e1
    xxv = _xx_vech(X)
    # d/dalpha of (d - e1): -e1 e0 x; of -(e1/e0)(d - e1): -e1 (d - 2 e1 + e1^2)/e0 x
    g1 = -(e1 * e0)
    g0 = -(e1 * (d - 2.0 * e1 + e1 * e1) / e0)
    top = np.einsum("n,nm,np->mp", g1, xxv, X) / n
    bottom = np.einsum("n,nm,np->mp", g0, xxv, X) / n
    return np.vstack([top, bottom])


def gmm_objective(alpha: np.ndarray, X: np.ndarray, d: np.ndarray, W: np.ndarray) -> float:
    """Quadratic form h_bar' W h_bar of the averaged balance moments."""
    hbar = moment_h(alpha, X, d).mean(axis=0)
    return float(hbar @ W @ hbar)


class Weighting(enum.Enum):
    """GMM weighting matrix choice."""

    IDENTITY = "identity"
    OPTIMAL = "optimal"


@dataclass(frozen=True)
class CbdFit:
    """Balance-moment GMM solution and its diagnostics.

    ``foc_norm`` is the sup-norm of G' W h_bar at the solution; convergence
    means it is at or below the requested tolerance.
    """

    model: LogisticPropensity
    weighting: Weighting
    weight_matrix: np.ndarray
    moment_residual: np.ndarray
    moment_residual_norm: float
    foc_norm: float
    iterations: int
    converged: bool
    objective: float
    objective_at_init: float
    init: np.ndarray
    clipped: int
    degenerate_weight: bool = False


def _moment_pieces(alpha, X, df, xxv):
    """Averaged moments and Jacobian sharing one vech basis computation."""
    n = X.shape[0]
    e1 = np.clip(expit(X @ alpha), EPS_CLIP, 1.0 - EPS_CLIP)
    e0 = 1.0 - e1
    resid = df - e1
    hbar_top = xxv.T @ resid / n
    hbar_bottom = xxv.T @ (-(e1 / e0) * resid) / n
    g1 = -(e1 * e0)
    g0 = -(e1 * (df - 2.0 * e1 + e1 * e1) / e0)
    G_top = np.einsum("n,nm,np->mp", g1, xxv, X) / n
    G_bottom = np.einsum("n,nm,np->mp", g0, xxv, X) / n
    return np.concatenate([hbar_top, hbar_bottom]), np.vstack([G_top, G_bottom])


def _minimize_gmm(
    X: np.ndarray,
    d: np.ndarray,
    W: np.ndarray,
    alpha0: np.ndarray,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, int, float]:
    """Quasi-Newton descent plus a Newton polish on the first-order condition."""
    xxv = _xx_vech(X)
    df = np.asarray(d).astype(float)

    def value_and_grad(alpha):
        hbar, G = _moment_pieces(alpha, X, df, xxv)
        Wh = W @ hbar
        return float(hbar @ Wh), 2.0 * (G.T @ Wh)

    res = scipy.optimize.minimize(
        value_and_grad,
        alpha0,
        jac=True,
        method="BFGS",
        options={"gtol": tol, "maxiter": max_iter},
    )
    alpha = res.x
    iterations = int(res.nit)

    def foc(alpha):
        hbar, G = _moment_pieces(alpha, X, df, xxv)
        return G.T @ (W @ hbar)

    g = foc(alpha)
    # Newton iterations on the first-order condition tighten the BFGS
    # solution to the requested tolerance.
    for _ in range(30):
        if np.max(np.abs(g)) <= tol:
            break
        p = alpha.size
        J = np.empty((p, p))
        for j in range(p):
            h = 1e-6 * (1.0 + abs(alpha[j]))
            ej = np.zeros(p)
            ej[j] = h
            J[:, j] = (foc(alpha + ej) - foc(alpha - ej)) / (2.0 * h)
        try:
            step = np.linalg.solve(J, -g)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(J, -g, rcond=None)
        t = 1.0
        g_norm = np.linalg.norm(g)
        improved = False
        for _ in range(20):
            cand = alpha + t * step
            g_cand = foc(cand)
            if np.linalg.norm(g_cand) < g_norm:
                alpha, g = cand, g_cand
                improved = True
                break
            t *= 0.5
        iterations += 1
        if not improved:
            break
    return alpha, iterations, float(np.max(np.abs(g)))


def fit_cbd(
    X: np.ndarray,
    d: np.ndarray,
    weighting: Weighting = Weighting.IDENTITY,
    init: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> CbdFit:
    """Fit the propensity model by GMM on the second-order balance moments.

    Identity weighting minimizes the plain squared norm of the averaged
    moments from an MLE warm start (zeros if the MLE fails).  Optimal
    weighting is two-step: an identity-weighted pilot, then the inverse of
    the (ridge-stabilized) empirical moment covariance at the pilot.
    """
    X_raw = np.asarray(X, dtype=float)
    d = _check_two_groups(d)
    n, p = X_raw.shape
    if np.linalg.matrix_rank(X_raw) < p:
        raise RankError("design matrix is rank deficient")
    q = p * (p + 1)

    # Fit in unit-RMS columns; identical model, well-conditioned numerics.
    scales = _column_scales(X_raw)
    Xs = X_raw / scales

    if init is None:
        try:
            alpha0 = fit_mle(Xs, d, tol=max(tol, 1e-10)).model.alpha
        except (SeparationError, RankError):
            alpha0 = np.zeros(p)
    else:
        init = np.asarray(init, dtype=float)
        if init.shape != (p,):
            raise DimensionError("init has the wrong length")
        alpha0 = init * scales

    W = np.eye(q)
    degenerate = False
    alpha, iterations, foc_norm = _minimize_gmm(Xs, d, W, alpha0, tol, max_iter)

    if weighting is Weighting.OPTIMAL:
        h_pilot = moment_h(alpha, Xs, d)
        omega = h_pilot.T @ h_pilot / n
        ridge = 1e-8 * np.trace(omega) / q
        if not np.isfinite(np.linalg.cond(omega)) or np.linalg.cond(omega) > 1e12:
            degenerate = True
        W = np.linalg.inv(omega + ridge * np.eye(q))
        W = 0.5 * (W + W.T)
        # Rescale to unit average diagonal: the argmin is unchanged and the
        # first-order-condition tolerance keeps an O(1) meaning.
        W = W / (np.trace(W) / q)
        alpha, extra, foc_norm = _minimize_gmm(Xs, d, W, alpha, tol, max_iter)
        iterations += extra

    hbar_s = moment_h(alpha, Xs, d).mean(axis=0)
    objective = float(hbar_s @ W @ hbar_s)
    objective_at_init = gmm_objective(alpha0, Xs, d, W)
    if objective > objective_at_init:
        # Keep the descent guarantee relative to the start point.
        alpha, objective = alpha0, objective_at_init
        hbar_s = moment_h(alpha, Xs, d).mean(axis=0)
        foc_norm = float(np.max(np.abs(moment_jacobian(alpha, Xs, d).T @ (W @ hbar_s))))

    # Map back to the raw parameterization.  The weighting used, expressed in
    # raw moment coordinates, is D^-1 W D^-1 where D holds the per-moment
    # scales s_i s_j inherited from the column scaling; downstream consumers
    # combining it with raw moments and Jacobians reproduce the scaled-space
    # computation exactly.
    alpha_raw = alpha / scales
    r, c = _vech_indices(p)
    moment_scale = np.concatenate([scales[r] * scales[c]] * 2)
    W_raw = W / np.outer(moment_scale, moment_scale)
    hbar_raw = moment_h(alpha_raw, X_raw, d).mean(axis=0)
    e1_fit = expit(X_raw @ alpha_raw)
    clipped = int(np.sum((e1_fit < EPS_CLIP) | (e1_fit > 1.0 - EPS_CLIP)))
    return CbdFit(
        model=LogisticPropensity(alpha_raw),
        weighting=weighting,
        weight_matrix=W_raw,
        moment_residual=hbar_raw,
        moment_residual_norm=float(np.max(np.abs(hbar_raw))),
        foc_norm=foc_norm,
        iterations=iterations,
        converged=foc_norm <= tol,
        objective=objective,
        objective_at_init=objective_at_init,
        init=alpha0 / scales,
        clipped=clipped,
        degenerate_weight=degenerate,
    )
