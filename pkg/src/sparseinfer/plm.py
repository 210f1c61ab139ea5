"""Treatment-effect inference in the partially linear model.

Four estimation strategies share one problem container: a single penalized
fit of the outcome on treatment plus controls ("lasso"), its OLS refit
("post_lasso"), an OLS refit on controls chosen from the treatment equation
("indirect"), and the double-selection estimator that refits on the union
of controls chosen in both equations.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import penalty as pen
from . import solvers
from .data import Dataset, normalize

__all__ = ["PlmProblem", "PlmFit", "fit_plm", "plm_strategy_lasso",
           "plm_strategy_post_lasso", "plm_strategy_indirect", "plm_double"]

STRATEGIES = ("lasso", "post_lasso", "indirect", "double")


@dataclass(frozen=True)
class PlmProblem:
    """Outcome, scalar treatment and the technical-control matrix.

    `amelioration` lists control indices the analyst forces into the final
    regression of the double-selection estimator.
    """

    y1: np.ndarray
    d: np.ndarray
    x_controls: np.ndarray
    amelioration: tuple = ()
    control_names: tuple = None

    def __post_init__(self):
        y1 = np.asarray(self.y1, dtype=np.float64).ravel()
        d = np.asarray(self.d, dtype=np.float64).ravel()
        x = np.asarray(self.x_controls, dtype=np.float64)
        n = y1.shape[0]
        if d.shape[0] != n or x.shape[0] != n:
            raise ValueError("y1, d and x_controls must share n")
        if not (np.isfinite(y1).all() and np.isfinite(d).all() and np.isfinite(x).all()):
            raise ValueError("non-finite entries")
        amel = tuple(int(j) for j in self.amelioration)
        if any(j < 0 or j >= x.shape[1] for j in amel):
            raise ValueError("amelioration index out of range")
        for name, arr in (("y1", y1), ("d", d), ("x_controls", x)):
            a = np.ascontiguousarray(arr)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "amelioration", amel)

    @property
    def n(self):
        return self.y1.shape[0]

    @property
    def p(self):
        return self.x_controls.shape[1]


@dataclass(frozen=True)
class PlmFit:
    alpha_hat: float
    se: float
    strategy: str
    i1: np.ndarray
    i2: np.ndarray
    i_union: np.ndarray
    sigma_zeta_hat: float
    en_vhat2: float


def _select(dataset, rule, seed, unpenalized):
    """Run the configured feasible selector, returning the penalized fit."""
    if rule.is_sqrt:
        pen_cols = [j for j in range(dataset.p) if j not in unpenalized]
        lam = pen.lambda_sqrt_lasso(dataset, rule, seed, columns=pen_cols)
        return solvers.fit_sqrt_lasso(dataset, lam, unpenalized=unpenalized)
    if rule.kind == pen.CV:
        grid = pen.default_cv_grid(dataset, unpenalized=unpenalized)
        lam = pen.cv_lambda(dataset, rule.folds, grid, seed, unpenalized=unpenalized)
        return solvers.fit_lasso(dataset, lam, unpenalized=unpenalized)
    return pen.iterated_sigma(dataset, "lasso", rule, seed, unpenalized=unpenalized).fit


def _alpha_ols(y1, d, controls):
    """OLS of y1 on [d, controls]; returns the treatment coefficient with
    its conventional standard error computed through the residualized
    treatment (identical to the textbook formula)."""
    n = y1.shape[0]
    Z = np.column_stack([d, controls])
    s_hat = controls.shape[1]
    if s_hat + 1 >= n:
        raise ValueError("selected model too large")
    coef, _, rank, _ = np.linalg.lstsq(Z, y1, rcond=None)
    if rank < Z.shape[1]:
        warnings.warn("collinear selected columns; using minimum-norm solution")
    resid = y1 - Z @ coef
    sigma2 = float(resid @ resid) / n * n / (n - s_hat - 1)
    v = d - controls @ np.linalg.lstsq(controls, d, rcond=None)[0]
    en_v2 = float(v @ v) / n
    if en_v2 <= 1e-14:
        raise ValueError("treatment has no residual variation")
    return float(coef[0]), math.sqrt(sigma2 / (n * en_v2)), math.sqrt(sigma2), en_v2


def fit_plm(prob, rule=None, seed=None, strategy="double"):
    """Estimate the treatment coefficient by the requested strategy.

    The default selector is the square-root variant with the X-dependent
    penalty (no noise level needed); pass a lasso-kind rule to use iterated
    noise estimation instead.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    if rule is None:
        rule = pen.PenaltyRule(kind=pen.SQRT_XDEP)
    n, p = prob.n, prob.p
    ones = np.ones(n)
    ctrl = normalize(Dataset(y=prob.y1, x=np.column_stack([ones, prob.x_controls])))
    # column j+1 of ctrl.x is normalized control j
    xnorm = ctrl.x[:, 1:]
    amel = np.asarray(sorted(set(prob.amelioration)), dtype=int)

    i1 = i2 = np.array([], dtype=int)
    if strategy in ("lasso", "post_lasso"):
        design = normalize(Dataset(y=prob.y1, x=np.column_stack([prob.d, ones, prob.x_controls])))
        fit = _select(design, rule, seed, unpenalized=(0, 1))
        sel = fit.support[fit.support >= 2] - 2
        i2 = sel
        controls = np.column_stack([ones, xnorm[:, sel]])
        if strategy == "lasso":
            d_scale = design.col_scales[0]
            alpha = float(fit.beta[0]) / d_scale
            resid = design.y - design.x @ fit.beta
            s_hat = sel.size + 1
            if s_hat + 1 >= n:
                raise ValueError("selected model too large")
            sigma2 = float(resid @ resid) / n * n / (n - s_hat - 1)
            v = prob.d - controls @ np.linalg.lstsq(controls, prob.d, rcond=None)[0]
            en_v2 = float(v @ v) / n
            if en_v2 <= 1e-14:
                raise ValueError("treatment has no residual variation")
            se = math.sqrt(sigma2 / (n * en_v2))
            union = sel
            return PlmFit(alpha, se, strategy, i1, i2, union, math.sqrt(sigma2), en_v2)
        alpha, se, sz, env2 = _alpha_ols(prob.y1, prob.d, controls)
        return PlmFit(alpha, se, strategy, i1, i2, sel, sz, env2)

    d_eq = Dataset(y=prob.d, x=ctrl.x, normalized=True)
    fit1 = _select(d_eq, rule, seed, unpenalized=(0,))
    i1 = fit1.support[fit1.support >= 1] - 1

    if strategy == "indirect":
        controls = np.column_stack([ones, xnorm[:, i1]])
        alpha, se, sz, env2 = _alpha_ols(prob.y1, prob.d, controls)
        return PlmFit(alpha, se, strategy, i1, i2, i1, sz, env2)

    y_eq = Dataset(y=prob.y1, x=ctrl.x, normalized=True)
    fit2 = _select(y_eq, rule, seed, unpenalized=(0,))
    i2 = fit2.support[fit2.support >= 1] - 1

    if amel.size > max(1, i1.size, i2.size):
        warnings.warn("amelioration set larger than both selected sets")
    union = np.asarray(sorted(set(i1) | set(i2) | set(amel)), dtype=int)
    controls = np.column_stack([ones, xnorm[:, union]])
    alpha, se, sz, env2 = _alpha_ols(prob.y1, prob.d, controls)
    return PlmFit(alpha, se, "double", i1, i2, union, sz, env2)


def plm_strategy_lasso(prob, rule=None, seed=None):
    return fit_plm(prob, rule, seed, strategy="lasso")


def plm_strategy_post_lasso(prob, rule=None, seed=None):
    return fit_plm(prob, rule, seed, strategy="post_lasso")


def plm_strategy_indirect(prob, rule=None, seed=None):
    return fit_plm(prob, rule, seed, strategy="indirect")


def plm_double(prob, rule=None, seed=None):
    return fit_plm(prob, rule, seed, strategy="double")
