"""Instrumental-variable estimation with l1-selected instruments, baseline
2SLS / k-class (Fuller) estimators, and the sup-score test with its
confidence regions (including the penalized-regression reformulation used
as a cross-check).
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import penalty as pen
from . import solvers
from .data import Dataset, normalize, STREAM_CRITICAL, STREAM_SUBSAMPLE
from .penalty import norm_quantile, order_quantile

__all__ = [
    "IVProblem",
    "IVFit",
    "FirstStageFit",
    "SupScoreResult",
    "GridRegion",
    "fit_first_stage",
    "fit_iv_lasso",
    "fit_2sls_all",
    "fit_fuller",
    "sup_score",
    "inverse_lasso_region",
]

FALLBACK_DECAY = 0.9
FALLBACK_MAX = 200


@dataclass(frozen=True)
class IVProblem:
    """Structural outcome, endogenous regressor, controls (intercept
    included in `w`) and the technical instrument matrix."""

    y1: np.ndarray
    y2: np.ndarray
    w: np.ndarray
    x_instruments: np.ndarray
    instrument_names: tuple = None

    def __post_init__(self):
        y1 = np.asarray(self.y1, dtype=np.float64).ravel()
        y2 = np.asarray(self.y2, dtype=np.float64).ravel()
        w = np.atleast_2d(np.asarray(self.w, dtype=np.float64))
        x = np.asarray(self.x_instruments, dtype=np.float64)
        n = y1.shape[0]
        if w.shape[0] == 1 and n > 1:
            w = w.T
        if y2.shape[0] != n or w.shape[0] != n or x.shape[0] != n:
            raise ValueError("all blocks must share the same number of rows")
        if not (np.isfinite(y1).all() and np.isfinite(y2).all()
                and np.isfinite(w).all() and np.isfinite(x).all()):
            raise ValueError("non-finite entries")
        gram = w.T @ w / n
        if np.linalg.cond(gram) > 1e12:
            raise ValueError("control Gram matrix is (numerically) singular")
        for name, arr in (("y1", y1), ("y2", y2), ("w", w), ("x_instruments", x)):
            a = np.ascontiguousarray(arr)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n(self):
        return self.y1.shape[0]

    @property
    def k_w(self):
        return self.w.shape[1]

    @property
    def p(self):
        return self.x_instruments.shape[1]


@dataclass(frozen=True)
class FirstStageFit:
    fhat: np.ndarray
    selected: np.ndarray
    fallback_used: bool
    zero_selection: bool
    lam: float
    sigma_hat: float
    beta: np.ndarray


@dataclass(frozen=True)
class IVFit:
    alpha_hat: np.ndarray
    se: np.ndarray
    selected_instruments: np.ndarray
    sigma_zeta_hat: float
    sigma_zeta_hat_fitted: float
    fallback_used: bool
    method: str


def fit_first_stage(prob, rule, seed, first_stage="post-lasso"):
    """Select instruments by a feasible l1 fit of the endogenous regressor
    on [controls, instruments] (controls unpenalized).

    If nothing is selected the penalty decays geometrically (factor 0.9)
    until at least one instrument enters; `fallback_used` records that.
    The fitted value returned is the full first-stage prediction.
    """
    if first_stage not in ("lasso", "post-lasso"):
        raise ValueError("first_stage must be 'lasso' or 'post-lasso'")
    n, k_w, p = prob.n, prob.k_w, prob.p
    design = np.column_stack([prob.w, prob.x_instruments])
    d = normalize(Dataset(y=prob.y2, x=design))
    unpen = tuple(range(k_w))
    pen_cols = list(range(k_w, k_w + p))
    sigma_hat = math.nan

    if rule.kind in (pen.LASSO_XINDEP, pen.LASSO_XDEP):
        xc = prob.x_instruments - prob.x_instruments.mean(axis=0)
        yc = prob.y2 - prob.y2.mean()
        denom = np.sqrt(np.einsum("ij,ij->j", xc, xc) * float(yc @ yc))
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = np.where(denom > 0, np.abs(xc.T @ yc) / np.where(denom > 0, denom, 1.0), 0.0)
        top = int(np.argmax(corr))
        init = solvers.post_ols(d, selected=(k_w + top,), always_include=unpen)
        sigma0 = math.sqrt(max(np.mean(init.residuals**2), 1e-300))
        it = pen.iterated_sigma(d, "lasso", rule, seed, unpenalized=unpen,
                                initial_sigma=sigma0)
        fit, lam, sigma_hat = it.fit, it.lam, it.sigma_hat
    elif rule.is_sqrt:
        lam = pen.lambda_sqrt_lasso(d, rule, seed, columns=pen_cols)
        fit = solvers.fit_sqrt_lasso(d, lam, unpenalized=unpen)
    elif rule.kind == pen.CV:
        grid = pen.default_cv_grid(d, unpenalized=unpen)
        lam = pen.cv_lambda(d, rule.folds, grid, seed, unpenalized=unpen)
        fit = solvers.fit_lasso(d, lam, unpenalized=unpen)
    else:
        raise ValueError(f"unsupported rule kind {rule.kind!r}")

    refit_kind = solvers.fit_sqrt_lasso if rule.is_sqrt else solvers.fit_lasso
    selected = fit.support[fit.support >= k_w] - k_w
    zero_selection = selected.size == 0
    fallback_used = False
    beta0 = fit.beta
    for _ in range(FALLBACK_MAX):
        if selected.size:
            break
        fallback_used = True
        lam *= FALLBACK_DECAY
        fit = refit_kind(d, lam, unpenalized=unpen, beta0=beta0)
        beta0 = fit.beta
        selected = fit.support[fit.support >= k_w] - k_w

    if first_stage == "post-lasso":
        refit = solvers.post_ols(d, selected=[k_w + j for j in selected],
                                 always_include=unpen)
        fhat = d.x @ refit.beta
        beta = refit.beta
    else:
        fhat = d.x @ fit.beta
        beta = fit.beta
    return FirstStageFit(fhat=fhat, selected=np.asarray(selected, dtype=int),
                         fallback_used=fallback_used, zero_selection=zero_selection,
                         lam=float(lam), sigma_hat=sigma_hat, beta=beta)


def _iv_from_fitted(prob, fhat, selected, fallback_used, method):
    n = prob.n
    A = np.column_stack([fhat, prob.w])
    D = np.column_stack([prob.y2, prob.w])
    M = A.T @ D / n
    if np.linalg.cond(M) > 1e12:
        raise np.linalg.LinAlgError("first stage uninformative")
    alpha = np.linalg.solve(M, A.T @ prob.y1 / n)
    Q = A.T @ A / n
    qinv = np.linalg.inv(Q)
    resid_d = prob.y1 - D @ alpha
    resid_f = prob.y1 - A @ alpha
    s2_d = float(np.mean(resid_d**2))
    s2_f = float(np.mean(resid_f**2))
    se = np.sqrt(np.diag(qinv) * s2_d / n)
    return IVFit(alpha_hat=alpha, se=se, selected_instruments=selected,
                 sigma_zeta_hat=math.sqrt(s2_d),
                 sigma_zeta_hat_fitted=math.sqrt(s2_f),
                 fallback_used=fallback_used, method=method)


def fit_iv_lasso(prob, rule, second_stage="2sls", seed=None, first_stage="post-lasso"):
    """IV estimate with the selected-instrument first stage.

    With a post-lasso first stage the estimator coincides with 2SLS on the
    selected instruments plus controls; `second_stage="fuller"` instead runs
    the k-class estimator (a=1) on the selected set.
    """
    fs = fit_first_stage(prob, rule, seed, first_stage=first_stage)
    if second_stage == "fuller":
        fit = fit_fuller(prob, fs.selected, a=1.0)
        return IVFit(alpha_hat=fit.alpha_hat, se=fit.se,
                     selected_instruments=fs.selected,
                     sigma_zeta_hat=fit.sigma_zeta_hat,
                     sigma_zeta_hat_fitted=fit.sigma_zeta_hat_fitted,
                     fallback_used=fs.fallback_used, method="fuller-selected")
    if second_stage != "2sls":
        raise ValueError("second_stage must be '2sls' or 'fuller'")
    return _iv_from_fitted(prob, fs.fhat, fs.selected, fs.fallback_used,
                           method=f"iv-{first_stage}")


def fit_2sls_all(prob, instruments=None):
    """Conventional 2SLS using all (or the given subset of) instruments."""
    if instruments is None:
        instruments = np.arange(prob.p)
    instruments = np.asarray(instruments, dtype=int)
    n = prob.n
    Z = np.column_stack([prob.w, prob.x_instruments[:, instruments]])
    if Z.shape[1] + 1 >= n:
        raise ValueError("too many instruments for 2SLS; subsample them")
    D = np.column_stack([prob.y2, prob.w])
    coef, _, rank, _ = np.linalg.lstsq(Z, D, rcond=None)
    if rank < Z.shape[1]:
        warnings.warn("rank-deficient instrument matrix in 2SLS")
    Dhat = Z @ coef
    G = Dhat.T @ Dhat
    if np.linalg.cond(G) > 1e12:
        raise np.linalg.LinAlgError("2SLS normal equations singular")
    alpha = np.linalg.solve(G, Dhat.T @ prob.y1)
    resid = prob.y1 - D @ alpha
    s2 = float(np.mean(resid**2))
    se = np.sqrt(np.diag(np.linalg.inv(G)) * s2)
    resid_f = prob.y1 - Dhat @ alpha
    return IVFit(alpha_hat=alpha, se=se, selected_instruments=instruments,
                 sigma_zeta_hat=math.sqrt(s2),
                 sigma_zeta_hat_fitted=math.sqrt(float(np.mean(resid_f**2))),
                 fallback_used=False, method="2sls-all")


def fit_fuller(prob, instruments, a=1.0):
    """k-class estimator with k = k_LIML - a/(n - #instruments - k_w);
    a=0 gives LIML.  Conventional k-class standard errors."""
    instruments = np.asarray(sorted(set(int(j) for j in np.asarray(instruments).ravel())),
                             dtype=int)
    if instruments.size == 0:
        raise ValueError("instrument set must be nonempty")
    n, k_w = prob.n, prob.k_w
    if n <= instruments.size + k_w:
        raise ValueError("need n > #instruments + k_w")
    Z = np.column_stack([prob.w, prob.x_instruments[:, instruments]])
    W = prob.w
    e = np.column_stack([prob.y1, prob.y2])
    ez = e - Z @ np.linalg.lstsq(Z, e, rcond=None)[0]
    ew = e - W @ np.linalg.lstsq(W, e, rcond=None)[0]
    A2 = ew.T @ ew
    B2 = ez.T @ ez
    # smaller root of det(A2 - kappa B2) = 0 (2x2 pencil)
    qa = B2[0, 0] * B2[1, 1] - B2[0, 1] ** 2
    qb = -(A2[0, 0] * B2[1, 1] + A2[1, 1] * B2[0, 0] - 2.0 * A2[0, 1] * B2[0, 1])
    qc = A2[0, 0] * A2[1, 1] - A2[0, 1] ** 2
    disc = qb * qb - 4.0 * qa * qc
    if qa <= 0 or disc < 0:
        raise np.linalg.LinAlgError("k-class eigenproblem failed")
    kappa_liml = (-qb - math.sqrt(disc)) / (2.0 * qa)
    k = kappa_liml - a / (n - instruments.size - k_w)

    D = np.column_stack([prob.y2, prob.w])
    PD = Z @ np.linalg.lstsq(Z, D, rcond=None)[0]
    Py = Z @ np.linalg.lstsq(Z, prob.y1, rcond=None)[0]
    XX = (1.0 - k) * (D.T @ D) + k * (D.T @ PD)
    Xy = (1.0 - k) * (D.T @ prob.y1) + k * (D.T @ Py)
    alpha = np.linalg.solve(XX, Xy)
    resid = prob.y1 - D @ alpha
    s2 = float(np.mean(resid**2))
    se = np.sqrt(np.diag(np.linalg.inv(XX)) * s2 * n)
    return IVFit(alpha_hat=alpha, se=se, selected_instruments=instruments,
                 sigma_zeta_hat=math.sqrt(s2), sigma_zeta_hat_fitted=math.nan,
                 fallback_used=False, method=f"k-class(a={a:g})")


# --- sup-score test ---------------------------------------------------------

@dataclass(frozen=True)
class GridRegion:
    accepted: np.ndarray
    lo: float
    hi: float
    empty: bool
    unbounded_low: bool
    unbounded_high: bool

    @classmethod
    def from_mask(cls, grid, mask):
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return cls(accepted=idx, lo=math.nan, hi=math.nan, empty=True,
                       unbounded_low=False, unbounded_high=False)
        return cls(accepted=idx, lo=float(grid[idx[0]]), hi=float(grid[idx[-1]]),
                   empty=False, unbounded_low=bool(idx[0] == 0),
                   unbounded_high=bool(idx[-1] == grid.size - 1))


@dataclass(frozen=True)
class SupScoreResult:
    grid: np.ndarray
    statistic: np.ndarray
    critical_finite: float
    critical_asymptotic: float
    region_finite: GridRegion
    region_asymptotic: GridRegion


def _partial_out(prob):
    """Residuals of y1, y2 and the instrument columns after projecting the
    controls out, with the instrument residuals rescaled to unit RMS."""
    W = prob.w

    def proj(M):
        return M - W @ np.linalg.lstsq(W, M, rcond=None)[0]

    y1t = proj(prob.y1)
    y2t = proj(prob.y2)
    Xt = proj(prob.x_instruments)
    norms = np.sqrt(np.mean(Xt * Xt, axis=0))
    keep = np.flatnonzero(norms > 1e-14)
    if keep.size < norms.size:
        warnings.warn(f"{norms.size - keep.size} instrument(s) lie in the span "
                      "of the controls and are dropped")
    Xt = Xt[:, keep] / norms[keep]
    return y1t, y2t, Xt, keep, proj


def _supscore_stats(y1t, y2t, Xt, grid):
    n = y1t.shape[0]
    E = y1t[:, None] - np.outer(y2t, np.asarray(grid, dtype=np.float64))
    numer = np.abs(Xt.T @ E)
    denom2 = (Xt * Xt).T @ (E * E) / n
    bad = denom2 <= 0
    if bad.any():
        warnings.warn("degenerate score denominator; affected instruments skipped")
        numer = np.where(bad, -np.inf, numer)
        denom2 = np.where(bad, 1.0, denom2)
    return np.max(numer / np.sqrt(denom2), axis=0)


def _critical_finite(Xt, proj, gamma, num_sims, seed):
    n = Xt.shape[0]
    G = seed.generator(STREAM_CRITICAL).standard_normal((n, int(num_sims)))
    Gt = proj(G)
    numer = np.abs(Xt.T @ Gt)
    denom2 = (Xt * Xt).T @ (Gt * Gt) / n
    stats = np.max(numer / np.sqrt(np.where(denom2 > 0, denom2, 1.0)), axis=0)
    return order_quantile(stats, 1.0 - gamma)


def default_supscore_grid(prob, seed, points=401, half_width_se=10.0):
    """Grid centered on 2SLS: +/- 10 conventional standard errors.  When the
    full instrument set is too large for 2SLS a seeded subsample is used."""
    max_cols = prob.n - prob.k_w - 2
    if prob.p > max_cols:
        gen = seed.generator(STREAM_SUBSAMPLE)
        sub = np.sort(gen.choice(prob.p, size=max_cols, replace=False))
        base = fit_2sls_all(prob, instruments=sub)
    else:
        base = fit_2sls_all(prob)
    m, s = float(base.alpha_hat[0]), float(base.se[0])
    return np.linspace(m - half_width_se * s, m + half_width_se * s, int(points))


def sup_score(prob, grid=None, gamma=0.05, c=1.1, num_sims=1000, seed=None):
    """Self-normalized maximal-score test of each candidate coefficient on
    the endogenous regressor; controls are partialled out first.

    Reports both the simulated finite-sample critical value and the
    asymptotic bound c sqrt(n) Phi^{-1}(1 - gamma/2p), with the corresponding
    accepted regions over the grid.
    """
    if not (0 < gamma < 1):
        raise ValueError("gamma must be in (0,1)")
    if grid is None:
        grid = default_supscore_grid(prob, seed)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("grid must be nonempty")
    y1t, y2t, Xt, keep, proj = _partial_out(prob)
    stats = _supscore_stats(y1t, y2t, Xt, grid)
    crit_fin = _critical_finite(Xt, proj, gamma, num_sims, seed)
    crit_asy = c * math.sqrt(prob.n) * norm_quantile(1.0 - gamma / (2.0 * Xt.shape[1]))
    return SupScoreResult(
        grid=grid,
        statistic=stats,
        critical_finite=crit_fin,
        critical_asymptotic=crit_asy,
        region_finite=GridRegion.from_mask(grid, stats <= crit_fin),
        region_asymptotic=GridRegion.from_mask(grid, stats <= crit_asy),
    )


def inverse_lasso_region(prob, grid, gamma=0.05, num_sims=1000, seed=None, tol=1e-10):
    """Accepted grid points characterized through the penalized regression
    of the hypothesized structural residual on the instruments: a point is
    accepted exactly when that fit is identically zero.

    Uses the same seeded critical-value simulation as :func:`sup_score`, so
    the two regions agree grid point by grid point.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        return np.array([], dtype=int)
    y1t, y2t, Xt, keep, proj = _partial_out(prob)
    n = prob.n
    crit = _critical_finite(Xt, proj, gamma, num_sims, seed)
    lam = 2.0 * crit
    accepted = []
    for i, a in enumerate(grid):
        e = y1t - a * y2t
        loadings = np.sqrt((Xt * Xt).T @ (e * e) / n)
        ok = loadings > 0
        if not ok.all():
            warnings.warn("degenerate loading; affected instruments skipped")
        dset = Dataset(y=e, x=Xt[:, ok], normalized=True)
        fit = solvers.fit_lasso(dset, lam, tol=tol, loadings=loadings[ok])
        if fit.support.size == 0:
            accepted.append(i)
    return np.asarray(accepted, dtype=int)
