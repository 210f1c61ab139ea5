"""Penalty-level rules for the l1 solvers and the iterated noise-level
algorithms, plus k-fold cross-validation of the lasso penalty.

Scaling conventions (everything on the E_n scale used by the solvers):

* lasso criterion      E_n[(y - x'b)^2] + (lam/n) |b|_1
* square-root lasso    sqrt(E_n[(y - x'b)^2]) + (lam/n) |b|_1

so a lasso penalty level of ``2 c sigma sqrt(n) z`` corresponds to the
score bound ``n ||E_n[x g]||_inf <= sqrt(n) z`` holding with probability
1 - gamma.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import STREAM_PENALTY
from . import solvers

__all__ = [
    "PenaltyRule",
    "SigmaTrace",
    "IteratedSigmaFit",
    "norm_quantile",
    "lambda_lasso_asymptotic",
    "lambda_lasso_crude_bound",
    "lambda_lasso_xdep",
    "lambda_sqrt_lasso",
    "iterated_sigma",
    "cv_lambda",
    "default_cv_grid",
    "simulate_score_quantile",
    "simulate_selfnormalized_quantile",
]

LASSO_XINDEP = "lasso-xindep"
LASSO_XDEP = "lasso-xdep"
SQRT_XINDEP = "sqrt-lasso-xindep"
SQRT_XDEP = "sqrt-lasso-xdep"
CV = "cv"

_KINDS = (LASSO_XINDEP, LASSO_XDEP, SQRT_XINDEP, SQRT_XDEP, CV)


@dataclass(frozen=True)
class PenaltyRule:
    """Choice of penalty formula plus its parameters."""

    kind: str = LASSO_XDEP
    c: float = 1.1
    gamma: float = 0.05
    num_sims: int = 1000
    folds: int = 5

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if not (self.c > 0):
            raise ValueError("c must be positive")
        if self.c <= 1:
            # theory wants c > 1; allow smaller values for diagnostics
            warnings.warn("penalty constant c <= 1: score domination is not guaranteed")
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must be in (0,1)")
        if self.kind in (LASSO_XDEP, SQRT_XDEP) and self.num_sims < 100:
            raise ValueError("num_sims must be >= 100 for an X-dependent rule")
        if self.kind == CV and self.folds < 2:
            raise ValueError("folds must be >= 2")

    @property
    def is_sqrt(self):
        return self.kind in (SQRT_XINDEP, SQRT_XDEP)


@dataclass(frozen=True)
class SigmaTrace:
    """Iterates of the noise-level refinement loop."""

    iterates: np.ndarray
    converged: bool
    used_psi: float

    def __post_init__(self):
        it = np.asarray(self.iterates, dtype=np.float64)
        if it.size == 0 or not (it > 0).all():
            raise ValueError("sigma iterates must be nonempty and positive")
        object.__setattr__(self, "iterates", it)


@dataclass(frozen=True)
class IteratedSigmaFit:
    sigma_hat: float
    trace: SigmaTrace
    lam: float
    fit: "solvers.SparseFit"
    refit: "solvers.OlsFit" = None


# --- normal quantile -------------------------------------------------------
# Rational approximation (Acklam's constant set, |rel err| < 1.2e-9)
# followed by one Halley refinement against the exact CDF from erfc,
# which brings the error to the 1e-15 level without any platform-dependent
# special-function library.

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


def _norm_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def norm_quantile(p):
    """Inverse standard-normal CDF."""
    if not (0.0 < p < 1.0):
        raise ValueError("quantile argument must be in (0,1)")
    if p < 0.02425:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= 0.97575:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    e = _norm_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def order_quantile(samples, level):
    """Empirical quantile as the ceil(S*level)-th order statistic (the
    conservative side)."""
    s = np.sort(np.asarray(samples, dtype=np.float64))
    k = int(math.ceil(s.size * level))
    k = min(max(k, 1), s.size)
    return float(s[k - 1])


# --- penalty levels --------------------------------------------------------

def lambda_lasso_asymptotic(n, p, rule, sigma):
    """X-independent lasso penalty 2 c sigma sqrt(n) Phi^{-1}(1 - gamma/2p)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return 2.0 * rule.c * sigma * math.sqrt(n) * norm_quantile(1.0 - rule.gamma / (2.0 * p))


def lambda_lasso_crude_bound(n, p, rule, sigma):
    """Cruder union bound 2 c sigma sqrt(2 n log(2p/gamma))."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return 2.0 * rule.c * sigma * math.sqrt(2.0 * n * math.log(2.0 * p / rule.gamma))


def simulate_score_quantile(d, gamma, num_sims, seed, columns=None, purpose=STREAM_PENALTY):
    """Conservative (1-gamma)-quantile of n ||E_n[x_i g_i]||_inf given X,
    with g_i i.i.d. N(0,1)."""
    if not d.normalized:
        raise ValueError("dataset must be normalized")
    X = d.x if columns is None else d.x[:, columns]
    G = seed.generator(purpose).standard_normal((d.n, int(num_sims)))
    stats = np.max(np.abs(X.T @ G), axis=0)
    return order_quantile(stats, 1.0 - gamma)


def simulate_selfnormalized_quantile(d, gamma, num_sims, seed, columns=None,
                                     purpose=STREAM_PENALTY):
    """Same but for the self-normalized statistic
    n ||E_n[x_i g_i]||_inf / sqrt(E_n[g_i^2])."""
    if not d.normalized:
        raise ValueError("dataset must be normalized")
    X = d.x if columns is None else d.x[:, columns]
    G = seed.generator(purpose).standard_normal((d.n, int(num_sims)))
    stats = np.max(np.abs(X.T @ G), axis=0) / np.sqrt(np.mean(G * G, axis=0))
    return order_quantile(stats, 1.0 - gamma)


def lambda_lasso_xdep(d, rule, sigma, seed, columns=None):
    """X-dependent lasso penalty 2 c sigma * simulated score quantile."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    lam_base = simulate_score_quantile(d, rule.gamma, rule.num_sims, seed, columns)
    return 2.0 * rule.c * sigma * lam_base


def lambda_sqrt_lasso(d, rule, seed, columns=None):
    """Square-root lasso penalty; pivotal, so no noise level enters.

    The X-independent form is c sqrt(n) Phi^{-1}(1 - gamma/2p), on the same
    sqrt(n) scale as the simulated statistic.
    """
    if rule.kind == SQRT_XDEP:
        return rule.c * simulate_selfnormalized_quantile(
            d, rule.gamma, rule.num_sims, seed, columns
        )
    p = d.p if columns is None else len(columns)
    return rule.c * math.sqrt(d.n) * norm_quantile(1.0 - rule.gamma / (2.0 * p))


# --- iterated noise level --------------------------------------------------

def _rms(v):
    return float(np.sqrt(np.mean(v * v)))


def iterated_sigma(d, variant, rule, seed, *, psi=0.1, nu=1e-6, max_iter=15,
                   unpenalized=(0,), initial_sigma=None, tol=1e-8):
    """Iterate between a penalty level derived from the current noise
    estimate and a lasso (or post-lasso OLS) refit of that estimate.

    `variant` is "lasso" (residual RMS of the penalized fit) or "post_lasso"
    (OLS refit residuals with the n/(n - s_hat) degrees-of-freedom
    correction).  The starting value is psi times the residual RMS of the
    regression on the unpenalized columns, unless `initial_sigma` is given
    (then it is used as-is).
    """
    if variant not in ("lasso", "post_lasso"):
        raise ValueError("variant must be 'lasso' or 'post_lasso'")
    if rule.kind not in (LASSO_XINDEP, LASSO_XDEP):
        raise ValueError("iterated sigma needs a lasso penalty rule")
    if psi <= 0 or nu < 0 or max_iter < 1:
        raise ValueError("need psi > 0, nu >= 0, max_iter >= 1")
    n, p = d.n, d.p
    unpen = tuple(unpenalized)
    pen_cols = [j for j in range(p) if j not in unpen]
    if not pen_cols:
        raise ValueError("nothing to penalize")

    if rule.kind == LASSO_XDEP:
        base = simulate_score_quantile(d, rule.gamma, rule.num_sims, seed, pen_cols)
    else:
        base = math.sqrt(n) * norm_quantile(1.0 - rule.gamma / (2.0 * len(pen_cols)))

    if initial_sigma is None:
        if unpen:
            r0 = solvers.post_ols(d, selected=(), always_include=unpen).residuals
        else:
            r0 = d.y
        sigma = psi * _rms(r0)
    else:
        sigma = float(initial_sigma)
    if sigma <= 0:
        raise ValueError("initial sigma must be positive")

    iterates = [sigma]
    beta0 = None
    fit = refit = None
    lam = None
    converged = False
    for _ in range(int(max_iter)):
        lam = 2.0 * rule.c * iterates[-1] * base
        fit = solvers.fit_lasso(d, lam, unpenalized=unpen, tol=tol, beta0=beta0)
        beta0 = fit.beta
        if variant == "lasso":
            resid = d.y - d.x @ fit.beta
            new_sigma = _rms(resid)
        else:
            sel = [j for j in fit.support if j not in unpen]
            refit = solvers.post_ols(d, selected=sel, always_include=unpen)
            s_hat = refit.dof_used
            if s_hat >= n:
                raise ValueError("selected model too large")
            new_sigma = math.sqrt(np.mean(refit.residuals**2) * n / (n - s_hat))
        if new_sigma <= 0:
            new_sigma = np.finfo(float).tiny  # interpolating fit; keep trace positive
        iterates.append(new_sigma)
        if abs(iterates[-1] - iterates[-2]) <= nu:
            converged = True
            break
    trace = SigmaTrace(np.asarray(iterates), converged, psi)
    return IteratedSigmaFit(sigma_hat=float(iterates[-1]), trace=trace,
                            lam=float(lam), fit=fit, refit=refit)


# --- cross-validation ------------------------------------------------------

def default_cv_grid(d, unpenalized=(0,), size=100, span=1e-4):
    """Log-spaced grid from the smallest all-zero penalty down to span times
    it, ascending."""
    unpen = tuple(unpenalized)
    if unpen:
        r0 = solvers.post_ols(d, selected=(), always_include=unpen).residuals
    else:
        r0 = d.y
    pen_cols = [j for j in range(d.p) if j not in unpen]
    lam_max = 2.0 * d.n * float(np.max(np.abs(d.x[:, pen_cols].T @ r0) / d.n))
    if lam_max <= 0:
        lam_max = 1.0
    return np.logspace(math.log10(lam_max * span), math.log10(lam_max), int(size))


def cv_lambda(d, folds, grid, seed, unpenalized=(0,), tol=1e-8):
    """Penalty level minimizing out-of-fold squared prediction error.

    Folds are contiguous blocks of a seeded permutation; ties on the error
    curve resolve to the larger (sparser) penalty.
    """
    n = d.n
    folds = int(folds)
    if not (2 <= folds <= n):
        raise ValueError("folds must be in [2, n]")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or not (grid > 0).all() or not (np.diff(grid) >= 0).all():
        raise ValueError("grid must be nonempty, positive and sorted")
    if n // folds < 2:
        raise ValueError("some fold would have fewer than 2 observations")

    from .data import Dataset, STREAM_CV  # local import to avoid cycle at module load

    perm = seed.generator(STREAM_CV).permutation(n)
    bounds = np.linspace(0, n, folds + 1).astype(int)
    order = np.argsort(grid)[::-1]  # fit from most to least penalized
    sse = np.zeros(grid.size)
    for k in range(folds):
        test = perm[bounds[k]:bounds[k + 1]]
        train = np.concatenate([perm[:bounds[k]], perm[bounds[k + 1]:]])
        dtr = Dataset(y=d.y[train], x=d.x[train], normalized=d.normalized,
                      col_names=d.col_names)
        xte, yte = d.x[test], d.y[test]
        beta0 = None
        for idx in order:
            fit = solvers.fit_lasso(dtr, grid[idx], unpenalized=unpenalized,
                                    tol=tol, beta0=beta0)
            beta0 = fit.beta
            err = yte - xte @ fit.beta
            sse[idx] += float(err @ err)
    best = np.flatnonzero(sse == sse.min())[-1]  # largest lambda among ties
    return float(grid[best])
