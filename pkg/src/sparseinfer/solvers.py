"""Lasso and square-root lasso solvers with optional unpenalized coordinates,
the post-selection OLS refit, a slow independent oracle solver for
verification, and sparse-eigenvalue diagnostics of the empirical Gram matrix.
"""

import math
import warnings
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import kernels

__all__ = [
    "SparseFit",
    "OlsFit",
    "SparseEigBounds",
    "fit_lasso",
    "fit_sqrt_lasso",
    "post_ols",
    "solve_oracle",
    "sparse_eigenvalues",
]

MAX_SWEEPS = 100_000


@dataclass(frozen=True)
class SparseFit:
    """Solver output: coefficients, exact support, penalty used, criterion
    value, and the KKT residual certified at return."""

    beta: np.ndarray
    support: np.ndarray
    lam: float
    objective: float
    kkt_residual: float
    method: str
    sweeps: int


@dataclass(frozen=True)
class OlsFit:
    beta: np.ndarray
    residuals: np.ndarray
    sigma2_hat: float
    sigma2_hat_dof: float
    dof_used: int


def _weights(d, lam, unpenalized, loadings):
    p = d.p
    if loadings is None:
        psi = np.ones(p)
    else:
        psi = np.asarray(loadings, dtype=np.float64).copy()
        if psi.shape != (p,) or (psi < 0).any():
            raise ValueError("loadings must be non-negative, one per column")
    for j in unpenalized:
        psi[j] = 0.0
    return lam * psi / d.n, psi


def _run(kernel, d, lam, unpenalized, tol, loadings, beta0, max_sweeps, method):
    if not np.isfinite(lam) or lam < 0:
        raise ValueError("lambda must be finite and non-negative")
    if tol <= 0:
        raise ValueError("tol must be positive")
    w, psi = _weights(d, lam, unpenalized, loadings)
    X = np.asfortranarray(d.x)
    beta = np.zeros(d.p) if beta0 is None else np.array(beta0, dtype=np.float64)
    kkt, sweeps, status = kernel(X, d.y, w, beta, max_sweeps, tol)
    if status == 2:
        raise ValueError("degenerate fit; criterion non-smooth at solution")
    if status != 0:
        raise RuntimeError(
            f"{method}: KKT residual {kkt:.3e} above tol {tol:.1e} "
            f"after {sweeps} sweeps"
        )
    resid = d.y - d.x @ beta
    msr = float(np.mean(resid * resid))
    pen = lam / d.n * float(np.abs(beta) @ psi)
    obj = (math.sqrt(msr) if method == "sqrt-lasso" else msr) + pen
    return SparseFit(
        beta=beta,
        support=np.flatnonzero(beta),
        lam=float(lam),
        objective=obj,
        kkt_residual=float(kkt),
        method=method,
        sweeps=int(sweeps),
    )


def fit_lasso(d, lam, unpenalized=(), tol=1e-8, *, loadings=None, beta0=None,
              max_sweeps=MAX_SWEEPS):
    """Minimize E_n[(y - x'b)^2] + (lam/n) sum_j psi_j |b_j| by cyclic
    coordinate descent with active-set sweeps.  Coordinates listed in
    `unpenalized` carry no penalty."""
    return _run(kernels.lasso_cd, d, lam, unpenalized, tol, loadings, beta0,
                max_sweeps, "lasso")


def fit_sqrt_lasso(d, lam, unpenalized=(), tol=1e-8, *, loadings=None,
                   beta0=None, max_sweeps=MAX_SWEEPS):
    """Minimize sqrt(E_n[(y - x'b)^2]) + (lam/n) sum_j psi_j |b_j|.

    Raises if the fit interpolates exactly (zero residual), where the
    criterion stops being differentiable.
    """
    return _run(kernels.sqrt_lasso_cd, d, lam, unpenalized, tol, loadings,
                beta0, max_sweeps, "sqrt-lasso")


def post_ols(d, selected, always_include=()):
    """Least squares on the selected columns (plus the always-included
    ones); coefficients off that set are exactly zero.

    Collinear selections fall back to the minimum-norm solution with a
    warning rather than failing, since l1 steps can select near-duplicates.
    """
    cols = list(dict.fromkeys(list(always_include) + sorted(set(selected))))
    n = d.n
    if len(cols) >= n:
        raise ValueError("selected model too large")
    beta = np.zeros(d.p)
    if cols:
        Xs = d.x[:, cols]
        coef, _, rank, _ = np.linalg.lstsq(Xs, d.y, rcond=None)
        if rank < len(cols):
            warnings.warn("collinear selected columns; using minimum-norm solution")
        beta[cols] = coef
        resid = d.y - Xs @ coef
    else:
        resid = d.y.copy()
    rss = float(resid @ resid)
    dof = len(cols)
    return OlsFit(
        beta=beta,
        residuals=resid,
        sigma2_hat=rss / n,
        sigma2_hat_dof=rss / (n - dof) if n > dof else math.inf,
        dof_used=dof,
    )


# --- independent verification solver ---------------------------------------

def solve_oracle(d, lam, method="lasso", unpenalized=(), loadings=None,
                 max_iter=500_000):
    """Slow proximal-gradient solver used to cross-check the coordinate
    descent path in tests.  Shares no code with the main solvers.

    Restricted to test-scale problems (p <= 50, n <= 200).
    """
    if d.p > 50 or d.n > 200:
        raise ValueError("oracle solver is restricted to p <= 50, n <= 200")
    if method not in ("lasso", "sqrt-lasso"):
        raise ValueError("method must be 'lasso' or 'sqrt-lasso'")
    w, psi = _weights(d, lam, unpenalized, loadings)
    X, y = d.x, d.y
    n, p = d.n, d.p
    G = X.T @ X / n
    q = X.T @ y / n
    yy = float(y @ y) / n
    eigmax = float(np.linalg.eigvalsh(G)[-1])

    def msr(b):
        return max(yy - 2.0 * float(b @ q) + float(b @ (G @ b)), 0.0)

    b = np.zeros(p)
    if method == "lasso":
        step = 1.0 / (2.0 * eigmax)
        smooth = msr
        grad = lambda b: 2.0 * (G @ b - q)
    else:
        smooth = lambda b: math.sqrt(msr(b))
        grad = lambda b: (G @ b - q) / max(math.sqrt(msr(b)), 1e-300)
        step = math.sqrt(max(msr(b), 1e-300)) / max(eigmax, 1e-300)

    f = smooth(b)
    stall = 0
    for _ in range(int(max_iter)):
        g = grad(b)
        while True:
            z = b - step * g
            bn = np.sign(z) * np.maximum(np.abs(z) - step * w, 0.0)
            diff = bn - b
            fn = smooth(bn)
            if fn <= f + float(g @ diff) + float(diff @ diff) / (2.0 * step) + 1e-18:
                break
            step *= 0.5
            if step < 1e-18:
                break
        move = float(np.max(np.abs(bn - b), initial=0.0))
        b, f = bn, fn
        step *= 1.1
        if move < 1e-14:
            stall += 1
            if stall >= 3:
                break
        else:
            stall = 0
    # w already carries the lam/n factor
    obj = f + float(np.abs(b) @ w)
    return SparseFit(
        beta=b,
        support=np.flatnonzero(np.abs(b) > 1e-12),
        lam=float(lam),
        objective=obj,
        kkt_residual=math.nan,
        method=f"oracle-{method}",
        sweeps=0,
    )


# --- sparse eigenvalue diagnostics ------------------------------------------

@dataclass(frozen=True)
class SparseEigBounds:
    minimum: float
    maximum: float
    m: int
    mode: str
    exact: bool


def sparse_eigenvalues(d, m, mode="exact", budget=20_000, seed=None):
    """Extremes of the Rayleigh quotient of E_n[x x'] over m-sparse vectors.

    Exact mode enumerates all m-subsets (refused above 10^6 subsets);
    sampled mode draws `budget` random subsets and returns an upper bound on
    the minimum / lower bound on the maximum, flagged as heuristic.
    """
    p = d.p
    m = int(m)
    if not (1 <= m <= p):
        raise ValueError("m must be in [1, p]")
    gram = d.x.T @ d.x / d.n
    if mode == "exact":
        total = math.comb(p, m)
        if total > 1_000_000:
            raise ValueError(f"exact mode over budget: C({p},{m}) = {total}")
        subsets = combinations(range(p), m)
    elif mode == "sampled":
        if seed is None:
            gen = np.random.default_rng(0)
        else:
            gen = seed.generator()
        subsets = (tuple(sorted(gen.choice(p, size=m, replace=False)))
                   for _ in range(int(budget)))
    else:
        raise ValueError("mode must be 'exact' or 'sampled'")
    lo, hi = math.inf, -math.inf
    for sub in subsets:
        idx = np.fromiter(sub, dtype=np.intp)
        vals = np.linalg.eigvalsh(gram[np.ix_(idx, idx)])
        lo = min(lo, float(vals[0]))
        hi = max(hi, float(vals[-1]))
    return SparseEigBounds(minimum=lo, maximum=hi, m=m, mode=mode,
                           exact=(mode == "exact"))
