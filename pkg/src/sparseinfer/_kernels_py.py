"""Pure-numpy fallback for the coordinate-descent kernels.

Mirrors ``_kernels.pyx`` update-for-update so either backend can serve the
solvers; selection happens in :mod:`sparseinfer.kernels`.  Noticeably slower
(Python-level loop over coordinates) but dependency-free.
"""

import math

import numpy as np


def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def _kkt_lasso(X, r, w, beta, n):
    g = 2.0 * (X.T @ r) / n
    v = np.where(
        beta > 0.0,
        np.abs(g - w),
        np.where(beta < 0.0, np.abs(g + w), np.maximum(np.abs(g) - w, 0.0)),
    )
    return float(v.max(initial=0.0))


def _sweep_lasso(X, r, w, css, beta, mask, active_only, n):
    maxdelta = 0.0
    for j in range(beta.shape[0]):
        if active_only and not mask[j]:
            continue
        if css[j] <= 0.0:
            continue
        bold = beta[j]
        xj = X[:, j]
        sxr = float(xj @ r) / n + css[j] * bold
        if w[j] > 0.0:
            bnew = _soft(sxr, 0.5 * w[j]) / css[j]
        else:
            bnew = sxr / css[j]
        if bnew != bold:
            r -= xj * (bnew - bold)
            beta[j] = bnew
            mask[j] = bnew != 0.0
            maxdelta = max(maxdelta, abs(bnew - bold) * math.sqrt(css[j]))
    return maxdelta


def lasso_cd(X, y, w, beta, max_sweeps, tol):
    X = np.asarray(X)
    n, p = X.shape
    css = np.einsum("ij,ij->j", X, X) / n
    mask = beta != 0.0
    r = y - X @ beta
    inner_tol = tol * 1e-2
    sweeps = 0
    kkt = 0.0
    while sweeps < max_sweeps:
        maxdelta = _sweep_lasso(X, r, w, css, beta, mask, False, n)
        sweeps += 1
        while maxdelta > inner_tol and sweeps < max_sweeps:
            maxdelta = _sweep_lasso(X, r, w, css, beta, mask, True, n)
            sweeps += 1
        r = y - X @ beta
        kkt = _kkt_lasso(X, r, w, beta, n)
        if kkt <= tol:
            return kkt, sweeps, 0
    r = y - X @ beta
    kkt = _kkt_lasso(X, r, w, beta, n)
    return kkt, sweeps, 0 if kkt <= tol else 1


def _kkt_sqrt(X, r, w, beta, n, rho):
    g = (X.T @ r) / n / math.sqrt(rho)
    v = np.where(
        beta > 0.0,
        np.abs(g - w),
        np.where(beta < 0.0, np.abs(g + w), np.maximum(np.abs(g) - w, 0.0)),
    )
    return float(v.max(initial=0.0))


def _sweep_sqrt(X, r, w, css, beta, mask, active_only, n, rho):
    maxdelta = 0.0
    for j in range(beta.shape[0]):
        if active_only and not mask[j]:
            continue
        if css[j] <= 0.0:
            continue
        bold = beta[j]
        xj = X[:, j]
        sxr = float(xj @ r) / n
        srr = max(rho + 2.0 * bold * sxr + bold * bold * css[j], 0.0)
        sxr += css[j] * bold
        if w[j] <= 0.0:
            bnew = sxr / css[j]
        else:
            if abs(sxr) <= w[j] * math.sqrt(srr) or w[j] * w[j] >= css[j]:
                bnew = 0.0
            else:
                disc = max((css[j] * srr - sxr * sxr) / (css[j] - w[j] * w[j]), 0.0)
                bnew = (sxr - math.copysign(w[j] * math.sqrt(disc), sxr)) / css[j]
        if bnew != bold:
            rho = max(srr - 2.0 * bnew * sxr + bnew * bnew * css[j], 0.0)
            r -= xj * (bnew - bold)
            beta[j] = bnew
            mask[j] = bnew != 0.0
            maxdelta = max(maxdelta, abs(bnew - bold) * math.sqrt(css[j]))
    return maxdelta, rho


def sqrt_lasso_cd(X, y, w, beta, max_sweeps, tol):
    X = np.asarray(X)
    n, p = X.shape
    css = np.einsum("ij,ij->j", X, X) / n
    mask = beta != 0.0
    r = y - X @ beta
    rho = float(r @ r) / n
    inner_tol = tol * 1e-2
    sweeps = 0
    kkt = 0.0
    while sweeps < max_sweeps:
        maxdelta, rho = _sweep_sqrt(X, r, w, css, beta, mask, False, n, rho)
        sweeps += 1
        while maxdelta > inner_tol and sweeps < max_sweeps:
            maxdelta, rho = _sweep_sqrt(X, r, w, css, beta, mask, True, n, rho)
            sweeps += 1
        r = y - X @ beta
        rho = float(r @ r) / n
        if rho < 1e-28:
            return 0.0, sweeps, 2
        kkt = _kkt_sqrt(X, r, w, beta, n, rho)
        if kkt <= tol:
            return kkt, sweeps, 0
    r = y - X @ beta
    rho = float(r @ r) / n
    if rho < 1e-28:
        return 0.0, sweeps, 2
    kkt = _kkt_sqrt(X, r, w, beta, n, rho)
    return kkt, sweeps, 0 if kkt <= tol else 1
