# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled coordinate-descent kernels.

Both solvers minimize a least-squares criterion plus a weighted l1 penalty,
with weights expressed on the E_n scale (w[j] = lambda * loading_j / n, and
w[j] = 0 marks an unpenalized coordinate):

    lasso_cd:      (1/n) ||y - X b||^2        + sum_j w[j] |b_j|
    sqrt_lasso_cd: sqrt((1/n) ||y - X b||^2)  + sum_j w[j] |b_j|

X must be Fortran-ordered so column slices are contiguous.  `beta` is used
as warm start and overwritten with the solution.  Convergence is declared
on the KKT residual (see kkt_* below), re-measured from a freshly computed
residual at the end of each outer pass.

Return value: (kkt_residual, sweeps_used, status) with status 0 = converged,
1 = sweep cap hit, 2 = degenerate square-root fit (zero residual).
"""

from libc.math cimport fabs, sqrt

import numpy as np


cdef inline double _soft(double z, double t) nogil:
    if z > t:
        return z - t
    elif z < -t:
        return z + t
    return 0.0


cdef double _sweep_lasso(const double[::1, :] X, double[::1] r, const double[::1] w,
                         double[::1] css, double[::1] beta,
                         Py_ssize_t n, Py_ssize_t p,
                         unsigned char[::1] mask, bint active_only) nogil:
    """One pass of coordinate updates; returns the largest scaled change."""
    cdef Py_ssize_t i, j
    cdef double sxr, bold, bnew, delta, maxdelta = 0.0
    for j in range(p):
        if active_only and not mask[j]:
            continue
        if css[j] <= 0.0:
            continue
        bold = beta[j]
        sxr = 0.0
        for i in range(n):
            sxr += X[i, j] * r[i]
        sxr = sxr / n + css[j] * bold
        if w[j] > 0.0:
            bnew = _soft(sxr, 0.5 * w[j]) / css[j]
        else:
            bnew = sxr / css[j]
        if bnew != bold:
            delta = bnew - bold
            for i in range(n):
                r[i] -= X[i, j] * delta
            beta[j] = bnew
            mask[j] = 1 if bnew != 0.0 else 0
            delta = fabs(delta) * sqrt(css[j])
            if delta > maxdelta:
                maxdelta = delta
    return maxdelta


cdef double _kkt_lasso(const double[::1, :] X, double[::1] r, const double[::1] w,
                       double[::1] beta, Py_ssize_t n, Py_ssize_t p) nogil:
    """Max violation of: 2 E_n[x_j r] = sign(b_j) w_j (b_j != 0),
    |2 E_n[x_j r]| <= w_j (b_j == 0), gradient zero when unpenalized."""
    cdef Py_ssize_t i, j
    cdef double g, v, worst = 0.0
    for j in range(p):
        g = 0.0
        for i in range(n):
            g += X[i, j] * r[i]
        g = 2.0 * g / n
        if beta[j] > 0.0:
            v = fabs(g - w[j])
        elif beta[j] < 0.0:
            v = fabs(g + w[j])
        else:
            v = fabs(g) - w[j]
            if v < 0.0:
                v = 0.0
        if v > worst:
            worst = v
    return worst


cdef void _refresh_residual(const double[::1, :] X, const double[::1] y, double[::1] beta,
                            double[::1] r, Py_ssize_t n, Py_ssize_t p) nogil:
    cdef Py_ssize_t i, j
    for i in range(n):
        r[i] = y[i]
    for j in range(p):
        if beta[j] != 0.0:
            for i in range(n):
                r[i] -= X[i, j] * beta[j]


def lasso_cd(const double[::1, :] X, const double[::1] y, const double[::1] w, double[::1] beta,
             long max_sweeps, double tol):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1]
    cdef double[::1] r = np.empty(n, dtype=np.float64)
    cdef double[::1] css = np.empty(p, dtype=np.float64)
    cdef unsigned char[::1] mask = np.zeros(p, dtype=np.uint8)
    cdef Py_ssize_t i, j
    cdef long sweeps = 0
    cdef int status = 1
    cdef double s, maxdelta, kkt = 0.0
    cdef double inner_tol = tol * 1e-2

    with nogil:
        for j in range(p):
            s = 0.0
            for i in range(n):
                s += X[i, j] * X[i, j]
            css[j] = s / n
            if beta[j] != 0.0:
                mask[j] = 1
        _refresh_residual(X, y, beta, r, n, p)

        while sweeps < max_sweeps:
            maxdelta = _sweep_lasso(X, r, w, css, beta, n, p, mask, False)
            sweeps += 1
            while maxdelta > inner_tol and sweeps < max_sweeps:
                maxdelta = _sweep_lasso(X, r, w, css, beta, n, p, mask, True)
                sweeps += 1
            # refresh the residual to cancel accumulated update error
            _refresh_residual(X, y, beta, r, n, p)
            kkt = _kkt_lasso(X, r, w, beta, n, p)
            if kkt <= tol:
                status = 0
                break
        if status == 1:
            _refresh_residual(X, y, beta, r, n, p)
            kkt = _kkt_lasso(X, r, w, beta, n, p)
            if kkt <= tol:
                status = 0

    return kkt, sweeps, status


cdef double _sweep_sqrt(const double[::1, :] X, double[::1] r, const double[::1] w,
                        double[::1] css, double[::1] beta,
                        Py_ssize_t n, Py_ssize_t p, double* rho,
                        unsigned char[::1] mask, bint active_only) nogil:
    """One square-root-criterion pass; rho tracks E_n[r^2] incrementally."""
    cdef Py_ssize_t i, j
    cdef double sxr, srr, bold, bnew, delta, disc, thr, maxdelta = 0.0
    for j in range(p):
        if active_only and not mask[j]:
            continue
        if css[j] <= 0.0:
            continue
        bold = beta[j]
        sxr = 0.0
        for i in range(n):
            sxr += X[i, j] * r[i]
        sxr /= n
        srr = rho[0] + 2.0 * bold * sxr + bold * bold * css[j]
        sxr += css[j] * bold
        if srr < 0.0:
            srr = 0.0
        if w[j] <= 0.0:
            bnew = sxr / css[j]
        else:
            thr = w[j] * sqrt(srr)
            if fabs(sxr) <= thr or w[j] * w[j] >= css[j]:
                bnew = 0.0
            else:
                disc = (css[j] * srr - sxr * sxr) / (css[j] - w[j] * w[j])
                if disc < 0.0:
                    disc = 0.0
                if sxr > 0.0:
                    bnew = (sxr - w[j] * sqrt(disc)) / css[j]
                else:
                    bnew = (sxr + w[j] * sqrt(disc)) / css[j]
        if bnew != bold:
            delta = bnew - bold
            # E_n[r_new^2] from partial residual: r_new = r_j - x_j b_new
            rho[0] = srr - 2.0 * bnew * sxr + bnew * bnew * css[j]
            if rho[0] < 0.0:
                rho[0] = 0.0
            for i in range(n):
                r[i] -= X[i, j] * delta
            beta[j] = bnew
            mask[j] = 1 if bnew != 0.0 else 0
            delta = fabs(delta) * sqrt(css[j])
            if delta > maxdelta:
                maxdelta = delta
    return maxdelta


cdef double _kkt_sqrt(const double[::1, :] X, double[::1] r, const double[::1] w,
                      double[::1] beta, Py_ssize_t n, Py_ssize_t p,
                      double rho) nogil:
    """Max violation of: E_n[x_j r]/sqrt(E_n[r^2]) = sign(b_j) w_j, etc."""
    cdef Py_ssize_t i, j
    cdef double g, v, worst = 0.0
    cdef double denom = sqrt(rho)
    if denom <= 0.0:
        return -1.0
    for j in range(p):
        g = 0.0
        for i in range(n):
            g += X[i, j] * r[i]
        g = g / n / denom
        if beta[j] > 0.0:
            v = fabs(g - w[j])
        elif beta[j] < 0.0:
            v = fabs(g + w[j])
        else:
            v = fabs(g) - w[j]
            if v < 0.0:
                v = 0.0
        if v > worst:
            worst = v
    return worst


def sqrt_lasso_cd(const double[::1, :] X, const double[::1] y, const double[::1] w,
                  double[::1] beta, long max_sweeps, double tol):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1]
    cdef double[::1] r = np.empty(n, dtype=np.float64)
    cdef double[::1] css = np.empty(p, dtype=np.float64)
    cdef unsigned char[::1] mask = np.zeros(p, dtype=np.uint8)
    cdef Py_ssize_t i, j
    cdef long sweeps = 0
    cdef int status = 1
    cdef double s, maxdelta, kkt = 0.0, rho
    cdef double inner_tol = tol * 1e-2

    with nogil:
        for j in range(p):
            s = 0.0
            for i in range(n):
                s += X[i, j] * X[i, j]
            css[j] = s / n
            if beta[j] != 0.0:
                mask[j] = 1
        _refresh_residual(X, y, beta, r, n, p)
        rho = 0.0
        for i in range(n):
            rho += r[i] * r[i]
        rho /= n

        while sweeps < max_sweeps:
            maxdelta = _sweep_sqrt(X, r, w, css, beta, n, p, &rho, mask, False)
            sweeps += 1
            while maxdelta > inner_tol and sweeps < max_sweeps:
                maxdelta = _sweep_sqrt(X, r, w, css, beta, n, p, &rho, mask, True)
                sweeps += 1
            _refresh_residual(X, y, beta, r, n, p)
            rho = 0.0
            for i in range(n):
                rho += r[i] * r[i]
            rho /= n
            if rho < 1e-28:
                status = 2
                break
            kkt = _kkt_sqrt(X, r, w, beta, n, p, rho)
            if kkt <= tol:
                status = 0
                break
        if status == 1:
            _refresh_residual(X, y, beta, r, n, p)
            rho = 0.0
            for i in range(n):
                rho += r[i] * r[i]
            rho /= n
            if rho < 1e-28:
                status = 2
            else:
                kkt = _kkt_sqrt(X, r, w, beta, n, p, rho)
                if kkt <= tol:
                    status = 0

    return kkt, sweeps, status
