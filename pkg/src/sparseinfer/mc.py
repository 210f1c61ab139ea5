"""Monte Carlo designs and the replication harness.

Three study families: a sparse mean-regression design comparing penalized
estimators against the infeasible oracle; an instrumental-variable design
with calibrated first-stage strength; and the partially-linear treatment
design comparing the four inference strategies.  Replication r always draws
from stream r of the study seed, so reports are reproducible bit-for-bit
for any worker-thread count.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import iv as iv_mod
from . import penalty as pen
from . import plm as plm_mod
from . import solvers
from .data import Dataset, SeedSpec, normalize, STREAM_DGP, STREAM_SUBSAMPLE
from .penalty import norm_quantile

__all__ = ["DgpSpec", "McReport", "gen_mean_regression", "gen_iv", "gen_plm",
           "run_study", "DEFAULT_ESTIMATORS"]

Z975 = norm_quantile(0.975)

KINDS = ("mean_regression", "iv_exponential", "iv_nosignal", "plm")

DEFAULT_ESTIMATORS = {
    "mean_regression": ("oracle", "lasso", "post-lasso", "sqrt-lasso",
                        "post-sqrt-lasso", "iterated-lasso", "post-iterated-lasso",
                        "cv-lasso", "cv-post-lasso"),
    "iv_exponential": ("2sls-all", "full-all", "iv-lasso", "full-lasso",
                       "iv-lasso-cv", "full-lasso-cv", "sup-score"),
    "iv_nosignal": ("2sls-all", "full-all", "iv-lasso", "full-lasso",
                    "iv-lasso-cv", "full-lasso-cv", "sup-score"),
    "plm": ("lasso", "post-lasso", "indirect-post-lasso", "double-selection",
            "double-selection-oracle", "oracle"),
}

METRIC_KEYS = ("bias_norm", "prediction_error", "rmse", "mean_bias", "median_bias",
               "std_dev", "rejection_rate", "zero_selection_count", "mean_model_size")


@dataclass(frozen=True)
class DgpSpec:
    """Design parameters for one study."""

    kind: str
    n: int
    p: int
    rho: float = 0.5
    sigma: float = 1.0
    f_star: float = None
    corr_zeta_v: float = 0.3
    reps: int = 100
    seed: SeedSpec = field(default_factory=lambda: SeedSpec(12345))
    c: float = 1.1
    gamma: float = 0.05
    num_sims: int = 1000
    cv_folds: int = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown study kind {self.kind!r}")
        if not (-1.0 < self.rho < 1.0):
            raise ValueError("rho must be in (-1,1)")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.f_star is not None and self.f_star <= 0:
            raise ValueError("f_star must be positive")
        if self.kind == "iv_nosignal" and self.f_star is not None:
            raise ValueError("f_star has no meaning in the no-signal design")
        if self.kind == "iv_exponential" and self.f_star is None:
            raise ValueError("iv_exponential needs f_star")

    @property
    def folds(self):
        if self.cv_folds is not None:
            return self.cv_folds
        return 10 if self.kind.startswith("iv") else 5

    def to_dict(self):
        return {
            "kind": self.kind, "n": self.n, "p": self.p, "rho": self.rho,
            "sigma": self.sigma, "f_star": self.f_star,
            "corr_zeta_v": self.corr_zeta_v, "reps": self.reps,
            "master_seed": self.seed.master_seed, "c": self.c,
            "gamma": self.gamma, "num_sims": self.num_sims, "folds": self.folds,
        }


@dataclass
class McReport:
    study: str
    spec: dict
    rows: list
    rep_data: dict = None

    def to_dict(self):
        return {"schema": "sparse-infer/1", "study": self.study,
                "spec": self.spec, "rows": self.rows}


# --- designs ----------------------------------------------------------------

def _ar1(gen, n, p, rho):
    g = gen.standard_normal((n, p))
    if rho == 0.0:
        return g
    z = np.empty((n, p))
    z[:, 0] = g[:, 0]
    root = math.sqrt(1.0 - rho * rho)
    for j in range(1, p):
        z[:, j] = rho * z[:, j - 1] + root * g[:, j]
    return z


def mean_regression_beta0(p):
    if p < 6:
        raise ValueError("mean-regression design needs p >= 6")
    beta0 = np.zeros(p)
    beta0[:6] = [1.0, 1.0, 1 / 2, 1 / 3, 1 / 4, 1 / 5]
    return beta0


def gen_mean_regression(spec, rep):
    """One draw of the sparse mean-regression design: intercept plus AR(rho)
    covariates, six-coefficient truth, Gaussian noise.  Returns the raw
    dataset and the coefficient truth."""
    if spec.kind != "mean_regression":
        raise ValueError("spec.kind mismatch")
    gen = spec.seed.with_stream(rep).generator(STREAM_DGP)
    z = _ar1(gen, spec.n, spec.p - 1, spec.rho)
    x = np.column_stack([np.ones(spec.n), z])
    beta0 = mean_regression_beta0(spec.p)
    y = x @ beta0 + spec.sigma * gen.standard_normal(spec.n)
    return Dataset(y=y, x=x), beta0


@lru_cache(maxsize=None)
def _iv_sigma_v(n, p, rho, f_star):
    """Noise scale solving n Pi' S Pi / (F* Pi'Pi) for the exponential
    first stage under the AR(rho) instrument covariance."""
    h = np.arange(p)
    pi = 0.7 ** h
    S = rho ** np.abs(np.subtract.outer(h, h))
    quad = float(pi @ (S @ pi))
    return math.sqrt(n * quad / (f_star * float(pi @ pi))), pi


def gen_iv(spec, rep):
    """One draw of the IV design: 100-ish AR(rho) instruments, exponential
    (or zero) first-stage coefficients, endogeneity through correlated
    disturbances.  Returns the problem and the truth (alpha0, Pi, sigma_v)."""
    if spec.kind not in ("iv_exponential", "iv_nosignal"):
        raise ValueError("spec.kind mismatch")
    gen = spec.seed.with_stream(rep).generator(STREAM_DGP)
    n, p = spec.n, spec.p
    x = _ar1(gen, n, p, spec.rho)
    if spec.kind == "iv_nosignal":
        pi = np.zeros(p)
        sigma_v = 1.0
    else:
        sigma_v, pi = _iv_sigma_v(n, p, spec.rho, spec.f_star)
    zeta = gen.standard_normal(n)
    e2 = gen.standard_normal(n)
    rho_zv = spec.corr_zeta_v
    v = sigma_v * (rho_zv * zeta + math.sqrt(1.0 - rho_zv**2) * e2)
    y2 = x @ pi + v
    alpha0 = 1.0
    y1 = alpha0 * y2 + zeta
    prob = iv_mod.IVProblem(y1=y1, y2=y2, w=np.ones((n, 1)), x_instruments=x)
    return prob, {"alpha0": alpha0, "pi": pi, "sigma_v": sigma_v}


def plm_truth(p):
    if p < 15:
        raise ValueError("plm design needs p >= 15")
    beta0 = np.zeros(p)
    block = np.array([1.0, 1 / 2, 1 / 3, 1 / 4, 1 / 5])
    beta0[0:5] = block
    beta0[10:15] = block
    eta0 = np.zeros(p)
    eta0[:10] = 1.0 / np.arange(1, 11)
    return beta0, eta0


def gen_plm(spec, rep):
    """One draw of the partially linear design; both nuisance functions are
    sparse linear forms in the AR(rho) controls."""
    if spec.kind != "plm":
        raise ValueError("spec.kind mismatch")
    gen = spec.seed.with_stream(rep).generator(STREAM_DGP)
    n, p = spec.n, spec.p
    beta0, eta0 = plm_truth(p)
    x = _ar1(gen, n, p, spec.rho)
    zeta = gen.standard_normal(n)
    v = gen.standard_normal(n)
    d = x @ eta0 + v
    alpha0 = 1.0
    y1 = alpha0 * d + x @ beta0 + zeta
    prob = plm_mod.PlmProblem(y1=y1, d=d, x_controls=x)
    return prob, {"alpha0": alpha0, "beta0": beta0, "eta0": eta0}


# --- per-replication work ---------------------------------------------------

def _rep_mean(spec, estimators, rep):
    d_raw, beta0 = gen_mean_regression(spec, rep)
    d = normalize(d_raw)
    seed_rep = spec.seed.with_stream(rep)
    unpen = (0,)
    pen_cols = list(range(1, d.p))
    rule = pen.PenaltyRule(kind=pen.LASSO_XDEP, c=spec.c, gamma=spec.gamma,
                           num_sims=spec.num_sims, folds=spec.folds)

    lam_base = None
    lam_sqrt = None
    cv_lam = None
    fits = {}

    def base():
        nonlocal lam_base
        if lam_base is None:
            lam_base = pen.simulate_score_quantile(d, spec.gamma, spec.num_sims,
                                                   seed_rep, pen_cols)
        return lam_base

    def sqrt_lam():
        nonlocal lam_sqrt
        if lam_sqrt is None:
            lam_sqrt = spec.c * pen.simulate_selfnormalized_quantile(
                d, spec.gamma, spec.num_sims, seed_rep, pen_cols)
        return lam_sqrt

    def cv():
        nonlocal cv_lam
        if cv_lam is None:
            grid = pen.default_cv_grid(d, unpenalized=unpen)
            cv_lam = pen.cv_lambda(d, spec.folds, grid, seed_rep, unpenalized=unpen)
        return cv_lam

    def lasso_fit():
        if "lasso" not in fits:
            lam = 2.0 * spec.c * spec.sigma * base()
            fits["lasso"] = solvers.fit_lasso(d, lam, unpenalized=unpen)
        return fits["lasso"]

    def sqrt_fit():
        if "sqrt" not in fits:
            fits["sqrt"] = solvers.fit_sqrt_lasso(d, sqrt_lam(), unpenalized=unpen)
        return fits["sqrt"]

    def iter_fit():
        if "iter" not in fits:
            fits["iter"] = pen.iterated_sigma(d, "lasso", rule, seed_rep,
                                              unpenalized=unpen,
                                              base_quantile=base()).fit
        return fits["iter"]

    def cv_fit():
        if "cv" not in fits:
            fits["cv"] = solvers.fit_lasso(d, cv(), unpenalized=unpen)
        return fits["cv"]

    def refit(fit):
        sel = [j for j in fit.support if j not in unpen]
        return solvers.post_ols(d, selected=sel, always_include=unpen)

    out = {}
    for name in estimators:
        if name == "oracle":
            sel = [j for j in np.flatnonzero(beta0) if j not in unpen]
            beta_n = refit_beta = solvers.post_ols(d, selected=sel,
                                                   always_include=unpen).beta
        elif name == "lasso":
            beta_n = lasso_fit().beta
        elif name == "post-lasso":
            beta_n = refit(lasso_fit()).beta
        elif name == "sqrt-lasso":
            beta_n = sqrt_fit().beta
        elif name == "post-sqrt-lasso":
            beta_n = refit(sqrt_fit()).beta
        elif name == "iterated-lasso":
            beta_n = iter_fit().beta
        elif name == "post-iterated-lasso":
            beta_n = refit(iter_fit()).beta
        elif name == "cv-lasso":
            beta_n = cv_fit().beta
        elif name == "cv-post-lasso":
            beta_n = refit(cv_fit()).beta
        else:
            raise ValueError(f"unknown estimator {name!r} for this study")
        beta_raw = beta_n / d.col_scales
        err = beta_raw - beta0
        pred = math.sqrt(float(np.mean((d_raw.x @ err) ** 2)))
        size = int(np.count_nonzero(beta_n[1:]))
        out[name] = {"err": err, "pred": pred, "size": size}
    return out


def _iv_subsample(spec, prob, rep):
    """Instrument subset for conventional 2SLS when the full set would
    exhaust the degrees of freedom (uniform draw per replication)."""
    limit = prob.n - prob.k_w - 1
    if prob.p <= limit:
        return np.arange(prob.p)
    gen = spec.seed.with_stream(rep).generator(STREAM_SUBSAMPLE)
    return np.sort(gen.choice(prob.p, size=limit, replace=False))


def _rep_iv(spec, estimators, rep, power_grid=None):
    prob, truth = gen_iv(spec, rep)
    alpha0 = truth["alpha0"]
    seed_rep = spec.seed.with_stream(rep)
    it_rule = pen.PenaltyRule(kind=pen.LASSO_XDEP, c=spec.c, gamma=spec.gamma,
                              num_sims=spec.num_sims)
    cv_rule = pen.PenaltyRule(kind=pen.CV, c=spec.c, gamma=spec.gamma,
                              folds=spec.folds)

    sup_cache = {}

    def sup_stat(points):
        key = tuple(np.asarray(points).tolist())
        if key not in sup_cache:
            sup_cache[key] = iv_mod.sup_score(prob, grid=np.asarray(points),
                                              gamma=spec.gamma, c=spec.c,
                                              num_sims=spec.num_sims, seed=seed_rep)
        return sup_cache[key]

    fs_cache = {}

    def first_stage(rule_name):
        if rule_name not in fs_cache:
            rule = it_rule if rule_name == "iterated" else cv_rule
            fs_cache[rule_name] = iv_mod.fit_first_stage(prob, rule, seed_rep,
                                                         first_stage="post-lasso")
        return fs_cache[rule_name]

    def lasso_row(rule_name, second):
        fs = first_stage(rule_name)
        if second == "2sls":
            fit = iv_mod._iv_from_fitted(prob, fs.fhat, fs.selected,
                                         fs.fallback_used, "iv-selected")
        else:
            fit = iv_mod.fit_fuller(prob, fs.selected, a=1.0)
        a1, s1 = float(fit.alpha_hat[0]), float(fit.se[0])
        if fs.zero_selection:
            res = sup_stat((alpha0,))
            reject = bool(res.statistic[0] > res.critical_finite)
        else:
            reject = bool(abs(a1 - alpha0) / s1 > Z975)
        row = {"alpha": a1, "se": s1, "reject": reject,
               "zero_sel": fs.zero_selection, "size": int(fs.selected.size)}
        if power_grid is not None:
            if fs.zero_selection:
                res = sup_stat(tuple(power_grid))
                row["power_reject"] = res.statistic > res.critical_finite
            else:
                row["power_reject"] = np.abs(a1 - np.asarray(power_grid)) / s1 > Z975
        return row

    out = {}
    for name in estimators:
        if name == "2sls-all":
            sub = _iv_subsample(spec, prob, rep)
            fit = iv_mod.fit_2sls_all(prob, instruments=sub)
            a1, s1 = float(fit.alpha_hat[0]), float(fit.se[0])
            out[name] = {"alpha": a1, "se": s1,
                         "reject": bool(abs(a1 - alpha0) / s1 > Z975),
                         "zero_sel": None, "size": int(sub.size)}
        elif name == "full-all":
            sub = _iv_subsample(spec, prob, rep)
            fit = iv_mod.fit_fuller(prob, sub, a=1.0)
            a1 = float(fit.alpha_hat[0])
            # rejection needs many-instrument-robust SEs (out of scope):
            # point-estimate metrics only
            out[name] = {"alpha": a1, "se": float(fit.se[0]), "reject": None,
                         "zero_sel": None, "size": int(sub.size)}
        elif name == "iv-lasso":
            out[name] = lasso_row("iterated", "2sls")
        elif name == "full-lasso":
            out[name] = lasso_row("iterated", "fuller")
        elif name == "iv-lasso-cv":
            out[name] = lasso_row("cv", "2sls")
        elif name == "full-lasso-cv":
            out[name] = lasso_row("cv", "fuller")
        elif name == "sup-score":
            res = sup_stat((alpha0,))
            out[name] = {"alpha": None, "se": None,
                         "reject": bool(res.statistic[0] > res.critical_finite),
                         "zero_sel": None, "size": None}
            if power_grid is not None:
                resg = sup_stat(tuple(power_grid))
                out[name]["power_reject"] = resg.statistic > resg.critical_finite
        else:
            raise ValueError(f"unknown estimator {name!r} for this study")
    return out


def _rep_plm(spec, estimators, rep):
    prob, truth = gen_plm(spec, rep)
    alpha0 = truth["alpha0"]
    seed_rep = spec.seed.with_stream(rep)
    rule = pen.PenaltyRule(kind=pen.SQRT_XDEP, c=spec.c, gamma=spec.gamma,
                           num_sims=spec.num_sims)
    ones = np.ones(prob.n)

    def ols_row(sel):
        controls = np.column_stack([ones, prob.x_controls[:, sel]])
        alpha, se, _, _ = plm_mod._alpha_ols(prob.y1, prob.d, controls)
        return alpha, se

    out = {}
    for name in estimators:
        if name in ("lasso", "post-lasso", "indirect-post-lasso", "double-selection"):
            strategy = {"lasso": "lasso", "post-lasso": "post_lasso",
                        "indirect-post-lasso": "indirect",
                        "double-selection": "double"}[name]
            fit = plm_mod.fit_plm(prob, rule, seed_rep, strategy=strategy)
            a1, s1 = fit.alpha_hat, fit.se
            size = int(fit.i_union.size)
        elif name == "double-selection-oracle":
            sel = np.flatnonzero(truth["beta0"] + np.abs(truth["eta0"]))
            a1, s1 = ols_row(np.flatnonzero(np.abs(truth["beta0"]) + np.abs(truth["eta0"])))
            size = int(np.count_nonzero(np.abs(truth["beta0"]) + np.abs(truth["eta0"])))
        elif name == "oracle":
            sel = np.flatnonzero(np.abs(truth["beta0"]))
            a1, s1 = ols_row(sel)
            size = int(sel.size)
        else:
            raise ValueError(f"unknown estimator {name!r} for this study")
        out[name] = {"alpha": a1, "se": s1,
                     "reject": bool(abs(a1 - alpha0) / s1 > Z975), "size": size}
    return out


# --- aggregation ------------------------------------------------------------

def _metrics_mean(rows):
    errs = np.stack([r["err"] for r in rows])
    preds = np.array([r["pred"] for r in rows])
    sizes = np.array([r["size"] for r in rows], dtype=float)
    m = dict.fromkeys(METRIC_KEYS)
    m["bias_norm"] = float(np.linalg.norm(errs.mean(axis=0)))
    m["prediction_error"] = float(preds.mean())
    m["mean_model_size"] = float(sizes.mean())
    return m


def _metrics_alpha(rows, alpha0, kind):
    m = dict.fromkeys(METRIC_KEYS)
    alphas = np.array([r["alpha"] for r in rows], dtype=float) \
        if rows[0]["alpha"] is not None else None
    if alphas is not None:
        dev = alphas - alpha0
        m["rmse"] = float(np.sqrt(np.mean(dev**2)))
        m["mean_bias"] = float(np.mean(dev))
        m["median_bias"] = float(np.median(dev))
        m["std_dev"] = float(np.std(alphas, ddof=1)) if alphas.size > 1 else 0.0
    rejects = [r["reject"] for r in rows]
    if rejects[0] is not None:
        m["rejection_rate"] = float(np.mean([bool(x) for x in rejects]))
    if kind.startswith("iv"):
        zs = [r["zero_sel"] for r in rows]
        if zs[0] is not None:
            m["zero_selection_count"] = int(sum(bool(z) for z in zs))
    sizes = [r["size"] for r in rows]
    if sizes[0] is not None:
        m["mean_model_size"] = float(np.mean([float(s) for s in sizes]))
    return m


def run_study(spec, estimators=None, threads=1, keep_reps=False, power_grid=None):
    """Run `spec.reps` independent replications and aggregate per-estimator
    metrics into a report.

    Replications may run on a thread pool; per-replication results are
    reduced in replication order so the report does not depend on the
    worker count.  `keep_reps` attaches the raw per-replication records for
    diagnostics (not serialized).
    """
    estimators = list(estimators) if estimators is not None \
        else list(DEFAULT_ESTIMATORS[spec.kind])
    known = DEFAULT_ESTIMATORS[spec.kind]
    for name in estimators:
        if name not in known:
            raise ValueError(f"estimator {name!r} not available for {spec.kind}")

    if spec.kind == "mean_regression":
        work = lambda rep: _rep_mean(spec, estimators, rep)
    elif spec.kind in ("iv_exponential", "iv_nosignal"):
        work = lambda rep: _rep_iv(spec, estimators, rep, power_grid=power_grid)
    else:
        work = lambda rep: _rep_plm(spec, estimators, rep)

    reps = range(spec.reps)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as ex:
            per_rep = list(ex.map(work, reps))
    else:
        per_rep = [work(rep) for rep in reps]

    rows = []
    for name in estimators:
        rows_est = [per_rep[r][name] for r in range(spec.reps)]
        if spec.kind == "mean_regression":
            metrics = _metrics_mean(rows_est)
        else:
            metrics = _metrics_alpha(rows_est, 1.0, spec.kind)
        row = {"estimator": name, "metrics": metrics}
        if power_grid is not None and rows_est[0].get("power_reject") is not None:
            curve = np.mean(np.stack([r["power_reject"] for r in rows_est]), axis=0)
            row["power"] = [[float(a), float(r)] for a, r in zip(power_grid, curve)]
        rows.append(row)

    report = McReport(study=spec.kind, spec=spec.to_dict(), rows=rows)
    if keep_reps:
        report.rep_data = {name: [per_rep[r][name] for r in range(spec.reps)]
                           for name in estimators}
    return report
