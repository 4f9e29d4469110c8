"""Generic two-step GMM: moment stacking, optimization, clustered inference.

Moments are firm-averaged: each firm contributes the time average of its
per-observation instrument-times-residual vectors, and the sample moment
is the cross-firm mean.  The long-run covariance is therefore clustered
at the firm level by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.optimize

from .panel import CenteredPanel, firm_means
from .params import ParamVector

RIDGE_SCALE = 1e-10
JACOBIAN_REL_STEP = 1e-6
JACOBIAN_ABS_FLOOR = 1e-8
MAX_ITER = 2000


@dataclass(frozen=True)
class MomentSpec:
    """One residual with its instruments and block tag.

    ``residual_fn(panel, theta)`` returns a per-observation error vector.
    ``instrument_fn(panel)`` returns the instrument matrix (no constant
    column; the panel is de-meaned).  When ``instrument_fn`` is None the
    residual itself is the moment contribution, which covers covariance
    restrictions written as products of residuals.
    """

    residual_fn: Callable[[CenteredPanel, ParamVector], np.ndarray]
    instrument_fn: Optional[Callable[[CenteredPanel], np.ndarray]]
    block_tag: str = "A"
    name: str = ""


@dataclass
class GmmResult:
    theta_hat: ParamVector
    free_names: Sequence[str]
    param_labels: list[str]
    vcov: np.ndarray
    j_stat: float
    df: int
    converged: bool
    n_firms: int
    n_obs: int
    objective_value: float
    weight: np.ndarray
    moment_cov: np.ndarray
    g_n: np.ndarray
    warnings: list[str] = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.vcov), 0.0))

    def se_of(self, label: str) -> float:
        return float(self.se[self.param_labels.index(label)])


def _instrument_cache(specs: Sequence[MomentSpec], p: CenteredPanel) -> list:
    cache = []
    for spec in specs:
        if spec.instrument_fn is None:
            cache.append(None)
        else:
            z = np.asarray(spec.instrument_fn(p), dtype=float)
            if z.ndim == 1:
                z = z.reshape(-1, 1)
            cache.append(z)
    return cache


def moment_matrix(
    specs: Sequence[MomentSpec],
    p: CenteredPanel,
    theta: ParamVector,
    instruments: list | None = None,
) -> np.ndarray:
    """Per-observation stacked moment contributions, (n_obs, K)."""
    if instruments is None:
        instruments = _instrument_cache(specs, p)
    blocks = []
    for spec, z in zip(specs, instruments):
        u = np.asarray(spec.residual_fn(p, theta), dtype=float)
        blocks.append(u.reshape(-1, 1) if z is None else z * u[:, None])
    return np.concatenate(blocks, axis=1)


def firm_averaged_moments(
    specs: Sequence[MomentSpec],
    p: CenteredPanel,
    theta: ParamVector,
    instruments: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample moment vector and the per-firm time-averaged contributions."""
    if p.n_obs == 0:
        raise ValueError("empty panel")
    per_obs = moment_matrix(specs, p, theta, instruments)
    per_firm = firm_means(p, per_obs)
    return per_firm.mean(axis=0), per_firm


def _numeric_jacobian(fun, x0: np.ndarray, rel_step=JACOBIAN_REL_STEP,
                      abs_floor=JACOBIAN_ABS_FLOOR) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued function."""
    f0 = np.atleast_1d(fun(x0))
    jac = np.empty((f0.size, x0.size))
    for i in range(x0.size):
        h = max(rel_step * abs(x0[i]), abs_floor)
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2.0 * h)
    if not np.all(np.isfinite(jac)):
        raise FloatingPointError("non-finite entries in numerical Jacobian")
    return jac


def _safe_inverse(sigma: np.ndarray, warnings_out: list[str]) -> np.ndarray:
    """Invert a moment covariance, ridging it when near-singular."""
    dim = sigma.shape[0]
    ridge = RIDGE_SCALE * np.trace(sigma) / dim if dim else 0.0
    try:
        cond = np.linalg.cond(sigma)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e12:
        sigma = sigma + max(ridge, RIDGE_SCALE) * np.eye(dim)
        warnings_out.append("moment covariance near-singular; ridge applied")
    return np.linalg.inv(sigma)


def moment_cov(per_firm: np.ndarray) -> np.ndarray:
    """Firm-clustered covariance of the averaged moments (uncentered)."""
    n = per_firm.shape[0]
    return per_firm.T @ per_firm / n


def _first_step_weight(per_firm: np.ndarray) -> np.ndarray:
    """Block-scaled identity: each moment weighted by its inverse variance."""
    var = per_firm.var(axis=0)
    var = np.where(var > 1e-300, var, 1.0)
    return np.diag(1.0 / var)


def two_step_estimate(
    specs: Sequence[MomentSpec],
    p: CenteredPanel,
    theta0: ParamVector,
    free_names: Sequence[str],
) -> GmmResult:
    """Two-step GMM over the named free parameters of ``theta0``.

    The first step minimizes under a block-scaled identity weight, the
    second under the inverse of the firm-clustered moment covariance.
    Each minimization runs a quasi-Newton descent followed by a simplex
    polish; just-identified systems get a final Gauss-Newton root polish
    so the objective reaches numerical zero.
    """
    instruments = _instrument_cache(specs, p)
    x0 = theta0.pack(free_names)
    n_free = x0.size

    def g_of(x: np.ndarray) -> np.ndarray:
        theta = theta0.unpack(free_names, x)
        g, _ = firm_averaged_moments(specs, p, theta, instruments)
        return g

    g0, per_firm0 = firm_averaged_moments(specs, p, theta0, instruments)
    n_moments = g0.size
    if n_moments < n_free:
        raise ValueError(f"{n_moments} moments cannot identify {n_free} parameters")

    warnings_out: list[str] = []
    weight = _first_step_weight(per_firm0)
    x1, conv1 = _minimize_quadratic(g_of, x0, weight, n_moments == n_free)

    _, per_firm1 = firm_averaged_moments(specs, p, theta0.unpack(free_names, x1),
                                         instruments)
    sigma = moment_cov(per_firm1)
    w_opt = _safe_inverse(sigma, warnings_out)
    x2, conv2 = _minimize_quadratic(g_of, x1, w_opt, n_moments == n_free)

    theta_hat = theta0.unpack(free_names, x2)
    g_hat, per_firm_hat = firm_averaged_moments(specs, p, theta_hat, instruments)
    sigma_hat = moment_cov(per_firm_hat)
    j_stat = float(p.n_firms * g_hat @ w_opt @ g_hat)
    vcov = _sandwich_from_parts(
        lambda x: g_of(x), x2, w_opt, sigma_hat, p.n_firms, warnings_out
    )
    return GmmResult(
        theta_hat=theta_hat,
        free_names=list(free_names),
        param_labels=theta0.packed_labels(free_names),
        vcov=vcov,
        j_stat=j_stat,
        df=n_moments - n_free,
        converged=bool(conv1 and conv2 and np.isfinite(j_stat)),
        n_firms=p.n_firms,
        n_obs=p.n_obs,
        objective_value=float(g_hat @ w_opt @ g_hat),
        weight=w_opt,
        moment_cov=sigma_hat,
        g_n=g_hat,
        warnings=warnings_out,
    )


def _minimize_quadratic(g_of, x0: np.ndarray, weight: np.ndarray,
                        just_identified: bool) -> tuple[np.ndarray, bool]:
    def objective(x):
        g = g_of(x)
        return float(g @ weight @ g)

    res = scipy.optimize.minimize(
        objective, x0, method="L-BFGS-B",
        options={"maxiter": MAX_ITER, "ftol": 1e-14, "gtol": 1e-12},
    )
    best_x, best_f = res.x, res.fun
    polish = scipy.optimize.minimize(
        objective, best_x, method="Nelder-Mead",
        options={"maxiter": MAX_ITER, "xatol": 1e-8, "fatol": 1e-12},
    )
    if polish.fun < best_f:
        best_x, best_f = polish.x, polish.fun
    converged = bool(res.success or polish.success)

    if just_identified:
        try:
            chol = np.linalg.cholesky(0.5 * (weight + weight.T))
        except np.linalg.LinAlgError:
            chol = np.diag(np.sqrt(np.maximum(np.diag(weight), 1e-300)))
        root = scipy.optimize.least_squares(
            lambda x: chol.T @ g_of(x), best_x, method="lm",
            xtol=1e-15, ftol=1e-15, gtol=1e-15,
        )
        if root.cost * 2.0 <= best_f:
            best_x = root.x
            converged = converged or root.status > 0
    return best_x, converged


def _sandwich_from_parts(g_of, x_hat, weight, sigma, n_firms, warnings_out):
    jac = _numeric_jacobian(g_of, x_hat)
    if np.linalg.matrix_rank(jac, tol=1e-10) < jac.shape[1]:
        warnings_out.append("moment Jacobian rank-deficient; vcov unreliable")
    bread = np.linalg.pinv(jac.T @ weight @ jac)
    middle = jac.T @ weight @ sigma @ weight @ jac
    vcov = bread @ middle @ bread / n_firms
    return 0.5 * (vcov + vcov.T)


def clustered_sandwich(
    specs: Sequence[MomentSpec],
    p: CenteredPanel,
    theta_hat: ParamVector,
    weight: np.ndarray,
    free_names: Sequence[str],
) -> np.ndarray:
    """Firm-clustered sandwich covariance of the free parameters.

    Returns the finite-sample covariance (the asymptotic variance divided
    by the number of firms).
    """
    instruments = _instrument_cache(specs, p)
    x_hat = theta_hat.pack(free_names)

    def g_of(x):
        g, _ = firm_averaged_moments(specs, p, theta_hat.unpack(free_names, x),
                                     instruments)
        return g

    _, per_firm = firm_averaged_moments(specs, p, theta_hat, instruments)
    sigma = moment_cov(per_firm)
    return _sandwich_from_parts(g_of, x_hat, weight, sigma, p.n_firms, [])


def inference_at(
    specs: Sequence[MomentSpec],
    p: CenteredPanel,
    theta_hat: ParamVector,
    free_names: Sequence[str],
    converged: bool = True,
) -> GmmResult:
    """Clustered inference at an externally obtained point estimate.

    Used by estimators that solve their moment systems with structured
    linear algebra; the J-statistic, optimal weight and sandwich
    covariance are computed exactly as in :func:`two_step_estimate`.
    """
    instruments = _instrument_cache(specs, p)
    warnings_out: list[str] = []
    g_hat, per_firm = firm_averaged_moments(specs, p, theta_hat, instruments)
    sigma = moment_cov(per_firm)
    w_opt = _safe_inverse(sigma, warnings_out)
    x_hat = theta_hat.pack(free_names)

    def g_of(x):
        g, _ = firm_averaged_moments(specs, p, theta_hat.unpack(free_names, x),
                                     instruments)
        return g

    vcov = _sandwich_from_parts(g_of, x_hat, w_opt, sigma, p.n_firms, warnings_out)
    j_stat = float(p.n_firms * g_hat @ w_opt @ g_hat)
    return GmmResult(
        theta_hat=theta_hat,
        free_names=list(free_names),
        param_labels=theta_hat.packed_labels(free_names),
        vcov=vcov,
        j_stat=j_stat,
        df=g_hat.size - x_hat.size,
        converged=converged,
        n_firms=p.n_firms,
        n_obs=p.n_obs,
        objective_value=float(g_hat @ w_opt @ g_hat),
        weight=w_opt,
        moment_cov=sigma,
        g_n=g_hat,
        warnings=warnings_out,
    )


def delta_method(fn: Callable[[ParamVector], np.ndarray],
                 result: GmmResult) -> tuple[np.ndarray, np.ndarray]:
    """Values and standard errors of a smooth map of the fitted parameters."""
    x_hat = result.theta_hat.pack(result.free_names)

    def f_of(x):
        return np.atleast_1d(np.asarray(
            fn(result.theta_hat.unpack(result.free_names, x)), dtype=float))

    values = f_of(x_hat)
    jac = _numeric_jacobian(f_of, x_hat)
    variances = np.maximum(np.einsum("ij,jk,ik->i", jac, result.vcov, jac), 0.0)
    return values, np.sqrt(variances)
