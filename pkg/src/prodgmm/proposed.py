"""Markov-free production function estimator.

Identification comes from three groups of moment conditions:

* proxy moments (block A): productivity is eliminated across pairs of
  demand/output residuals, and the resulting shock-only errors are
  orthogonal to capital, labor, controls and the excluded inputs;
* covariance moments (block B): the two cross-residual covariance
  restrictions not already implied by block A, which pin down the
  absolute scale of the productivity loadings;
* curvature moments (block C): conditional moment restrictions from the
  assumed homothetic shape of E[productivity | k, l], which separate
  beta_k and beta_l from the demand slopes.

Blocks A+B are just-identified for the intermediate-input and demand
parameters; block C is fitted afterwards on a profile grid over the CES
aggregator parameters.  Point estimation runs on weighted cross-product
matrices (all A+B moments are bilinear forms in the data), which makes a
full fit a few milliseconds; inference is delegated to the generic GMM
engine at the solution.
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.optimize

from . import gmm
from .errors import DegeneracyError, EstimationError
from .gmm import GmmResult, MomentSpec
from .panel import (CenteredPanel, Panel, Residuals, centered_basis, demean,
                    firm_means, residuals)
from .params import ParamVector

THETA1_FIELDS = (
    "beta_m", "beta_e", "beta_w",
    "gamma_k", "gamma_l", "delta_k", "delta_l", "zeta_k", "zeta_l",
    "gamma_omega", "delta_omega", "zeta_omega",
    "h_coeffs_m", "h_coeffs_e", "h_coeffs_w",
)

PROFILE_MAX_ITER = 200
PROFILE_TOL = 1e-8
WEAK_T_THRESHOLD = 1.96


# ---------------------------------------------------------------------------
# CES index
# ---------------------------------------------------------------------------

def ces_index(k, l, alpha: float, rho_v: float):
    """CES aggregate of log capital and log labor, in log form.

    Evaluated as a log-sum-exp so large ``rho_v * k`` terms cannot
    overflow; ``|rho_v| < 1e-8`` routes through the Cobb-Douglas limit
    ``alpha*k + (1-alpha)*l``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    k = np.asarray(k, dtype=float)
    l = np.asarray(l, dtype=float)
    if abs(rho_v) < 1e-8:
        return alpha * k + (1.0 - alpha) * l
    return np.logaddexp(np.log(alpha) + rho_v * k,
                        np.log1p(-alpha) + rho_v * l) / rho_v


def default_profile_grid() -> list[tuple[float, float]]:
    """Default (rho_v, alpha) lattice for the block C profile search."""
    rhos = [round(r, 10) for r in np.arange(-1.0, 1.0 + 1e-9, 0.1)]
    alphas = [round(a, 10) for a in np.arange(0.05, 0.95 + 1e-9, 0.05)]
    return [(r, a) for r in rhos for a in alphas]


# ---------------------------------------------------------------------------
# Moment specifications (blocks A and B)
# ---------------------------------------------------------------------------

def _demand_residual_fn(input_name):
    def fn(p: CenteredPanel, theta: ParamVector):
        return getattr(residuals(p, theta), f"{input_name}_tilde")
    return fn


def _u_error(which: str):
    # the non-normalized output residual keeps every error invariant to
    # the capital/labor location shift (beta and slope shifts cancel)
    def fn(p: CenteredPanel, theta: ParamVector):
        res = residuals(p, theta, normalize_kl=False)
        if which == "u1":
            return theta.delta_omega * res.m_tilde - theta.gamma_omega * res.e_tilde
        if which == "u2":
            return theta.zeta_omega * res.m_tilde - theta.gamma_omega * res.w_tilde
        return theta.gamma_omega * res.y_tilde - res.m_tilde
    return fn


def _u_times_y(which: str):
    u_fn = _u_error(which)

    def fn(p: CenteredPanel, theta: ParamVector):
        res = residuals(p, theta, normalize_kl=False)
        return u_fn(p, theta) * res.y_tilde
    return fn


def _scale_anchor_error(p: CenteredPanel, theta: ParamVector) -> np.ndarray:
    """Output residual minus the average loading-scaled demand signal.

    At the true parameters this equals the ex-post shock minus a mean of
    loading-scaled demand shocks, so it is orthogonal to the output
    residual of any other period.
    """
    res = residuals(p, theta, normalize_kl=False)
    signal = (res.m_tilde / theta.gamma_omega + res.e_tilde / theta.delta_omega
              + res.w_tilde / theta.zeta_omega)
    return res.y_tilde - signal / 3.0


def _lagged_anchor_times_y(p: CenteredPanel, theta: ParamVector) -> np.ndarray:
    """Previous-period anchor error times the current output residual.

    Zero for each firm's first observation, so the contribution vector
    stays aligned with the panel.
    """
    res = residuals(p, theta, normalize_kl=False)
    u = _scale_anchor_error(p, theta)
    out = np.zeros(p.n_obs)
    lag_ok = np.ones(p.n_obs, dtype=bool)
    lag_ok[p.firm_starts] = False
    idx = np.flatnonzero(lag_ok)
    out[idx] = u[idx - 1] * res.y_tilde[idx]
    return out


def _instrument_fn(columns: Sequence[str], basis_degree: int):
    def fn(p: CenteredPanel):
        basis = centered_basis(p, basis_degree)
        cols = []
        for name in columns:
            cols.append(basis if name == "basis" else getattr(p, name)[:, None])
        return np.concatenate(cols, axis=1)
    return fn


def block_a_moments(p: CenteredPanel, theta: ParamVector,
                    basis_degree: int = 2) -> list[MomentSpec]:
    """Proxy moment specs: shock-only errors with asymmetric instruments.

    ``u1`` (materials vs electricity) is instrumented by (k, l, controls,
    w); ``u2`` (materials vs water) by (k, l, controls, e); ``u3``
    (output vs materials) by (k, l, controls, e, w).
    """
    for name in ("gamma_omega", "delta_omega", "zeta_omega"):
        if abs(getattr(theta, name)) < 1e-10:
            _warnings.warn(f"productivity loading {name} is numerically zero; "
                           "proxy errors are degenerate", RuntimeWarning)
    return [
        MomentSpec(_u_error("u1"), _instrument_fn(("k", "l", "basis", "w"), basis_degree),
                   block_tag="A", name="u1"),
        MomentSpec(_u_error("u2"), _instrument_fn(("k", "l", "basis", "e"), basis_degree),
                   block_tag="A", name="u2"),
        MomentSpec(_u_error("u3"), _instrument_fn(("k", "l", "basis", "e", "w"), basis_degree),
                   block_tag="A", name="u3"),
    ]


def block_b_moments(basis_degree: int = 2) -> list[MomentSpec]:
    """Covariance moment specs: the two restrictions independent of block A.

    The first, E[u1 * ytilde] = 0, is algebraically equivalent (given the
    block A conditions) to the covariance-ratio relation involving
    Cov(ytilde, mtilde) that pins the relative loadings.  The second
    anchors the absolute scale of the loadings: the contemporaneous
    second-moment system leaves a one-dimensional flat along which
    productivity content is traded between the output residual and the
    demand shocks, so one dynamic condition is required.  The anchor
    error (output residual minus the average loading-scaled demand
    signal) is a pure combination of period-t shocks at the truth, hence
    orthogonal to the next period's output residual whenever the demand
    shocks are exogenous to the productivity path and the ex-post shock
    is serially uncorrelated; no restriction on the form of the
    productivity dynamics is involved.  Both conditions are invariant to
    the capital/labor location shift at any block-A-consistent point.
    """
    return [
        MomentSpec(_u_times_y("u1"), None, block_tag="B", name="u1*ytilde"),
        MomentSpec(_lagged_anchor_times_y, None, block_tag="B", name="lag_anchor*ytilde"),
    ]


def block_ab_moments(p: CenteredPanel, theta: ParamVector,
                     basis_degree: int = 2) -> list[MomentSpec]:
    return block_a_moments(p, theta, basis_degree) + block_b_moments(basis_degree)


# ---------------------------------------------------------------------------
# Closed-form scale ratios
# ---------------------------------------------------------------------------

def scale_ratios(res: Residuals) -> tuple[float, float, float]:
    """Productivity loadings from covariance ratios of the residuals.

    Uses the plug-in covariances (denominator N*T):
    gamma = Cov(m~, e~)/Cov(y~, e~), delta = Cov(m~, e~)/Cov(y~, m~),
    zeta = Cov(e~, w~)/Cov(y~, e~).
    """
    def cov(a, b):
        return float(np.mean(a * b) - np.mean(a) * np.mean(b))

    c_me = cov(res.m_tilde, res.e_tilde)
    c_ye = cov(res.y_tilde, res.e_tilde)
    c_ym = cov(res.y_tilde, res.m_tilde)
    c_ew = cov(res.e_tilde, res.w_tilde)
    for name, den in (("Cov(y~, e~)", c_ye), ("Cov(y~, m~)", c_ym)):
        if abs(den) < 1e-12:
            raise DegeneracyError(f"{name} = {den:.3e} is too small to form scale ratios")
    return c_me / c_ye, c_me / c_ym, c_ew / c_ye


# ---------------------------------------------------------------------------
# Cross-product (Gram) machinery for fast point estimation
# ---------------------------------------------------------------------------

class _GramSystem:
    """Blocks A+B moments as functions of one weighted Gram matrix.

    Every moment is a bilinear form v' S w in the panel columns, with
    coefficient vectors that depend on the parameters, so point
    estimation never rescans the data.  Observations are weighted by
    1/(N * T_firm) to reproduce the firm-averaged sample moments.
    """

    COLS = ("y", "k", "l", "m", "e", "w")

    def __init__(self, p: CenteredPanel, basis_degree: int):
        basis = centered_basis(p, basis_degree)
        self.db = basis.shape[1]
        mat = np.column_stack([p.y, p.k, p.l, p.m, p.e, p.w] + [basis]) \
            if self.db else np.column_stack([p.y, p.k, p.l, p.m, p.e, p.w])
        w_obs = 1.0 / (p.n_firms * p.firm_counts[p.firm_codes])
        self.s1 = w_obs @ mat
        self.gram = (mat * w_obs[:, None]).T @ mat
        lag_ok = np.ones(p.n_obs, dtype=bool)
        lag_ok[p.firm_starts] = False
        idx = np.flatnonzero(lag_ok)
        self.gram_lag = (mat[idx] * w_obs[idx, None]).T @ mat[idx - 1]
        self.nv = mat.shape[1]
        self.idx = {name: i for i, name in enumerate(self.COLS)}

    def _unit(self, name: str) -> np.ndarray:
        vec = np.zeros(self.nv)
        vec[self.idx[name]] = 1.0
        return vec

    def coef_vectors(self, theta: ParamVector) -> dict[str, np.ndarray]:
        c_m = self._unit("m")
        c_m[self.idx["k"]] = -theta.gamma_k
        c_m[self.idx["l"]] = -theta.gamma_l
        c_e = self._unit("e")
        c_e[self.idx["k"]] = -theta.delta_k
        c_e[self.idx["l"]] = -theta.delta_l
        c_w = self._unit("w")
        c_w[self.idx["k"]] = -theta.zeta_k
        c_w[self.idx["l"]] = -theta.zeta_l
        if self.db:
            c_m[6:] = -np.asarray(theta.h_coeffs_m)
            c_e[6:] = -np.asarray(theta.h_coeffs_e)
            c_w[6:] = -np.asarray(theta.h_coeffs_w)
        c_y = self._unit("y")
        c_y[self.idx["m"]] = -theta.beta_m
        c_y[self.idx["e"]] = -theta.beta_e
        c_y[self.idx["w"]] = -theta.beta_w
        c_y[self.idx["k"]] = -theta.beta_k
        c_y[self.idx["l"]] = -theta.beta_l
        return {"m": c_m, "e": c_e, "w": c_w, "y": c_y}

    def instrument_rows(self) -> list[np.ndarray]:
        """Row index lists for (u1, u2, u3) instruments."""
        base = [self.idx["k"], self.idx["l"], *range(6, 6 + self.db)]
        return [base + [self.idx["w"]],
                base + [self.idx["e"]],
                base + [self.idx["e"], self.idx["w"]]]

    def moments(self, theta: ParamVector) -> np.ndarray:
        c = self.coef_vectors(theta)
        u1 = theta.delta_omega * c["m"] - theta.gamma_omega * c["e"]
        u2 = theta.zeta_omega * c["m"] - theta.gamma_omega * c["w"]
        u3 = theta.gamma_omega * c["y"] - c["m"]
        rows1, rows2, rows3 = self.instrument_rows()
        su1, su2, su3 = self.gram @ u1, self.gram @ u2, self.gram @ u3
        block_a = np.concatenate([su1[rows1], su2[rows2], su3[rows3]])
        anchor = c["y"] - (c["m"] / theta.gamma_omega + c["e"] / theta.delta_omega
                           + c["w"] / theta.zeta_omega) / 3.0
        block_b = np.array([u1 @ (self.gram @ c["y"]),
                            c["y"] @ (self.gram_lag @ anchor)])
        return np.concatenate([block_a, block_b])

    def cov(self, ca: np.ndarray, cb: np.ndarray) -> float:
        return float(ca @ self.gram @ cb - (ca @ self.s1) * (cb @ self.s1))

    def ratio_update(self, theta: ParamVector) -> tuple[float, float, float]:
        c = self.coef_vectors(theta)
        c_me = self.cov(c["m"], c["e"])
        c_ye = self.cov(c["y"], c["e"])
        c_ym = self.cov(c["y"], c["m"])
        c_ew = self.cov(c["e"], c["w"])
        for name, den in (("Cov(y~, e~)", c_ye), ("Cov(y~, m~)", c_ym)):
            if abs(den) < 1e-12:
                raise DegeneracyError(f"{name} = {den:.3e} is too small to form scale ratios")
        return c_me / c_ye, c_me / c_ym, c_ew / c_ye

    def variance(self, coef: np.ndarray) -> float:
        return self.cov(coef, coef)


def _ols_from_gram(gram: np.ndarray, y_idx: int, x_idx: list[int]) -> np.ndarray:
    sxx = gram[np.ix_(x_idx, x_idx)]
    sxy = gram[x_idx, y_idx]
    return np.linalg.solve(sxx, sxy)


def _starting_values(system: _GramSystem) -> ParamVector:
    """Demand slopes and output elasticities from OLS; scales at 1.5."""
    idx, db = system.idx, system.db
    x_demand = [idx["k"], idx["l"], *range(6, 6 + db)]
    coef_m = _ols_from_gram(system.gram, idx["m"], x_demand)
    coef_e = _ols_from_gram(system.gram, idx["e"], x_demand)
    coef_w = _ols_from_gram(system.gram, idx["w"], x_demand)
    x_out = [idx["m"], idx["e"], idx["w"]]
    coef_y = _ols_from_gram(system.gram, idx["y"], x_out)
    return ParamVector(
        beta_m=coef_y[0], beta_e=coef_y[1], beta_w=coef_y[2],
        gamma_k=coef_m[0], gamma_l=coef_m[1],
        delta_k=coef_e[0], delta_l=coef_e[1],
        zeta_k=coef_w[0], zeta_l=coef_w[1],
        gamma_omega=1.5, delta_omega=1.5, zeta_omega=1.5,
        h_coeffs_m=tuple(coef_m[2:]), h_coeffs_e=tuple(coef_e[2:]),
        h_coeffs_w=tuple(coef_w[2:]),
    )


_SLOPE_FIELDS = ("gamma_k", "gamma_l", "delta_k", "delta_l", "zeta_k", "zeta_l",
                 "beta_m", "beta_e", "beta_w",
                 "h_coeffs_m", "h_coeffs_e", "h_coeffs_w")


def _solve_slopes_given_scales(system: _GramSystem, theta: ParamVector,
                               sqrt_weight: np.ndarray) -> ParamVector:
    """Minimize the inner objective over slopes, scales held fixed.

    Uses the proxy moments plus the lagged-residual anchor.  The proxy
    moments alone leave one flat direction (the trade-off between demand
    slopes and output elasticities that relabels productivity content),
    which the anchor pins; the loading-ratio condition stays out of the
    inner objective so that scale information flows only through the
    closed-form ratio updates.
    """
    n_a = 10 + 3 * system.db
    keep = np.r_[np.arange(n_a), n_a + 1]  # proxy moments + anchor
    sw = sqrt_weight[keep]
    x0 = theta.pack(_SLOPE_FIELDS)

    def g_inner(x):
        return sw * system.moments(theta.unpack(_SLOPE_FIELDS, x))[keep]

    sol = scipy.optimize.least_squares(g_inner, x0, method="lm",
                                       xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return theta.unpack(_SLOPE_FIELDS, sol.x)


@dataclass
class BlockAbFit:
    """Joint fit of the proxy and covariance blocks (theta_1)."""

    theta1: ParamVector
    gmm: GmmResult
    scale_ratios: tuple[float, float, float]
    iterations: int
    converged: bool
    shock_variances: dict[str, float]
    degenerate_shocks: bool
    jacobian_rank: int
    basis_degree: int = 2

    @property
    def n_moments(self) -> int:
        return self.gmm.g_n.size


def fit_block_ab(p: Panel | CenteredPanel, basis_degree: int = 2) -> BlockAbFit:
    """Estimate the intermediate-input and demand parameters.

    Iterates between a linear solve of the proxy moments at fixed
    productivity loadings and the closed-form covariance-ratio update of
    the loadings, then refines all parameters jointly on the full
    just-identified system.  Inference (clustered covariance, J) is
    computed by the GMM engine at the solution.
    """
    cp = demean(p)
    system = _GramSystem(cp, basis_degree)
    theta = _starting_values(system)

    # Fixed per-moment scaling: each proxy moment normalized by its
    # instrument's second moment, covariance moments by the output
    # residual's variance at the starting point.
    rows = system.instrument_rows()
    coef0 = system.coef_vectors(theta)
    var_y0 = max(system.variance(coef0["y"]), 1e-12)
    inst_var = np.concatenate([
        np.diag(system.gram)[rows[0]], np.diag(system.gram)[rows[1]],
        np.diag(system.gram)[rows[2]], np.full(2, var_y0),
    ])
    sqrt_weight = 1.0 / np.sqrt(np.maximum(inst_var, 1e-12))

    iterations = 0
    profile_converged = False
    prev_step = np.inf
    for iterations in range(1, PROFILE_MAX_ITER + 1):
        theta_new = _solve_slopes_given_scales(system, theta, sqrt_weight)
        scales = system.ratio_update(theta_new)
        theta_new = theta_new.replace(gamma_omega=scales[0], delta_omega=scales[1],
                                      zeta_omega=scales[2])
        step = np.max(np.abs(theta_new.pack(THETA1_FIELDS) - theta.pack(THETA1_FIELDS)))
        theta = theta_new
        if step < PROFILE_TOL:
            profile_converged = True
            break
        if iterations > 25 and step > 0.9 * prev_step:
            break  # geometric stall; the joint stage finishes the search
        prev_step = step

    # Joint refinement of all theta_1 parameters on the full system.
    x0 = theta.pack(THETA1_FIELDS)

    def g_scaled(x):
        return sqrt_weight * system.moments(theta.unpack(THETA1_FIELDS, x))

    root = scipy.optimize.least_squares(g_scaled, x0, method="lm",
                                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    candidate = theta.unpack(THETA1_FIELDS, root.x)
    if np.max(np.abs(system.moments(candidate))) <= np.max(np.abs(system.moments(theta))):
        theta = candidate
    moment_scale = float(np.max(np.abs(sqrt_weight * system.moments(theta))))
    joint_converged = moment_scale < 1e-7

    specs = block_ab_moments(cp, theta, basis_degree)
    result = gmm.inference_at(specs, cp, theta, THETA1_FIELDS,
                              converged=joint_converged)

    res = residuals(cp, theta, basis_degree=basis_degree)
    ratios = scale_ratios(res)
    coef = system.coef_vectors(theta)
    var_omega = system.cov(coef["y"], coef["m"]) / theta.gamma_omega
    shock_variances = {}
    degenerate = False
    for name, cv, loading in (("tau", coef["m"], theta.gamma_omega),
                              ("nu", coef["e"], theta.delta_omega),
                              ("eta", coef["w"], theta.zeta_omega)):
        total = system.variance(cv)
        resid_var = total - loading**2 * var_omega
        shock_variances[name] = resid_var
        if resid_var < 1e-4 * max(total, 1e-12):
            degenerate = True

    jac = gmm._numeric_jacobian(
        lambda x: system.moments(theta.unpack(THETA1_FIELDS, x)),
        theta.pack(THETA1_FIELDS))
    rank = int(np.linalg.matrix_rank(jac, tol=1e-10 * max(1.0, np.abs(jac).max())))

    return BlockAbFit(
        theta1=theta,
        gmm=result,
        scale_ratios=ratios,
        iterations=iterations,
        converged=joint_converged,
        shock_variances=shock_variances,
        degenerate_shocks=degenerate,
        jacobian_rank=rank,
        basis_degree=basis_degree,
    )


# ---------------------------------------------------------------------------
# Block C: curvature moments on a (rho_v, alpha) profile grid
# ---------------------------------------------------------------------------

@dataclass
class BlockCFit:
    """Primary-input fit via the homothetic curvature restriction."""

    theta2: ParamVector
    profile_grid: list[tuple[float, float, float]]  # (rho_v, alpha, J)
    chosen: tuple[float, float]
    rho_t_stats: tuple[float, float]
    weak_identification: bool
    gmm: GmmResult
    h_degree: int
    rho_coeffs: np.ndarray
    rho_ses: np.ndarray


def _block_c_design(cp: CenteredPanel, rho_v: float, alpha: float, h_degree: int):
    """Orthogonalized curvature basis and its projection coefficients.

    The powers of the CES index (computed on the original, uncentered
    inputs) are residualized against span(1, k, l) so only the nonlinear
    component enters the moments; the projection coefficients map the
    fitted loadings back to the structural beta_k and beta_l.
    """
    k_raw = cp.k + cp.means.k
    l_raw = cp.l + cp.means.l
    v = ces_index(k_raw, l_raw, alpha, rho_v)
    powers = np.column_stack([v**d for d in range(1, h_degree + 1)])
    x = np.column_stack([np.ones(cp.n_obs), cp.k, cp.l])
    proj, *_ = np.linalg.lstsq(x, powers, rcond=None)
    h_orth = powers - x @ proj
    return h_orth, proj  # proj rows: (const, k, l) x h_degree


def _z2_instruments(cp: CenteredPanel) -> np.ndarray:
    """Monomials in (k, l) of degree 1..3, each column de-meaned."""
    k, l = cp.k, cp.l
    cols = [k, l, k**2, l**2, k * l, k**3, l**3, k**2 * l, k * l**2]
    z = np.column_stack(cols)
    return z - z.mean(axis=0)


def fit_block_c(
    p: Panel | CenteredPanel,
    ab: BlockAbFit,
    grid: Sequence[tuple[float, float]] | None = None,
    h_degree: int = 3,
) -> BlockCFit:
    """Profile-GMM fit of (beta_k, beta_l) given a block A+B fit.

    For each grid point the curvature system is linear in the remaining
    parameters and solved by two-step GMM in closed form; the point with
    the smallest J-statistic wins, ties broken by the lexicographically
    smallest (rho_v, alpha).
    """
    if h_degree not in (3, 4, 5):
        raise ValueError("h_degree must be 3, 4 or 5")
    if not ab.converged:
        _warnings.warn("block A+B fit did not converge; block C uses its best iterate",
                       RuntimeWarning)
    if grid is None:
        grid = [(ab.theta1.rho_v, ab.theta1.alpha)]
    grid = list(grid)
    if not grid:
        raise ValueError("profile grid is empty")

    cp = demean(p)
    res = residuals(cp, ab.theta1, basis_degree=ab.basis_degree)
    y_net = res.y_tilde
    z2 = _z2_instruments(cp)
    w_obs = 1.0 / (cp.n_firms * cp.firm_counts[cp.firm_codes])
    zw = z2 * w_obs[:, None]

    rows = []
    best = None
    for rho_v, alpha in grid:
        h_orth, proj = _block_c_design(cp, rho_v, alpha, h_degree)
        regressors = np.column_stack([cp.k, cp.l, h_orth])
        q = zw.T @ y_net                 # E_w[z * ytilde]
        g_mat = zw.T @ regressors        # E_w[z * x']

        def solve(weight):
            lhs = g_mat.T @ weight @ g_mat
            rhs = g_mat.T @ weight @ q
            return np.linalg.solve(lhs, rhs)

        def per_firm_moments(coef):
            u = y_net - regressors @ coef
            return firm_means(cp, z2 * u[:, None])

        var0 = per_firm_moments(np.zeros(regressors.shape[1])).var(axis=0)
        w1 = np.diag(1.0 / np.maximum(var0, 1e-300))
        coef1 = solve(w1)
        sigma = gmm.moment_cov(per_firm_moments(coef1))
        warn: list[str] = []
        w2 = gmm._safe_inverse(sigma, warn)
        coef2 = solve(w2)
        pf = per_firm_moments(coef2)
        g_n = pf.mean(axis=0)
        j_stat = float(cp.n_firms * g_n @ w2 @ g_n)
        rows.append((rho_v, alpha, j_stat))
        key = (j_stat, rho_v, alpha)
        if best is None or key < best[0]:
            best = (key, rho_v, alpha, coef2, h_orth, proj, w2, sigma, g_n, warn)

    if best is None:
        raise EstimationError("no usable grid point in the block C profile")
    _, rho_v, alpha, coef, h_orth, proj, w2, sigma, g_n, warn = best
    j_chosen = best[0][0]

    # Engine-based clustered covariance at the chosen point.
    lam = coef[2:]
    rho_fields = tuple(f"rho{i}" for i in range(1, h_degree + 1))
    theta_c = ab.theta1.replace(
        alpha=alpha, rho_v=rho_v, beta_k=coef[0], beta_l=coef[1],
        **{name: float(v) for name, v in zip(rho_fields, lam)},
    )
    free = ["beta_k", "beta_l", *rho_fields]

    def residual_fn(panel, theta):
        loadings = np.array([getattr(theta, name) for name in rho_fields])
        return y_net - theta.beta_k * panel.k - theta.beta_l * panel.l - h_orth @ loadings

    spec = MomentSpec(residual_fn, lambda panel: z2, block_tag="C", name="curvature")
    vcov_fit = gmm.clustered_sandwich([spec], cp, theta_c, w2, free)

    # Map the orthogonalized fit back to the structural parameters:
    # beta_k_struct = beta_k_fit - sum_p lambda_p * proj[k, p].
    n_par = 2 + h_degree
    transform = np.eye(n_par)
    transform[0, 2:] = -proj[1]   # k-row of the projection
    transform[1, 2:] = -proj[2]   # l-row
    struct = transform @ coef
    vcov_struct = transform @ vcov_fit @ transform.T

    ses = np.sqrt(np.maximum(np.diag(vcov_struct), 0.0))
    rho_ses = ses[2:]
    t2 = struct[3] / rho_ses[1] if rho_ses[1] > 0 else np.inf
    t3 = (struct[4] / rho_ses[2] if h_degree >= 3 and rho_ses[2] > 0 else np.inf)
    weak = abs(t2) < WEAK_T_THRESHOLD and abs(t3) < WEAK_T_THRESHOLD

    theta2 = theta_c.replace(
        beta_k=float(struct[0]), beta_l=float(struct[1]),
        **{name: float(v) for name, v in zip(rho_fields, struct[2:])},
    )
    result = GmmResult(
        theta_hat=theta2,
        free_names=free,
        param_labels=["beta_k", "beta_l", *rho_fields],
        vcov=vcov_struct,
        j_stat=j_chosen,
        df=z2.shape[1] - n_par,
        converged=True,
        n_firms=cp.n_firms,
        n_obs=cp.n_obs,
        objective_value=j_chosen / cp.n_firms,
        weight=w2,
        moment_cov=sigma,
        g_n=g_n,
        warnings=warn,
    )
    return BlockCFit(
        theta2=theta2,
        profile_grid=rows,
        chosen=(rho_v, alpha),
        rho_t_stats=(float(t2), float(t3)),
        weak_identification=bool(weak),
        gmm=result,
        h_degree=h_degree,
        rho_coeffs=struct[2:],
        rho_ses=rho_ses,
    )


# ---------------------------------------------------------------------------
# Post-estimation quantities
# ---------------------------------------------------------------------------

def recover_productivity(p: Panel, theta: ParamVector) -> np.ndarray:
    """Per-observation productivity: output net of all input contributions.

    Subtracts the intercept ``theta.beta0`` as well, so at the true
    parameters with no measurement error the latent productivity is
    returned exactly.  Without a block C fit (beta_k = beta_l = 0) the
    series carries an unresolved location shift in (k, l), which
    downstream regressions absorb with polynomial (k, l) controls.
    """
    return (p.y - theta.beta0 - theta.beta_k * p.k - theta.beta_l * p.l
            - theta.beta_m * p.m - theta.beta_e * p.e - theta.beta_w * p.w)


def intercept_recovery(p: Panel, theta: ParamVector) -> float:
    """Production intercept from the stored or recomputed column means."""
    if isinstance(p, CenteredPanel):
        mm = p.means
        means = {"y": mm.y, "k": mm.k, "l": mm.l, "m": mm.m, "e": mm.e, "w": mm.w}
    else:
        means = {name: float(getattr(p, name).mean())
                 for name in ("y", "k", "l", "m", "e", "w")}
    return float(means["y"] - theta.beta_k * means["k"] - theta.beta_l * means["l"]
                 - theta.beta_m * means["m"] - theta.beta_e * means["e"]
                 - theta.beta_w * means["w"])


def markup(beta_m: float, s_m):
    """Markup: materials output elasticity over the materials revenue share."""
    s_m = np.asarray(s_m, dtype=float)
    if np.any(s_m <= 0.0):
        raise ValueError("materials revenue share must be positive")
    out = beta_m / s_m
    return float(out) if out.ndim == 0 else out
