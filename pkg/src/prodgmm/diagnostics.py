"""Identification diagnostics and analyses on recovered productivity.

Covers the exclusion-restriction OLS recovery of the primary-input
elasticities, the pairwise-discrepancy Wald test, the curvature-strength
report for the block C fit, and a two-way fixed-effects
difference-in-differences estimator for treatment effects on recovered
productivity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import DegeneracyError, EstimationError
from .gmm import delta_method
from .panel import CenteredPanel, Panel, centered_basis, demean, nuisance_basis
from .params import DEMAND_SLOPES, ParamVector
from .proposed import BlockAbFit, BlockCFit

INPUT_PAIRS = (("m", "e"), ("m", "w"), ("e", "w"))
DEFAULT_WALD_PAIRS = {"k": ("m", "e"), "l": ("m", "w")}


def _ols_clustered(x: np.ndarray, y: np.ndarray, cluster: np.ndarray):
    """OLS with CR1 cluster-robust covariance."""
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    bread = np.linalg.pinv(x.T @ x)
    n_clusters = len(np.unique(cluster))
    k = x.shape[1]
    meat = np.zeros((k, k))
    xu = x * resid[:, None]
    sums = np.zeros((n_clusters, k))
    codes = np.unique(cluster, return_inverse=True)[1]
    for j in range(k):
        sums[:, j] = np.bincount(codes, weights=xu[:, j], minlength=n_clusters)
    meat = sums.T @ sums
    n = len(y)
    scale = (n_clusters / (n_clusters - 1)) * ((n - 1) / max(n - k, 1))
    vcov = scale * bread @ meat @ bread
    return coef, 0.5 * (vcov + vcov.T)


@dataclass
class InputRecovery:
    beta0: float
    beta_k: float
    beta_l: float
    se_beta_k: float
    se_beta_l: float


@dataclass
class ExclusionRecovery:
    per_input: dict[str, InputRecovery]
    d_k: dict[tuple[str, str], float]
    d_l: dict[tuple[str, str], float]
    d_se_k: dict[tuple[str, str], float]
    d_se_l: dict[tuple[str, str], float]
    wald_stat: float
    wald_df: int
    wald_p: float
    case: str
    marginal: dict[str, float] = field(default_factory=dict)


def _proxy(p_raw: Panel, cp: CenteredPanel, ab: BlockAbFit, input_name: str,
           subtract: Mapping[str, float]) -> np.ndarray:
    """Productivity proxy from one demand equation.

    ``subtract`` maps column names ('k', 'l') to slope estimates netted
    out of the input before dividing by the productivity loading; the
    control polynomial is always netted out.
    """
    theta = ab.theta1
    loading = theta.demand_loading(input_name)
    if abs(loading) < 1e-6:
        raise DegeneracyError(f"loading of input {input_name!r} is too weak "
                              f"({loading:.2e}) to build a proxy")
    values = p_raw.column(input_name).astype(float).copy()
    basis = centered_basis(cp, ab.basis_degree)
    h_coeffs = np.asarray(getattr(theta, f"h_coeffs_{input_name}"))
    if basis.shape[1]:
        values = values - basis @ h_coeffs
    for col, slope in subtract.items():
        values = values - slope * p_raw.column(col)
    return values / loading


def exclusion_recovery(
    p: Panel,
    ab: BlockAbFit,
    case: str = "joint",
    proxy_assignment: Mapping[str, str] | None = None,
    wald_pairs: Mapping[str, tuple[str, str]] | None = None,
) -> ExclusionRecovery:
    """Recover (beta0, beta_k, beta_l) by OLS under exclusion restrictions.

    ``case='joint'`` assumes the chosen proxy input's demand does not
    respond to either primary input; ``case='marginal'`` uses two inputs,
    one excluded from capital and one from labor (``proxy_assignment``
    maps 'k'/'l' to the input used for each).  The pairwise discrepancies
    of estimated slope ratios, which are free of the location-shift
    indeterminacy, feed a two-degree-of-freedom Wald test.
    """
    if case not in ("joint", "marginal"):
        raise ValueError("case must be 'joint' or 'marginal'")
    if not ab.converged:
        raise EstimationError("exclusion recovery requires a converged fit")
    cp = demean(p)
    theta = ab.theta1
    y_net = (p.y - theta.beta_m * p.m - theta.beta_e * p.e - theta.beta_w * p.w)
    x = np.column_stack([np.ones(p.n_obs), p.k, p.l])

    per_input: dict[str, InputRecovery] = {}
    for name in ("m", "e", "w"):
        proxy = _proxy(p, cp, ab, name, {})
        coef, vcov = _ols_clustered(x, y_net - proxy, p.firm_id)
        per_input[name] = InputRecovery(
            beta0=float(coef[0]), beta_k=float(coef[1]), beta_l=float(coef[2]),
            se_beta_k=float(np.sqrt(vcov[1, 1])), se_beta_l=float(np.sqrt(vcov[2, 2])),
        )

    marginal: dict[str, float] = {}
    if case == "marginal":
        assignment = dict(proxy_assignment or {"k": "m", "l": "e"})
        h_k, h_l = assignment["k"], assignment["l"]
        slope_l = getattr(theta, DEMAND_SLOPES[h_k][1])
        proxy_k = _proxy(p, cp, ab, h_k, {"l": slope_l})
        coef_k, vcov_k = _ols_clustered(x, y_net - proxy_k, p.firm_id)
        slope_k = getattr(theta, DEMAND_SLOPES[h_l][0])
        proxy_l = _proxy(p, cp, ab, h_l, {"k": slope_k})
        coef_l, vcov_l = _ols_clustered(x, y_net - proxy_l, p.firm_id)
        marginal = {
            "beta_k": float(coef_k[1]), "se_beta_k": float(np.sqrt(vcov_k[1, 1])),
            "beta_l": float(coef_l[2]), "se_beta_l": float(np.sqrt(vcov_l[2, 2])),
        }

    def ratio(theta_: ParamVector, input_name: str, which: str) -> float:
        slope_k, slope_l, loading = DEMAND_SLOPES[input_name]
        num = getattr(theta_, slope_k if which == "k" else slope_l)
        return num / getattr(theta_, loading)

    d_k, d_l, d_se_k, d_se_l = {}, {}, {}, {}
    for pair in INPUT_PAIRS:
        h1, h2 = pair

        def fn(theta_: ParamVector, pair_=pair):
            return np.array([
                ratio(theta_, pair_[1], "k") - ratio(theta_, pair_[0], "k"),
                ratio(theta_, pair_[1], "l") - ratio(theta_, pair_[0], "l"),
            ])

        values, ses = delta_method(fn, ab.gmm)
        d_k[pair], d_l[pair] = float(values[0]), float(values[1])
        d_se_k[pair], d_se_l[pair] = float(ses[0]), float(ses[1])

    pairs = dict(wald_pairs or DEFAULT_WALD_PAIRS)

    def wald_fn(theta_: ParamVector):
        return np.array([
            ratio(theta_, pairs["k"][1], "k") - ratio(theta_, pairs["k"][0], "k"),
            ratio(theta_, pairs["l"][1], "l") - ratio(theta_, pairs["l"][0], "l"),
        ])

    from .gmm import _numeric_jacobian

    x_hat = ab.theta1.pack(ab.gmm.free_names)

    def wald_of_x(xv):
        return wald_fn(ab.theta1.unpack(ab.gmm.free_names, xv))

    d_vec = wald_of_x(x_hat)
    jac = _numeric_jacobian(wald_of_x, x_hat)
    v_d = jac @ ab.gmm.vcov @ jac.T
    wald_stat = float(d_vec @ np.linalg.solve(v_d, d_vec))
    wald_p = float(stats.chi2.sf(wald_stat, 2))
    return ExclusionRecovery(
        per_input=per_input, d_k=d_k, d_l=d_l, d_se_k=d_se_k, d_se_l=d_se_l,
        wald_stat=wald_stat, wald_df=2, wald_p=wald_p, case=case, marginal=marginal,
    )


# ---------------------------------------------------------------------------
# Difference-in-differences on recovered productivity
# ---------------------------------------------------------------------------

@dataclass
class DidResult:
    att_hat: float
    se: float
    pre_trend_max: float
    used_poly_kl: bool
    n_treated: int
    n_control: int
    event_coefficients: dict[int, float] = field(default_factory=dict)


def _two_way_within(values: np.ndarray, firm_codes: np.ndarray, year_codes: np.ndarray,
                    n_firms: int, n_years: int, tol: float = 1e-12,
                    max_iter: int = 100) -> np.ndarray:
    """Iterated demeaning by firm and year (exact for balanced panels)."""
    out = values.astype(float).copy()
    cols = out.reshape(len(out), -1)
    for _ in range(max_iter):
        delta = 0.0
        for codes, size in ((firm_codes, n_firms), (year_codes, n_years)):
            counts = np.bincount(codes, minlength=size)
            for j in range(cols.shape[1]):
                means = np.bincount(codes, weights=cols[:, j], minlength=size) / counts
                adjust = means[codes]
                cols[:, j] -= adjust
                delta = max(delta, float(np.abs(adjust).max(initial=0.0)))
        if delta < tol:
            break
    return out


def did_att(omega_hat: np.ndarray, p: Panel, treat_start: int,
            controls_poly_degree: int = 3) -> DidResult:
    """Two-way fixed effects DiD of recovered productivity on treatment.

    The treatment indicator is the panel's ``d`` column (treated firm in
    a post period).  Polynomial (k, l) controls of the given degree
    absorb the location-shift component that a proxy-block-only fit
    leaves in the recovered series; standard errors cluster by firm.
    The pre-trend summary is the largest absolute pre-period coefficient
    from a simple event-study regression.
    """
    if p.d is None:
        raise EstimationError("panel has no treatment flag")
    omega_hat = np.asarray(omega_hat, dtype=float)
    treated_firm = np.bincount(p.firm_codes, weights=p.d, minlength=p.n_firms) > 0
    n_treated = int(treated_firm.sum())
    n_control = p.n_firms - n_treated
    if n_treated == 0 or n_control == 0:
        raise EstimationError("need both treated and control firms")
    post = p.year >= treat_start
    if not post.any() or post.all():
        raise EstimationError("need at least one pre and one post period")

    years, year_codes = np.unique(p.year, return_inverse=True)
    d_col = (treated_firm[p.firm_codes] & post).astype(float)

    controls = np.empty((p.n_obs, 0))
    if controls_poly_degree >= 1:
        controls = nuisance_basis(np.column_stack([p.k, p.l]), controls_poly_degree)

    stacked = np.column_stack([omega_hat, d_col, controls])
    within = _two_way_within(stacked, p.firm_codes, year_codes, p.n_firms, len(years))
    y_w, x_w = within[:, 0], within[:, 1:]
    coef, vcov = _ols_clustered(x_w, y_w, p.firm_id)
    att, se = float(coef[0]), float(np.sqrt(vcov[0, 0]))

    # Event study for the pre-trend summary (relative period -1 omitted).
    rel = p.year - treat_start
    rel_levels = [r for r in np.unique(rel) if r != -1]
    dummies = np.column_stack(
        [(rel == r).astype(float) * treated_firm[p.firm_codes] for r in rel_levels]
    )
    stacked_es = np.column_stack([omega_hat, dummies, controls])
    within_es = _two_way_within(stacked_es, p.firm_codes, year_codes, p.n_firms, len(years))
    coef_es, _ = _ols_clustered(within_es[:, 1:], within_es[:, 0], p.firm_id)
    event = {int(r): float(c) for r, c in zip(rel_levels, coef_es[: len(rel_levels)])}
    pre_trend_max = max((abs(c) for r, c in event.items() if r < -1), default=0.0)

    return DidResult(
        att_hat=att, se=se, pre_trend_max=float(pre_trend_max),
        used_poly_kl=controls_poly_degree >= 1,
        n_treated=n_treated, n_control=n_control, event_coefficients=event,
    )


@dataclass
class BlockCStrength:
    rho2: float
    rho3: float
    t_rho2: float
    t_rho3: float
    weak_identification: bool
    profile: list[tuple[float, float, float]]


def blockc_strength(fit: BlockCFit) -> BlockCStrength:
    """Curvature-strength diagnostic of a block C fit."""
    return BlockCStrength(
        rho2=float(fit.theta2.rho2), rho3=float(fit.theta2.rho3),
        t_rho2=fit.rho_t_stats[0], t_rho3=fit.rho_t_stats[1],
        weak_identification=fit.weak_identification,
        profile=list(fit.profile_grid),
    )
