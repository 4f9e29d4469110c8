"""Benchmark estimators: two-step proxy GMM and the share-regression approach.

All three benchmarks assume a first-order Markov productivity process in
their second stage; the share-regression benchmark additionally assumes
competitive input markets with common prices (normalized to one), so its
first stage reads the materials elasticity off the revenue share.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.optimize

from . import gmm
from .dgp import TruthRecord
from .errors import EstimationError
from .gmm import GmmResult, MomentSpec
from .panel import Panel, demean, nuisance_basis
from .params import ParamVector

BETA_FIELDS = ("beta_k", "beta_l", "beta_m", "beta_e", "beta_w")


@dataclass
class BenchFit:
    method: str
    beta_hat: dict[str, float]
    first_stage_r2: float
    converged: bool
    gmm: Optional[GmmResult] = None

    @property
    def beta_tuple(self) -> tuple[float, ...]:
        return tuple(self.beta_hat[name] for name in BETA_FIELDS)


def _design_with_const(columns: np.ndarray, degree: int) -> np.ndarray:
    """Complete polynomial (centered columns) with an intercept."""
    centered = columns - columns.mean(axis=0)
    return np.column_stack([np.ones(len(columns)), nuisance_basis(centered, degree)])


def _ols_fit(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    coef, *_ = scipy.linalg.lstsq(x, y, lapack_driver="gelsy")
    fitted = x @ coef
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return coef, fitted, r2


def _lagged_arrays(p: Panel, values: dict[str, np.ndarray]):
    """Current/lag pairs of the given per-observation arrays.

    Keeps rows with a within-firm predecessor and returns the reduced
    panel (for firm grouping) plus aligned current and lagged arrays.
    """
    has_lag = np.zeros(p.n_obs, dtype=bool)
    for start, count in zip(p.firm_starts, p.firm_counts):
        has_lag[start + 1 : start + count] = True
    if not has_lag.any():
        raise EstimationError("panel has no within-firm lags; need >= 2 periods per firm")
    cur_idx = np.flatnonzero(has_lag)
    lag_idx = cur_idx - 1
    reduced = Panel(
        firm_id=p.firm_id[cur_idx], year=p.year[cur_idx],
        y=p.y[cur_idx], k=p.k[cur_idx], l=p.l[cur_idx],
        m=p.m[cur_idx], e=p.e[cur_idx], w=p.w[cur_idx],
        z=p.z[cur_idx] if p.d_z else np.empty((len(cur_idx), 0)),
        d=p.d[cur_idx] if p.d is not None else None,
    )
    current = {name: arr[cur_idx] for name, arr in values.items()}
    lagged = {name: arr[lag_idx] for name, arr in values.items()}
    return reduced, current, lagged


def _markov_gmm(p: Panel, phi: np.ndarray, x_cols: dict[str, np.ndarray],
                instrument_cols: list[str], free_names: list[str],
                theta0: ParamVector, markov_degree: int = 3):
    """Second-stage Markov GMM shared by the proxy benchmarks.

    For candidate elasticities, productivity is the first-stage index
    minus the input contribution; its innovation from a pooled
    polynomial autoregression must be orthogonal to current quasi-fixed
    inputs and lagged flexible inputs.  The system is just-identified
    and solved to its root by damped Gauss-Newton; clustered inference
    is evaluated at the solution.
    """
    values = dict(x_cols)
    values["phi"] = phi
    reduced, cur, lag = _lagged_arrays(p, values)
    cp = demean(reduced)

    inst_current = {"k", "l"}
    inst = np.column_stack(
        [cur[name] if name in inst_current else lag[name] for name in instrument_cols]
    )
    inst = inst - inst.mean(axis=0)

    x_names = [n for n in x_cols]
    cur_x = np.column_stack([cur[n] for n in x_names])
    lag_x = np.column_stack([lag[n] for n in x_names])
    field_of = {"k": "beta_k", "l": "beta_l", "m": "beta_m", "e": "beta_e", "w": "beta_w"}

    def residual_fn(panel, theta):
        beta = np.array([getattr(theta, field_of[n]) for n in x_names])
        omega_cur = cur["phi"] - cur_x @ beta
        omega_lag = lag["phi"] - lag_x @ beta
        design = np.column_stack(
            [np.ones(len(omega_lag))] + [omega_lag**d for d in range(1, markov_degree + 1)]
        )
        gram = design.T @ design
        coef = np.linalg.solve(gram + 1e-12 * np.trace(gram) * np.eye(len(gram)),
                               design.T @ omega_cur)
        return omega_cur - design @ coef

    def g_of(x):
        theta = theta0.unpack(free_names, x)
        return inst.T @ residual_fn(None, theta) / inst.shape[0]

    x_hat, g_norm = _damped_newton_root(g_of, theta0.pack(free_names))
    theta_hat = theta0.unpack(free_names, x_hat)
    spec = MomentSpec(residual_fn, lambda panel: inst, block_tag="BENCH", name="markov")
    # Converged when every moment is a small fraction of its sampling noise.
    resid = residual_fn(None, theta_hat)
    per_obs = inst * resid[:, None]
    from .panel import firm_means
    per_firm = firm_means(cp, per_obs)
    se = per_firm.std(axis=0, ddof=1) / np.sqrt(max(cp.n_firms, 2))
    converged = bool(np.all(np.abs(g_of(x_hat)) <= 0.5 * np.maximum(se, 1e-12)))
    return gmm.inference_at([spec], cp, theta_hat, free_names, converged=converged)


def _damped_newton_root(g_of, x0: np.ndarray, step_cap: float = 0.05,
                        max_iter: int = 200) -> tuple[np.ndarray, float]:
    """Deterministic damped Newton with a per-iteration step cap.

    The Markov moment systems of the proxy benchmarks have long shallow
    valleys; capped damped steps follow them stably to the root.
    """
    x = x0.astype(float).copy()
    g = g_of(x)
    g_floor = 1e-10 * max(float(np.max(np.abs(g))), 1e-12)
    jac = None
    for it in range(max_iter):
        if np.max(np.abs(g)) < g_floor:
            break
        if jac is None or it % 4 == 0:
            jac = np.empty((g.size, x.size))
            for i in range(x.size):
                h = max(1e-6 * abs(x[i]), 1e-8)
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                jac[:, i] = (g_of(xp) - g_of(xm)) / (2.0 * h)
        step, *_ = np.linalg.lstsq(jac, -g, rcond=1e-12)
        norm = np.linalg.norm(step)
        if norm > step_cap:
            step *= step_cap / norm
        lam, g_norm = 1.0, np.linalg.norm(g)
        while lam > 1e-6:
            g_new = g_of(x + lam * step)
            if np.linalg.norm(g_new) < g_norm:
                break
            lam *= 0.5
        else:
            if it % 4 == 0:
                break  # fresh Jacobian and still no progress
            jac = None  # retry with a fresh Jacobian
            continue
        delta = lam * step
        y = g_new - g
        jac = jac + np.outer(y - jac @ delta, delta) / max(delta @ delta, 1e-300)
        x = x + delta
        g = g_new
        if np.linalg.norm(delta) < 1e-12:
            break
    return x, float(np.max(np.abs(g)))


def fit_acf(p: Panel, first_stage_degree: int = 3,
            extra_controls: np.ndarray | None = None,
            method_label: str = "ACF") -> BenchFit:
    """Two-step proxy estimator with a Markov second stage.

    Stage one regresses output on a complete polynomial in all inputs
    (plus controls) to purge the ex-post shock; stage two estimates the
    elasticities from the orthogonality of the productivity innovation
    to current capital/labor and lagged flexible inputs.
    """
    first_stage_vars = np.column_stack([p.k, p.l, p.m, p.e, p.w])
    if p.d_z:
        first_stage_vars = np.column_stack([first_stage_vars, p.z])
    if extra_controls is not None:
        first_stage_vars = np.column_stack([first_stage_vars, extra_controls])
    design = _design_with_const(first_stage_vars, first_stage_degree)
    if design.shape[0] < design.shape[1]:
        raise EstimationError(
            "first-stage polynomial has more terms than observations")
    _, phi, r2 = _ols_fit(design, p.y)
    if not np.all(np.isfinite(phi)):
        raise EstimationError("first-stage polynomial design is collinear")

    x_cols = {"k": p.k, "l": p.l, "m": p.m, "e": p.e, "w": p.w}
    start, *_ = np.linalg.lstsq(
        np.column_stack([np.ones(p.n_obs), p.k, p.l, p.m, p.e, p.w]), p.y, rcond=None)
    theta0 = ParamVector(beta_k=start[1], beta_l=start[2], beta_m=start[3],
                         beta_e=start[4], beta_w=start[5])
    result = _markov_gmm(p, phi, x_cols, ["k", "l", "m", "e", "w"],
                         list(BETA_FIELDS), theta0)
    beta_hat = {name: float(getattr(result.theta_hat, name)) for name in BETA_FIELDS}
    return BenchFit(method=method_label, beta_hat=beta_hat, first_stage_r2=r2,
                    converged=result.converged, gmm=result)


def fit_acf_mod(p: Panel, truth: TruthRecord, first_stage_degree: int = 3) -> BenchFit:
    """Oracle variant: demand shocks enter the first stage as controls.

    Only usable on simulated panels where the shocks are recorded; any
    remaining bias is attributable to the Markov assumption alone.
    """
    if truth is None:
        raise EstimationError("the oracle benchmark requires simulated demand shocks")
    shocks = np.column_stack([truth.flat("tau"), truth.flat("nu"), truth.flat("eta")])
    if shocks.shape[0] != p.n_obs:
        raise EstimationError("truth record does not match the panel")
    fit = fit_acf(p, first_stage_degree, extra_controls=shocks, method_label="ACF_MOD")
    return fit


def fit_gnr(p: Panel, share_degree: int = 2, markov_degree: int = 3) -> BenchFit:
    """Share-regression estimator for the flexible inputs.

    With common prices normalized to one, the log expenditure share of a
    flexible input equals its log elasticity minus the ex-post shock.
    Each flexible elasticity is the mean fitted share level corrected by
    the estimated shock distribution; capital and labor then come from a
    Markov second stage identical in structure to the proxy benchmark.
    """
    inputs = np.column_stack([p.k, p.l, p.m, p.e, p.w])
    design = _design_with_const(inputs, share_degree)
    beta_hat: dict[str, float] = {}
    eps_hat = None
    r2_m = 0.0
    for name, col in (("beta_m", p.m), ("beta_e", p.e), ("beta_w", p.w)):
        log_share = col - p.y
        if not np.all(np.isfinite(log_share)):
            raise EstimationError("nonpositive or non-finite input share")
        _, fitted, r2 = _ols_fit(design, log_share)
        resid = log_share - fitted
        shock_correction = float(np.mean(np.exp(-resid)))
        beta_hat[name] = float(np.mean(np.exp(fitted))) / shock_correction
        if name == "beta_m":
            eps_hat = -resid
            r2_m = r2

    y_net = (p.y - beta_hat["beta_m"] * p.m - beta_hat["beta_e"] * p.e
             - beta_hat["beta_w"] * p.w - eps_hat)
    x_cols = {"k": p.k, "l": p.l}
    start, *_ = np.linalg.lstsq(np.column_stack([np.ones(p.n_obs), p.k, p.l]),
                                y_net, rcond=None)
    theta0 = ParamVector(beta_k=start[1], beta_l=start[2])
    result = _markov_gmm(p, y_net, x_cols, ["k", "l"], ["beta_k", "beta_l"],
                         theta0, markov_degree)
    beta_hat["beta_k"] = float(result.theta_hat.beta_k)
    beta_hat["beta_l"] = float(result.theta_hat.beta_l)
    return BenchFit(method="GNR", beta_hat=beta_hat, first_stage_r2=r2_m,
                    converged=result.converged, gmm=result)
