"""Synthetic panel generators for the Monte Carlo study.

Four productivity processes share one production/demand structure:

* ``ar1`` - AR(1) baseline, rho = 0.8, innovation sd 0.2.
* ``ar2`` - AR(2), coefficients (0.6, 0.3), innovation sd 0.15.
* ``po``  - potential-outcome process with reversible, endogenous
  treatment: the untreated path is the AR(1) baseline, the treated path
  is AR(0.5) with a +0.15 drift, and treatment switches on whenever the
  untreated path is above zero.
* ``ci``  - AR(1) baseline with a common factor correlating the
  electricity and water demand shocks (correlation ``rho_ew``).

Output is Cobb-Douglas in logs with intercept 0.1, elasticities
(0.2, 0.3, 0.3, 0.15, 0.1) on (k, l, m, e, w) and measurement error sd
0.05.  Input demands are linear in (k, l, productivity) with loadings
(2.2, 2.0, 1.8) and AR(1) demand shocks (rho 0.5, stationary sd 0.15).

Capital accumulates from an investment rule driven by the firm's AR(1)
productivity forecast; labor is set so that the conditional expectation
of next-period productivity given (k, l) is a quadratic function of a
CES aggregate of the two, which is what the curvature-based estimator
of the primary input elasticities exploits.  The investment and labor
rules are calibration choices, not estimation targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .panel import Panel
from .params import ParamVector

DGP_IDS = ("ar1", "ar2", "po", "ci")
_ALIASES = {
    "AR1": "ar1",
    "AR2": "ar2",
    "PotentialOutcome": "po",
    "CiViolation": "ci",
}

_MASK64 = (1 << 64) - 1

# Calibration shared by every process; overridable through
# DgpConfig.process_params.
DEFAULT_PROCESS = {
    "sigma_eps": 0.05,        # output measurement error sd
    "shock_rho": 0.5,         # AR(1) coefficient of each demand shock
    "shock_sd": 0.15,         # stationary sd of each demand shock
    "belief_rho": 0.8,        # firms' AR(1) forecast coefficient
    "ar1_rho": 0.8,
    "ar1_sigma": 0.2,
    "ar2_rho1": 0.6,
    "ar2_rho2": 0.3,
    "ar2_sigma": 0.15,
    "po_rho0": 0.8,
    "po_sigma0": 0.2,
    "po_rho1": 0.5,
    "po_sigma1": 0.25,
    "po_drift": 0.15,
    "depreciation": 0.2,
    "invest_omega": 0.5,      # loading on the productivity forecast
    "invest_k": 0.1,
    "sigma_b": 0.6,           # investment cost heterogeneity
    "wage_rho": 0.3,
    "wage_sigma": 0.1,
    "h1": 0.4,                # linear term of E[omega | index]
    "h2": 0.0,                # quadratic term (branch-limited; off by default)
    "h3": 0.5,                # cubic term; globally invertible, 0 gives
                              # the linear variant when h2 is also 0
    "labor_sd": 0.15,         # noise in the labor index target
    "wage_load": 0.3,         # wage effect on the labor index target
    "v_offset": 1.8,          # centers the index near capital's level
    "k0_mean": 1.8,
    "k0_sd": 0.3,
    # DiD variant of the potential-outcome process: treatment assigned to a
    # random firm share from a fixed year onward instead of the reversible
    # selection rule.
    "did_treat_start": None,
    "did_treat_frac": 0.5,
    # with treatment assigned by design, inputs follow the untreated
    # potential path by default so parallel input trends hold exactly
    "did_inputs_untreated": True,
}


@dataclass(frozen=True)
class DgpConfig:
    """Configuration of one synthetic-panel draw."""

    dgp_id: str
    n_firms: int
    t_obs: int
    seed: int
    burn_in: int = 30
    rho_ew: float = 0.0
    true_params: ParamVector = None  # type: ignore[assignment]
    process_params: dict = field(default_factory=dict)

    def __post_init__(self):
        dgp = _ALIASES.get(self.dgp_id, self.dgp_id)
        if dgp not in DGP_IDS:
            raise ValueError(f"unknown dgp_id {self.dgp_id!r}; expected one of {DGP_IDS}")
        object.__setattr__(self, "dgp_id", dgp)
        if self.n_firms < 1 or self.t_obs < 1:
            raise ValueError("n_firms and t_obs must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if dgp == "ar2" and self.burn_in < 2:
            raise ValueError("the AR(2) process requires burn_in >= 2")
        if not 0.0 <= self.rho_ew < 1.0:
            raise ValueError("rho_ew must lie in [0, 1)")
        if self.true_params is None:
            object.__setattr__(self, "true_params", default_truth())

    @property
    def process(self) -> dict:
        merged = dict(DEFAULT_PROCESS)
        merged.update(self.process_params)
        return merged


@dataclass(frozen=True)
class TruthRecord:
    """Latent states of a simulated panel, firm-by-period matrices."""

    omega: np.ndarray
    tau: np.ndarray
    nu: np.ndarray
    eta: np.ndarray
    epsilon: np.ndarray
    d: Optional[np.ndarray] = None
    omega0: Optional[np.ndarray] = None
    omega1: Optional[np.ndarray] = None

    def flat(self, name: str) -> np.ndarray:
        """Firm-major flattening matching the panel's row order."""
        return getattr(self, name).reshape(-1)


def default_truth() -> ParamVector:
    """Structural parameters used by every simulated process."""
    return ParamVector(
        beta0=0.1, beta_k=0.2, beta_l=0.3, beta_m=0.3, beta_e=0.15, beta_w=0.1,
        gamma_k=0.45, gamma_l=0.65, gamma_omega=2.2,
        delta_k=0.40, delta_l=0.60, delta_omega=2.0,
        zeta_k=0.50, zeta_l=0.70, zeta_omega=1.8,
        alpha=0.4, rho_v=0.3, rho1=0.5, rho2=0.1, rho3=0.0,
    )


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 mixer; deterministic across platforms."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def replicate_seed(base_seed: int, rep_index: int) -> int:
    """Derive the seed for one Monte Carlo replication."""
    if rep_index < 0:
        raise ValueError("rep_index must be >= 0")
    return splitmix64((base_seed & _MASK64) ^ splitmix64(rep_index + 1))


def _firm_seed(seed: int, firm: int) -> int:
    return splitmix64((seed & _MASK64) ^ splitmix64((firm << 1) | 1))


def _h_inverse(f: np.ndarray, h1: float, h2: float, h3: float) -> np.ndarray:
    """Inverse of the index-to-productivity map h.

    Supports h(v) = h1*v (linear), h1*v + h2*v**2 (increasing branch,
    clamped at the branch floor) and h1*v + h3*v**3 (globally invertible
    for h1, h3 > 0, via Cardano's formula).
    """
    if h2 == 0.0 and h3 == 0.0:
        return f / h1
    if h3 == 0.0:
        disc = np.maximum(h1 * h1 + 4.0 * h2 * f, 1e-10)
        return (-h1 + np.sqrt(disc)) / (2.0 * h2)
    if h2 != 0.0:
        raise ValueError("use either a quadratic or a cubic curvature term, not both")
    half = f / (2.0 * h3)
    shift = np.sqrt(half**2 + (h1 / (3.0 * h3)) ** 3)
    return np.cbrt(half + shift) + np.cbrt(half - shift)


def _labor_from_index(v_target: np.ndarray, k: np.ndarray, alpha: float,
                      rho_v: float) -> np.ndarray:
    """Solve the CES index v(k, l) = v_target for l given k."""
    if abs(rho_v) < 1e-8:
        return (v_target - alpha * k) / (1.0 - alpha)
    x = np.exp(rho_v * (v_target - k)) - alpha
    x = np.maximum(x, 1e-6)
    return k + np.log(x / (1.0 - alpha)) / rho_v


def simulate(cfg: DgpConfig) -> tuple[Panel, TruthRecord]:
    """Simulate one panel plus its latent states.

    Each firm draws from its own deterministic generator, so results are
    independent of any parallel scheduling of firm blocks and are
    bit-for-bit reproducible for a given config.
    """
    pp = cfg.process
    theta = cfg.true_params
    n, t_obs, burn = cfg.n_firms, cfg.t_obs, cfg.burn_in
    t_total = burn + t_obs

    # Fixed per-firm draw layout: b, treated uniform, 8 init normals, then
    # a (t_total, 9) block of channel innovations.
    b = np.empty(n)
    treated_u = np.empty(n)
    init = np.empty((n, 8))
    z = np.empty((n, t_total, 9))
    for j in range(n):
        rng = np.random.Generator(np.random.PCG64(_firm_seed(cfg.seed, j)))
        b[j] = rng.standard_normal()
        treated_u[j] = rng.random()
        init[j] = rng.standard_normal(8)
        z[j] = rng.standard_normal((t_total, 9))
    b = b * pp["sigma_b"]

    shock_rho = pp["shock_rho"]
    shock_inn = pp["shock_sd"] * np.sqrt(1.0 - shock_rho**2)
    is_ci = cfg.dgp_id == "ci"
    rho_ew = cfg.rho_ew if is_ci else 0.0
    w_shared, w_own = np.sqrt(rho_ew), np.sqrt(1.0 - rho_ew)

    # Initial states from the stationary distributions.
    sd_ar1 = pp["ar1_sigma"] / np.sqrt(1.0 - pp["ar1_rho"] ** 2)
    if cfg.dgp_id == "ar2":
        r1, r2, sg = pp["ar2_rho1"], pp["ar2_rho2"], pp["ar2_sigma"]
        sd_omega = np.sqrt(sg**2 * (1 - r2) / ((1 + r2) * ((1 - r2) ** 2 - r1**2)))
        omega = sd_omega * init[:, 0]
        omega_prev = sd_omega * init[:, 1]
    else:
        omega = sd_ar1 * init[:, 0]
        omega_prev = np.zeros(n)

    is_po = cfg.dgp_id == "po"
    did_start = pp["did_treat_start"]
    if is_po:
        sd0 = pp["po_sigma0"] / np.sqrt(1.0 - pp["po_rho0"] ** 2)
        sd1 = pp["po_sigma1"] / np.sqrt(1.0 - pp["po_rho1"] ** 2)
        omega0 = sd0 * init[:, 0]
        omega1 = pp["po_drift"] / (1.0 - pp["po_rho1"]) + sd1 * init[:, 1]
        treated_firm = treated_u < pp["did_treat_frac"]
        if did_start is None:
            d_cur = (omega0 > 0.0).astype(float)
        else:
            d_cur = np.zeros(n)  # no treatment during burn-in
        omega = (1.0 - d_cur) * omega0 + d_cur * omega1

    tau = pp["shock_sd"] * init[:, 2]
    if is_ci:
        nu = pp["shock_sd"] * (w_own * init[:, 3] + w_shared * init[:, 7])
        eta = pp["shock_sd"] * (w_own * init[:, 4] + w_shared * init[:, 7])
    else:
        nu = pp["shock_sd"] * init[:, 3]
        eta = pp["shock_sd"] * init[:, 4]

    k = pp["k0_mean"] + b / 0.9 + pp["k0_sd"] * init[:, 5]
    wage = pp["wage_sigma"] / np.sqrt(1.0 - pp["wage_rho"] ** 2) * init[:, 6]
    f0 = pp["belief_rho"] * omega
    v0 = (pp["v_offset"] + _h_inverse(f0, pp["h1"], pp["h2"], pp["h3"])
          - pp["wage_load"] * wage + pp["labor_sd"] * init[:, 7])
    labor = _labor_from_index(v0, k, theta.alpha, theta.rho_v)

    rec_shape = (n, t_obs)
    out = {name: np.empty(rec_shape) for name in
           ("y", "k", "l", "m", "e", "w", "omega", "tau", "nu", "eta", "epsilon")}
    d_rec = np.empty(rec_shape) if is_po else None
    omega0_rec = np.empty(rec_shape) if is_po else None
    omega1_rec = np.empty(rec_shape) if is_po else None

    for t in range(t_total):
        eps = pp["sigma_eps"] * z[:, t, 6]
        m = theta.gamma_k * k + theta.gamma_l * labor + theta.gamma_omega * omega + tau
        e = theta.delta_k * k + theta.delta_l * labor + theta.delta_omega * omega + nu
        w = theta.zeta_k * k + theta.zeta_l * labor + theta.zeta_omega * omega + eta
        y = (theta.beta0 + theta.beta_k * k + theta.beta_l * labor
             + theta.beta_m * m + theta.beta_e * e + theta.beta_w * w + omega + eps)

        if t >= burn:
            s = t - burn
            out["y"][:, s], out["k"][:, s], out["l"][:, s] = y, k, labor
            out["m"][:, s], out["e"][:, s], out["w"][:, s] = m, e, w
            out["omega"][:, s], out["epsilon"][:, s] = omega, eps
            out["tau"][:, s], out["nu"][:, s], out["eta"][:, s] = tau, nu, eta
            if is_po:
                d_rec[:, s] = d_cur
                omega0_rec[:, s] = omega0
                omega1_rec[:, s] = omega1

        # Dynamic decisions for t+1, taken with period-t information.  In
        # the DiD variant inputs follow the untreated potential path, so
        # treatment moves productivity only and the parallel-trends
        # condition holds for capital and labor by construction.
        if is_po and did_start is not None and pp["did_inputs_untreated"]:
            forecast = pp["belief_rho"] * omega0
        else:
            forecast = pp["belief_rho"] * omega
        invest = np.exp(b + pp["invest_omega"] * forecast + pp["invest_k"] * k)
        k_next = np.log((1.0 - pp["depreciation"]) * np.exp(k) + invest)
        wage = pp["wage_rho"] * wage + pp["wage_sigma"] * z[:, t, 8]
        v_target = (pp["v_offset"] + _h_inverse(forecast, pp["h1"], pp["h2"], pp["h3"])
                    - pp["wage_load"] * wage + pp["labor_sd"] * z[:, t, 7])
        labor = _labor_from_index(v_target, k_next, theta.alpha, theta.rho_v)
        k = k_next

        # Productivity transition.
        if cfg.dgp_id in ("ar1", "ci"):
            omega = pp["ar1_rho"] * omega + pp["ar1_sigma"] * z[:, t, 0]
        elif cfg.dgp_id == "ar2":
            omega, omega_prev = (pp["ar2_rho1"] * omega + pp["ar2_rho2"] * omega_prev
                                 + pp["ar2_sigma"] * z[:, t, 0]), omega
        else:  # potential outcome
            base = np.where(d_cur > 0.5, omega1, omega0)
            omega0 = pp["po_rho0"] * omega0 + pp["po_sigma0"] * z[:, t, 0]
            omega1 = pp["po_rho1"] * base + pp["po_drift"] + pp["po_sigma1"] * z[:, t, 1]
            if did_start is None:
                d_cur = (omega0 > 0.0).astype(float)
            else:
                year_next = (t + 1) - burn + 1
                d_cur = (treated_firm & (year_next >= did_start)).astype(float)
            omega = (1.0 - d_cur) * omega0 + d_cur * omega1

        # Demand shock transitions.
        e_tau = shock_inn * z[:, t, 2]
        if is_ci:
            e_nu = shock_inn * (w_own * z[:, t, 3] + w_shared * z[:, t, 5])
            e_eta = shock_inn * (w_own * z[:, t, 4] + w_shared * z[:, t, 5])
        else:
            e_nu = shock_inn * z[:, t, 3]
            e_eta = shock_inn * z[:, t, 4]
        tau = shock_rho * tau + e_tau
        nu = shock_rho * nu + e_nu
        eta = shock_rho * eta + e_eta

    firm_id = np.repeat(np.arange(n, dtype=np.int64), t_obs)
    year = np.tile(np.arange(1, t_obs + 1, dtype=np.int64), n)
    panel = Panel(
        firm_id=firm_id, year=year,
        y=out["y"].reshape(-1), k=out["k"].reshape(-1), l=out["l"].reshape(-1),
        m=out["m"].reshape(-1), e=out["e"].reshape(-1), w=out["w"].reshape(-1),
        z=np.empty((n * t_obs, 0)),
        d=d_rec.reshape(-1).astype(np.int64) if d_rec is not None else None,
    )
    truth = TruthRecord(
        omega=out["omega"], tau=out["tau"], nu=out["nu"], eta=out["eta"],
        epsilon=out["epsilon"], d=d_rec, omega0=omega0_rec, omega1=omega1_rec,
    )
    return panel, truth


def truth_to_dataframe(panel: Panel, truth: TruthRecord):
    """Flatten a TruthRecord into a firm-year table aligned with the panel."""
    import pandas as pd

    data = {
        "firm": panel.firm_id, "year": panel.year,
        "omega": truth.flat("omega"), "tau": truth.flat("tau"),
        "nu": truth.flat("nu"), "eta": truth.flat("eta"),
        "epsilon": truth.flat("epsilon"),
    }
    if truth.d is not None:
        data["d"] = truth.flat("d").astype(np.int64)
        data["omega0"] = truth.flat("omega0")
        data["omega1"] = truth.flat("omega1")
    return pd.DataFrame(data)
