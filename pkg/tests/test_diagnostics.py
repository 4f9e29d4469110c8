"""Diagnostics: exclusion recovery, Wald test, DiD, curvature strength."""

import numpy as np
import pytest

import prodgmm as pg
from prodgmm.dgp import DgpConfig, replicate_seed, simulate
from prodgmm.diagnostics import (BlockCStrength, blockc_strength, did_att,
                                 exclusion_recovery)
from prodgmm.errors import DegeneracyError, EstimationError
from prodgmm.panel import Panel
from prodgmm.params import ParamVector, delta_kl_shift
from prodgmm.proposed import (BlockAbFit, fit_block_ab, fit_block_c,
                              intercept_recovery, recover_productivity)


def _fit_variant(seed, overrides, n=500, t=50, dgp="ar1"):
    tp = pg.default_truth().replace(**overrides)
    cfg = DgpConfig(dgp_id=dgp, n_firms=n, t_obs=t, seed=seed, true_params=tp)
    panel, truth = simulate(cfg)
    return panel, truth, fit_block_ab(panel)


EXCLUSION_TRUE = dict(gamma_k=0.0, gamma_l=0.0, delta_k=0.0, delta_l=0.0,
                      zeta_k=0.0, zeta_l=0.0)


@pytest.fixture(scope="module")
def exclusion_true_fit():
    return _fit_variant(7700, EXCLUSION_TRUE, n=300, t=40)


def test_joint_recovery_under_exclusion(exclusion_true_fit):
    panel, _, ab = exclusion_true_fit
    rec = exclusion_recovery(panel, ab, case="joint")
    for name in ("m", "e", "w"):
        est = rec.per_input[name]
        assert est.beta_k == pytest.approx(0.2, abs=4 * est.se_beta_k + 0.01)
        assert est.beta_l == pytest.approx(0.3, abs=4 * est.se_beta_l + 0.01)
        assert est.beta0 == pytest.approx(0.1, abs=0.05)


def test_truth_built_proxy_recovers_exactly():
    # no shocks, no noise: algebraic cancellation is exact
    rng = np.random.default_rng(2)
    n = 500
    k = rng.normal(1.0, 0.6, n)
    l = rng.normal(-1.0, 0.8, n)
    omega = 0.2 * k - 0.1 * l + rng.normal(0, 0.3, n)
    m = 2.2 * omega
    e = 2.0 * omega
    w = 1.8 * omega
    y = 0.1 + 0.2 * k + 0.3 * l + 0.3 * m + 0.15 * e + 0.1 * w + omega
    panel = Panel(firm_id=np.arange(n), year=np.ones(n, dtype=int), y=y, k=k,
                  l=l, m=m, e=e, w=w, z=np.empty((n, 0)))
    theta = ParamVector(beta_m=0.3, beta_e=0.15, beta_w=0.1,
                        gamma_omega=2.2, delta_omega=2.0, zeta_omega=1.8)
    from prodgmm.gmm import GmmResult
    from prodgmm.proposed import THETA1_FIELDS

    n_free = len(theta.pack(THETA1_FIELDS))
    fake_gmm = GmmResult(theta_hat=theta, free_names=list(THETA1_FIELDS),
                         param_labels=theta.packed_labels(THETA1_FIELDS),
                         vcov=1e-6 * np.eye(n_free),
                         j_stat=0.0, df=0, converged=True, n_firms=n, n_obs=n,
                         objective_value=0.0, weight=np.eye(n_free),
                         moment_cov=np.eye(n_free), g_n=np.zeros(n_free))
    ab = BlockAbFit(theta1=theta, gmm=fake_gmm, scale_ratios=(2.2, 2.0, 1.8),
                    iterations=1, converged=True, shock_variances={},
                    degenerate_shocks=True, jacobian_rank=12)
    rec = exclusion_recovery(panel, ab, case="joint")
    est = rec.per_input["m"]
    assert est.beta_k == pytest.approx(0.2, abs=1e-10)
    assert est.beta_l == pytest.approx(0.3, abs=1e-10)
    assert est.beta0 == pytest.approx(0.1, abs=1e-10)


def test_identical_ratios_give_zero_discrepancy():
    # knife-edge case: nonzero slopes with equal slope-to-loading ratios
    theta = ParamVector(gamma_k=0.22, gamma_l=0.44, gamma_omega=2.2,
                        delta_k=0.20, delta_l=0.40, delta_omega=2.0,
                        zeta_k=0.18, zeta_l=0.36, zeta_omega=1.8)
    ratio_k = {h: getattr(theta, s) / getattr(theta, o)
               for h, (s, _, o) in
               {"m": ("gamma_k", "gamma_l", "gamma_omega"),
                "e": ("delta_k", "delta_l", "delta_omega"),
                "w": ("zeta_k", "zeta_l", "zeta_omega")}.items()}
    values = list(ratio_k.values())
    assert values[0] == pytest.approx(values[1]) == pytest.approx(values[2])
    assert values[0] != 0.0  # necessary, not sufficient


def test_case2_marginal_recovery():
    # demand for materials excludes capital; recover beta_k from it
    overrides = dict(EXCLUSION_TRUE)
    overrides.update(gamma_l=0.65, delta_k=0.40, zeta_k=0.5, zeta_l=0.7)
    estimates = []
    for seed in range(6):
        panel, _, ab = _fit_variant(8800 + seed, overrides, n=300, t=40)
        rec = exclusion_recovery(panel, ab, case="marginal",
                                 proxy_assignment={"k": "m", "l": "e"})
        estimates.append(rec.marginal["beta_k"])
    arr = np.asarray(estimates)
    se = arr.std(ddof=1) / np.sqrt(len(arr))
    assert abs(arr.mean() - 0.2) < 3 * se + 0.01


def test_discrepancy_invariant_to_location_shift(medium_fit):
    theta = medium_fit.theta1

    def ratios(th):
        return np.array([th.delta_k / th.delta_omega - th.gamma_k / th.gamma_omega,
                         th.delta_l / th.delta_omega - th.gamma_l / th.gamma_omega])

    shifted = delta_kl_shift(theta, 0.45, -0.3)
    np.testing.assert_allclose(ratios(theta), ratios(shifted), atol=1e-10)


def test_weak_proxy_raises(medium_panel, medium_fit):
    panel, _ = medium_panel
    ab = medium_fit
    broken = BlockAbFit(theta1=ab.theta1.replace(gamma_omega=1e-9), gmm=ab.gmm,
                        scale_ratios=ab.scale_ratios, iterations=1, converged=True,
                        shock_variances={}, degenerate_shocks=False, jacobian_rank=12)
    with pytest.raises(DegeneracyError):
        exclusion_recovery(panel, broken, case="joint")


# ---------------------------------------------------------------------------
# Difference-in-differences
# ---------------------------------------------------------------------------

def _did_setup(seed, **process):
    params = {"did_treat_start": 16, "did_treat_frac": 0.5}
    params.update(process)
    cfg = DgpConfig(dgp_id="po", n_firms=300, t_obs=30, seed=seed,
                    process_params=params)
    panel, truth = simulate(cfg)
    ab = fit_block_ab(panel)
    theta = ab.theta1.replace(beta0=intercept_recovery(panel, ab.theta1))
    omega_hat = recover_productivity(panel, theta)
    return panel, truth, omega_hat


def test_did_matches_potential_outcome_gap():
    diffs = []
    for seed in range(8):
        panel, truth, omega_hat = _did_setup(9000 + seed)
        result = did_att(omega_hat, panel, treat_start=16, controls_poly_degree=3)
        treated = truth.d.max(axis=1) > 0
        post = np.arange(1, 31) >= 16
        gap = (truth.omega1[np.ix_(treated, post)]
               - truth.omega0[np.ix_(treated, post)]).mean()
        diffs.append(result.att_hat - gap)
    diffs = np.asarray(diffs)
    se = diffs.std(ddof=1) / np.sqrt(len(diffs))
    assert abs(diffs.mean()) < 3 * se + 0.005
    assert result.used_poly_kl


def test_did_placebo_coverage():
    inside = 0
    for seed in range(10):
        cfg = DgpConfig(dgp_id="ar1", n_firms=200, t_obs=20, seed=9100 + seed)
        panel, truth = simulate(cfg)
        rng = np.random.default_rng(seed)
        treated = rng.random(200) < 0.5
        d = (treated[panel.firm_codes] & (panel.year >= 11)).astype(np.int64)
        panel_d = Panel(firm_id=panel.firm_id, year=panel.year, y=panel.y,
                        k=panel.k, l=panel.l, m=panel.m, e=panel.e, w=panel.w,
                        z=panel.z, d=d)
        omega_hat = recover_productivity(panel_d, pg.default_truth())
        result = did_att(omega_hat, panel_d, treat_start=11, controls_poly_degree=1)
        inside += abs(result.att_hat) < 2 * result.se
    assert inside >= 9


def test_did_absorbs_location_shift():
    panel, truth, omega_hat = _did_setup(9200)
    base = did_att(omega_hat, panel, treat_start=16, controls_poly_degree=1)
    shifted = omega_hat + 0.7 * panel.k - 0.4 * panel.l
    moved = did_att(shifted, panel, treat_start=16, controls_poly_degree=1)
    assert abs(moved.att_hat - base.att_hat) < 1e-8


def test_did_requires_treatment_information():
    cfg = DgpConfig(dgp_id="ar1", n_firms=50, t_obs=10, seed=1)
    panel, _ = simulate(cfg)
    with pytest.raises(EstimationError):
        did_att(np.zeros(panel.n_obs), panel, treat_start=5)


def test_did_needs_both_groups():
    cfg = DgpConfig(dgp_id="po", n_firms=60, t_obs=10, seed=2,
                    process_params={"did_treat_start": 6, "did_treat_frac": 1.0})
    panel, _ = simulate(cfg)
    with pytest.raises(EstimationError, match="treated and control"):
        did_att(np.zeros(panel.n_obs), panel, treat_start=6)


def test_proposed_vs_proxy_did_gap_sign():
    # when treatment shifts capital and the proxy benchmark's capital
    # elasticity collapses, the proxy DiD absorbs part of the effect:
    # gap sign follows (beta_k_true - beta_k_proxy) * dE[k | treated]
    from prodgmm.benchmarks import fit_acf

    panel, truth, omega_hat_prop = _did_setup(9300, did_inputs_untreated=False)
    att_prop = did_att(omega_hat_prop, panel, treat_start=16,
                       controls_poly_degree=0)
    acf = fit_acf(panel)
    theta_acf = ParamVector(**acf.beta_hat)
    theta_acf = theta_acf.replace(beta0=intercept_recovery(panel, theta_acf))
    omega_hat_acf = recover_productivity(panel, theta_acf)
    att_acf = did_att(omega_hat_acf, panel, treat_start=16,
                      controls_poly_degree=0).att_hat

    treated = truth.d.max(axis=1) > 0
    post = panel.year >= 16
    tr = treated[panel.firm_codes]
    delta_k = ((panel.k[tr & post].mean() - panel.k[tr & ~post].mean())
               - (panel.k[~tr & post].mean() - panel.k[~tr & ~post].mean()))
    predicted_sign = np.sign((0.2 - acf.beta_hat["beta_k"]) * delta_k)
    assert np.sign(att_prop.att_hat - att_acf) == predicted_sign


def test_blockc_strength_record():
    cfg = DgpConfig(dgp_id="ar1", n_firms=150, t_obs=40, seed=9400)
    panel, _ = simulate(cfg)
    ab = fit_block_ab(panel)
    fit = fit_block_c(panel, ab, grid=[(0.3, 0.4)])
    record = blockc_strength(fit)
    assert isinstance(record, BlockCStrength)
    assert record.t_rho2 == fit.rho_t_stats[0]
    assert record.profile == fit.profile_grid


def test_blockc_strength_arithmetic():
    # fabricated fit: rho2 = 0.5 with standard error 0.1 gives t = 5
    cfg = DgpConfig(dgp_id="ar1", n_firms=100, t_obs=30, seed=9500)
    panel, _ = simulate(cfg)
    ab = fit_block_ab(panel)
    fit = fit_block_c(panel, ab, grid=[(0.3, 0.4)])
    fit.rho_t_stats = (0.5 / 0.1, fit.rho_t_stats[1])
    record = blockc_strength(fit)
    assert record.t_rho2 == pytest.approx(5.0)
