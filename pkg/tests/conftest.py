"""Shared fixtures: simulated panels, fitted models, and the MC cache.

The acceptance suite and several module tests consume the same Monte
Carlo cells; ``mc_cache`` memoizes them per session so each cell is
simulated and fitted exactly once.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import prodgmm as pg
from prodgmm import mc as mc_mod
from prodgmm.proposed import fit_block_ab

settings.register_profile(
    "default", max_examples=25, deadline=None, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

ACCEPTANCE_REPORT: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_REPORT.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_REPORT:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {name}: {detail}")


def normalized_truth(theta: pg.ParamVector | None = None) -> pg.ParamVector:
    """True parameters in the beta_k = beta_l = 0 parametrization."""
    theta = theta or pg.default_truth()
    return theta.replace(
        beta_k=0.0, beta_l=0.0,
        gamma_k=theta.gamma_k - theta.gamma_omega * theta.beta_k,
        gamma_l=theta.gamma_l - theta.gamma_omega * theta.beta_l,
        delta_k=theta.delta_k - theta.delta_omega * theta.beta_k,
        delta_l=theta.delta_l - theta.delta_omega * theta.beta_l,
        zeta_k=theta.zeta_k - theta.zeta_omega * theta.beta_k,
        zeta_l=theta.zeta_l - theta.zeta_omega * theta.beta_l,
    )


@pytest.fixture(scope="session")
def small_panel():
    cfg = pg.DgpConfig(dgp_id="ar1", n_firms=80, t_obs=15, seed=101)
    return pg.simulate(cfg)


@pytest.fixture(scope="session")
def medium_panel():
    cfg = pg.DgpConfig(dgp_id="ar1", n_firms=200, t_obs=30, seed=202)
    return pg.simulate(cfg)


@pytest.fixture(scope="session")
def medium_fit(medium_panel):
    panel, _ = medium_panel
    return fit_block_ab(panel)


class McCache:
    """Session-level memoization of Monte Carlo cells."""

    BASE_SEED = 20240601

    def __init__(self):
        self._tables: dict = {}

    def part1(self, dgps, methods, n, t, reps=100):
        key = ("p1", tuple(dgps), tuple(methods), n, t, reps)
        if key not in self._tables:
            cfg = mc_mod.McConfig(dgps=tuple(dgps), methods=tuple(methods),
                                  n_grid=(n,), t_grid=(t,), reps=reps,
                                  base_seed=self.BASE_SEED)
            self._tables[key] = mc_mod.run_mc(cfg)
        return self._tables[key]

    def part2(self, dgps, n=200, t=50, reps=100):
        key = ("p2", tuple(dgps), n, t, reps)
        if key not in self._tables:
            cfg = mc_mod.McConfig(dgps=tuple(dgps), methods=("proposed_abc",),
                                  n_grid=(n,), t_grid=(t,), reps=reps,
                                  base_seed=self.BASE_SEED, part="part2")
            self._tables[key] = mc_mod.run_mc(cfg)
        return self._tables[key]

    def exclusion_variant(self, overrides: dict, reps=100, n=500, t=50):
        key = ("excl", tuple(sorted(overrides.items())), reps, n, t)
        if key not in self._tables:
            from prodgmm.diagnostics import exclusion_recovery
            from prodgmm.dgp import DgpConfig, replicate_seed, simulate

            base = mc_mod.cell_seed(self.BASE_SEED, "ar1-excl", n, t)
            truth_params = pg.default_truth().replace(**overrides)
            pvals = []
            for rep in range(reps):
                cfg = DgpConfig(dgp_id="ar1", n_firms=n, t_obs=t,
                                seed=replicate_seed(base, rep),
                                true_params=truth_params)
                panel, _ = simulate(cfg)
                ab = fit_block_ab(panel)
                rec = exclusion_recovery(panel, ab, case="joint")
                pvals.append(rec.wald_p)
            self._tables[key] = np.asarray(pvals)
        return self._tables[key]

    def ci_grid(self, rho_grid=(0.0, 0.05, 0.1, 0.2, 0.3), reps=20, n=200, t=50):
        key = ("ci", tuple(rho_grid), reps, n, t)
        if key not in self._tables:
            from prodgmm.dgp import DgpConfig, replicate_seed, simulate
            from prodgmm.panel import demean, residuals
            from prodgmm.proposed import scale_ratios

            base = mc_mod.cell_seed(self.BASE_SEED, "ci", n, t)
            out = {}
            for rho in rho_grid:
                bms, zetas = [], []
                for rep in range(reps):
                    cfg = DgpConfig(dgp_id="ci", n_firms=n, t_obs=t,
                                    seed=replicate_seed(base, rep), rho_ew=rho)
                    panel, _ = simulate(cfg)
                    fit = fit_block_ab(panel)
                    bms.append(fit.theta1.beta_m)
                    res = residuals(demean(panel), normalized_truth())
                    zetas.append(scale_ratios(res)[2])
                out[rho] = {"beta_m": np.asarray(bms), "zeta_ratio": np.asarray(zetas)}
            self._tables[key] = out
        return self._tables[key]


@pytest.fixture(scope="session")
def mc_cache():
    return McCache()
