"""Command-line interface: simulate, estimate, diagnose, mc."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import benchmarks, diagnostics, mc, proposed
from .dgp import DgpConfig, simulate, truth_to_dataframe
from .panel import Panel, load_panel
from .params import ParamVector


def _cmd_simulate(args) -> int:
    cfg = DgpConfig(dgp_id=args.dgp, n_firms=args.n, t_obs=args.t,
                    seed=args.seed, burn_in=args.burn_in, rho_ew=args.rho_ew)
    panel, truth = simulate(cfg)
    panel.to_csv(args.out)
    if args.truth_out:
        truth_to_dataframe(panel, truth).to_csv(args.truth_out, index=False,
                                                float_format="%.17g")
    print(f"wrote {panel.n_obs} observations for {panel.n_firms} firms to {args.out}")
    return 0


def _load_truth_record(path: str, panel: Panel):
    from .dgp import TruthRecord

    df = pd.read_csv(path)
    n, t = panel.n_firms, panel.n_obs // panel.n_firms

    def grid(col):
        return df[col].to_numpy(dtype=float).reshape(n, t)

    return TruthRecord(
        omega=grid("omega"), tau=grid("tau"), nu=grid("nu"), eta=grid("eta"),
        epsilon=grid("epsilon"),
        d=grid("d") if "d" in df.columns else None,
        omega0=grid("omega0") if "omega0" in df.columns else None,
        omega1=grid("omega1") if "omega1" in df.columns else None,
    )


def _cmd_estimate(args) -> int:
    panel = load_panel(args.infile)
    report: dict = {"method": args.method, "blocks": args.blocks,
                    "n_firms": panel.n_firms, "n_obs": panel.n_obs}

    if args.method == "proposed":
        ab = proposed.fit_block_ab(panel, basis_degree=args.basis_degree)
        theta = ab.theta1
        labels = ab.gmm.param_labels
        report.update({
            "theta_hat": dict(zip(labels, theta.pack(ab.gmm.free_names).tolist())),
            "se": dict(zip(labels, ab.gmm.se.tolist())),
            "j_stat": ab.gmm.j_stat, "df": ab.gmm.df,
            "converged": ab.converged,
            "scale_ratios": list(ab.scale_ratios),
            "diagnostics": {
                "iterations": ab.iterations,
                "shock_variances": ab.shock_variances,
                "degenerate_shocks": ab.degenerate_shocks,
                "jacobian_rank": ab.jacobian_rank,
                "warnings": ab.gmm.warnings,
            },
        })
        if args.blocks == "abc":
            grid = None
            if args.grid_file:
                grid_rows = json.loads(Path(args.grid_file).read_text())
                grid = [tuple(row) for row in grid_rows]
            else:
                grid = proposed.default_profile_grid()
            fit_c = proposed.fit_block_c(panel, ab, grid=grid, h_degree=args.h_degree)
            theta = fit_c.theta2
            report["block_c"] = {
                "beta_k": theta.beta_k, "beta_l": theta.beta_l,
                "chosen_rho_v": fit_c.chosen[0], "chosen_alpha": fit_c.chosen[1],
                "rho_coeffs": fit_c.rho_coeffs.tolist(),
                "rho_ses": fit_c.rho_ses.tolist(),
                "rho_t_stats": list(fit_c.rho_t_stats),
                "weak_identification": fit_c.weak_identification,
                "j_stat": fit_c.gmm.j_stat, "df": fit_c.gmm.df,
                "profile_grid": fit_c.profile_grid,
            }
        theta = theta.replace(beta0=proposed.intercept_recovery(panel, theta))
        report["beta0"] = theta.beta0
        report["theta_full"] = theta.as_dict()
    else:
        truth = _load_truth_record(args.truth, panel) if args.truth else None
        if args.method == "acf":
            fit = benchmarks.fit_acf(panel, args.first_stage_degree)
        elif args.method == "acf-mod":
            fit = benchmarks.fit_acf_mod(panel, truth, args.first_stage_degree)
        else:
            fit = benchmarks.fit_gnr(panel)
        theta = ParamVector(**fit.beta_hat)
        theta = theta.replace(beta0=proposed.intercept_recovery(panel, theta))
        report.update({
            "theta_hat": fit.beta_hat,
            "first_stage_r2": fit.first_stage_r2,
            "converged": fit.converged,
            "beta0": theta.beta0,
            "theta_full": theta.as_dict(),
        })
        if fit.gmm is not None:
            report["j_stat"] = fit.gmm.j_stat
            report["df"] = fit.gmm.df
            report["se"] = dict(zip(fit.gmm.param_labels, fit.gmm.se.tolist()))

    omega_hat = proposed.recover_productivity(panel, theta)
    omega_path = args.omega_out or str(Path(args.out).with_suffix(".omega.csv"))
    pd.DataFrame({"firm": panel.firm_id, "year": panel.year,
                  "omega_hat": omega_hat}).to_csv(omega_path, index=False,
                                                  float_format="%.17g")
    report["omega_csv"] = omega_path
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"wrote report to {args.out}")
    return 0


def _cmd_diagnose(args) -> int:
    report = json.loads(Path(args.infile).read_text())
    panel = load_panel(args.panel)
    out: dict = {}

    ab = proposed.fit_block_ab(panel)
    rec = diagnostics.exclusion_recovery(panel, ab, case=args.case)
    out["exclusion"] = {
        "per_input": {name: vars(r) for name, r in rec.per_input.items()},
        "d_k": {f"{a}-{b}": v for (a, b), v in rec.d_k.items()},
        "d_l": {f"{a}-{b}": v for (a, b), v in rec.d_l.items()},
        "wald_stat": rec.wald_stat, "wald_df": rec.wald_df, "wald_p": rec.wald_p,
    }
    if "block_c" in report:
        fit_c = proposed.fit_block_c(
            panel, ab, grid=[(report["block_c"]["chosen_rho_v"],
                              report["block_c"]["chosen_alpha"])],
            h_degree=len(report["block_c"]["rho_coeffs"]))
        strength = diagnostics.blockc_strength(fit_c)
        out["block_c_strength"] = {
            "t_rho2": strength.t_rho2, "t_rho3": strength.t_rho3,
            "weak_identification": strength.weak_identification,
        }
    if panel.d is not None and args.treat_start is not None:
        theta = ParamVector.from_dict(report["theta_full"])
        omega_hat = proposed.recover_productivity(panel, theta)
        did = diagnostics.did_att(omega_hat, panel, args.treat_start,
                                  controls_poly_degree=args.did_poly_degree)
        out["did"] = {"att_hat": did.att_hat, "se": did.se,
                      "pre_trend_max": did.pre_trend_max,
                      "used_poly_kl": did.used_poly_kl}
    Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(f"wrote diagnostics to {args.out}")
    return 0


def _cmd_mc(args) -> int:
    cfg = mc.McConfig.from_json(Path(args.config).read_text())
    if args.jobs is not None:
        cfg = mc.McConfig(**{**_cfg_dict(cfg), "jobs": args.jobs})
    table = mc.run_mc(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for fmt, suffix in (("csv", "csv"), ("json", "json"), ("markdown", "md")):
        (out_dir / f"mc_table.{suffix}").write_bytes(mc.emit_table(table, fmt))
    print(f"wrote {len(table.rows)} table rows to {out_dir}")
    return 0


def _cfg_dict(cfg: mc.McConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prodgmm")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="simulate a synthetic panel")
    p_sim.add_argument("--dgp", choices=("ar1", "ar2", "po", "ci"), required=True)
    p_sim.add_argument("--n", type=int, required=True)
    p_sim.add_argument("--t", type=int, required=True)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--rho-ew", dest="rho_ew", type=float, default=0.0)
    p_sim.add_argument("--burn-in", dest="burn_in", type=int, default=30)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--truth-out", dest="truth_out", default=None)
    p_sim.set_defaults(func=_cmd_simulate)

    p_est = sub.add_parser("estimate", help="fit an estimator to a panel CSV")
    p_est.add_argument("--in", dest="infile", required=True)
    p_est.add_argument("--method", choices=("proposed", "acf", "acf-mod", "gnr"),
                       default="proposed")
    p_est.add_argument("--blocks", choices=("ab", "abc"), default="ab")
    p_est.add_argument("--h-degree", dest="h_degree", type=int, default=3,
                       choices=(3, 4, 5))
    p_est.add_argument("--grid-file", dest="grid_file", default=None)
    p_est.add_argument("--basis-degree", dest="basis_degree", type=int, default=2)
    p_est.add_argument("--first-stage-degree", dest="first_stage_degree",
                       type=int, default=3)
    p_est.add_argument("--truth", default=None,
                       help="truth CSV (required for acf-mod)")
    p_est.add_argument("--omega-out", dest="omega_out", default=None)
    p_est.add_argument("--out", required=True)
    p_est.set_defaults(func=_cmd_estimate)

    p_diag = sub.add_parser("diagnose", help="identification diagnostics")
    p_diag.add_argument("--in", dest="infile", required=True,
                        help="report JSON from 'estimate'")
    p_diag.add_argument("--panel", required=True)
    p_diag.add_argument("--case", choices=("joint", "marginal"), default="joint")
    p_diag.add_argument("--treat-start", dest="treat_start", type=int, default=None)
    p_diag.add_argument("--did-poly-degree", dest="did_poly_degree", type=int, default=3)
    p_diag.add_argument("--out", required=True)
    p_diag.set_defaults(func=_cmd_diagnose)

    p_mc = sub.add_parser("mc", help="run a Monte Carlo study")
    p_mc.add_argument("--config", required=True)
    p_mc.add_argument("--out", required=True)
    p_mc.add_argument("--jobs", type=int, default=None)
    p_mc.set_defaults(func=_cmd_mc)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
