"""Monte Carlo harness: replication runner and bias/SD/RMSE tables."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from . import benchmarks, proposed
from .dgp import DgpConfig, default_truth, replicate_seed, simulate, splitmix64
from .params import ParamVector

METHODS = ("proposed", "proposed_abc", "acf", "acf_mod", "gnr")

# Parameters whose per-replication estimates are collected, per method.
TRACKED = {
    "proposed": ("beta_m", "beta_e", "beta_w",
                 "gamma_omega", "delta_omega", "zeta_omega"),
    "proposed_abc": ("beta_k", "beta_l", "beta_m", "beta_e", "beta_w",
                     "gamma_omega", "delta_omega", "zeta_omega"),
    "acf": ("beta_k", "beta_l", "beta_m", "beta_e", "beta_w"),
    "acf_mod": ("beta_k", "beta_l", "beta_m", "beta_e", "beta_w"),
    "gnr": ("beta_k", "beta_l", "beta_m", "beta_e", "beta_w"),
}


@dataclass(frozen=True)
class McConfig:
    """Configuration of a bias/RMSE study.

    ``part2`` defaults the sample size to (N, T) = (200, 50) and adds the
    curvature block at the true CES aggregator parameters unless a grid
    is supplied.
    """

    dgps: tuple[str, ...] = ("ar1",)
    methods: tuple[str, ...] = ("proposed",)
    n_grid: tuple[int, ...] = ()
    t_grid: tuple[int, ...] = ()
    reps: int = 100
    base_seed: int = 20240601
    part: str = "part1"
    rho_ew_grid: tuple[float, ...] = ()
    jobs: int = 1
    h_degree: int = 3
    blockc_grid: tuple[tuple[float, float], ...] | None = None
    param_overrides: dict = field(default_factory=dict)
    process_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "dgps", tuple(self.dgps))
        object.__setattr__(self, "methods", tuple(self.methods))
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if self.part not in ("part1", "part2"):
            raise ValueError("part must be 'part1' or 'part2'")
        n_grid = tuple(self.n_grid) or ((200,) if self.part == "part2" else (500,))
        t_grid = tuple(self.t_grid) or (50,)
        object.__setattr__(self, "n_grid", n_grid)
        object.__setattr__(self, "t_grid", t_grid)
        object.__setattr__(self, "rho_ew_grid", tuple(self.rho_ew_grid) or (0.0,))

    @classmethod
    def from_json(cls, text: str) -> "McConfig":
        data = json.loads(text)
        if "blockc_grid" in data and data["blockc_grid"] is not None:
            data["blockc_grid"] = tuple(tuple(x) for x in data["blockc_grid"])
        for key in ("dgps", "methods", "n_grid", "t_grid", "rho_ew_grid"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True)
class McRow:
    dgp: str
    method: str
    parameter: str
    n: int
    t: int
    rho_ew: float
    bias: float
    sd: float
    rmse: float
    n_converged: int
    n_failed: int
    flagged: bool


@dataclass
class McTable:
    """Aggregates plus the per-replication estimates that produced them.

    Conventions: ``sd`` is the sample standard deviation (ddof = 1) and
    ``rmse`` the root mean squared deviation from the truth, so
    ``rmse**2 = bias**2 + sd**2 * (reps - 1) / reps`` over the converged
    replications.
    """

    rows: list[McRow]
    raw: dict = field(default_factory=dict)

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows])

    def cell(self, dgp: str, method: str, parameter: str, n: int, t: int,
             rho_ew: float = 0.0) -> McRow:
        for row in self.rows:
            if (row.dgp, row.method, row.parameter, row.n, row.t) == \
                    (dgp, method, parameter, n, t) and abs(row.rho_ew - rho_ew) < 1e-12:
                return row
        raise KeyError((dgp, method, parameter, n, t, rho_ew))

    def estimates(self, dgp: str, method: str, parameter: str, n: int, t: int,
                  rho_ew: float = 0.0) -> np.ndarray:
        return self.raw[(dgp, method, n, t, round(rho_ew, 10))][parameter]


def cell_seed(base_seed: int, dgp: str, n: int, t: int) -> int:
    """Deterministic seed for one design cell; stable across configs.

    The violation correlation is deliberately excluded from the key, so
    cells that differ only in ``rho_ew`` share common random numbers and
    bias differences across the violation grid are paired comparisons.
    """
    key = f"{dgp}|{n}|{t}"
    acc = splitmix64(base_seed & ((1 << 64) - 1))
    for ch in key:
        acc = splitmix64(acc ^ ord(ch))
    return acc


def _fit_one(method: str, panel, truth, cfg: DgpConfig, h_degree: int,
             blockc_grid) -> tuple[dict[str, float], bool]:
    if method in ("proposed", "proposed_abc"):
        ab = proposed.fit_block_ab(panel)
        est = {name: float(getattr(ab.theta1, name))
               for name in ("beta_m", "beta_e", "beta_w",
                            "gamma_omega", "delta_omega", "zeta_omega")}
        ok = ab.converged
        if method == "proposed_abc":
            grid = blockc_grid or [(cfg.true_params.rho_v, cfg.true_params.alpha)]
            fit_c = proposed.fit_block_c(panel, ab, grid=grid, h_degree=h_degree)
            est["beta_k"] = float(fit_c.theta2.beta_k)
            est["beta_l"] = float(fit_c.theta2.beta_l)
            ok = ok and fit_c.gmm.converged
        return est, ok
    if method == "acf":
        fit = benchmarks.fit_acf(panel)
    elif method == "acf_mod":
        fit = benchmarks.fit_acf_mod(panel, truth)
    elif method == "gnr":
        fit = benchmarks.fit_gnr(panel)
    else:
        raise ValueError(f"unknown method {method!r}")
    return dict(fit.beta_hat), fit.converged


def _replication(task) -> tuple[int, dict]:
    """Worker: simulate one panel and run every requested method on it."""
    (rep, seed, dgp, n, t, rho_ew, methods, h_degree, blockc_grid,
     param_overrides, process_overrides) = task
    truth_params = default_truth()
    if param_overrides:
        truth_params = truth_params.replace(**param_overrides)
    cfg = DgpConfig(dgp_id=dgp, n_firms=n, t_obs=t, seed=seed, rho_ew=rho_ew,
                    true_params=truth_params, process_params=dict(process_overrides))
    panel, truth = simulate(cfg)
    out = {}
    for method in methods:
        try:
            est, ok = _fit_one(method, panel, truth, cfg, h_degree, blockc_grid)
        except Exception as exc:  # failures are counted, never fatal
            out[method] = ({}, False, repr(exc))
            continue
        out[method] = (est, ok, "")
    return rep, out


def run_mc(cfg: McConfig) -> McTable:
    """Run the full replication study described by ``cfg``.

    Replications get deterministic per-cell seeds, so identical configs
    produce identical tables regardless of the worker count; failed or
    non-converged replications are excluded from the aggregates and
    counted, and a cell is flagged when more than 20% of its
    replications failed.
    """
    truth_params = default_truth()
    if cfg.param_overrides:
        truth_params = truth_params.replace(**cfg.param_overrides)

    cells = []
    for dgp in cfg.dgps:
        rho_list = cfg.rho_ew_grid if dgp == "ci" else (0.0,)
        for n in cfg.n_grid:
            for t in cfg.t_grid:
                for rho in rho_list:
                    cells.append((dgp, n, t, rho))

    tasks = []
    for dgp, n, t, rho in cells:
        base = cell_seed(cfg.base_seed, dgp, n, t)
        for rep in range(cfg.reps):
            tasks.append((rep, replicate_seed(base, rep), dgp, n, t, rho,
                          cfg.methods, cfg.h_degree, cfg.blockc_grid,
                          cfg.param_overrides, cfg.process_overrides))

    n_reps = cfg.reps
    results: dict[tuple, list] = {}
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outputs = list(pool.map(_replication, tasks, chunksize=1))
    else:
        outputs = [_replication(task) for task in tasks]
    for task, (rep, out) in zip(tasks, outputs):
        key = (task[2], task[3], task[4], task[5])  # dgp, n, t, rho
        results.setdefault(key, [None] * n_reps)[rep] = out

    rows: list[McRow] = []
    raw: dict = {}
    for dgp, n, t, rho in cells:
        outs = results[(dgp, n, t, rho)]
        for method in cfg.methods:
            per_param: dict[str, list[float]] = {}
            n_conv = 0
            n_failed = 0
            for out in outs:
                est, ok, _err = out[method]
                if ok and est:
                    n_conv += 1
                    for name in TRACKED[method]:
                        if name in est:
                            per_param.setdefault(name, []).append(est[name])
                else:
                    n_failed += 1
            raw[(dgp, method, n, t, round(rho, 10))] = {
                name: np.asarray(vals) for name, vals in per_param.items()
            }
            flagged = n_failed > 0.2 * n_reps
            for name, vals in per_param.items():
                vals = np.asarray(vals)
                true_val = float(getattr(truth_params, name))
                bias = float(vals.mean() - true_val)
                sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
                rmse = float(np.sqrt(np.mean((vals - true_val) ** 2)))
                rows.append(McRow(dgp=dgp, method=method, parameter=name,
                                  n=n, t=t, rho_ew=rho, bias=bias, sd=sd,
                                  rmse=rmse, n_converged=n_conv,
                                  n_failed=n_failed, flagged=flagged))
    return McTable(rows=rows, raw=raw)


COLUMN_ORDER = ("dgp", "method", "parameter", "n", "t", "rho_ew",
                "bias", "sd", "rmse", "n_converged", "n_failed", "flagged")


def emit_table(table: McTable, fmt: str = "csv") -> bytes:
    """Serialize the aggregate table deterministically.

    Formats: ``csv``, ``json``, ``markdown``.  Numeric cells use repr
    precision so emitted tables round-trip exactly.
    """
    if not table.rows:
        raise ValueError("empty table")
    records = [asdict(r) for r in table.rows]
    if fmt == "csv":
        lines = [",".join(COLUMN_ORDER)]
        for rec in records:
            lines.append(",".join(_format_cell(rec[c]) for c in COLUMN_ORDER))
        return ("\n".join(lines) + "\n").encode()
    if fmt == "json":
        ordered = [{c: rec[c] for c in COLUMN_ORDER} for rec in records]
        return (json.dumps(ordered, indent=2) + "\n").encode()
    if fmt == "markdown":
        lines = ["| " + " | ".join(COLUMN_ORDER) + " |",
                 "|" + "|".join("---" for _ in COLUMN_ORDER) + "|"]
        for rec in records:
            lines.append("| " + " | ".join(_format_cell(rec[c]) for c in COLUMN_ORDER) + " |")
        return ("\n".join(lines) + "\n").encode()
    raise ValueError(f"unknown format {fmt!r}")


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_markdown(text: str) -> pd.DataFrame:
    """Parse a table emitted with ``fmt='markdown'`` (round-trip check)."""
    lines = [ln.strip() for ln in text.strip().splitlines()]
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    rows = []
    for ln in lines[2:]:
        cells = [c.strip() for c in ln.strip("|").split("|")]
        rows.append(dict(zip(header, cells)))
    df = pd.DataFrame(rows)
    for col in ("n", "t", "n_converged", "n_failed"):
        df[col] = df[col].astype(int)
    for col in ("rho_ew", "bias", "sd", "rmse"):
        df[col] = df[col].astype(float)
    df["flagged"] = df["flagged"] == "True"
    return df
