"""Panel data model, de-meaning, polynomial bases and residual algebra.

The panel holds logged output ``y``, logged inputs ``k, l, m, e, w``, an
optional control matrix ``z`` and an optional binary treatment flag ``d``.
All estimators consume the de-meaned :class:`CenteredPanel`; the stored
column means support intercept recovery afterwards.
"""

from __future__ import annotations

import io
import itertools
from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import PanelSchemaError, PanelValueError
from .params import ParamVector

REQUIRED_COLUMNS = ("firm", "year", "y", "k", "l", "m", "e", "w")
NUMERIC_COLUMNS = ("y", "k", "l", "m", "e", "w")


@dataclass(frozen=True)
class Panel:
    """Rectangular firm-year dataset, sorted firm-major then year-ascending.

    Every ``(firm_id, year)`` pair is unique and every numeric field is
    finite; both are enforced at construction.  Instances are immutable and
    safe to share across concurrent estimations.
    """

    firm_id: np.ndarray
    year: np.ndarray
    y: np.ndarray
    k: np.ndarray
    l: np.ndarray
    m: np.ndarray
    e: np.ndarray
    w: np.ndarray
    z: np.ndarray  # (n_obs, d_z); d_z may be 0
    d: np.ndarray | None = None  # optional binary treatment flag

    # derived grouping info, filled in __post_init__
    firm_codes: np.ndarray = field(init=False, repr=False)
    firm_starts: np.ndarray = field(init=False, repr=False)
    firm_counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.firm_id)
        sets = {}
        sets["firm_id"] = np.asarray(self.firm_id, dtype=np.int64)
        sets["year"] = np.asarray(self.year, dtype=np.int64)
        for name in NUMERIC_COLUMNS:
            sets[name] = np.asarray(getattr(self, name), dtype=float)
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(n, -1) if z.size else np.empty((n, 0))
        sets["z"] = z
        if self.d is not None:
            d = np.asarray(self.d)
            if not np.all(np.isin(d[np.isfinite(d.astype(float))], (0, 1))):
                raise PanelValueError("treatment flag d must be binary 0/1")
            sets["d"] = d.astype(np.int64)

        for name, arr in sets.items():
            if len(arr) != n:
                raise PanelValueError(f"column {name!r} has length {len(arr)}, expected {n}")

        for name in NUMERIC_COLUMNS:
            bad = np.flatnonzero(~np.isfinite(sets[name]))
            if bad.size:
                raise PanelValueError(f"non-finite value in column {name!r} at row {bad[0]}")
        if sets["z"].size:
            bad = np.flatnonzero(~np.isfinite(sets["z"]).all(axis=1))
            if bad.size:
                raise PanelValueError(f"non-finite value in column 'z' at row {bad[0]}")

        order = np.lexsort((sets["year"], sets["firm_id"]))
        for name, arr in sets.items():
            object.__setattr__(self, name, arr[order] if arr.ndim == 1 else arr[order, :])

        pair = np.stack([self.firm_id, self.year], axis=1)
        if n > 1 and (np.diff(pair, axis=0) == 0).all(axis=1).any():
            idx = int(np.flatnonzero((np.diff(pair, axis=0) == 0).all(axis=1))[0])
            raise PanelValueError(
                f"duplicate (firm, year) pair ({self.firm_id[idx]}, {self.year[idx]})"
            )

        uniq, codes, counts = np.unique(self.firm_id, return_inverse=True, return_counts=True)
        starts = np.zeros(len(uniq), dtype=np.int64)
        np.cumsum(counts[:-1], out=starts[1:])
        object.__setattr__(self, "firm_codes", codes.astype(np.int64))
        object.__setattr__(self, "firm_starts", starts)
        object.__setattr__(self, "firm_counts", counts.astype(np.int64))

    @property
    def n_obs(self) -> int:
        return len(self.firm_id)

    @property
    def n_firms(self) -> int:
        return len(self.firm_starts)

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    def column(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def to_dataframe(self) -> pd.DataFrame:
        data = {"firm": self.firm_id, "year": self.year}
        for name in NUMERIC_COLUMNS:
            data[name] = getattr(self, name)
        for j in range(self.d_z):
            data[f"z{j + 1}"] = self.z[:, j]
        if self.d is not None:
            data["d"] = self.d
        return pd.DataFrame(data)

    def to_csv(self, target) -> None:
        """Write the canonical CSV dialect (comma, '.' decimal, UTF-8)."""
        self.to_dataframe().to_csv(target, index=False, float_format="%.17g")


@dataclass(frozen=True)
class ColumnMeans:
    y: float
    k: float
    l: float
    m: float
    e: float
    w: float
    z: np.ndarray


@dataclass(frozen=True)
class CenteredPanel(Panel):
    """Panel with every numeric column centered at its grand mean.

    The original means are retained exactly for intercept recovery; the
    treatment flag ``d`` is never centered.
    """

    means: ColumnMeans = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.means is None:
            raise PanelValueError("CenteredPanel requires stored column means")
        super().__post_init__()


def load_panel(source: str | bytes | IO, schema: Mapping[str, str] | None = None) -> Panel:
    """Load a panel from delimited text with a header row.

    ``schema`` maps logical column names (``firm``, ``year``, ``y`` ...) to
    header names in the file; omitted entries default to the logical name.
    Control columns are taken from schema entries ``z1, z2, ...`` when
    present, otherwise auto-detected from headers of that form.  A ``d``
    column (treatment flag) is optional.
    """
    schema = dict(schema or {})
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    df = pd.read_csv(source, sep=",", encoding="utf-8", float_precision="round_trip")

    def resolve(logical: str) -> str:
        name = schema.get(logical, logical)
        if name not in df.columns:
            raise PanelSchemaError(f"missing column {name!r} (for {logical!r})")
        return name

    cols = {logical: df[resolve(logical)] for logical in REQUIRED_COLUMNS}

    z_names = sorted((k for k in schema if k.startswith("z") and k[1:].isdigit()),
                     key=lambda s: int(s[1:]))
    if z_names:
        z = np.column_stack([df[resolve(nm)].to_numpy(dtype=float) for nm in z_names])
    else:
        auto = sorted((c for c in df.columns if c.startswith("z") and c[1:].isdigit()),
                      key=lambda s: int(s[1:]))
        z = (np.column_stack([df[c].to_numpy(dtype=float) for c in auto])
             if auto else np.empty((len(df), 0)))

    d_name = schema.get("d", "d")
    d = None
    if d_name in df.columns:
        d_raw = df[d_name].to_numpy(dtype=float)
        if not np.all(np.isfinite(d_raw)):
            raise PanelValueError(f"non-finite value in column {d_name!r} "
                                  f"at row {int(np.flatnonzero(~np.isfinite(d_raw))[0])}")
        d = d_raw.astype(np.int64)

    for logical in NUMERIC_COLUMNS:
        vals = cols[logical].to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise PanelValueError(f"non-finite value in column {logical!r} at row {int(bad[0])}")

    return Panel(
        firm_id=cols["firm"].to_numpy(dtype=np.int64),
        year=cols["year"].to_numpy(dtype=np.int64),
        y=cols["y"].to_numpy(dtype=float),
        k=cols["k"].to_numpy(dtype=float),
        l=cols["l"].to_numpy(dtype=float),
        m=cols["m"].to_numpy(dtype=float),
        e=cols["e"].to_numpy(dtype=float),
        w=cols["w"].to_numpy(dtype=float),
        z=z,
        d=d,
    )


def demean(p: Panel) -> CenteredPanel:
    """Center every numeric column at its grand mean, keeping the means.

    Idempotent: a :class:`CenteredPanel` is returned unchanged.
    """
    if isinstance(p, CenteredPanel):
        return p
    if p.n_obs == 0:
        raise PanelValueError("cannot demean an empty panel")
    means = ColumnMeans(
        y=float(p.y.mean()), k=float(p.k.mean()), l=float(p.l.mean()),
        m=float(p.m.mean()), e=float(p.e.mean()), w=float(p.w.mean()),
        z=p.z.mean(axis=0) if p.d_z else np.empty(0),
    )
    return CenteredPanel(
        firm_id=p.firm_id, year=p.year,
        y=p.y - means.y, k=p.k - means.k, l=p.l - means.l,
        m=p.m - means.m, e=p.e - means.e, w=p.w - means.w,
        z=p.z - means.z if p.d_z else p.z,
        d=p.d, means=means,
    )


def basis_dimension(d_z: int, degree: int) -> int:
    """Number of monomials of total degree 1..degree in d_z variables."""
    from math import comb

    return comb(d_z + degree, degree) - 1


def nuisance_basis(z: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of ``z`` up to the given total degree, no constant.

    Columns are ordered by total degree, then lexicographically by the
    index tuple: for two columns and degree 2 this yields
    ``(z1, z2, z1**2, z1*z2, z2**2)``.
    """
    if degree < 1:
        raise ValueError(f"basis degree must be >= 1, got {degree}")
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    n, d_z = z.shape
    if d_z == 0:
        return np.empty((n, 0))
    cols = []
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d_z), deg):
            col = np.ones(n)
            for j in combo:
                col = col * z[:, j]
            cols.append(col)
    return np.column_stack(cols)


@dataclass(frozen=True)
class Residuals:
    """Per-observation residual vectors of the demand and output equations."""

    m_tilde: np.ndarray
    e_tilde: np.ndarray
    w_tilde: np.ndarray
    y_tilde: np.ndarray


def centered_basis(p: CenteredPanel, degree: int = 2) -> np.ndarray:
    """Nuisance basis of the centered controls, each column de-meaned."""
    basis = nuisance_basis(p.z, degree) if p.d_z else np.empty((p.n_obs, 0))
    if basis.shape[1]:
        basis = basis - basis.mean(axis=0)
    return basis


def residuals(
    p: CenteredPanel,
    theta: ParamVector,
    normalize_kl: bool = True,
    basis_degree: int = 2,
    basis: np.ndarray | None = None,
) -> Residuals:
    """Demand and output residuals at the supplied parameters.

    With ``normalize_kl`` set, the output residual nets out only the
    intermediate inputs; otherwise ``beta_k*k + beta_l*l`` is subtracted as
    well.  ``basis`` may be passed to reuse a precomputed centered basis.
    """
    if basis is None:
        basis = centered_basis(p, basis_degree)
    d_basis = basis.shape[1]
    for name in ("h_coeffs_m", "h_coeffs_e", "h_coeffs_w"):
        coeffs = getattr(theta, name)
        if len(coeffs) != d_basis:
            raise ValueError(
                f"{name} has length {len(coeffs)}, basis dimension is {d_basis}"
            )

    def demand_residual(x, slope_k, slope_l, coeffs):
        out = x - slope_k * p.k - slope_l * p.l
        if d_basis:
            out = out - basis @ np.asarray(coeffs)
        return out

    m_tilde = demand_residual(p.m, theta.gamma_k, theta.gamma_l, theta.h_coeffs_m)
    e_tilde = demand_residual(p.e, theta.delta_k, theta.delta_l, theta.h_coeffs_e)
    w_tilde = demand_residual(p.w, theta.zeta_k, theta.zeta_l, theta.h_coeffs_w)
    y_tilde = p.y - theta.beta_m * p.m - theta.beta_e * p.e - theta.beta_w * p.w
    if not normalize_kl:
        y_tilde = y_tilde - theta.beta_k * p.k - theta.beta_l * p.l
    return Residuals(m_tilde=m_tilde, e_tilde=e_tilde, w_tilde=w_tilde, y_tilde=y_tilde)


def firm_means(p: Panel, values: np.ndarray) -> np.ndarray:
    """Average ``values`` within each firm (rows or matrices)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        sums = np.bincount(p.firm_codes, weights=values, minlength=p.n_firms)
        return sums / p.firm_counts
    out = np.empty((p.n_firms, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(p.firm_codes, weights=values[:, j], minlength=p.n_firms)
    return out / p.firm_counts[:, None]
