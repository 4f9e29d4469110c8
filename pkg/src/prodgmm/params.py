"""Structural parameter vector shared by the simulator and all estimators."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Iterable, Sequence

import numpy as np

# Fields holding variable-length coefficient tuples (nuisance basis loadings).
VECTOR_FIELDS = ("h_coeffs_m", "h_coeffs_e", "h_coeffs_w")

# Demand-side parameter triples, keyed by the input they belong to.
DEMAND_SLOPES = {
    "m": ("gamma_k", "gamma_l", "gamma_omega"),
    "e": ("delta_k", "delta_l", "delta_omega"),
    "w": ("zeta_k", "zeta_l", "zeta_omega"),
}


@dataclass(frozen=True)
class ParamVector:
    """Full structural parameter set.

    Holds output elasticities (``beta_*``), demand slopes on capital and
    labor for materials / electricity / water (``gamma_* / delta_* /
    zeta_*``), productivity loadings (``*_omega``), nuisance-basis
    coefficients for the control polynomial (``h_coeffs_*``), CES
    aggregator parameters (``alpha``, ``rho_v``), curvature polynomial
    loadings (``rho1..rho3``) and the recovered intercept ``beta0``.

    Instances are immutable; use :meth:`replace` to derive new vectors.
    """

    beta_k: float = 0.0
    beta_l: float = 0.0
    beta_m: float = 0.0
    beta_e: float = 0.0
    beta_w: float = 0.0
    gamma_k: float = 0.0
    gamma_l: float = 0.0
    delta_k: float = 0.0
    delta_l: float = 0.0
    zeta_k: float = 0.0
    zeta_l: float = 0.0
    gamma_omega: float = 1.0
    delta_omega: float = 1.0
    zeta_omega: float = 1.0
    h_coeffs_m: tuple[float, ...] = ()
    h_coeffs_e: tuple[float, ...] = ()
    h_coeffs_w: tuple[float, ...] = ()
    alpha: float = 0.5
    rho_v: float = 0.0
    rho1: float = 0.0
    rho2: float = 0.0
    rho3: float = 0.0
    rho4: float = 0.0  # used when the curvature polynomial degree exceeds 3
    rho5: float = 0.0
    beta0: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not np.isfinite(self.rho_v):
            raise ValueError("rho_v must be finite")
        for name in VECTOR_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(float(v) for v in value))

    def replace(self, **changes) -> "ParamVector":
        return replace(self, **changes)

    # -- flat-vector packing used by the GMM engine ---------------------

    def pack(self, names: Sequence[str]) -> np.ndarray:
        """Flatten the named fields into a 1-D float array.

        Tuple-valued fields (``h_coeffs_*``) contribute all their entries,
        in order.
        """
        out: list[float] = []
        for name in names:
            value = getattr(self, name)
            if name in VECTOR_FIELDS:
                out.extend(value)
            else:
                out.append(float(value))
        return np.asarray(out, dtype=float)

    def unpack(self, names: Sequence[str], values: np.ndarray) -> "ParamVector":
        """Inverse of :meth:`pack`; tuple fields keep their current length."""
        changes = {}
        pos = 0
        for name in names:
            if name in VECTOR_FIELDS:
                width = len(getattr(self, name))
                changes[name] = tuple(float(v) for v in values[pos : pos + width])
                pos += width
            else:
                changes[name] = float(values[pos])
                pos += 1
        if pos != len(values):
            raise ValueError(f"expected {pos} values, got {len(values)}")
        return self.replace(**changes)

    def packed_labels(self, names: Sequence[str]) -> list[str]:
        """One label per packed entry, e.g. ``h_coeffs_m[0]``."""
        labels: list[str] = []
        for name in names:
            if name in VECTOR_FIELDS:
                labels.extend(f"{name}[{i}]" for i in range(len(getattr(self, name))))
            else:
                labels.append(name)
        return labels

    def demand_loading(self, input_name: str) -> float:
        """Productivity loading of the demand equation for ``m``/``e``/``w``."""
        return float(getattr(self, DEMAND_SLOPES[input_name][2]))

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ParamVector":
        kwargs = dict(data)
        for name in VECTOR_FIELDS:
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


def delta_kl_shift(theta: ParamVector, c_k: float, c_l: float) -> ParamVector:
    """Apply the capital/labor location-shift reparameterization.

    Relabeling latent productivity by ``omega - c_k*k - c_l*l`` maps the
    parameters to an observationally equivalent point: output elasticities
    absorb ``(c_k, c_l)`` and every demand slope absorbs its loading times
    the shift.  Used by the invariance tests.
    """
    changes = {
        "beta_k": theta.beta_k + c_k,
        "beta_l": theta.beta_l + c_l,
    }
    for slope_k, slope_l, loading in DEMAND_SLOPES.values():
        lam = getattr(theta, loading)
        changes[slope_k] = getattr(theta, slope_k) + lam * c_k
        changes[slope_l] = getattr(theta, slope_l) + lam * c_l
    return theta.replace(**changes)
