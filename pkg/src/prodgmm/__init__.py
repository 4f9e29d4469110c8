"""Production function estimation without restrictions on productivity dynamics.

Submodules: ``panel`` (data model), ``dgp`` (simulators), ``gmm`` (generic
two-step GMM engine), ``proposed`` (three-block estimator), ``benchmarks``
(proxy and share-regression estimators), ``diagnostics`` (identification
checks, DiD), ``mc`` (replication harness), ``cli``.
"""

from .dgp import DgpConfig, TruthRecord, default_truth, replicate_seed, simulate
from .errors import DegeneracyError, EstimationError, PanelSchemaError, PanelValueError
from .gmm import GmmResult, MomentSpec, clustered_sandwich, delta_method, two_step_estimate
from .panel import (CenteredPanel, Panel, Residuals, demean, load_panel,
                    nuisance_basis, residuals)
from .params import ParamVector
from .proposed import (BlockAbFit, BlockCFit, ces_index, fit_block_ab, fit_block_c,
                       intercept_recovery, markup, recover_productivity, scale_ratios)

__all__ = [
    "CenteredPanel", "DegeneracyError", "DgpConfig", "EstimationError",
    "GmmResult", "MomentSpec", "Panel", "PanelSchemaError", "PanelValueError",
    "ParamVector", "Residuals", "TruthRecord", "BlockAbFit", "BlockCFit",
    "ces_index", "clustered_sandwich", "default_truth", "delta_method", "demean",
    "fit_block_ab", "fit_block_c", "intercept_recovery", "load_panel", "markup",
    "nuisance_basis", "recover_productivity", "replicate_seed", "residuals",
    "scale_ratios", "simulate", "two_step_estimate",
]

__version__ = "0.1.0"
