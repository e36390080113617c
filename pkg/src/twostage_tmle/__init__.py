"""Two-stage TMLE for cluster randomized trials with sub-sampling and missing outcomes."""

__version__ = "0.1.0"

from .data_model import AnalysisConfig, DataValidationError, IndividualRecord, UnitData, ingest
from .simulator import DGPConfig, TruthReport, generate, replicate_study, search_like_dgp, true_parameters
from .stage1 import EndpointEstimate, Stage1Error, estimate_endpoint, estimate_endpoints
from .stage2 import EffectEstimate, Stage2Error, UnitRow, adaptive_prespecification, sensitivity_grid, tmle_effect

__all__ = [
    "AnalysisConfig", "DataValidationError", "IndividualRecord", "UnitData", "ingest",
    "DGPConfig", "TruthReport", "generate", "replicate_study", "search_like_dgp", "true_parameters",
    "EndpointEstimate", "Stage1Error", "estimate_endpoint", "estimate_endpoints",
    "EffectEstimate", "Stage2Error", "UnitRow", "adaptive_prespecification", "sensitivity_grid", "tmle_effect",
]
