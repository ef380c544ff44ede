"""CohortNet: interpretable cohort discovery and calibrated prediction for
multivariate clinical time series."""

from .data import Dataset, FeatureSpec, PatientRecord, SyntheticPlan
from .encoder import EncoderConfig, encode_patient, init_encoder_params
from .pipeline import PipelineConfig, run_pipeline

__all__ = [
    "Dataset",
    "FeatureSpec",
    "PatientRecord",
    "SyntheticPlan",
    "EncoderConfig",
    "encode_patient",
    "init_encoder_params",
    "PipelineConfig",
    "run_pipeline",
]

__version__ = "0.1.0"
