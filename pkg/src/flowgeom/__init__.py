"""Flow matching on synthetic representation spaces, with geometry diagnostics."""

__version__ = "0.1.0"

from .flowcore import FeatureStandardizer, StandardizationStats, TimeSampler
from .geometry import GeometryAnalyzer, GeometryReport, TwoNN, geometry_report
from .synthdata import FeatureBatch, GeneratorSpec, generate
from .trainer import FlowMatchingEstimator, FlowModel, TrainConfig

__all__ = [
    "FeatureBatch",
    "FeatureStandardizer",
    "FlowMatchingEstimator",
    "FlowModel",
    "GeneratorSpec",
    "GeometryAnalyzer",
    "GeometryReport",
    "StandardizationStats",
    "TimeSampler",
    "TrainConfig",
    "TwoNN",
    "generate",
    "geometry_report",
]
