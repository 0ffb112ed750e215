"""Crowdsourced WiFi/magnetic fingerprinting fused with pedestrian dead reckoning.

Fingerprint fixes enter an error-state EKF with measurement noise predicted per
fix by fingerprinting accuracy indicators (FAI).
"""

__version__ = "0.1.0"

from fpfuse.core import CdfCurve, Correlation, ErrorStats, correlation, error_cdf, error_stats, skew
from fpfuse.dead_reckoning import DrConfig, EnvironmentReference, ErrorState, ImuNoiseModel, NavState, run_dead_reckoning
from fpfuse.crowdsourcing import Anchor, select_segments, smooth, smooth_weighted
from fpfuse.mapping import ApEstimate, Fingerprint, FingerprintDatabase, build_database, estimate_ap, fit_aps
from fpfuse.fingerprinting import MatchResult, match, match_magnetic_constrained, match_profile
from fpfuse.fai import FaiConfig, FaiValue, STRATEGIES, train_mc
from fpfuse.fusion import FusionConfig, FusionOutput, Strategy, position_update, run_pipeline
from fpfuse.simulation import WorldConfig, generate_world, synthesize_trace
from fpfuse.traceio import GroundTruth, SensorTrace
from fpfuse.config import Config
from fpfuse.eval import compare_strategies

__all__ = [
    "Anchor", "ApEstimate", "CdfCurve", "Config", "Correlation", "DrConfig", "EnvironmentReference", "ErrorState",
    "ErrorStats", "FaiConfig", "FaiValue", "Fingerprint", "FingerprintDatabase", "FusionConfig", "FusionOutput",
    "GroundTruth", "ImuNoiseModel", "MatchResult", "NavState", "STRATEGIES", "SensorTrace", "Strategy",
    "WorldConfig", "build_database", "compare_strategies", "correlation", "error_cdf", "error_stats",
    "estimate_ap", "fit_aps", "generate_world", "match", "match_magnetic_constrained", "match_profile",
    "position_update", "run_dead_reckoning", "run_pipeline", "select_segments", "skew", "smooth",
    "smooth_weighted", "synthesize_trace", "train_mc",
]
