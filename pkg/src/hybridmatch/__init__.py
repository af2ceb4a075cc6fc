"""Dynamic matching market with perishable agents and a learned Hybrid policy."""

from .decision import ConstantGap, GapModel, GridSpec, TrainParams, score_oracle, train
from .estimation import fit_lognormal
from .market import LogNormalParams, MarketConfig, PolicyKind, TraceSummary, simulate
from .metrics import compute_metrics
from .policies import GreedyPolicy, HybridConfig, HybridPolicy, PatientPolicy

__all__ = [
    "ConstantGap", "GapModel", "GridSpec", "TrainParams", "score_oracle", "train",
    "fit_lognormal", "LogNormalParams", "MarketConfig", "PolicyKind", "TraceSummary",
    "simulate", "compute_metrics", "GreedyPolicy", "HybridConfig", "HybridPolicy", "PatientPolicy",
]
