"""Training-free out-of-context detection for news image-caption pairs."""

from .cache import CacheKey, EvidenceCache, Replay, cache_key
from .config import EffectiveConfig, build_detector, load_config
from .domain import ClaimPair, EvidenceCandidate, Origin, RequestKind, RetrievalRequest, SimilarityScores
from .evaluation import DatasetRecord, EvalReport, Metrics, evaluate, load_dataset
from .filtering import EvidenceFilter, FilterConfig, FilterTrace, Strategy, run_filter_module
from .pipeline import OOCDetector, Verification, run_benchmark
from .ranking import VisualCentricRanker, rank_candidates, select_top_k
from .reasoning import FinalVerdict, Label, Stage1Assessment, Stance, run_two_stage

__all__ = [
    "CacheKey",
    "ClaimPair",
    "DatasetRecord",
    "EffectiveConfig",
    "EvalReport",
    "EvidenceCache",
    "EvidenceCandidate",
    "EvidenceFilter",
    "FilterConfig",
    "FilterTrace",
    "FinalVerdict",
    "Label",
    "Metrics",
    "OOCDetector",
    "Origin",
    "Replay",
    "RequestKind",
    "RetrievalRequest",
    "SimilarityScores",
    "Stage1Assessment",
    "Stance",
    "Strategy",
    "Verification",
    "VisualCentricRanker",
    "build_detector",
    "cache_key",
    "evaluate",
    "load_config",
    "load_dataset",
    "rank_candidates",
    "run_benchmark",
    "run_filter_module",
    "run_two_stage",
    "select_top_k",
]

__version__ = "0.1.0"
