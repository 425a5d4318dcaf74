"""looplab: closed-loop multi-agent modeling pipeline and scoring toolkit."""

__version__ = "0.1.0"

from .core import (
    ExecutionStatus,
    HistorySummary,
    MemoryUnit,
    MetaAction,
    MetaDecision,
    MetricDirection,
    PipelineConfig,
    RoundArtifacts,
    Stage,
    TaskSpec,
    TokenPrices,
    TokenUsage,
    load_config,
    validate_config,
)

__all__ = [
    "ExecutionStatus",
    "HistorySummary",
    "MemoryUnit",
    "MetaAction",
    "MetaDecision",
    "MetricDirection",
    "PipelineConfig",
    "RoundArtifacts",
    "Stage",
    "TaskSpec",
    "TokenPrices",
    "TokenUsage",
    "load_config",
    "validate_config",
    "__version__",
]
