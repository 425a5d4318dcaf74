"""Stage drivers: data exploration, experiment design, coding, reporting."""

from .data import DataProfile, ExplorationStep, run_data_agent
from .design import (
    ExperimentalPlan,
    LocalCaseRetrievalProvider,
    NullRetrievalProvider,
    RequirementSummary,
    RetrievalBundle,
    RetrievalItem,
    RetrievalProvider,
    RetrievalSource,
    build_requirement_summary,
    load_uncertainty_catalog,
    probe_device_info,
    run_design_agent,
)
from .coding import (
    ExecutionRecord,
    FeedbackReport,
    ImageAnalyzer,
    NullImageAnalyzer,
    StepRecord,
    VisionEndpointAnalyzer,
    extract_metrics,
    run_execution_phase,
    run_feedback_phase,
)
from .report import (
    CommandCompiler,
    CompileOutcome,
    DocumentCompiler,
    ReportDocument,
    ReportInputs,
    StubCompiler,
    run_report_agent,
)

__all__ = [
    "DataProfile",
    "ExplorationStep",
    "run_data_agent",
    "ExperimentalPlan",
    "LocalCaseRetrievalProvider",
    "NullRetrievalProvider",
    "RequirementSummary",
    "RetrievalBundle",
    "RetrievalItem",
    "RetrievalProvider",
    "RetrievalSource",
    "build_requirement_summary",
    "load_uncertainty_catalog",
    "probe_device_info",
    "run_design_agent",
    "ExecutionRecord",
    "FeedbackReport",
    "ImageAnalyzer",
    "NullImageAnalyzer",
    "StepRecord",
    "VisionEndpointAnalyzer",
    "extract_metrics",
    "run_execution_phase",
    "run_feedback_phase",
    "CommandCompiler",
    "CompileOutcome",
    "DocumentCompiler",
    "ReportDocument",
    "ReportInputs",
    "StubCompiler",
    "run_report_agent",
]
