"""Cross-module domain types and the pipeline configuration.

Everything here is an immutable value object: construction validates, there
is no behavior beyond that, and instances are safe to share across threads.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional

import yaml

from .errors import ConfigError


class Stage(str, Enum):
    DATA_UNDERSTANDING = "data_understanding"
    PLANNING = "planning"
    CODE_EXECUTION = "code_execution"
    META = "meta"
    REPORT_GENERATION = "report_generation"


#: Stages a meta decision may restart the loop at.
RESTART_STAGES = (Stage.DATA_UNDERSTANDING, Stage.PLANNING, Stage.CODE_EXECUTION)


class MetricDirection(str, Enum):
    HIGHER_BETTER = "higher_better"
    LOWER_BETTER = "lower_better"


class ExecutionStatus(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    UNKNOWN = "unknown"


class MetaAction(str, Enum):
    CONTINUE = "continue"
    STOP = "stop"


@dataclass(frozen=True)
class TaskSpec:
    """Parsed task file: what to model and how it is judged."""

    name: str
    description: str
    metric_name: str
    metric_direction: MetricDirection
    data_paths: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("task name must be non-empty")
        if "/" in self.name or "\\" in self.name:
            raise ValueError("task name must not contain path separators")
        labels = [label for label, _ in self.data_paths]
        if len(labels) != len(set(labels)):
            raise ValueError("data path labels must be distinct")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "metric_name": self.metric_name,
            "metric_direction": self.metric_direction.value,
            "data_paths": [[label, path] for label, path in self.data_paths],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TaskSpec":
        return cls(
            name=data["name"],
            description=data["description"],
            metric_name=data["metric_name"],
            metric_direction=MetricDirection(data["metric_direction"]),
            data_paths=tuple((label, path) for label, path in data.get("data_paths", [])),
        )


@dataclass(frozen=True)
class TokenPrices:
    """Cost per token in opaque currency units. Defaults to free."""

    input: float = 0.0
    output: float = 0.0
    cache: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return {"input": self.input, "output": self.output, "cache": self.cache}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TokenPrices":
        return cls(
            input=float(data.get("input", 0.0)),
            output=float(data.get("output", 0.0)),
            cache=float(data.get("cache", 0.0)),
        )


@dataclass(frozen=True)
class TokenUsage:
    """Token counts for one or more chat calls.

    ``cache_hit_tokens`` is a subset of ``input_tokens`` and is never added
    into the total separately. ``cost`` is the dot product of the counts with
    the configured prices.
    """

    input_tokens: int = 0
    output_tokens: int = 0
    cache_hit_tokens: int = 0
    cost: float = 0.0

    def __post_init__(self) -> None:
        for name in ("input_tokens", "output_tokens", "cache_hit_tokens"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.cache_hit_tokens > self.input_tokens:
            raise ValueError("cache_hit_tokens cannot exceed input_tokens")
        if self.cost < 0:
            raise ValueError("cost must be non-negative")

    @property
    def total_tokens(self) -> int:
        return self.input_tokens + self.output_tokens

    @classmethod
    def priced(
        cls,
        input_tokens: int,
        output_tokens: int,
        cache_hit_tokens: int,
        prices: TokenPrices,
    ) -> "TokenUsage":
        cost = (
            input_tokens * prices.input
            + output_tokens * prices.output
            + cache_hit_tokens * prices.cache
        )
        return cls(input_tokens, output_tokens, cache_hit_tokens, cost)

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        if not isinstance(other, TokenUsage):
            return NotImplemented
        return TokenUsage(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
            self.cache_hit_tokens + other.cache_hit_tokens,
            self.cost + other.cost,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "cache_hit_tokens": self.cache_hit_tokens,
            "total_tokens": self.total_tokens,
            "cost": self.cost,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TokenUsage":
        return cls(
            input_tokens=int(data.get("input_tokens", 0)),
            output_tokens=int(data.get("output_tokens", 0)),
            cache_hit_tokens=int(data.get("cache_hit_tokens", 0)),
            cost=float(data.get("cost", 0.0)),
        )


@dataclass(frozen=True)
class RoundArtifacts:
    """Paths and outcomes recorded for one pipeline round."""

    round_idx: int
    data_report_ref: str = ""
    plan_ref: str = ""
    execution_dir: str = ""
    execution_status: ExecutionStatus = ExecutionStatus.UNKNOWN
    feedback_ref: str = ""
    metrics_ref: str = ""
    primary_metric_value: Optional[float] = None
    stage_durations: Mapping[str, float] = field(default_factory=dict)
    stage_token_usage: Mapping[str, TokenUsage] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.round_idx < 1:
            raise ValueError("round_idx must be >= 1")
        valid = {stage.value for stage in Stage}
        for mapping in (self.stage_durations, self.stage_token_usage):
            unknown = set(mapping) - valid
            if unknown:
                raise ValueError(f"unknown stage keys: {sorted(unknown)}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "round_idx": self.round_idx,
            "data_report_ref": self.data_report_ref,
            "plan_ref": self.plan_ref,
            "execution_dir": self.execution_dir,
            "execution_status": self.execution_status.value,
            "feedback_ref": self.feedback_ref,
            "metrics_ref": self.metrics_ref,
            "primary_metric_value": self.primary_metric_value,
            "stage_token_usage": {
                stage: usage.to_dict() for stage, usage in self.stage_token_usage.items()
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RoundArtifacts":
        return cls(
            round_idx=int(data["round_idx"]),
            data_report_ref=data.get("data_report_ref", ""),
            plan_ref=data.get("plan_ref", ""),
            execution_dir=data.get("execution_dir", ""),
            execution_status=ExecutionStatus(data.get("execution_status", "unknown")),
            feedback_ref=data.get("feedback_ref", ""),
            metrics_ref=data.get("metrics_ref", ""),
            primary_metric_value=data.get("primary_metric_value"),
            stage_token_usage={
                stage: TokenUsage.from_dict(usage)
                for stage, usage in data.get("stage_token_usage", {}).items()
            },
        )


@dataclass(frozen=True)
class MemoryUnit:
    """Bounded summary of one completed round, carried into later prompts."""

    round_idx: int
    summary_text: str

    def to_dict(self) -> dict[str, Any]:
        return {"round_idx": self.round_idx, "summary_text": self.summary_text}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MemoryUnit":
        return cls(round_idx=int(data["round_idx"]), summary_text=data["summary_text"])


@dataclass(frozen=True)
class RoundRecord:
    """One completed round as remembered by the history summary."""

    round_idx: int
    primary_metric_value: Optional[float]
    status: ExecutionStatus
    plan_excerpt: str = ""
    execution_excerpt: str = ""
    feedback_excerpt: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "round_idx": self.round_idx,
            "primary_metric_value": self.primary_metric_value,
            "status": self.status.value,
            "plan_excerpt": self.plan_excerpt,
            "execution_excerpt": self.execution_excerpt,
            "feedback_excerpt": self.feedback_excerpt,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RoundRecord":
        return cls(
            round_idx=int(data["round_idx"]),
            primary_metric_value=data.get("primary_metric_value"),
            status=ExecutionStatus(data.get("status", "unknown")),
            plan_excerpt=data.get("plan_excerpt", ""),
            execution_excerpt=data.get("execution_excerpt", ""),
            feedback_excerpt=data.get("feedback_excerpt", ""),
        )


@dataclass(frozen=True)
class HistorySummary:
    """Improvement tracking across rounds.

    ``best_metric_value`` is stored in lower-is-better orientation; the
    orchestrator negates higher-is-better values before comparison.
    """

    best_metric_value: Optional[float] = None
    best_round_idx: Optional[int] = None
    no_improve_rounds: int = 0
    previous_rounds: tuple[RoundRecord, ...] = ()

    def __post_init__(self) -> None:
        if (self.best_metric_value is None) != (self.best_round_idx is None):
            raise ValueError("best_metric_value and best_round_idx must be set together")
        if self.no_improve_rounds < 0:
            raise ValueError("no_improve_rounds must be non-negative")
        if self.no_improve_rounds > len(self.previous_rounds):
            raise ValueError("no_improve_rounds cannot exceed completed rounds")

    def to_dict(self) -> dict[str, Any]:
        return {
            "best_metric_value": self.best_metric_value,
            "best_round_idx": self.best_round_idx,
            "no_improve_rounds": self.no_improve_rounds,
            "previous_rounds": [record.to_dict() for record in self.previous_rounds],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HistorySummary":
        return cls(
            best_metric_value=data.get("best_metric_value"),
            best_round_idx=data.get("best_round_idx"),
            no_improve_rounds=int(data.get("no_improve_rounds", 0)),
            previous_rounds=tuple(
                RoundRecord.from_dict(record) for record in data.get("previous_rounds", [])
            ),
        )


@dataclass(frozen=True)
class MetaDecision:
    """Loop-routing decision made after each round."""

    action: MetaAction
    next_start: Stage = Stage.PLANNING
    stop_reason: str = ""
    decision_reason: str = ""
    next_start_reason: str = ""

    def __post_init__(self) -> None:
        if self.action is MetaAction.STOP and not self.stop_reason:
            raise ValueError("stop decisions require a stop_reason")
        if self.next_start not in RESTART_STAGES:
            raise ValueError(f"next_start must be one of {[s.value for s in RESTART_STAGES]}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "action": self.action.value,
            "next_start": self.next_start.value,
            "stop_reason": self.stop_reason,
            "decision_reason": self.decision_reason,
            "next_start_reason": self.next_start_reason,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetaDecision":
        return cls(
            action=MetaAction(data["action"]),
            next_start=Stage(data.get("next_start", "planning")),
            stop_reason=data.get("stop_reason", ""),
            decision_reason=data.get("decision_reason", ""),
            next_start_reason=data.get("next_start_reason", ""),
        )


#: Patterns screened out of read-only exploration fragments. Best-effort,
#: not a sandbox: prompt-level constraints do the real work.
DEFAULT_READONLY_DENYLIST = (
    "subprocess",
    "os.system",
    "os.popen",
    "os.remove",
    "os.unlink",
    "os.rmdir",
    "shutil.rmtree",
    "requests",
    "urllib",
    "socket",
    "http.client",
    "pip install",
)


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob the engine reads, with defaults that match a stock run."""

    max_rounds: int = 5
    patience: int = 1
    min_delta: float = 0.0

    # per-agent loop budgets
    max_iterations: int = 15
    max_steps: int = 10
    max_retries: int = 10
    review_rounds: int = 1
    feedback_max_iterations: int = 10
    max_fix_attempts: int = 3

    # truncation limits, characters per context slot
    max_observation_chars: int = 10000
    max_chars_task: int = 3000
    max_chars_data_report: int = 20000
    max_chars_feedback: int = 8000
    max_chars_retrieval: int = 40000
    max_chars_context: int = 8000
    snapshot_slot_chars: int = 8000
    execution_tail_chars: int = 8000
    report_training_tail_chars: int = 12000
    compile_log_tail_chars: int = 4000

    # interpreter session
    interpreter_command: str = "{python} -u {child}"
    fragment_timeout_seconds: float = 600.0
    readonly_denylist: tuple[str, ...] = DEFAULT_READONLY_DENYLIST

    # chat endpoint
    llm_model: str = "default"
    llm_max_tokens: int = 8192
    llm_retries: int = 3
    llm_timeout_seconds: float = 120.0
    token_prices: TokenPrices = field(default_factory=TokenPrices)

    # document compiler
    compiler_command: str = "lualatex -interaction=nonstopmode -halt-on-error {source}"

    # feature switches
    enable_uncertainty: bool = True
    uncertainty_methods_path: str = ""

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["token_prices"] = self.token_prices.to_dict()
        data["readonly_denylist"] = list(self.readonly_denylist)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
            if key == "token_prices":
                value = TokenPrices.from_dict(value)
            elif key == "readonly_denylist":
                value = tuple(value)
            kwargs[key] = value
        return validate_config(cls(**kwargs))


_POSITIVE_INT_FIELDS = (
    "max_rounds",
    "max_steps",
    "llm_max_tokens",
    "max_observation_chars",
    "max_chars_task",
    "max_chars_data_report",
    "max_chars_feedback",
    "max_chars_retrieval",
    "max_chars_context",
    "snapshot_slot_chars",
    "execution_tail_chars",
    "report_training_tail_chars",
    "compile_log_tail_chars",
)

_NON_NEGATIVE_INT_FIELDS = (
    "patience",
    "max_iterations",
    "max_retries",
    "review_rounds",
    "feedback_max_iterations",
    "max_fix_attempts",
    "llm_retries",
)


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    """Check every invariant; raise :class:`ConfigError` naming the field."""
    for name in _POSITIVE_INT_FIELDS:
        value = getattr(cfg, name)
        if not isinstance(value, int) or value < 1:
            raise ConfigError(name, f"must be a positive integer, got {value!r}")
    for name in _NON_NEGATIVE_INT_FIELDS:
        value = getattr(cfg, name)
        if not isinstance(value, int) or value < 0:
            raise ConfigError(name, f"must be a non-negative integer, got {value!r}")
    if cfg.min_delta < 0:
        raise ConfigError("min_delta", f"must be non-negative, got {cfg.min_delta!r}")
    if cfg.fragment_timeout_seconds <= 0:
        raise ConfigError("fragment_timeout_seconds", "must be positive")
    if cfg.llm_timeout_seconds <= 0:
        raise ConfigError("llm_timeout_seconds", "must be positive")
    if not cfg.interpreter_command.strip():
        raise ConfigError("interpreter_command", "must be non-empty")
    for part in ("input", "output", "cache"):
        if getattr(cfg.token_prices, part) < 0:
            raise ConfigError("token_prices", f"{part} price must be non-negative")
    return cfg


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> PipelineConfig:
    """Load configuration from a YAML file, apply overrides, validate.

    The file is a flat UTF-8 key tree: top-level keys are the
    :class:`PipelineConfig` field names; ``token_prices`` is the one nested
    map. Missing keys take built-in defaults; unknown keys are rejected.
    """
    data: dict[str, Any] = {}
    if path:
        with open(path, encoding="utf-8") as handle:
            loaded = yaml.safe_load(handle) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config", f"expected a key-value mapping in {path}")
        data.update(loaded)
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_dict(data)
