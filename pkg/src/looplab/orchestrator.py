"""Loop controller: task parsing, round driving with selective stage
activation, improvement tracking, memory, meta decisions with hard
overrides, resume, and the final summary."""

from __future__ import annotations

import dataclasses
import json
import logging
import re
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from . import prompts
from .agents.coding import (
    ImageAnalyzer,
    NullImageAnalyzer,
    run_execution_phase,
    run_feedback_phase,
)
from .agents.data import PriorContext, run_data_agent
from .agents.design import (
    NullRetrievalProvider,
    RetrievalProvider,
    build_requirement_summary,
    load_uncertainty_catalog,
    probe_device_info,
    run_design_agent,
)
from .agents.report import (
    CommandCompiler,
    DocumentCompiler,
    ReportDocument,
    ReportInputs,
    run_report_agent,
)
from .blocks import extract_fold, parse_blocks, parse_decision
from .core import (
    ExecutionStatus,
    HistorySummary,
    MemoryUnit,
    MetaAction,
    MetaDecision,
    MetricDirection,
    PipelineConfig,
    RoundRecord,
    Stage,
    TaskSpec,
    TokenUsage,
)
from .errors import DecisionParseError, GatewayError, LooplabError, TaskParseError
from .gateway import CallTags, ChatRequest, Gateway, Message, Role
from .session import ManagedSession, SessionConfig
from ._text import truncate_head, truncate_tail

log = logging.getLogger(__name__)

SUMMARY_SCHEMA_VERSION = 1
STOP_MAX_ROUNDS = "Maximum rounds reached"
STOP_NO_IMPROVEMENT = "No continuous improvement"

_HIGHER_BETTER_METRICS = ("accuracy", "f1", "dice", "cindex", "hits")
_LOWER_BETTER_METRICS = ("loss", "rmsle", "mae", "kl")


# --- task file parsing ---------------------------------------------------------


def _normalize_metric(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


def infer_metric_direction(metric_name: str) -> Optional[MetricDirection]:
    normalized = _normalize_metric(metric_name)
    for keyword in _LOWER_BETTER_METRICS:
        if keyword in normalized:
            return MetricDirection.LOWER_BETTER
    for keyword in _HIGHER_BETTER_METRICS:
        if keyword in normalized:
            return MetricDirection.HIGHER_BETTER
    return None


def _clean_line_value(value: str) -> str:
    return value.strip().strip("*").strip()


def parse_task_file(path: str | Path) -> TaskSpec:
    """Parse the bullet-style task file format.

    Required lines: ``Task Name:`` and ``Evaluation Metric:``. The metric
    direction comes from an explicit ``Metric Direction:`` annotation or
    the built-in keyword table; anything else is an error rather than a
    silent guess. Labeled dataset paths are read from the Dataset Paths
    section, excluding the root entry.
    """
    text = Path(path).read_text(encoding="utf-8")

    name_match = re.search(r"Task\s*Name\s*:\s*(.+)", text)
    if not name_match:
        raise TaskParseError("name", f"no Task Name line in {path}")
    raw_name = _clean_line_value(name_match.group(1))
    name = re.sub(r"\s+", "_", raw_name)
    name = re.sub(r"[^A-Za-z0-9_.-]", "", name)
    if not name:
        raise TaskParseError("name", "task name empty after sanitizing")

    metric_match = re.search(r"Evaluation\s*Metric\s*:\s*(.+)", text)
    if not metric_match:
        raise TaskParseError("metric", f"no Evaluation Metric line in {path}")
    metric_name = _clean_line_value(metric_match.group(1))

    direction: Optional[MetricDirection] = None
    direction_match = re.search(r"Metric\s*Direction\s*:\s*(.+)", text)
    if direction_match:
        token = direction_match.group(1).lower()
        if "higher" in token:
            direction = MetricDirection.HIGHER_BETTER
        elif "lower" in token:
            direction = MetricDirection.LOWER_BETTER
    if direction is None:
        direction = infer_metric_direction(metric_name)
    if direction is None:
        raise TaskParseError(
            "metric_direction",
            f"cannot infer direction for metric {metric_name!r}; "
            "add a 'Metric Direction: higher|lower' line to the task file",
        )

    data_paths: list[tuple[str, str]] = []
    in_paths = False
    for line in text.splitlines():
        stripped = line.strip().strip("*").strip()
        header = stripped.strip("[]*")
        if "[" in stripped and "]" in stripped and not stripped.startswith("-"):
            in_paths = header.replace("*", "").strip().lower() == "dataset paths"
            continue
        if in_paths and stripped.startswith("-") and ":" in stripped:
            label, value = stripped.lstrip("- ").split(":", 1)
            label = _clean_line_value(label)
            value = value.strip()
            if label.lower() == "dataset root" or not value:
                continue
            data_paths.append((label, value))

    return TaskSpec(
        name=name,
        description=text,
        metric_name=metric_name,
        metric_direction=direction,
        data_paths=tuple(data_paths),
    )


# --- history and decisions ------------------------------------------------------


def orient_metric(value: float, direction: MetricDirection) -> float:
    """Convert to lower-is-better orientation for comparisons."""
    return -value if direction is MetricDirection.HIGHER_BETTER else value


def update_history(
    history: HistorySummary,
    round_idx: int,
    value: Optional[float],
    direction: MetricDirection,
    min_delta: float,
    status: ExecutionStatus = ExecutionStatus.UNKNOWN,
    plan_excerpt: str = "",
    execution_excerpt: str = "",
    feedback_excerpt: str = "",
) -> HistorySummary:
    """Fold one completed round into the history.

    Improvement means strictly beating ``best - min_delta`` in
    lower-is-better orientation. A missing metric counts as neither
    improvement nor regression; the round is still appended.
    """
    record = RoundRecord(
        round_idx=round_idx,
        primary_metric_value=value,
        status=status,
        plan_excerpt=plan_excerpt,
        execution_excerpt=execution_excerpt,
        feedback_excerpt=feedback_excerpt,
    )
    previous = history.previous_rounds + (record,)
    if value is None:
        return dataclasses.replace(history, previous_rounds=previous)

    oriented = orient_metric(value, direction)
    best = history.best_metric_value
    if best is None or oriented < best - min_delta:
        return HistorySummary(
            best_metric_value=oriented,
            best_round_idx=round_idx,
            no_improve_rounds=0,
            previous_rounds=previous,
        )
    return dataclasses.replace(
        history,
        no_improve_rounds=history.no_improve_rounds + 1,
        previous_rounds=previous,
    )


def decide(
    round_idx: int,
    cfg: PipelineConfig,
    history: HistorySummary,
    execution_status: ExecutionStatus,
    model_decision: Optional[MetaDecision],
) -> MetaDecision:
    """Apply the hard stop overrides, then the model decision, then the
    heuristic floor.

    Priority: (1) the round budget always wins; (2) the patience rule stops
    after no improvement for ``patience`` rounds, once at least two rounds
    completed; (3) otherwise the model's decision stands; (4) without one,
    failure restarts at planning and success retries code execution.
    """
    if round_idx >= cfg.max_rounds:
        return MetaDecision(
            action=MetaAction.STOP,
            stop_reason=STOP_MAX_ROUNDS,
            decision_reason=f"round {round_idx} reached the configured maximum {cfg.max_rounds}",
        )
    if len(history.previous_rounds) >= 2 and history.no_improve_rounds >= cfg.patience:
        return MetaDecision(
            action=MetaAction.STOP,
            stop_reason=STOP_NO_IMPROVEMENT,
            decision_reason=(
                f"no improvement beyond min_delta for {history.no_improve_rounds} "
                f"round(s) with patience {cfg.patience}"
            ),
        )
    if model_decision is not None:
        return model_decision
    if execution_status is ExecutionStatus.SUCCESS:
        return MetaDecision(
            action=MetaAction.CONTINUE,
            next_start=Stage.CODE_EXECUTION,
            decision_reason="fallback on execution status: success, retry execution",
        )
    return MetaDecision(
        action=MetaAction.CONTINUE,
        next_start=Stage.PLANNING,
        decision_reason="fallback on execution status: failure, replan",
    )


# --- memory -----------------------------------------------------------------------


@dataclass
class PipelineState:
    """Working state of one pipeline run; confined to the driver thread."""

    task: TaskSpec
    cfg: PipelineConfig
    output_root: Path
    rounds: list[dict[str, Any]] = field(default_factory=list)
    memory: list[MemoryUnit] = field(default_factory=list)
    history: HistorySummary = field(default_factory=HistorySummary)
    next_start: Stage = Stage.DATA_UNDERSTANDING


def render_snapshot(
    round_idx: int, plan_text: str, execution_tail: str, feedback_text: str, bound: int
) -> str:
    lines = [
        f"# Round {round_idx} Snapshot",
        "",
        "## Plan",
        truncate_head(plan_text, bound) or "None",
        "",
        "## Execution Result",
        truncate_tail(execution_tail, bound) or "None",
        "",
        "## Feedback Analysis",
        truncate_head(feedback_text, bound) or "None",
    ]
    return "\n".join(lines)


def update_memory(
    state: PipelineState,
    round_idx: int,
    plan_text: str,
    execution_tail: str,
    feedback_text: str,
    bound: int,
    round_dir: Path,
) -> MemoryUnit:
    """Append this round's memory unit and rewrite the snapshots file.

    The snapshots file is regenerated from the per-round snapshot files
    rather than appended, so re-running a round (resume) never duplicates
    its header.
    """
    snapshot = render_snapshot(round_idx, plan_text, execution_tail, feedback_text, bound)
    (round_dir / "round_snapshot.md").write_text(snapshot + "\n", encoding="utf-8")
    unit = MemoryUnit(round_idx=round_idx, summary_text=snapshot)
    state.memory = [m for m in state.memory if m.round_idx != round_idx] + [unit]
    state.memory.sort(key=lambda m: m.round_idx)
    snapshots_path = state.output_root / "snapshots.md"
    snapshots_path.write_text(
        "".join(m.summary_text + "\n\n" for m in state.memory), encoding="utf-8"
    )
    return unit


# --- providers bundle ----------------------------------------------------------------


@dataclass
class Providers:
    gateway: Gateway
    analyzer: ImageAnalyzer = field(default_factory=NullImageAnalyzer)
    compiler: Optional[DocumentCompiler] = None
    retrieval: RetrievalProvider = field(default_factory=NullRetrievalProvider)


@dataclass(frozen=True)
class ResumePoint:
    round_dir: Path
    from_stage: str = "meta"


# --- pipeline ------------------------------------------------------------------------

_RESUME_SKIP = {
    "data_understanding": (),
    "planning": ("data_understanding",),
    "code_execution": ("data_understanding", "planning"),
    "meta": ("data_understanding", "planning", "code_execution"),
}


def _read_text(path: Optional[Path]) -> str:
    if path is None:
        return ""
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError:
        return ""


def run_pipeline(
    task_path: str | Path,
    cfg: PipelineConfig,
    providers: Providers,
    output_root: Optional[Path] = None,
    resume: Optional[ResumePoint] = None,
) -> dict[str, Any]:
    """Drive up to ``max_rounds`` rounds, then the report, then the summary.

    Stage errors mark the round failed and route to the decision; they
    never crash the loop. The summary is persisted even when a fatal error
    aborts mid-run. Under ``resume`` the named round's completed stage
    outputs are loaded from disk instead of regenerated.
    """
    task = parse_task_file(task_path)

    if resume is not None:
        pipeline_root = Path(resume.round_dir).resolve().parent
        match = re.search(r"round_(\d+)", Path(resume.round_dir).name)
        if not match:
            raise LooplabError(f"resume round dir {resume.round_dir} lacks a round_NN name")
        start_round = int(match.group(1))
        if resume.from_stage not in _RESUME_SKIP:
            raise LooplabError(f"unknown resume stage {resume.from_stage!r}")
    else:
        if output_root is None:
            stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            output_root = Path.cwd() / "runs" / task.name / stamp
        pipeline_root = Path(output_root).resolve()
        start_round = 1
    pipeline_root.mkdir(parents=True, exist_ok=True)

    gateway = providers.gateway
    compiler = providers.compiler or CommandCompiler(cfg.compiler_command)
    state = PipelineState(task=task, cfg=cfg, output_root=pipeline_root)
    timings: dict[str, Any] = {"rounds": {}}
    prior_records = _preload_prior_state(state, pipeline_root, start_round) if resume else {}

    device_info = probe_device_info()
    unc_catalog = load_uncertainty_catalog(cfg) if cfg.enable_uncertainty else ""
    report_record: dict[str, Any] = {}
    stopped: dict[str, Any] = {}
    started_at = datetime.now(timezone.utc).isoformat()

    try:
        for round_idx in range(start_round, cfg.max_rounds + 1):
            resuming = resume is not None and round_idx == start_round
            skip_stages = _RESUME_SKIP[resume.from_stage] if resuming else ()
            round_dir = pipeline_root / f"round_{round_idx:02d}"
            round_dir.mkdir(parents=True, exist_ok=True)
            gateway.record_dir = round_dir / "llm_calls"

            stage_durations: dict[str, float] = {}
            stage_usage_before = gateway.ledger.report().stages
            stage_failures: dict[str, str] = {}
            prior_record = prior_records.get(round_idx, {})

            # -- data understanding ---------------------------------------
            data_report_path: Optional[Path] = None
            if "data_understanding" in skip_stages:
                data_report_path = _resolve_ref(
                    prior_record.get("data_report_ref"),
                    round_dir / "data_understanding" / "report.md",
                    state.rounds[-1]["data_report_path"] if state.rounds else None,
                    pipeline_root,
                )
            elif state.next_start is Stage.DATA_UNDERSTANDING or not state.rounds:
                session = ManagedSession(
                    SessionConfig(
                        interpreter_command=cfg.interpreter_command,
                        working_dir=round_dir / "data_understanding",
                        truncate_chars=cfg.max_observation_chars,
                        default_timeout=cfg.fragment_timeout_seconds,
                    )
                )
                (round_dir / "data_understanding").mkdir(parents=True, exist_ok=True)
                prior_ctx = _build_prior_context(state)
                begun = time.monotonic()
                try:
                    profile = run_data_agent(
                        task,
                        cfg,
                        gateway,
                        session,
                        round_dir / "data_understanding",
                        round_idx,
                        prior_ctx,
                    )
                    data_report_path = profile.path
                except OSError:
                    raise
                except Exception as exc:
                    stage_failures["data_understanding"] = _describe(exc)
                finally:
                    stage_durations["data_understanding"] = time.monotonic() - begun
                    session.close()
            else:
                previous = state.rounds[-1]["data_report_path"]
                data_report_path = previous

            profile_text = _read_text(data_report_path)

            # -- planning ---------------------------------------------------
            plan_path: Optional[Path] = None
            if "planning" in skip_stages:
                plan_path = _resolve_ref(
                    prior_record.get("plan_ref"),
                    round_dir / "planning" / "final_plan.md",
                    state.rounds[-1]["plan_path"] if state.rounds else None,
                    pipeline_root,
                )
            elif stage_failures:
                pass  # an earlier stage already failed this round
            elif state.next_start in (Stage.DATA_UNDERSTANDING, Stage.PLANNING) or not state.rounds:
                snapshots_text = _read_text(pipeline_root / "snapshots.md")
                summary = build_requirement_summary(
                    task, profile_text, snapshots_text, device_info, cfg
                )
                begun = time.monotonic()
                try:
                    plan = run_design_agent(
                        summary,
                        providers.retrieval,
                        unc_catalog,
                        cfg,
                        gateway,
                        round_dir / "planning",
                        round_idx,
                    )
                    plan_path = plan.path
                except OSError:
                    raise
                except Exception as exc:
                    stage_failures["planning"] = _describe(exc)
                finally:
                    stage_durations["planning"] = time.monotonic() - begun
            else:
                plan_path = state.rounds[-1]["plan_path"]

            plan_text = _read_text(plan_path)

            # -- code execution and feedback ---------------------------------
            ce_dir = round_dir / "code_execution"
            execution_status = ExecutionStatus.UNKNOWN
            metrics_path: Optional[Path] = None
            metric_value: Optional[float] = None
            feedback_path: Optional[Path] = None
            execution_tail = ""

            if "code_execution" in skip_stages:
                loaded = _load_execution_outputs(ce_dir)
                execution_status = loaded["status"]
                metrics_path = loaded["metrics_path"]
                metric_value = loaded["metric_value"]
                feedback_path = loaded["feedback_path"]
                execution_tail = loaded["execution_tail"]
            elif stage_failures:
                execution_status = ExecutionStatus.FAILURE
            else:
                ce_dir.mkdir(parents=True, exist_ok=True)
                session = ManagedSession(
                    SessionConfig(
                        interpreter_command=cfg.interpreter_command,
                        working_dir=ce_dir,
                        truncate_chars=cfg.max_observation_chars,
                        default_timeout=cfg.fragment_timeout_seconds,
                        stdout_log=ce_dir / "run_stdout.log",
                    )
                )
                begun = time.monotonic()
                try:
                    execution = run_execution_phase(
                        plan_text, profile_text, task, cfg, gateway, session, ce_dir, round_idx
                    )
                    execution_status = execution.overall_status
                    metrics_path = execution.metrics_ref
                    metric_value = execution.primary_metric_value
                    try:
                        feedback = run_feedback_phase(
                            execution,
                            providers.analyzer,
                            cfg,
                            gateway,
                            session,
                            ce_dir,
                            round_idx,
                            task,
                            plan_text,
                        )
                        feedback_path = feedback.path
                    except OSError:
                        raise
                    except Exception as exc:
                        log.warning("feedback phase failed: %s", exc)
                        stage_failures.setdefault("feedback", _describe(exc))
                except OSError:
                    raise
                except Exception as exc:
                    stage_failures["code_execution"] = _describe(exc)
                    execution_status = ExecutionStatus.FAILURE
                finally:
                    stage_durations["code_execution"] = time.monotonic() - begun
                    session.close()
                execution_tail = truncate_tail(
                    _read_text(ce_dir / "run_stdout.log"), cfg.execution_tail_chars
                )

            feedback_text = _read_text(feedback_path)

            # -- history, memory, meta decision -------------------------------
            state.history = update_history(
                state.history,
                round_idx,
                metric_value,
                task.metric_direction,
                cfg.min_delta,
                status=execution_status,
                plan_excerpt=truncate_head(plan_text, cfg.snapshot_slot_chars),
                execution_excerpt=execution_tail,
                feedback_excerpt=truncate_head(feedback_text, cfg.snapshot_slot_chars),
            )
            update_memory(
                state,
                round_idx,
                plan_text,
                execution_tail,
                feedback_text,
                cfg.snapshot_slot_chars,
                round_dir,
            )

            begun = time.monotonic()
            model_decision = _meta_model_decision(
                task,
                cfg,
                gateway,
                round_idx,
                plan_text,
                execution_status,
                metric_value,
                feedback_text,
                state,
            )
            decision = decide(round_idx, cfg, state.history, execution_status, model_decision)
            stage_durations["meta"] = time.monotonic() - begun
            meta_dir = round_dir / "meta"
            meta_dir.mkdir(parents=True, exist_ok=True)
            (meta_dir / "decision.json").write_text(
                json.dumps(decision.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)
                + "\n",
                encoding="utf-8",
            )

            stage_usage = _usage_delta(stage_usage_before, gateway.ledger.report().stages)
            if resuming:
                for stage_name in skip_stages:
                    usage = (prior_record.get("stage_token_usage") or {}).get(stage_name)
                    if usage:
                        stage_usage[stage_name] = TokenUsage.from_dict(usage)

            state.rounds.append(
                {
                    "round_idx": round_idx,
                    "data_report_path": data_report_path,
                    "plan_path": plan_path,
                    "execution_dir": ce_dir,
                    "execution_status": execution_status,
                    "feedback_path": feedback_path,
                    "metrics_path": metrics_path,
                    "primary_metric_value": metric_value,
                    "decision": decision,
                    "stage_failures": stage_failures,
                    "stage_token_usage": stage_usage,
                }
            )
            timings["rounds"][str(round_idx)] = stage_durations

            state.next_start = decision.next_start
            if decision.action is MetaAction.STOP:
                stopped = {"round_idx": round_idx, "stop_reason": decision.stop_reason}
                break
        else:
            if state.rounds:
                last_decision: MetaDecision = state.rounds[-1]["decision"]
                stopped = {
                    "round_idx": state.rounds[-1]["round_idx"],
                    "stop_reason": last_decision.stop_reason or STOP_MAX_ROUNDS,
                }

        # -- final report -----------------------------------------------------
        if state.rounds:
            report_dir = pipeline_root / "report_generation"
            gateway.record_dir = report_dir / "llm_calls"
            usage_before = gateway.ledger.report().stages
            begun = time.monotonic()
            try:
                document = _run_report(state, cfg, gateway, compiler, providers.analyzer, report_dir)
                report_record = {
                    "source_path": _relative(document.path, pipeline_root),
                    "compiled_path": _relative(document.compiled_ref, pipeline_root)
                    if document.compiled_ref
                    else "",
                    "fix_attempts": document.fix_attempts,
                    "status": "compiled" if document.compiled_ref else "source_only",
                }
            except OSError:
                raise
            except Exception as exc:
                report_record = {"status": "failed", "error": _describe(exc)}
            finally:
                timings["report_generation"] = time.monotonic() - begun
            usage = _usage_delta(usage_before, gateway.ledger.report().stages)
            report_record["token_usage"] = {
                stage: u.to_dict() for stage, u in usage.items()
            }
    finally:
        summary = _build_summary(state, task_path, pipeline_root, report_record, stopped)
        (pipeline_root / "pipeline_summary.json").write_text(
            json.dumps(summary, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        timings["started_at"] = started_at
        timings["finished_at"] = datetime.now(timezone.utc).isoformat()
        (pipeline_root / "timings.json").write_text(
            json.dumps(timings, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    return summary


# --- pipeline helpers ---------------------------------------------------------------


def _describe(exc: Exception) -> str:
    return f"{type(exc).__name__}: {exc}"


def _relative(path: Optional[Path], root: Path) -> str:
    if path is None:
        return ""
    path = Path(path)
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(path)


def _resolve_ref(
    recorded: Optional[str],
    disk_candidate: Path,
    previous: Optional[Path],
    root: Path,
) -> Optional[Path]:
    """Pick the best available artifact path for a loaded (skipped) stage."""
    if recorded:
        candidate = root / recorded
        if candidate.is_file():
            return candidate
    if disk_candidate.is_file():
        return disk_candidate
    return previous


def _build_prior_context(state: PipelineState) -> Optional[PriorContext]:
    if not state.rounds:
        return None
    last = state.rounds[-1]
    previous_profile = _read_text(last["data_report_path"])
    decision: MetaDecision = last["decision"]
    additional = decision.next_start_reason or _read_text(last["feedback_path"])
    return PriorContext(previous_profile=previous_profile, additional_requirements=additional)


def _load_execution_outputs(ce_dir: Path) -> dict[str, Any]:
    """Read a completed coding stage back from disk for resume."""
    status = ExecutionStatus.UNKNOWN
    metrics_path: Optional[Path] = None
    metric_value: Optional[float] = None
    summary_path = ce_dir / "run_summary.json"
    if summary_path.is_file():
        try:
            data = json.loads(summary_path.read_text(encoding="utf-8"))
            status = ExecutionStatus(data.get("status", "unknown"))
            metric_value = data.get("primary_metric_value")
            if data.get("metrics_path"):
                metrics_path = Path(data["metrics_path"])
        except (json.JSONDecodeError, ValueError):
            status = ExecutionStatus.UNKNOWN
    feedback_path = ce_dir / "feedback" / "report.md"
    return {
        "status": status,
        "metrics_path": metrics_path,
        "metric_value": metric_value,
        "feedback_path": feedback_path if feedback_path.is_file() else None,
        "execution_tail": truncate_tail(_read_text(ce_dir / "run_stdout.log"), 8000),
    }


def _preload_prior_state(
    state: PipelineState, pipeline_root: Path, start_round: int
) -> dict[int, dict[str, Any]]:
    """Reload earlier rounds from the interrupted run's summary so a resumed
    run ends with the same history, memory, and summary as an uninterrupted
    one."""
    summary_path = pipeline_root / "pipeline_summary.json"
    prior_records: dict[int, dict[str, Any]] = {}
    if summary_path.is_file():
        try:
            prior = json.loads(summary_path.read_text(encoding="utf-8"))
            for record in prior.get("rounds", []):
                prior_records[int(record["round_idx"])] = record
        except (json.JSONDecodeError, KeyError, ValueError):
            prior_records = {}

    for round_idx in range(1, start_round):
        record = prior_records.get(round_idx)
        round_dir = pipeline_root / f"round_{round_idx:02d}"
        snapshot_path = round_dir / "round_snapshot.md"
        if snapshot_path.is_file():
            state.memory.append(
                MemoryUnit(round_idx=round_idx, summary_text=_read_text(snapshot_path).rstrip("\n"))
            )
        if record is None:
            continue
        value = record.get("primary_metric_value")
        status = ExecutionStatus(record.get("execution_status", "unknown"))
        state.history = update_history(
            state.history,
            round_idx,
            value,
            state.task.metric_direction,
            state.cfg.min_delta,
            status=status,
        )
        decision = (
            MetaDecision.from_dict(record["decision"]) if record.get("decision") else None
        )
        state.rounds.append(
            {
                "round_idx": round_idx,
                "data_report_path": _abs_or_none(record.get("data_report_ref"), pipeline_root),
                "plan_path": _abs_or_none(record.get("plan_ref"), pipeline_root),
                "execution_dir": pipeline_root / f"round_{round_idx:02d}" / "code_execution",
                "execution_status": status,
                "feedback_path": _abs_or_none(record.get("feedback_ref"), pipeline_root),
                "metrics_path": _abs_or_none(record.get("metrics_ref"), pipeline_root),
                "primary_metric_value": value,
                "decision": decision
                or MetaDecision(action=MetaAction.CONTINUE, decision_reason="reloaded"),
                "stage_failures": record.get("stage_failures", {}),
                "stage_token_usage": {
                    stage: TokenUsage.from_dict(usage)
                    for stage, usage in (record.get("stage_token_usage") or {}).items()
                },
            }
        )
        if decision is not None:
            state.next_start = decision.next_start
    if state.memory:
        snapshots_path = pipeline_root / "snapshots.md"
        snapshots_path.write_text(
            "".join(m.summary_text + "\n\n" for m in state.memory), encoding="utf-8"
        )
    return prior_records


def _abs_or_none(ref: Optional[str], root: Path) -> Optional[Path]:
    if not ref:
        return None
    path = Path(ref)
    return path if path.is_absolute() else root / path


def _usage_delta(
    before: dict[str, TokenUsage], after: dict[str, TokenUsage]
) -> dict[str, TokenUsage]:
    delta: dict[str, TokenUsage] = {}
    for stage, usage in after.items():
        prior = before.get(stage, TokenUsage())
        diff = TokenUsage(
            usage.input_tokens - prior.input_tokens,
            usage.output_tokens - prior.output_tokens,
            usage.cache_hit_tokens - prior.cache_hit_tokens,
            usage.cost - prior.cost,
        )
        if diff.total_tokens or diff.cache_hit_tokens:
            delta[stage] = diff
    return delta


def _meta_model_decision(
    task: TaskSpec,
    cfg: PipelineConfig,
    gateway: Gateway,
    round_idx: int,
    plan_text: str,
    execution_status: ExecutionStatus,
    metric_value: Optional[float],
    feedback_text: str,
    state: PipelineState,
) -> Optional[MetaDecision]:
    """Ask the model for a routing decision; any failure downgrades to the
    heuristic instead of aborting."""
    history_lines = [
        f"- round {r.round_idx}: metric={r.primary_metric_value} status={r.status.value}"
        for r in state.history.previous_rounds
    ]
    best = state.history.best_metric_value
    history_rendered = "\n".join(history_lines) or "(no completed rounds)"
    history_rendered += (
        f"\nbest (lower-is-better orientation): {best}"
        f"\nrounds without improvement: {state.history.no_improve_rounds}\n\n"
        + truncate_tail(_read_text(state.output_root / "snapshots.md"), cfg.max_chars_context)
    )
    user = prompts.META_DECISION.format(
        task=truncate_head(task.description, cfg.max_chars_task),
        round_idx=round_idx,
        max_rounds=cfg.max_rounds,
        patience=cfg.patience,
        min_delta=cfg.min_delta,
        metric_name=task.metric_name,
        plan=truncate_head(plan_text, cfg.max_chars_context),
        execution_status=execution_status.value,
        metric_value="unknown" if metric_value is None else metric_value,
        feedback=truncate_head(feedback_text, cfg.max_chars_context),
        history=history_rendered,
    )
    temperature, top_p = prompts.STAGE_SAMPLING["meta"]
    request = ChatRequest(
        model=cfg.llm_model,
        messages=(Message(Role.SYSTEM, prompts.META_SYSTEM), Message(Role.USER, user)),
        temperature=temperature,
        top_p=top_p,
        max_tokens=cfg.llm_max_tokens,
    )
    try:
        response = gateway.chat(request, CallTags("meta", round_idx, 0))
        block = extract_fold(parse_blocks(response.content), "decision_json")
        if block is None:
            log.warning("meta reply carried no decision_json block; using heuristic")
            return None
        return parse_decision(block.body)
    except (GatewayError, DecisionParseError) as exc:
        log.warning("meta decision unavailable (%s); using heuristic", exc)
        return None


def _run_report(
    state: PipelineState,
    cfg: PipelineConfig,
    gateway: Gateway,
    compiler: DocumentCompiler,
    analyzer: ImageAnalyzer,
    report_dir: Path,
) -> ReportDocument:
    last = state.rounds[-1]
    ce_dir: Path = last["execution_dir"]
    training_tail = truncate_tail(
        _read_text(ce_dir / "run_stdout.log"), cfg.report_training_tail_chars
    )
    image_descriptions: dict[str, str] = {}
    cache_path = ce_dir / "image_descriptions.json"
    if cache_path.is_file():
        try:
            loaded = json.loads(cache_path.read_text(encoding="utf-8"))
            if isinstance(loaded, dict):
                image_descriptions = {str(k): str(v) for k, v in loaded.items()}
        except json.JSONDecodeError:
            image_descriptions = {}
    inputs = ReportInputs(
        task_text=truncate_head(state.task.description, cfg.max_chars_task),
        data_profile=truncate_head(_read_text(last["data_report_path"]), cfg.max_chars_data_report),
        plan_text=truncate_head(_read_text(last["plan_path"]), cfg.max_chars_data_report),
        training_tail=training_tail,
        image_descriptions=image_descriptions,
        title=f"Modeling Report: {state.task.name}",
        author="automated pipeline",
    )
    return run_report_agent(inputs, cfg, gateway, compiler, report_dir, analyzer)


def _build_summary(
    state: PipelineState,
    task_path: str | Path,
    pipeline_root: Path,
    report_record: dict[str, Any],
    stopped: dict[str, Any],
) -> dict[str, Any]:
    rounds = []
    totals: dict[str, TokenUsage] = {}
    for record in state.rounds:
        usage_map: dict[str, TokenUsage] = record["stage_token_usage"]
        for stage, usage in usage_map.items():
            totals[stage] = totals.get(stage, TokenUsage()) + usage
        rounds.append(
            {
                "round_idx": record["round_idx"],
                "data_report_ref": _relative(record["data_report_path"], pipeline_root),
                "plan_ref": _relative(record["plan_path"], pipeline_root),
                "execution_dir": _relative(record["execution_dir"], pipeline_root),
                "execution_status": record["execution_status"].value,
                "feedback_ref": _relative(record["feedback_path"], pipeline_root),
                "metrics_ref": _relative(record["metrics_path"], pipeline_root),
                "primary_metric_value": record["primary_metric_value"],
                "decision": record["decision"].to_dict(),
                "stage_failures": record["stage_failures"],
                "stage_token_usage": {
                    stage: usage.to_dict() for stage, usage in usage_map.items()
                },
            }
        )
    for usage_dict in (report_record.get("token_usage") or {}).values():
        usage = TokenUsage.from_dict(usage_dict)
        totals["report_generation"] = totals.get("report_generation", TokenUsage()) + usage
    grand = TokenUsage()
    for usage in totals.values():
        grand = grand + usage
    return {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "task_name": state.task.name,
        "task_file": str(task_path),
        "output_dir": str(pipeline_root),
        "rounds_completed": len(state.rounds),
        "stopped": stopped,
        "rounds": rounds,
        "report_generation": report_record,
        "token_totals": {
            **{stage: usage.to_dict() for stage, usage in sorted(totals.items())},
            "total": grand.to_dict(),
        },
    }
