"""Coding stage, two phases: step-wise plan execution with a debug-retry
loop, then code-driven feedback analysis with an image-analysis tool."""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

from .. import prompts
from ..blocks import StatusSignal, extract_fold, leading_text, parse_blocks, parse_status
from ..core import ExecutionStatus, PipelineConfig, TaskSpec
from ..errors import FeedbackFormatError, StatusParseError
from ..gateway import CallTags, ChatRequest, ChatProvider, Gateway, Message, Role
from ..session import ExecResult, ManagedSession
from .._text import truncate_head, truncate_tail

STAGE = "code_execution"

#: Feedback-phase calls share the stage tag with execution; their step
#: indices start here so transcripts can target either phase precisely.
FEEDBACK_STEP_BASE = 1000

_IMAGE_MARKER = "@@ANALYZE_IMAGE@@"

# injected into the session at feedback-phase start; requests surface as
# marker lines in stdout and are answered in the next prompt
_ANALYZER_BOOTSTRAP = '''
def analyze_image(image_path, question):
    import json as _json
    print("@@ANALYZE_IMAGE@@ " + _json.dumps({"image": str(image_path), "question": str(question)}))
    return "[image analysis queued for %s; answer arrives next turn]" % image_path
'''


class ImageAnalyzer(Protocol):
    available: bool

    def analyze(self, image_path: str, question: str) -> str: ...


class NullImageAnalyzer:
    """Offline default: image analysis disabled."""

    available = False

    def analyze(self, image_path: str, question: str) -> str:
        return "image analysis unavailable"


class VisionEndpointAnalyzer:
    """Adapter sending the image plus question to a vision-capable chat
    endpoint (image travels base64-encoded in the standard content-parts
    form)."""

    available = True

    def __init__(self, provider: ChatProvider, model: str, max_tokens: int = 1024) -> None:
        self.provider = provider
        self.model = model
        self.max_tokens = max_tokens

    def analyze(self, image_path: str, question: str) -> str:
        path = Path(image_path)
        if not path.is_file():
            return f"image not found: {image_path}"
        encoded = base64.b64encode(path.read_bytes()).decode("ascii")
        suffix = path.suffix.lstrip(".").lower() or "png"
        content = [
            {"type": "text", "text": question},
            {
                "type": "image_url",
                "image_url": {"url": f"data:image/{suffix};base64,{encoded}"},
            },
        ]
        request = ChatRequest(
            model=self.model,
            messages=(Message(Role.USER, json.dumps(content)),),
            max_tokens=self.max_tokens,
        )
        response = self.provider.complete(request, CallTags(STAGE, 0, 0))
        return response.content


@dataclass(frozen=True)
class StepRecord:
    step_no: int
    purpose: str
    code: str
    result: ExecResult
    status_signal: StatusSignal
    retries_used: int = 0
    error_history: tuple[str, ...] = ()


@dataclass
class ExecutionRecord:
    steps: list[StepRecord] = field(default_factory=list)
    overall_status: ExecutionStatus = ExecutionStatus.FAILURE
    metrics_ref: Optional[Path] = None
    primary_metric_value: Optional[float] = None
    artifacts: list[str] = field(default_factory=list)
    failure_reason: str = ""


@dataclass(frozen=True)
class FeedbackReport:
    report_text: str
    path: Path


@dataclass(frozen=True)
class _StepReply:
    purpose: str
    code: str
    status: StatusSignal


def _parse_step_reply(reply: str) -> Optional[_StepReply]:
    blocks = parse_blocks(reply)
    code = extract_fold(blocks, "python")
    status_block = extract_fold(blocks, "status")
    if code is None or status_block is None:
        return None
    try:
        status = parse_status(status_block.body)
    except StatusParseError:
        return None
    purpose_block = extract_fold(blocks, "purpose")
    purpose = purpose_block.body.strip() if purpose_block else leading_text(reply)
    return _StepReply(purpose or "(no stated purpose)", code.body, status)


def render_debug_prompt(
    cfg: PipelineConfig,
    task_text: str,
    plan_text: str,
    step_no: int,
    attempt: int,
    successful: list[StepRecord],
    failed_purpose: str,
    failed_code: str,
    error_output: str,
    error_history: list[str],
) -> str:
    """Debug prompt carrying ALL successful codes and outputs in order."""
    successful_codes = "\n\n".join(record.code for record in successful) or "(none yet)"
    successful_outputs = (
        "\n\n".join(
            truncate_tail(record.result.stdout, cfg.max_observation_chars)
            for record in successful
        )
        or "(none yet)"
    )
    return prompts.CODING_DEBUG.format(
        step_no=step_no,
        attempt=attempt,
        max_attempts=cfg.max_retries,
        task=task_text,
        plan=plan_text,
        successful_codes=successful_codes,
        successful_outputs=successful_outputs,
        failed_purpose=failed_purpose,
        failed_code=failed_code,
        error_output=truncate_tail(error_output, cfg.max_observation_chars),
        error_history="\n---\n".join(error_history) or "(first failure)",
    )


def run_execution_phase(
    plan_text: str,
    profile_text: str,
    task: TaskSpec,
    cfg: PipelineConfig,
    gateway: Gateway,
    session: ManagedSession,
    out_dir: Path,
    round_idx: int,
) -> ExecutionRecord:
    """Execute the plan fragment by fragment until FINISH or a budget runs out.

    On a failed fragment the debug loop rewrites only that fragment, up to
    ``max_retries`` times, with all the successful code and output in
    context. The record is always persisted, success or not.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    task_text = truncate_head(task.description, cfg.max_chars_task)
    profile_excerpt = truncate_head(profile_text, cfg.max_chars_data_report)
    system = prompts.CODING_SYSTEM.format(
        output_dir=str(out_dir), device_info=_device_note()
    )

    record = ExecutionRecord()
    call_idx = 0

    def chat(user_text: str) -> str:
        nonlocal call_idx
        response = gateway.chat(
            _request(cfg, system, user_text), CallTags(STAGE, round_idx, call_idx)
        )
        call_idx += 1
        return response.content

    def demand_step(user_text: str) -> Optional[_StepReply]:
        parsed = _parse_step_reply(chat(user_text))
        if parsed is None:
            parsed = _parse_step_reply(chat(prompts.CODING_REPROMPT))
        return parsed

    finished = False
    for step_no in range(1, cfg.max_steps + 1):
        if step_no == 1:
            user_text = prompts.CODING_STEP1.format(
                task=task_text, data_report=profile_excerpt, plan=plan_text
            )
        else:
            user_text = prompts.CODING_STEP.format(
                task=task_text,
                data_report=profile_excerpt,
                plan=plan_text,
                completed_work=_render_completed(record.steps, cfg),
                step_no=step_no,
            )
        parsed = demand_step(user_text)
        if parsed is None:
            record.failure_reason = f"malformed reply at step {step_no} after one re-prompt"
            break

        result = session.run(parsed.code, cfg.fragment_timeout_seconds)
        retries = 0
        error_history: list[str] = []
        while not result.exit_ok and retries < cfg.max_retries:
            retries += 1
            error_output = result.stderr or result.stdout
            error_history.append(truncate_tail(error_output, 2000))
            debug_user = render_debug_prompt(
                cfg,
                task_text,
                plan_text,
                step_no,
                retries,
                [r for r in record.steps if r.result.exit_ok],
                parsed.purpose,
                parsed.code,
                error_output,
                error_history,
            )
            fixed = demand_step(debug_user)
            if fixed is None:
                record.failure_reason = (
                    f"malformed debug reply at step {step_no} after one re-prompt"
                )
                break
            parsed = fixed
            result = session.run(parsed.code, cfg.fragment_timeout_seconds)

        if result.exit_ok:
            session.commit(parsed.code)
        step = StepRecord(
            step_no=step_no,
            purpose=parsed.purpose,
            code=parsed.code,
            result=result,
            status_signal=parsed.status,
            retries_used=retries,
            error_history=tuple(error_history),
        )
        record.steps.append(step)
        (out_dir / f"step_{step_no:02d}.py").write_text(parsed.code + "\n", encoding="utf-8")

        if not result.exit_ok:
            if not record.failure_reason:
                record.failure_reason = f"retry budget exhausted at step {step_no}"
            break
        if parsed.status is StatusSignal.FINISH:
            finished = True
            break
    else:
        record.failure_reason = "step budget exhausted without FINISH"

    last = record.steps[-1] if record.steps else None
    if finished and last is not None and last.result.exit_ok:
        record.overall_status = ExecutionStatus.SUCCESS
    else:
        record.overall_status = ExecutionStatus.FAILURE
        if not record.failure_reason:
            record.failure_reason = "no executable step completed"

    record.metrics_ref = find_metrics_file(out_dir, exclude=("run_summary.json",))
    if record.metrics_ref is not None:
        record.primary_metric_value = extract_metrics(out_dir, task.metric_name)
    record.artifacts = _list_artifacts(out_dir)
    _persist_summary(record, out_dir)
    return record


def _persist_summary(record: ExecutionRecord, out_dir: Path) -> None:
    summary = {
        "status": record.overall_status.value,
        "failure_reason": record.failure_reason,
        "steps": [
            {
                "step_no": step.step_no,
                "purpose": step.purpose,
                "exit_ok": step.result.exit_ok,
                "status_signal": step.status_signal.value,
                "retries_used": step.retries_used,
            }
            for step in record.steps
        ],
        "metrics_path": str(record.metrics_ref) if record.metrics_ref else "",
        "primary_metric_value": record.primary_metric_value,
        "artifacts": record.artifacts,
    }
    (out_dir / "run_summary.json").write_text(
        json.dumps(summary, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


_ENGINE_FILES = re.compile(r"^(run_summary\.json|run_stdout\.log|step_\d+\.py|image_descriptions\.json)$")


def _list_artifacts(out_dir: Path) -> list[str]:
    artifacts = []
    for path in sorted(out_dir.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(out_dir)
        if rel.parts[0] in ("feedback", "llm_calls") or _ENGINE_FILES.match(rel.name):
            continue
        artifacts.append(str(rel))
    return artifacts


def _render_completed(steps: list[StepRecord], cfg: PipelineConfig) -> str:
    if not steps:
        return "(nothing yet)"
    parts = []
    for step in steps:
        tail = truncate_tail(step.result.stdout, 1000)
        parts.append(f"Step {step.step_no}: {step.purpose}\nOutput tail:\n{tail}")
    return "\n\n".join(parts)


def _device_note() -> str:
    from .design import probe_device_info

    return probe_device_info()


# --- feedback phase -----------------------------------------------------------------


@dataclass(frozen=True)
class AnalysisRound:
    purpose: str
    code: str
    observation: str


def run_feedback_phase(
    execution: ExecutionRecord,
    analyzer: ImageAnalyzer,
    cfg: PipelineConfig,
    gateway: Gateway,
    session: ManagedSession,
    out_dir: Path,
    round_idx: int,
    task: TaskSpec,
    plan_text: str,
) -> FeedbackReport:
    """Analysis loop over the surviving training session.

    Runs even when execution failed; then the feedback explains the
    failure. Image-analysis requests found in fragment output are answered
    through ``analyzer``, cached to image_descriptions.json, and injected
    into subsequent prompts.
    """
    feedback_dir = out_dir / "feedback"
    feedback_dir.mkdir(parents=True, exist_ok=True)
    task_text = truncate_head(task.description, cfg.max_chars_task)
    full_code = "\n\n".join(step.code for step in execution.steps if step.result.exit_ok)
    last_observation = _execution_observation(execution, cfg)

    session.run(_ANALYZER_BOOTSTRAP, cfg.fragment_timeout_seconds)
    session.commit(_ANALYZER_BOOTSTRAP)

    image_descriptions: dict[str, str] = {}
    cache_path = out_dir / "image_descriptions.json"
    rounds: list[AnalysisRound] = []
    call_idx = FEEDBACK_STEP_BASE

    def chat(user_text: str) -> str:
        nonlocal call_idx
        response = gateway.chat(
            _request(cfg, prompts.FEEDBACK_SYSTEM, user_text),
            CallTags(STAGE, round_idx, call_idx),
        )
        call_idx += 1
        return response.content

    def render_images() -> str:
        if not image_descriptions:
            return "(none yet)"
        return "\n\n".join(f"{path}:\n{answer}" for path, answer in image_descriptions.items())

    def render_rounds() -> str:
        if not rounds:
            return "(none yet)"
        return "\n\n".join(
            f"Turn {i}: {r.purpose}\nObservation:\n{truncate_tail(r.observation, 2000)}"
            for i, r in enumerate(rounds, start=1)
        )

    def finish_from(reply: str) -> Optional[FeedbackReport]:
        block = extract_fold(parse_blocks(reply), "Feedback_Report")
        if block is None or not validate_feedback_sections(block.body):
            return None
        path = feedback_dir / "report.md"
        path.write_text(block.body + "\n", encoding="utf-8")
        if image_descriptions:
            cache_path.write_text(
                json.dumps(image_descriptions, ensure_ascii=False, indent=2, sort_keys=True)
                + "\n",
                encoding="utf-8",
            )
        return FeedbackReport(report_text=block.body, path=path)

    for iteration in range(1, cfg.feedback_max_iterations + 1):
        reply = chat(
            prompts.FEEDBACK_STEP.format(
                iteration=iteration,
                max_iterations=cfg.feedback_max_iterations,
                task=task_text,
                plan=plan_text,
                output_dir=str(out_dir),
                full_code=full_code or "(no successful training code)",
                observation=last_observation,
                image_analysis=render_images(),
                history=render_rounds(),
            )
        )
        blocks = parse_blocks(reply)
        status_block = extract_fold(blocks, "status")
        status = None
        if status_block is not None:
            try:
                status = parse_status(status_block.body)
            except StatusParseError:
                status = None

        if status is StatusSignal.FINISH:
            report = finish_from(reply)
            if report is not None:
                return report
            reply = chat(prompts.FEEDBACK_REPROMPT)
            report = finish_from(reply)
            if report is not None:
                return report
            raise FeedbackFormatError("FINISH reply lacked a well-formed Feedback_Report")

        code_block = extract_fold(blocks, "python")
        if code_block is None:
            # neither analysis code nor a finish: nudge once via the loop
            rounds.append(AnalysisRound("(malformed reply)", "", "reply carried no code block"))
            continue
        purpose_block = extract_fold(blocks, "purpose")
        purpose = purpose_block.body.strip() if purpose_block else leading_text(reply)
        result = session.run(code_block.body, cfg.fragment_timeout_seconds)
        if result.exit_ok:
            session.commit(code_block.body)
        observation = result.stdout if result.exit_ok else f"{result.stdout}\n{result.stderr}"
        observation += _answer_image_requests(result.stdout, analyzer, image_descriptions)
        rounds.append(AnalysisRound(purpose or "(no stated purpose)", code_block.body, observation))

    final_user = prompts.FEEDBACK_FINAL.format(
        task=task_text,
        observation=last_observation,
        image_analysis=render_images(),
        history=render_rounds(),
    )
    reply = chat(final_user)
    report = finish_from(reply)
    if report is None:
        reply = chat(final_user + "\n\n" + prompts.FEEDBACK_REPROMPT)
        report = finish_from(reply)
    if report is None:
        raise FeedbackFormatError("no well-formed Feedback_Report after the forced final prompt")
    return report


def validate_feedback_sections(report_text: str) -> bool:
    squashed = " ".join(report_text.split())
    return all(header in squashed for header in prompts.FEEDBACK_SECTIONS)


def _answer_image_requests(
    stdout: str, analyzer: ImageAnalyzer, cache: dict[str, str]
) -> str:
    """Route analyze_image marker lines through the analyzer; returns text
    to append to the observation."""
    answers = []
    for line in stdout.splitlines():
        stripped = line.strip()
        if not stripped.startswith(_IMAGE_MARKER):
            continue
        try:
            payload = json.loads(stripped[len(_IMAGE_MARKER):].strip())
            image, question = str(payload["image"]), str(payload["question"])
        except (json.JSONDecodeError, KeyError, TypeError):
            continue
        try:
            answer = analyzer.analyze(image, question)
        except Exception as exc:  # tool failure must not kill the loop
            answer = f"image analysis failed: {type(exc).__name__}"
        entry = f"Q: {question}\nA: {answer}"
        cache[image] = (cache[image] + "\n" + entry) if image in cache else entry
        answers.append(f"{image} ({question}): {answer}")
    if not answers:
        return ""
    return "\n\nImage analysis results:\n" + "\n".join(answers)


def _execution_observation(execution: ExecutionRecord, cfg: PipelineConfig) -> str:
    parts = []
    for step in execution.steps:
        if step.result.stdout:
            parts.append(step.result.stdout)
        if not step.result.exit_ok and step.result.stderr:
            parts.append(step.result.stderr)
    if execution.failure_reason:
        parts.append(f"(execution failed: {execution.failure_reason})")
    return truncate_tail("\n".join(parts), cfg.execution_tail_chars) or "(no output)"


# --- metrics discovery -----------------------------------------------------------------


def _normalize_key(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


def _flatten(data, prefix: str = "") -> list[tuple[str, object]]:
    pairs = []
    if isinstance(data, dict):
        for key, value in data.items():
            pairs.extend(_flatten(value, f"{prefix}{key}."))
    else:
        pairs.append((prefix.rstrip("."), data))
    return pairs


def find_metrics_file(execution_dir: Path, exclude: tuple[str, ...] = ()) -> Optional[Path]:
    """Most recently modified file whose name mentions metric/result."""
    candidates = [
        path
        for path in execution_dir.rglob("*")
        if path.is_file()
        and path.name not in exclude
        and re.search(r"metric|result", path.name, re.IGNORECASE)
    ]
    if not candidates:
        return None
    candidates.sort(key=lambda p: (p.stat().st_mtime, p.name), reverse=True)
    return candidates[0]


def extract_metrics(execution_dir: Path, metric_name: str) -> Optional[float]:
    """Pull the primary metric out of whatever results file the generated
    code wrote. Key matching is case- and punctuation-insensitive; absence
    is a legal outcome, never an error."""
    wanted = _normalize_key(metric_name)
    candidates = [
        path
        for path in Path(execution_dir).rglob("*")
        if path.is_file()
        and path.name != "run_summary.json"
        and re.search(r"metric|result", path.name, re.IGNORECASE)
    ]
    candidates.sort(key=lambda p: (p.stat().st_mtime, p.name), reverse=True)
    for path in candidates:
        try:
            text = path.read_text(encoding="utf-8", errors="ignore")
        except OSError:
            continue
        pairs: list[tuple[str, object]] = []
        try:
            pairs = _flatten(json.loads(text))
        except json.JSONDecodeError:
            for line in text.splitlines():
                match = re.match(r"\s*([^:=]+?)\s*[:=]\s*(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)\s*$", line)
                if match:
                    pairs.append((match.group(1), match.group(2)))
        for key, value in pairs:
            leaf = key.split(".")[-1]
            if _normalize_key(leaf) != wanted:
                continue
            try:
                return float(value)  # type: ignore[arg-type]
            except (TypeError, ValueError):
                continue
    return None


def _request(cfg: PipelineConfig, system: str, user: str) -> ChatRequest:
    temperature, top_p = prompts.STAGE_SAMPLING[STAGE]
    return ChatRequest(
        model=cfg.llm_model,
        messages=(Message(Role.SYSTEM, system), Message(Role.USER, user)),
        temperature=temperature,
        top_p=top_p,
        max_tokens=cfg.llm_max_tokens,
    )
