"""Data exploration stage: iterative generate -> screen -> execute ->
observe, ending in the structured data profile for the round."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .. import prompts
from ..blocks import extract_fold, leading_text, parse_blocks
from ..core import PipelineConfig, TaskSpec
from ..errors import ProfileFormatError
from ..gateway import CallTags, ChatRequest, Gateway, Message, Role
from ..session import ManagedSession, screen_readonly
from .._text import truncate_head, truncate_tail

STAGE = "data_understanding"
_PURPOSE_CHARS = 1000


@dataclass(frozen=True)
class ExplorationStep:
    purpose: str
    code: str
    observation: str
    screened_out: bool = False


@dataclass(frozen=True)
class DataProfile:
    report_text: str
    path: Path


@dataclass(frozen=True)
class PriorContext:
    """Carry-over from earlier rounds: last profile and extra requirements."""

    previous_profile: str = ""
    additional_requirements: str = ""


def render_history(steps: list[ExplorationStep], bound: int) -> str:
    """Exactly the (purpose, observation) pairs gathered so far, bounded."""
    if not steps:
        return "(no exploration yet)"
    parts = []
    for i, step in enumerate(steps, start=1):
        purpose = truncate_head(step.purpose, _PURPOSE_CHARS)
        observation = truncate_tail(step.observation, bound)
        parts.append(f"### Turn {i}\nPurpose: {purpose}\nObservation:\n{observation}")
    return "\n\n".join(parts)


def validate_profile_sections(report_text: str) -> bool:
    """Substring check on the numbered section headers, whitespace-tolerant."""
    squashed = " ".join(report_text.split())
    return all(header in squashed for header in prompts.PROFILE_SECTIONS)


def run_data_agent(
    task: TaskSpec,
    cfg: PipelineConfig,
    gateway: Gateway,
    session: ManagedSession,
    out_dir: Path,
    round_idx: int,
    prior: Optional[PriorContext] = None,
) -> DataProfile:
    """Drive the exploration loop and elicit the final report.

    Fragments never execute without passing the read-only screen; rejected
    ones are recorded and the violation is echoed back to the model. The
    loop ends early when a reply carries no code block.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    task_text = truncate_head(task.description, cfg.max_chars_task)

    prior_context = ""
    if prior and (prior.previous_profile or prior.additional_requirements):
        prior_context = prompts.DATA_PRIOR_CONTEXT.format(
            previous_profile=truncate_head(prior.previous_profile, cfg.max_chars_data_report)
            or "None",
            additional_requirements=truncate_head(
                prior.additional_requirements, cfg.max_chars_feedback
            )
            or "None",
        )
    system = prompts.DATA_SYSTEM.format(prior_context=prior_context)

    steps: list[ExplorationStep] = []
    call_idx = 0

    def chat(user_text: str) -> str:
        nonlocal call_idx
        request = _request(cfg, system, user_text)
        response = gateway.chat(request, CallTags(STAGE, round_idx, call_idx))
        call_idx += 1
        return response.content

    for iteration in range(1, cfg.max_iterations + 1):
        reply = chat(
            prompts.DATA_STEP.format(
                iteration=iteration,
                max_iterations=cfg.max_iterations,
                task=task_text,
                history=render_history(steps, cfg.max_observation_chars),
            )
        )
        blocks = parse_blocks(reply)
        code_block = extract_fold(blocks, "python")
        if code_block is None:
            break
        purpose = leading_text(reply) or "(no stated purpose)"

        screen = screen_readonly(code_block.body, cfg.readonly_denylist)
        if not screen.ok:
            observation = (
                "Fragment rejected by the read-only screen; prohibited patterns: "
                + ", ".join(screen.violations)
                + ". Rewrite without system commands, network access, or file writes."
            )
            steps.append(ExplorationStep(purpose, code_block.body, observation, screened_out=True))
            continue

        result = session.run(code_block.body, cfg.fragment_timeout_seconds)
        if result.exit_ok:
            session.commit(code_block.body)
        observation = result.stdout
        if not result.exit_ok:
            observation += ("\n" if observation else "") + result.stderr
        if result.timed_out:
            observation += "\n(fragment timed out and was aborted)"
        observation = truncate_tail(observation, cfg.max_observation_chars)
        steps.append(ExplorationStep(purpose, code_block.body, observation))

    final_user = prompts.DATA_FINAL.format(
        task=task_text, history=render_history(steps, cfg.max_observation_chars)
    )
    reply = chat(final_user)
    report = extract_fold(parse_blocks(reply), "Data_Analysis_Report")
    if report is None or not validate_profile_sections(report.body):
        reply = chat(final_user + "\n\n" + prompts.DATA_REPROMPT)
        report = extract_fold(parse_blocks(reply), "Data_Analysis_Report")
        if report is None or not validate_profile_sections(report.body):
            raise ProfileFormatError(
                "final reply lacks a Data_Analysis_Report block with all seven sections"
            )

    report_path = out_dir / "report.md"
    report_path.write_text(report.body + "\n", encoding="utf-8")
    (out_dir / "exploration.json").write_text(
        json.dumps(
            [
                {
                    "purpose": step.purpose,
                    "code": step.code,
                    "observation": step.observation,
                    "screened_out": step.screened_out,
                }
                for step in steps
            ],
            ensure_ascii=False,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return DataProfile(report_text=report.body, path=report_path)


def _request(cfg: PipelineConfig, system: str, user: str) -> ChatRequest:
    temperature, top_p = prompts.STAGE_SAMPLING[STAGE]
    return ChatRequest(
        model=cfg.llm_model,
        messages=(Message(Role.SYSTEM, system), Message(Role.USER, user)),
        temperature=temperature,
        top_p=top_p,
        max_tokens=cfg.llm_max_tokens,
    )
