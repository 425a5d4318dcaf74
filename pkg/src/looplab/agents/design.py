"""Experiment design stage: requirement assembly, optional retrieval
augmentation, and the planner -> reviewer -> refine loop."""

from __future__ import annotations

import os
import platform
import re
import shutil
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Optional, Protocol

from .. import prompts
from ..blocks import extract_fold, parse_blocks
from ..core import PipelineConfig, TaskSpec
from ..errors import PlanFormatError
from ..gateway import CallTags, ChatRequest, Gateway, Message, Role
from .._text import truncate_head, truncate_tail

STAGE = "planning"


class RetrievalSource(str, Enum):
    CASE = "case"
    WEB = "web"
    ARCHIVE = "archive"


@dataclass(frozen=True)
class RetrievalItem:
    source: RetrievalSource
    title: str
    excerpt: str


@dataclass(frozen=True)
class RetrievalBundle:
    items: tuple[RetrievalItem, ...] = ()


class RetrievalProvider(Protocol):
    def retrieve(self, query: str, limit: int = 5) -> RetrievalBundle: ...


class NullRetrievalProvider:
    """Default provider: retrieval disabled."""

    def retrieve(self, query: str, limit: int = 5) -> RetrievalBundle:
        return RetrievalBundle()


class LocalCaseRetrievalProvider:
    """Keyword-overlap ranking over a user-supplied case directory.

    Deliberately simple: score = count of distinct query tokens appearing
    in the file. Good enough to surface relevant past solutions; a real
    search backend can be plugged in behind the same interface.
    """

    def __init__(self, case_dir: Path, excerpt_chars: int = 2000) -> None:
        self.case_dir = Path(case_dir)
        self.excerpt_chars = excerpt_chars

    def retrieve(self, query: str, limit: int = 5) -> RetrievalBundle:
        tokens = {t for t in re.findall(r"[a-z0-9]+", query.lower()) if len(t) > 2}
        if not tokens or not self.case_dir.is_dir():
            return RetrievalBundle()
        scored: list[tuple[int, str, str]] = []
        for path in sorted(self.case_dir.rglob("*")):
            if not path.is_file():
                continue
            try:
                text = path.read_text(encoding="utf-8", errors="ignore")
            except OSError:
                continue
            lowered = text.lower()
            hits = sum(1 for token in tokens if token in lowered)
            if hits:
                scored.append((hits, path.name, text))
        scored.sort(key=lambda item: (-item[0], item[1]))
        items = tuple(
            RetrievalItem(RetrievalSource.CASE, name, truncate_head(text, self.excerpt_chars))
            for _, name, text in scored[:limit]
        )
        return RetrievalBundle(items)


NO_RETRIEVED_MATERIAL = "(no retrieved material)"


def render_bundle(bundle: RetrievalBundle, limit_chars: int) -> str:
    if not bundle.items:
        return NO_RETRIEVED_MATERIAL
    parts = [
        f"[{item.source.value}] {item.title}\n{item.excerpt}" for item in bundle.items
    ]
    return truncate_head("\n\n".join(parts), limit_chars)


@dataclass(frozen=True)
class RequirementSummary:
    """The planner's context: four clearly delimited, bounded slots."""

    task_excerpt: str
    profile_excerpt: str
    memory_excerpt: str
    device_info: str

    def render(self) -> str:
        return (
            "### Task\n"
            f"{self.task_excerpt or 'None'}\n\n"
            "### Data analysis report\n"
            f"{self.profile_excerpt or 'None'}\n\n"
            "### Past run records\n"
            f"{self.memory_excerpt or 'None'}\n\n"
            "### Device\n"
            f"{self.device_info or 'unknown'}"
        )


@dataclass(frozen=True)
class ExperimentalPlan:
    plan_text: str
    revision: int
    path: Path


def build_requirement_summary(
    task: TaskSpec,
    profile_text: str,
    snapshots_text: str,
    device_info: str,
    cfg: PipelineConfig,
) -> RequirementSummary:
    """Deterministic truncation per slot: head for task/profile (their
    openings carry the structure), tail for the log-like run records."""
    return RequirementSummary(
        task_excerpt=truncate_head(task.description, cfg.max_chars_task),
        profile_excerpt=truncate_head(profile_text, cfg.max_chars_data_report),
        memory_excerpt=truncate_tail(snapshots_text, cfg.max_chars_feedback),
        device_info=truncate_head(device_info, 2000),
    )


def probe_device_info() -> str:
    """Best-effort hardware summary; degrades to 'unknown'."""
    parts = []
    try:
        parts.append(platform.platform())
        cpus = os.cpu_count()
        if cpus:
            parts.append(f"{cpus} CPU cores")
        try:
            import psutil

            total_gib = psutil.virtual_memory().total / 2**30
            parts.append(f"{total_gib:.1f} GiB RAM")
        except ImportError:
            pass
        if shutil.which("nvidia-smi"):
            parts.append("NVIDIA accelerator present (nvidia-smi on PATH)")
        else:
            parts.append("no accelerator detected")
    except Exception:
        return "unknown"
    return "; ".join(parts) if parts else "unknown"


def load_uncertainty_catalog(cfg: PipelineConfig) -> str:
    """The uncertainty-methods list injected into planning prompts."""
    if cfg.uncertainty_methods_path:
        return Path(cfg.uncertainty_methods_path).read_text(encoding="utf-8")
    return resources.files("looplab.data").joinpath("uncertainty_methods.md").read_text(
        encoding="utf-8"
    )


def run_design_agent(
    summary: RequirementSummary,
    retrieval: RetrievalProvider,
    unc_catalog: str,
    cfg: PipelineConfig,
    gateway: Gateway,
    out_dir: Path,
    round_idx: int,
) -> ExperimentalPlan:
    """One planner call, then ``review_rounds`` cycles of critique + refine.

    Exactly ``1 + 2 * review_rounds`` gateway calls absent format
    re-prompts. Every draft and review is archived next to the final plan.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    requirement = summary.render()
    query = summary.task_excerpt[:300]
    augmentation = render_bundle(retrieval.retrieve(query), cfg.max_chars_retrieval)
    uncertainty_slot = (
        prompts.UNCERTAINTY_SLOT.format(catalog=unc_catalog) if cfg.enable_uncertainty else ""
    )

    call_idx = 0

    def chat(user_text: str) -> str:
        nonlocal call_idx
        temperature, top_p = prompts.STAGE_SAMPLING[STAGE]
        request = ChatRequest(
            model=cfg.llm_model,
            messages=(
                Message(Role.SYSTEM, prompts.DESIGN_SYSTEM),
                Message(Role.USER, user_text),
            ),
            temperature=temperature,
            top_p=top_p,
            max_tokens=cfg.llm_max_tokens,
        )
        response = gateway.chat(request, CallTags(STAGE, round_idx, call_idx))
        call_idx += 1
        return response.content

    def demand_plan(user_text: str, check_review_header: bool) -> str:
        reply = chat(user_text)
        plan = _well_formed_plan(reply, check_review_header)
        if plan is None:
            reply = chat(user_text + "\n\n" + prompts.PLAN_REPROMPT)
            plan = _well_formed_plan(reply, check_review_header)
            if plan is None:
                raise PlanFormatError("no well-formed plan_md block after one re-prompt")
        return plan

    plan_text = demand_plan(
        prompts.PLANNER.format(
            requirement_summary=requirement,
            augmentation=augmentation,
            uncertainty_slot=uncertainty_slot,
        ),
        check_review_header=False,
    )
    revision = 0
    (out_dir / "draft_0.md").write_text(plan_text + "\n", encoding="utf-8")

    for cycle in range(1, cfg.review_rounds + 1):
        review_user = prompts.REVIEWER.format(
            requirement_summary=requirement, augmentation=augmentation, plan=plan_text
        )
        reply = chat(review_user)
        review = extract_fold(parse_blocks(reply), "review")
        if review is None:
            reply = chat(review_user + "\n\n" + prompts.REVIEW_REPROMPT)
            review = extract_fold(parse_blocks(reply), "review")
            if review is None:
                raise PlanFormatError("no review block after one re-prompt")
        (out_dir / f"review_{cycle}.md").write_text(review.body + "\n", encoding="utf-8")

        plan_text = demand_plan(
            prompts.REFINE.format(
                requirement_summary=requirement,
                previous_plan=plan_text,
                review=review.body,
                uncertainty_slot=uncertainty_slot,
            ),
            check_review_header=True,
        )
        revision = cycle
        (out_dir / f"draft_{cycle}.md").write_text(plan_text + "\n", encoding="utf-8")

    final_path = out_dir / "final_plan.md"
    final_path.write_text(plan_text + "\n", encoding="utf-8")
    return ExperimentalPlan(plan_text=plan_text, revision=revision, path=final_path)


def _well_formed_plan(reply: str, check_review_header: bool) -> Optional[str]:
    block = extract_fold(parse_blocks(reply), "plan_md")
    if block is None or not block.body.strip():
        return None
    if check_review_header and prompts.REVIEW_HEADER in block.body:
        return None
    return block.body
