"""Report stage: schema-driven section generation, document assembly, and
an external-compiler fix loop."""

from __future__ import annotations

import re
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

from .. import prompts
from ..blocks import extract_fold, parse_blocks
from ..core import PipelineConfig
from ..errors import SectionFormatError
from ..gateway import CallTags, ChatRequest, Gateway, Message, Role
from .._text import truncate_tail
from .coding import ImageAnalyzer

STAGE = "report_generation"


@dataclass(frozen=True)
class CompileOutcome:
    success: bool
    log: str
    output_path: Optional[Path] = None


class DocumentCompiler(Protocol):
    def compile(self, source_path: Path) -> CompileOutcome: ...


class CommandCompiler:
    """Run an external typesetting command over the document source.

    The command template receives ``{source}`` (file name, run with the
    source directory as cwd). A missing executable is a degraded-mode
    outcome, not an exception: the engine still persists the source.
    """

    def __init__(self, command_template: str, timeout: float = 300.0) -> None:
        self.command_template = command_template
        self.timeout = timeout

    def compile(self, source_path: Path) -> CompileOutcome:
        command = self.command_template.format(source=source_path.name)
        argv = shlex.split(command)
        try:
            proc = subprocess.run(
                argv,
                cwd=str(source_path.parent),
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except FileNotFoundError:
            return CompileOutcome(False, f"compiler command not found: {argv[0]}")
        except subprocess.TimeoutExpired:
            return CompileOutcome(False, f"compiler timed out after {self.timeout}s")
        log = proc.stdout + "\n" + proc.stderr
        output = source_path.with_suffix(".pdf")
        if proc.returncode == 0 and output.is_file():
            return CompileOutcome(True, log, output)
        return CompileOutcome(False, log)


class StubCompiler:
    """Deterministic stand-in for tests and CI.

    ``outcomes`` is consumed one call at a time; the last value repeats.
    Successful calls write a placeholder artifact so downstream paths
    resolve.
    """

    def __init__(self, outcomes: Sequence[bool] = (True,), fail_log: str = "stub failure") -> None:
        self._outcomes = list(outcomes) or [True]
        self._cursor = 0
        self.fail_log = fail_log
        self.calls = 0

    def compile(self, source_path: Path) -> CompileOutcome:
        self.calls += 1
        outcome = self._outcomes[min(self._cursor, len(self._outcomes) - 1)]
        self._cursor += 1
        if not outcome:
            return CompileOutcome(False, self.fail_log)
        output = source_path.with_suffix(".pdf")
        output.write_bytes(b"%PDF-1.4\n% placeholder rendered by stub compiler\n")
        return CompileOutcome(True, "stub ok", output)


@dataclass(frozen=True)
class ReportInputs:
    task_text: str
    data_profile: str
    plan_text: str
    training_tail: str
    image_descriptions: Mapping[str, str] = field(default_factory=dict)
    title: str = "Modeling Report"
    author: str = "automated pipeline"


@dataclass
class ReportDocument:
    section_sources: dict[str, str]
    full_source: str
    path: Path
    compiled_ref: Optional[Path] = None
    fix_attempts: int = 0
    compile_log: str = ""


_SECTION_KEYS = ("data_analysis", "model_training", "uncertainty_analysis")


def section_positions(source: str) -> list[int]:
    """Offsets of the three fixed section headings, -1 when absent."""
    positions = []
    for title in prompts.REPORT_SECTION_TITLES:
        match = re.search(r"\\section\*?\{\s*" + re.escape(title), source)
        positions.append(match.start() if match else -1)
    return positions


def _sections_ordered(source: str) -> bool:
    positions = section_positions(source)
    return all(p >= 0 for p in positions) and positions == sorted(positions)


def rewrite_missing_figures(source: str, base_dir: Path) -> str:
    """Replace references to nonexistent image files with placeholders so
    compilation cannot fail on absent assets."""

    def replace(match: re.Match) -> str:
        target = match.group(2).strip()
        path = Path(target)
        if not path.is_absolute():
            path = base_dir / path
        if path.is_file():
            return match.group(0)
        return rf"\textit{{[missing figure: {Path(target).name}]}}"

    return re.sub(r"\\includegraphics(\[[^\]]*\])?\{([^}]*)\}", replace, source)


def referenced_figures(source: str, base_dir: Path) -> list[Path]:
    figures = []
    for match in re.finditer(r"\\includegraphics(?:\[[^\]]*\])?\{([^}]*)\}", source):
        path = Path(match.group(1).strip())
        if not path.is_absolute():
            path = base_dir / path
        if path.is_file():
            figures.append(path)
    return figures


def error_snippet(source: str, log: str, window: int = 20) -> str:
    """Lines around the first error location the compiler log points at."""
    match = re.search(r"^l\.(\d+)", log, re.MULTILINE) or re.search(r":(\d+):", log)
    lines = source.split("\n")
    if match is None:
        return "\n".join(lines[: 2 * window])
    center = max(int(match.group(1)) - 1, 0)
    lo = max(center - window, 0)
    return "\n".join(lines[lo : center + window])


def run_report_agent(
    inputs: ReportInputs,
    cfg: PipelineConfig,
    gateway: Gateway,
    compiler: DocumentCompiler,
    out_dir: Path,
    analyzer: Optional[ImageAnalyzer] = None,
) -> ReportDocument:
    """Three section calls, one assembly call, then the compile-fix loop.

    The assembled source is always persisted; when the compiler never
    succeeds the document comes back with ``compiled_ref`` unset rather
    than raising, so a missing toolchain degrades gracefully.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    call_idx = 0

    def chat(user_text: str) -> str:
        nonlocal call_idx
        temperature, top_p = prompts.STAGE_SAMPLING[STAGE]
        request = ChatRequest(
            model=cfg.llm_model,
            messages=(
                Message(Role.SYSTEM, prompts.REPORT_SYSTEM),
                Message(Role.USER, user_text),
            ),
            temperature=temperature,
            top_p=top_p,
            max_tokens=cfg.llm_max_tokens,
        )
        response = gateway.chat(request, CallTags(STAGE, 0, call_idx))
        call_idx += 1
        return response.content

    def demand_latex(user_text: str, reason: str) -> str:
        block = extract_fold(parse_blocks(chat(user_text)), "latex")
        if block is None or not block.body.strip():
            block = extract_fold(parse_blocks(chat(prompts.REPORT_REPROMPT)), "latex")
            if block is None or not block.body.strip():
                raise SectionFormatError(f"no latex block for {reason} after one re-prompt")
        return block.body

    images_rendered = (
        "\n\n".join(f"{k}:\n{v}" for k, v in inputs.image_descriptions.items()) or "(none)"
    )
    sections: dict[str, str] = {}
    sections["data_analysis"] = demand_latex(
        prompts.REPORT_SECTION_DATA.format(
            task=inputs.task_text, data_report=inputs.data_profile
        ),
        "the data analysis section",
    )
    sections["model_training"] = demand_latex(
        prompts.REPORT_SECTION_TRAINING.format(
            task=inputs.task_text,
            data_report=inputs.data_profile,
            plan=inputs.plan_text,
            training_output=inputs.training_tail,
            image_analysis=images_rendered,
        ),
        "the model training section",
    )
    sections["uncertainty_analysis"] = demand_latex(
        prompts.REPORT_SECTION_UNCERTAINTY.format(
            task=inputs.task_text,
            training_output=inputs.training_tail,
            image_analysis=images_rendered,
        ),
        "the uncertainty analysis section",
    )
    for key in _SECTION_KEYS:
        (out_dir / f"section_{key}.tex").write_text(sections[key] + "\n", encoding="utf-8")

    assemble_user = prompts.REPORT_ASSEMBLE.format(
        task=inputs.task_text,
        title=inputs.title,
        author=inputs.author,
        section_data=sections["data_analysis"],
        section_training=sections["model_training"],
        section_uncertainty=sections["uncertainty_analysis"],
    )
    full_source = demand_latex(assemble_user, "document assembly")
    if not _sections_ordered(full_source):
        full_source = demand_latex(
            assemble_user
            + "\n\nThe previous document was missing sections or had them out of "
            "order; the three \\section headings must appear in the fixed order.",
            "ordered document assembly",
        )
        if not _sections_ordered(full_source):
            raise SectionFormatError("assembled document lacks the three ordered sections")

    if analyzer is not None and analyzer.available:
        full_source = _visual_review(full_source, analyzer, chat, out_dir)

    full_source = rewrite_missing_figures(full_source, out_dir)
    source_path = out_dir / "report.tex"
    source_path.write_text(full_source + "\n", encoding="utf-8")

    document = ReportDocument(
        section_sources=sections, full_source=full_source, path=source_path
    )
    outcome = compiler.compile(source_path)
    (out_dir / "compile_log_0.txt").write_text(outcome.log + "\n", encoding="utf-8")
    while not outcome.success and document.fix_attempts < cfg.max_fix_attempts:
        document.fix_attempts += 1
        try:
            full_source = demand_latex(
                prompts.REPORT_FIX.format(
                    log_tail=truncate_tail(outcome.log, cfg.compile_log_tail_chars),
                    snippet=error_snippet(full_source, outcome.log),
                    source=full_source,
                ),
                f"compile fix {document.fix_attempts}",
            )
        except SectionFormatError:
            break
        full_source = rewrite_missing_figures(full_source, out_dir)
        source_path.write_text(full_source + "\n", encoding="utf-8")
        document.full_source = full_source
        outcome = compiler.compile(source_path)
        (out_dir / f"compile_log_{document.fix_attempts}.txt").write_text(
            outcome.log + "\n", encoding="utf-8"
        )

    document.compile_log = outcome.log
    if outcome.success:
        document.compiled_ref = outcome.output_path
    return document


def _visual_review(full_source: str, analyzer: ImageAnalyzer, chat, out_dir: Path) -> str:
    figures = referenced_figures(full_source, out_dir)[:5]
    if not figures:
        return full_source
    feedback = []
    for figure in figures:
        try:
            answer = analyzer.analyze(
                str(figure), "Is this figure legible and consistent with a report caption?"
            )
        except Exception as exc:
            answer = f"visual review failed: {type(exc).__name__}"
        feedback.append(f"{figure.name}: {answer}")
    reply = chat(prompts.REPORT_VISUAL_REVIEW.format(figure_feedback="\n".join(feedback)))
    block = extract_fold(parse_blocks(reply), "latex")
    if block is not None and block.body.strip() and _sections_ordered(block.body):
        return block.body
    return full_source
