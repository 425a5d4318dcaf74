"""Command-line front end: run, resume, score, replay, and inspect."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .agents.report import CommandCompiler, StubCompiler
from .core import PipelineConfig, load_config
from .errors import ConfigError, LooplabError
from .gateway import (
    Gateway,
    LiveChatProvider,
    ScriptedProvider,
    ScriptedTranscript,
    transcript_from_recording,
)
from .orchestrator import Providers, ResumePoint, run_pipeline
from .scorekit import aggregate, load_benchmark_fixtures, score_fixtures

EXIT_OK = 0
EXIT_PIPELINE_FAILURE = 1
EXIT_USAGE = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="looplab",
        description="Closed-loop multi-agent modeling pipeline and scoring toolkit.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a task through the full pipeline")
    run.add_argument("--task", required=True, help="task file path")
    run.add_argument("--out", help="output root directory")
    _add_shared_flags(run)

    resume = sub.add_parser("resume", help="continue an interrupted run")
    resume.add_argument("--round-dir", required=True, help="round_NN directory to resume")
    resume.add_argument(
        "--from-stage",
        default="meta",
        choices=("data_understanding", "planning", "code_execution", "meta"),
    )
    resume.add_argument("--task", help="task file (defaults to the recorded one)")
    _add_shared_flags(resume)

    score = sub.add_parser("score", help="normalize and aggregate benchmark fixture tables")
    score.add_argument("--fixtures", required=True, help="directory with the fixture tables")
    score.add_argument("--format", default="text", choices=("text", "tsv"))

    replay = sub.add_parser("replay", help="re-run a pipeline from recorded responses")
    replay.add_argument("--recording", required=True, help="output root of a recorded run")
    replay.add_argument("--task", help="task file (defaults to the recorded one)")
    replay.add_argument("--out", required=True, help="output root for the replayed run")
    _add_shared_flags(replay)

    inspect = sub.add_parser("inspect", help="pretty-print a run or round directory")
    inspect.add_argument("path", help="output root or round directory")

    return parser


def _add_shared_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="YAML config file")
    sub.add_argument("--max-rounds", type=int, dest="max_rounds")
    sub.add_argument("--patience", type=int)
    sub.add_argument("--min-delta", type=float, dest="min_delta")
    sub.add_argument(
        "--provider",
        default="live",
        help="'live' or 'scripted:<transcript file>'",
    )
    sub.add_argument(
        "--stub-compiler",
        action="store_true",
        help="replace the document compiler with the always-succeeding stub",
    )


def _load_cfg(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        "max_rounds": getattr(args, "max_rounds", None),
        "patience": getattr(args, "patience", None),
        "min_delta": getattr(args, "min_delta", None),
    }
    return load_config(getattr(args, "config", None), overrides)


def _build_gateway(args: argparse.Namespace, cfg: PipelineConfig) -> Gateway:
    spec = getattr(args, "provider", "live")
    if spec.startswith("scripted:"):
        transcript = ScriptedTranscript.load(spec.split(":", 1)[1])
        return Gateway(ScriptedProvider(transcript), cfg.token_prices)
    if spec != "live":
        raise ConfigError("provider", f"unknown provider {spec!r}")
    base_url = os.environ.get("LOOPLAB_BASE_URL") or os.environ.get("OPENAI_BASE_URL") or ""
    api_key = os.environ.get("LOOPLAB_API_KEY") or os.environ.get("OPENAI_API_KEY") or ""
    provider = LiveChatProvider(
        base_url=base_url,
        api_key=api_key,
        retries=cfg.llm_retries,
        timeout=cfg.llm_timeout_seconds,
    )
    return Gateway(provider, cfg.token_prices)


def _build_providers(args: argparse.Namespace, cfg: PipelineConfig) -> Providers:
    gateway = _build_gateway(args, cfg)
    compiler = (
        StubCompiler() if getattr(args, "stub_compiler", False) else CommandCompiler(cfg.compiler_command)
    )
    return Providers(gateway=gateway, compiler=compiler)


def _finish_run(summary: dict) -> int:
    summary_path = Path(summary["output_dir"]) / "pipeline_summary.json"
    print(summary_path)
    failed = any(
        record["execution_status"] != "success" or record["stage_failures"]
        for record in summary.get("rounds", [])
    )
    return EXIT_PIPELINE_FAILURE if failed or not summary.get("rounds") else EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    providers = _build_providers(args, cfg)
    out = Path(args.out).resolve() if args.out else None
    summary = run_pipeline(args.task, cfg, providers, output_root=out)
    return _finish_run(summary)


def _recorded_task_file(root: Path) -> Optional[str]:
    summary_path = root / "pipeline_summary.json"
    if summary_path.is_file():
        try:
            return json.loads(summary_path.read_text(encoding="utf-8")).get("task_file")
        except json.JSONDecodeError:
            return None
    return None


def _cmd_resume(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    providers = _build_providers(args, cfg)
    round_dir = Path(args.round_dir).resolve()
    task = args.task or _recorded_task_file(round_dir.parent)
    if not task:
        raise ConfigError("task", "no --task given and none recorded in the run summary")
    summary = run_pipeline(
        task,
        cfg,
        providers,
        resume=ResumePoint(round_dir=round_dir, from_stage=args.from_stage),
    )
    return _finish_run(summary)


def _cmd_replay(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    recording_root = Path(args.recording).resolve()
    transcript = transcript_from_recording(recording_root)
    if not transcript.entries:
        raise ConfigError("recording", f"no recorded calls under {recording_root}")
    task = args.task or _recorded_task_file(recording_root)
    if not task:
        raise ConfigError("task", "no --task given and none recorded in the run summary")
    gateway = Gateway(ScriptedProvider(transcript), cfg.token_prices)
    compiler = (
        StubCompiler() if args.stub_compiler else CommandCompiler(cfg.compiler_command)
    )
    providers = Providers(gateway=gateway, compiler=compiler)
    summary = run_pipeline(task, cfg, providers, output_root=Path(args.out).resolve())
    return _finish_run(summary)


def _cmd_score(args: argparse.Namespace) -> int:
    fixtures = load_benchmark_fixtures(args.fixtures)
    cards = score_fixtures(fixtures)
    tasks = fixtures.performance.tasks
    sep = "\t" if args.format == "tsv" else "  "

    def table(title: str, attr: str, digits: int = 3) -> None:
        print(f"# {title}")
        width = 0 if args.format == "tsv" else 14
        print(sep.join(["method".ljust(width)] + [task.ljust(6) for task in tasks] + ["AVG"]))
        for method, row in cards.items():
            agg = aggregate(list(row.values()))
            avg = {
                "sr": agg.avg_sr,
                "perf_norm": agg.avg_perf,
                "unc_norm": agg.avg_unc,
                "nps": agg.avg_nps,
                "cs": agg.avg_cs,
            }[attr]
            cells = [f"{getattr(row[task], attr):.{digits}f}".ljust(6) for task in tasks]
            print(sep.join([method.ljust(width)] + cells + [f"{avg:.3f}"]))
        print()

    table("Success rate", "sr")
    table("Normalized performance", "perf_norm")
    table("Normalized uncertainty", "unc_norm")
    table("Normalized performance score (NPS)", "nps")
    table("Comprehensive score (CS)", "cs")
    return EXIT_OK


def _cmd_inspect(args: argparse.Namespace) -> int:
    path = Path(args.path).resolve()
    summary_path = (
        path / "pipeline_summary.json"
        if (path / "pipeline_summary.json").is_file()
        else path.parent / "pipeline_summary.json"
    )
    if not summary_path.is_file():
        raise ConfigError("path", f"no pipeline_summary.json at or above {path}")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    print(f"task: {summary.get('task_name')}  rounds: {summary.get('rounds_completed')}")
    stopped = summary.get("stopped") or {}
    if stopped:
        print(f"stopped at round {stopped.get('round_idx')}: {stopped.get('stop_reason')}")
    for record in summary.get("rounds", []):
        usage = record.get("stage_token_usage", {})
        tokens = sum(u.get("total_tokens", 0) for u in usage.values())
        print(
            f"  round {record['round_idx']}: status={record['execution_status']} "
            f"metric={record['primary_metric_value']} tokens={tokens} "
            f"next={record.get('decision', {}).get('next_start')}"
        )
        plan_ref = record.get("plan_ref")
        if plan_ref:
            plan_path = summary_path.parent / plan_ref
            if plan_path.is_file():
                head = plan_path.read_text(encoding="utf-8").strip().splitlines()[:3]
                for line in head:
                    print(f"    | {line}")
    report = summary.get("report_generation") or {}
    if report:
        print(f"report: {report.get('status')} ({report.get('source_path', '')})")
    totals = summary.get("token_totals", {}).get("total", {})
    print(f"total tokens: {totals.get('total_tokens', 0)}  cost: {totals.get('cost', 0.0)}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "resume": _cmd_resume,
    "score": _cmd_score,
    "replay": _cmd_replay,
    "inspect": _cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Dispatch; 0 success, 1 pipeline failure, 2 usage/config error."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    import logging

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted; partial summary persisted if a run was active", file=sys.stderr)
        return EXIT_PIPELINE_FAILURE
    except LooplabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE_FAILURE
    except OSError as exc:
        print(f"filesystem error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE_FAILURE


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
