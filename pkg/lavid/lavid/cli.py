"""CLI dispatcher for lavid."""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

from . import __version__
from .adaptation import adapt_toolkit
from .common import LavidError, attach_log_file, error_payload, load_json, read_jsonl, response_payload, save_json
from .config import ConfigError, PipelineConfig, load_config
from .dataset import DatasetSplit, GroundTruth, VideoSample, load_manifest, prepare_manifest, split_manifest, write_manifest
from .ektools import CANDIDATE_TOOLS
from .inference import EnsembleVerdict, FrameStore, run_baseline, run_detection
from .lvlm import BaseLvlm, HttpLvlm, MockBehavior, ProviderError, TranscriptWriter, mock_configure
from .metrics import OVERALL, EvalReport, evaluate, render_report
from .paths import DEFAULT_OUT_DIR, ArtifactPaths, artifact_paths
from .prompting import BaselinePrompt, DetectionMode, PromptTemplate, initial_template, set_refusal_patterns
from .selection import SelectionReport, propose_toolkit, select_toolkit

LOG = logging.getLogger(__name__)


class MissingArtifact(LavidError):
    """A stage ran before the stage that produces its input."""


@dataclass(frozen=True)
class StageResult:
    """Stage outcome with the rendered payload and exit code."""

    payload: Mapping[str, Any]
    exit_code: int = 0


@dataclass
class StageContext:
    config: PipelineConfig
    paths: ArtifactPaths
    transcript: Path | None = None
    resume: bool = False
    store: FrameStore = field(init=False)
    _client: Optional[BaseLvlm] = field(default=None, init=False, repr=False)
    _samples: Optional[List[VideoSample]] = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        self.store = FrameStore(self.config.window, self.config.adapters, cache_size=self.config.frame_cache_size)

    def samples(self) -> List[VideoSample]:
        if self._samples is None:
            self._samples = load_manifest(_require(self.paths.prepared_manifest, "prepare"))
        return self._samples

    def split(self) -> DatasetSplit:
        payload = load_json(_require(self.paths.split, "prepare"))
        return DatasetSplit.from_dict(payload, {sample.id: sample for sample in self.samples()})

    def client(self) -> BaseLvlm:
        if self._client is None:
            self._client = _build_client(self.config, self.samples(), self.transcript)
        return self._client

    def reload(self) -> None:
        self._samples = None
        self._client = None


def _positive_int(value: str) -> int:
    try:
        parsed = int(value)
    except ValueError as exc:  # pragma: no cover - argparse maps to SystemExit
        raise argparse.ArgumentTypeError(f"{value} is not a valid integer") from exc
    if parsed <= 0:
        raise argparse.ArgumentTypeError("Value must be positive")
    return parsed


def _non_negative_int(value: str) -> int:
    try:
        parsed = int(value)
    except ValueError as exc:  # pragma: no cover - argparse maps to SystemExit
        raise argparse.ArgumentTypeError(f"{value} is not a valid integer") from exc
    if parsed < 0:
        raise argparse.ArgumentTypeError("Value must be zero or positive")
    return parsed


def _unit_float(value: str) -> float:
    try:
        parsed = float(value)
    except ValueError as exc:  # pragma: no cover - argparse maps to SystemExit
        raise argparse.ArgumentTypeError(f"{value} is not a valid number") from exc
    if not 0.0 <= parsed <= 1.0:
        raise argparse.ArgumentTypeError("Value must lie within [0, 1]")
    return parsed


def _tool_list(value: str) -> List[str]:
    tools = [item.strip() for item in value.split(",") if item.strip()]
    if not tools:
        raise argparse.ArgumentTypeError("Expected a comma-separated list of tool names")
    return tools


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Pipeline configuration file (TOML)")
    common.add_argument(
        "--out", type=Path, default=DEFAULT_OUT_DIR, help="Artifact directory (default: %(default)s)"
    )
    common.add_argument("--provider", choices=("http", "mock"), default=None, help="LVLM provider override")
    common.add_argument("--seed", type=_non_negative_int, default=None, help="Random seed override")
    common.add_argument("--jobs", type=_positive_int, default=None, help="Concurrent LVLM calls")
    common.add_argument("--window", type=_positive_int, default=None, help="Frames per detection window")
    common.add_argument("--transcript", type=Path, default=None, help="Append LVLM requests/responses to this JSONL file")
    common.add_argument("--debug-json", action="store_true", help="Emit the full payload including nested sections")

    parser = argparse.ArgumentParser(prog="lavid", description="LVLM-based AI-generated video detection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_manifest(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--manifest", type=Path, required=True, help="Input manifest (JSONL)")
        sub.add_argument("--max-frames", dest="max_frames", type=_positive_int, default=None, help="Frames to extract per video")

    def add_selection(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--alpha", type=_unit_float, default=None, help="Weight of F1 against the self-assessment score")
        sub.add_argument("--tools", type=_tool_list, default=None, help="Comma-separated candidate tools")
        sub.add_argument("--propose", action="store_true", help="Ask the LVLM to propose the candidate tools")

    def add_detection(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--mode", choices=[mode.value for mode in DetectionMode], default=None, help="Prompt mode")
        sub.add_argument("--repeats", type=_positive_int, default=None, help="Detection runs to average")
        sub.add_argument(
            "--video-specific", dest="video_specific", action="store_true", default=None, help="Let the LVLM pick tools per video"
        )

    def add_resume(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--resume", action="store_true", help="Continue from checkpoints under <out>/checkpoints")

    prepare_parser = subparsers.add_parser("prepare", parents=[common], help="Extract frames and split the dataset")
    add_manifest(prepare_parser)

    select_parser = subparsers.add_parser("select", parents=[common], help="Score candidate EK tools on the reference set")
    add_selection(select_parser)
    add_resume(select_parser)

    adapt_parser = subparsers.add_parser("adapt", parents=[common], help="Adapt response templates for the selected tools")
    adapt_parser.add_argument("--mode", choices=[mode.value for mode in DetectionMode], default=None, help="Prompt mode")
    add_resume(adapt_parser)

    detect_parser = subparsers.add_parser("detect", parents=[common], help="Run the ensemble over the inference set")
    add_detection(detect_parser)

    subparsers.add_parser("evaluate", parents=[common], help="Score verdicts against ground truth")

    run_all_parser = subparsers.add_parser("run-all", parents=[common], help="Run every stage in order")
    add_manifest(run_all_parser)
    add_selection(run_all_parser)
    add_detection(run_all_parser)
    add_resume(run_all_parser)

    baseline_parser = subparsers.add_parser("baseline", parents=[common], help="Zero-shot prompt on raw frames only")
    baseline_parser.add_argument(
        "--prompt", choices=[prompt.value for prompt in BaselinePrompt], default=None, help="Baseline prompt"
    )
    baseline_parser.add_argument(
        "--mode",
        choices=[mode.value for mode in DetectionMode],
        default=DetectionMode.NON_STRUCTURED.value,
        help="Prompt mode (default: %(default)s)",
    )
    baseline_parser.add_argument("--repeats", type=_positive_int, default=None, help="Runs to average")

    return parser


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2))


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(
            f"Missing {path.name}; run `lavid {stage}` first", detail={"artifact": str(path), "stage": stage}
        )
    return path


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config)
    overrides: Dict[str, Any] = {}
    for key in ("seed", "jobs", "window", "max_frames", "alpha", "repeats", "video_specific"):
        overrides[key] = getattr(args, key, None)
    if args.command != "baseline":
        overrides["mode"] = getattr(args, "mode", None)
    config = config.with_overrides(**overrides)
    if args.provider:
        config = replace(config, provider=replace(config.provider, kind=args.provider))
    return config


def _build_client(config: PipelineConfig, samples: Sequence[VideoSample], transcript_path: Path | None) -> BaseLvlm:
    secrets = [config.provider.api_key] if config.provider.api_key else []
    transcript = TranscriptWriter(transcript_path, secrets=secrets) if transcript_path else None
    if config.provider.kind == "mock":
        behavior = MockBehavior.from_settings(
            config.mock,
            seed=config.seed,
            truths={sample.id: sample.label for sample in samples},
            native_schema=config.provider.native_schema,
        )
        LOG.info("Using the mock LVLM (seed %d)", config.seed)
        return mock_configure(behavior, transcript=transcript)
    LOG.info("Using %s at %s", config.provider.model_id, config.provider.endpoint)
    return HttpLvlm(config.provider, transcript=transcript)


def _context(args: argparse.Namespace) -> StageContext:
    config = _load_config(args)
    paths = artifact_paths(args.out)
    attach_log_file(paths.logs)
    set_refusal_patterns(config.refusal_patterns_path)
    return StageContext(config, paths, transcript=args.transcript, resume=getattr(args, "resume", False))


def _overall(reports: Sequence[EvalReport]) -> Optional[EvalReport]:
    return next((report for report in reports if report.dataset == OVERALL), None)


def stage_prepare(ctx: StageContext, manifest_path: Path) -> Dict[str, Any]:
    config = ctx.config
    samples = load_manifest(manifest_path)
    prepared = prepare_manifest(
        samples, ctx.paths.frames_dir, max_frames=config.max_frames, command=config.frame_command, jobs=config.jobs
    )
    write_manifest(ctx.paths.prepared_manifest, prepared)
    split = split_manifest(
        prepared, config.reference_fraction, config.seed, adaptation_fraction=config.adaptation_fraction
    )
    save_json(ctx.paths.split, split.to_dict())
    ctx.reload()
    return {
        "status": "ok",
        "message": f"Prepared {len(prepared)} video(s)",
        "videos": len(prepared),
        "reference": len(split.reference),
        "adaptation": len(split.adaptation),
        "inference": len(split.inference),
        "manifest": str(ctx.paths.prepared_manifest),
    }


def _candidates(ctx: StageContext, tools: Sequence[str] | None, propose: bool) -> List[str]:
    if tools:
        return list(tools)
    if propose:
        proposed = propose_toolkit(ctx.client(), model_id=ctx.config.provider.model_id)
        save_json(ctx.paths.candidates, {"candidates": proposed})
        if proposed:
            return proposed
        LOG.warning("Falling back to the built-in candidate list")
    return list(ctx.config.candidates or CANDIDATE_TOOLS)


def stage_select(ctx: StageContext, tools: Sequence[str] | None = None, propose: bool = False) -> Dict[str, Any]:
    config = ctx.config
    split = ctx.split()
    report = select_toolkit(
        ctx.client(),
        _candidates(ctx, tools, propose),
        split.reference,
        config.alpha,
        store=ctx.store,
        jobs=config.jobs,
        average=config.f1_average,
        model_id=config.provider.model_id,
        checkpoint_path=ctx.paths.selection_checkpoint,
        report_path=ctx.paths.selection_report,
        resume=ctx.resume,
    )
    return {
        "status": "ok",
        "message": f"Selected {len(report.selected)} tool(s)",
        "selected": list(report.selected),
        "skipped": list(report.skipped),
        "baseline_s_tool": report.baseline.s_tool,
        "scores": {score.tool: score.to_dict() for score in (report.baseline, *report.scores)},
        "report": str(ctx.paths.selection_report),
    }


def _selected(ctx: StageContext) -> List[str]:
    report = SelectionReport.load(_require(ctx.paths.selection_report, "select"))
    return list(report.selected)


def stage_adapt(ctx: StageContext) -> Dict[str, Any]:
    config = ctx.config
    tools = _selected(ctx)
    if DetectionMode(config.mode) is not DetectionMode.STRUCTURED:
        return {"status": "ok", "message": "Template adaptation applies to structured mode only", "tools": tools}
    templates = adapt_toolkit(
        ctx.client(),
        tools,
        ctx.split().adaptation,
        config,
        store=ctx.store,
        ledger_path_for=ctx.paths.adaptation_ledger,
        checkpoint_path_for=ctx.paths.adaptation_checkpoint,
        resume=ctx.resume,
    )
    save_json(ctx.paths.templates, {tool: template.to_dict() for tool, template in templates.items()})
    return {
        "status": "ok",
        "message": f"Adapted {len(templates)} template(s)",
        "tools": tools,
        "templates": {tool: list(template.schema.names) for tool, template in templates.items()},
        "path": str(ctx.paths.templates),
    }


def _templates(ctx: StageContext, toolkit: Sequence[str]) -> Dict[str, PromptTemplate]:
    payload = load_json(_require(ctx.paths.templates, "adapt"))
    templates = {tool: PromptTemplate.from_dict(item) for tool, item in payload.items()}
    for tool in toolkit:
        templates.setdefault(tool, initial_template(tool))
    return templates


def stage_detect(ctx: StageContext) -> Dict[str, Any]:
    config = ctx.config
    toolkit = _selected(ctx)
    if not toolkit:
        LOG.warning("Selection kept no EK tools; detecting on raw frames only")
        toolkit = ["rgb"]
    mode = DetectionMode(config.mode)
    templates = _templates(ctx, toolkit) if mode is DetectionMode.STRUCTURED else {}
    verdicts = run_detection(
        ctx.client(),
        ctx.split().inference,
        toolkit,
        templates,
        mode=mode,
        video_specific=config.video_specific,
        repeats=config.repeats,
        jobs=config.jobs,
        store=ctx.store,
        model_id=config.provider.model_id,
        verdicts_path=ctx.paths.verdicts,
    )
    return {
        "status": "ok",
        "message": f"Wrote {len(verdicts)} verdict(s)",
        "verdicts": len(verdicts),
        "toolkit": toolkit,
        "ai": sum(1 for verdict in verdicts if verdict.final is GroundTruth.AI),
        "all_refused": sum(1 for verdict in verdicts if verdict.all_refused),
        "path": str(ctx.paths.verdicts),
    }


def _score(ctx: StageContext, verdicts_path: Path, out_prefix: Path, label: str) -> Dict[str, Any]:
    verdicts = [EnsembleVerdict.from_dict(item) for item in read_jsonl(verdicts_path)]
    samples = ctx.samples()
    reports = evaluate(
        verdicts,
        {sample.id: sample.label for sample in samples},
        {sample.id: sample.source for sample in samples},
    )
    table = render_report(reports, out_prefix, label=label)
    payload: Dict[str, Any] = {"status": "ok", "table": table, "reports": [report.to_dict() for report in reports]}
    overall = _overall(reports)
    if overall is not None:
        payload.update(
            message=f"Accuracy/F1 {overall.cell}",
            accuracy=overall.accuracy,
            f1=overall.f1,
            refusal_rate=overall.refusal_rate,
        )
    return payload


def stage_evaluate(ctx: StageContext) -> Dict[str, Any]:
    payload = _score(ctx, _require(ctx.paths.verdicts, "detect"), ctx.paths.eval_json.with_suffix(""), "lavid")
    payload["path"] = str(ctx.paths.eval_json)
    return payload


def _handle_prepare(args: argparse.Namespace) -> StageResult:
    ctx = _context(args)
    return StageResult(response_payload(stage_prepare(ctx, args.manifest), verbose=args.debug_json))


def _handle_select(args: argparse.Namespace) -> StageResult:
    ctx = _context(args)
    return StageResult(response_payload(stage_select(ctx, args.tools, args.propose), verbose=args.debug_json))


def _handle_adapt(args: argparse.Namespace) -> StageResult:
    ctx = _context(args)
    return StageResult(response_payload(stage_adapt(ctx), verbose=args.debug_json))


def _handle_detect(args: argparse.Namespace) -> StageResult:
    ctx = _context(args)
    return StageResult(response_payload(stage_detect(ctx), verbose=args.debug_json))


def _handle_evaluate(args: argparse.Namespace) -> StageResult:
    ctx = _context(args)
    return StageResult(response_payload(stage_evaluate(ctx), verbose=args.debug_json))


def _handle_run_all(args: argparse.Namespace) -> StageResult:
    ctx = _context(args)
    stages: Dict[str, Dict[str, Any]] = {}
    stages["prepare"] = stage_prepare(ctx, args.manifest)
    stages["select"] = stage_select(ctx, args.tools, args.propose)
    stages["adapt"] = stage_adapt(ctx)
    stages["detect"] = stage_detect(ctx)
    stages["evaluate"] = stage_evaluate(ctx)
    summary = {
        "status": "ok",
        "message": stages["evaluate"].get("message", "Pipeline complete"),
        "selected": stages["select"]["selected"],
        "accuracy": stages["evaluate"].get("accuracy"),
        "f1": stages["evaluate"].get("f1"),
        "stages": stages,
    }
    return StageResult(response_payload(summary, verbose=args.debug_json))


def _handle_baseline(args: argparse.Namespace) -> StageResult:
    ctx = _context(args)
    config = ctx.config
    prompt = BaselinePrompt(args.prompt or config.baseline_prompt)
    mode = DetectionMode(args.mode)
    verdicts_path = ctx.paths.baseline_verdicts(prompt.value, mode.value)
    run_baseline(
        ctx.client(),
        ctx.split().inference,
        prompt,
        mode,
        repeats=config.repeats,
        jobs=config.jobs,
        store=ctx.store,
        model_id=config.provider.model_id,
        verdicts_path=verdicts_path,
    )
    payload = _score(ctx, verdicts_path, ctx.paths.baseline_report(prompt.value, mode.value), f"{prompt.value} ({mode.value})")
    payload.update(prompt=prompt.value, mode=mode.value, path=str(verdicts_path))
    return StageResult(response_payload(payload, verbose=args.debug_json))


def _run(handler: Callable[[argparse.Namespace], StageResult], args: argparse.Namespace) -> int:
    try:
        result = handler(args)
    except ConfigError as exc:
        LOG.error("%s", exc)
        _emit(error_payload(exc))
        return 2
    except MissingArtifact as exc:
        LOG.error("%s", exc)
        _emit(error_payload(exc))
        return 3
    except ProviderError as exc:
        LOG.error("%s failed: %s", args.command, exc)
        _emit({**error_payload(exc), "stage": args.command})
        return 4
    except LavidError as exc:
        LOG.error("%s", exc)
        _emit(error_payload(exc))
        return 1
    except ValueError as exc:
        LOG.error("%s", exc)
        _emit(error_payload(exc))
        return 2

    _emit(result.payload)
    return result.exit_code


def main(argv: Sequence[str] | None = None) -> None:
    parser = _build_parser()
    args = parser.parse_args(args=argv)

    if args.command == "prepare":
        exit_code = _run(_handle_prepare, args)
    elif args.command == "select":
        exit_code = _run(_handle_select, args)
    elif args.command == "adapt":
        exit_code = _run(_handle_adapt, args)
    elif args.command == "detect":
        exit_code = _run(_handle_detect, args)
    elif args.command == "evaluate":
        exit_code = _run(_handle_evaluate, args)
    elif args.command == "run-all":
        exit_code = _run(_handle_run_all, args)
    elif args.command == "baseline":
        exit_code = _run(_handle_baseline, args)
    else:  # pragma: no cover - argparse enforces choices
        parser.error("Unsupported command")
        return

    raise SystemExit(exit_code)


__all__ = [
    "MissingArtifact",
    "StageContext",
    "StageResult",
    "main",
    "stage_adapt",
    "stage_detect",
    "stage_evaluate",
    "stage_prepare",
    "stage_select",
]
