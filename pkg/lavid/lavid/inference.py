"""Per-video detection: one LVLM call per EK tool, OR-ensembled into a verdict."""

from __future__ import annotations

import logging
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .common import write_jsonl
from .dataset import DEFAULT_WINDOW, FrameSequence, GroundTruth, VideoSample, encode_png, select_window
from .ektools import EKArtifact, ToolError, apply_tool, get_tool
from .lvlm import CONFIDENCE_FIELD, VERDICT_FIELD, BaseLvlm, LvlmRequest, SchemaViolation
from .prompting import (
    SYSTEM_TEXT,
    BaselinePrompt,
    DetectionMode,
    PromptTemplate,
    RenderedPrompt,
    initial_template,
    parse_confidence,
    parse_tool_choice,
    parse_yes_no,
    render_baseline_prompt,
    render_detection_prompt,
    render_tool_choice_prompt,
)

LOG = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    sample_id: str
    tool: str
    is_ai_generated: Optional[bool]
    confidence: float = 1.0
    field_analyses: Mapping[str, str] = field(default_factory=dict)
    refused: bool = False
    raw_text: str = ""

    @property
    def voted(self) -> bool:
        return not self.refused and self.is_ai_generated is not None

    @property
    def predicted(self) -> Optional[GroundTruth]:
        if not self.voted:
            return None
        return GroundTruth.AI if self.is_ai_generated else GroundTruth.REAL

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "tool": self.tool,
            "is_ai_generated": self.is_ai_generated,
            "confidence": self.confidence,
            "field_analyses": dict(self.field_analyses),
            "refused": self.refused,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "Detection":
        verdict = payload.get("is_ai_generated")
        return cls(
            sample_id=str(payload["sample_id"]),
            tool=str(payload["tool"]),
            is_ai_generated=None if verdict is None else bool(verdict),
            confidence=float(payload.get("confidence", 1.0)),
            field_analyses=dict(payload.get("field_analyses") or {}),
            refused=bool(payload.get("refused", False)),
            raw_text=str(payload.get("raw_text", "")),
        )


@dataclass(frozen=True)
class EnsembleVerdict:
    sample_id: str
    final: GroundTruth
    per_tool: Tuple[Detection, ...]
    tools_used: Tuple[str, ...]
    confidence: float
    all_refused: bool = False
    degraded: bool = False
    skipped_tools: Tuple[str, ...] = ()
    run: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "run": self.run,
            "final": self.final.value,
            "confidence": self.confidence,
            "tools_used": list(self.tools_used),
            "all_refused": self.all_refused,
            "degraded": self.degraded,
            "skipped_tools": list(self.skipped_tools),
            "per_tool": [detection.to_dict() for detection in self.per_tool],
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "EnsembleVerdict":
        return cls(
            sample_id=str(payload["sample_id"]),
            final=GroundTruth.parse(payload["final"]),
            per_tool=tuple(Detection.from_dict(item) for item in payload.get("per_tool", [])),
            tools_used=tuple(payload.get("tools_used", [])),
            confidence=float(payload.get("confidence", 0.0)),
            all_refused=bool(payload.get("all_refused", False)),
            degraded=bool(payload.get("degraded", False)),
            skipped_tools=tuple(payload.get("skipped_tools", [])),
            run=int(payload.get("run", 0)),
        )


DEFAULT_CACHE_SIZE = 256


@dataclass
class _CachedSample:
    window: FrameSequence
    artifacts: Dict[str, EKArtifact] = field(default_factory=dict)
    encoded: Dict[str, Tuple[bytes, ...]] = field(default_factory=dict)


class FrameStore:
    """Caches each sample's frame window, derived EK artifacts and their PNG encodings.

    At most ``cache_size`` samples are held; the least recently used sample is
    evicted with everything derived from it and recomputed on the next request.
    """

    def __init__(
        self,
        window: int = DEFAULT_WINDOW,
        adapters: Mapping[str, object] | None = None,
        *,
        cache_size: int = DEFAULT_CACHE_SIZE,
    ) -> None:
        if cache_size < 1:
            raise ValueError("cache_size must be at least 1")
        self.window_size = window
        self.adapters = dict(adapters or {})
        self.cache_size = cache_size
        self._samples: "OrderedDict[str, _CachedSample]" = OrderedDict()
        self._lock = threading.Lock()

    @property
    def cached_samples(self) -> Tuple[str, ...]:
        with self._lock:
            return tuple(self._samples)

    def _entry(self, sample: VideoSample) -> _CachedSample:
        with self._lock:
            entry = self._samples.get(sample.id)
            if entry is not None:
                self._samples.move_to_end(sample.id)
                return entry
        window = select_window(sample, self.window_size)
        with self._lock:
            entry = self._samples.setdefault(sample.id, _CachedSample(window))
            self._samples.move_to_end(sample.id)
            while len(self._samples) > self.cache_size:
                evicted, _ = self._samples.popitem(last=False)
                LOG.debug("Evicted %s from the frame cache", evicted)
        return entry

    def window(self, sample: VideoSample) -> FrameSequence:
        return self._entry(sample).window

    def artifact(self, sample: VideoSample, tool: str) -> EKArtifact:
        entry = self._entry(sample)
        with self._lock:
            cached = entry.artifacts.get(tool)
        if cached is None:
            cached = apply_tool(tool, entry.window, adapters=self.adapters)
            with self._lock:
                cached = entry.artifacts.setdefault(tool, cached)
        return cached

    def images(self, sample: VideoSample, tool: str) -> Tuple[bytes, ...]:
        entry = self._entry(sample)
        with self._lock:
            cached = entry.encoded.get(tool)
        if cached is None:
            frames = entry.window if tool == "rgb" else self.artifact(sample, tool).frames
            cached = tuple(encode_png(frame) for frame in frames)
            with self._lock:
                cached = entry.encoded.setdefault(tool, cached)
        return cached


def _tags(purpose: str, sample: VideoSample, tool: str, repeat: int, **extra: str) -> Dict[str, str]:
    tags = {"purpose": purpose, "sample_id": sample.id, "tool": tool, "repeat": str(repeat)}
    tags.update(extra)
    return tags


def _detection_from_response(sample: VideoSample, tool: str, response, structured: bool) -> Detection:
    if response.refused:
        return Detection(sample.id, tool, None, confidence=0.0, refused=True, raw_text=response.raw_text)
    if not structured:
        verdict, refused = parse_yes_no(response.raw_text)
        return Detection(
            sample.id, tool, verdict, confidence=0.0 if verdict is None else 1.0, refused=refused, raw_text=response.raw_text
        )
    fields = dict(response.parsed_fields or {})
    analyses = {
        name: str(value) for name, value in fields.items() if name not in (VERDICT_FIELD, CONFIDENCE_FIELD)
    }
    return Detection(
        sample.id,
        tool,
        bool(fields[VERDICT_FIELD]),
        confidence=parse_confidence(fields.get(CONFIDENCE_FIELD)),
        field_analyses=analyses,
        raw_text=response.raw_text,
    )


def _complete(client: BaseLvlm, sample: VideoSample, tool: str, rendered: RenderedPrompt, images, tags, model_id: str) -> Detection:
    request = LvlmRequest(
        system_text=rendered.system_text,
        user_text=rendered.user_text,
        images=images,
        response_schema=rendered.schema,
        model_id=model_id,
        tags=tags,
    )
    try:
        response = client.complete(request)
    except SchemaViolation as exc:
        LOG.warning("Unparseable structured reply for %s with %s: %s", sample.id, tool, exc)
        return Detection(sample.id, tool, None, confidence=0.0, raw_text=str(exc.detail.get("raw_text", "")))
    return _detection_from_response(sample, tool, response, rendered.schema is not None)


def detect_with_tool(
    client: BaseLvlm,
    sample: VideoSample,
    tool: str,
    template: PromptTemplate | None = None,
    mode: DetectionMode | str = DetectionMode.STRUCTURED,
    *,
    store: FrameStore | None = None,
    repeat: int = 0,
    model_id: str = "",
    purpose: str = "detect",
) -> Detection:
    """Ask the LVLM about one sample using raw frames plus ``tool``'s EK frames.

    Refusals and unparseable structured replies come back as a Detection with no
    verdict; tool and provider failures propagate.
    """

    name = get_tool(tool).name
    mode = DetectionMode(mode)
    store = store or FrameStore()
    raw_images = store.images(sample, "rgb")
    ek_images: Tuple[bytes, ...] = () if name == "rgb" else store.images(sample, name)
    if mode is DetectionMode.STRUCTURED and template is None:
        template = initial_template(name)
    rendered = render_detection_prompt(
        name, mode, template, frame_count=len(raw_images), ek_count=len(ek_images) or None
    )
    tags = _tags(purpose, sample, name, repeat)
    return _complete(client, sample, name, rendered, raw_images + ek_images, tags, model_id)


def pick_tools_for_video(
    client: BaseLvlm,
    sample: VideoSample,
    toolkit: Sequence[str],
    *,
    store: FrameStore | None = None,
    model_id: str = "",
) -> List[str]:
    if not toolkit:
        raise ValueError("toolkit must not be empty")
    store = store or FrameStore()
    images = store.images(sample, "rgb")
    request = LvlmRequest(
        system_text=SYSTEM_TEXT,
        user_text=render_tool_choice_prompt(toolkit, frame_count=len(images)),
        images=images,
        model_id=model_id,
        tags={"purpose": "pick", "sample_id": sample.id, "toolkit": ",".join(toolkit)},
    )
    response = client.complete(request)
    chosen = parse_tool_choice(response.raw_text, toolkit)
    if not chosen:
        LOG.warning("No usable tool choice for %s; using the full toolkit", sample.id)
        return list(toolkit)
    return chosen


def ensemble(
    sample_id: str,
    detections: Sequence[Detection],
    *,
    tools_used: Sequence[str] | None = None,
    skipped: Sequence[str] = (),
    run: int = 0,
) -> EnsembleVerdict:
    """OR rule: AI if any tool voted AI, otherwise Real; no votes at all gives Real with confidence 0."""

    votes = [detection for detection in detections if detection.voted]
    ai_votes = [detection for detection in votes if detection.is_ai_generated]
    if ai_votes:
        final, confidence = GroundTruth.AI, max(detection.confidence for detection in ai_votes)
    elif votes:
        final, confidence = GroundTruth.REAL, max(detection.confidence for detection in votes)
    else:
        final, confidence = GroundTruth.REAL, 0.0
    return EnsembleVerdict(
        sample_id=sample_id,
        final=final,
        per_tool=tuple(detections),
        tools_used=tuple(tools_used if tools_used is not None else [d.tool for d in detections]),
        confidence=confidence,
        all_refused=not votes,
        degraded=bool(skipped),
        skipped_tools=tuple(skipped),
        run=run,
    )


def detect(
    client: BaseLvlm,
    sample: VideoSample,
    toolkit: Sequence[str],
    templates: Mapping[str, PromptTemplate] | None = None,
    mode: DetectionMode | str = DetectionMode.STRUCTURED,
    video_specific: bool = False,
    *,
    store: FrameStore | None = None,
    repeat: int = 0,
    model_id: str = "",
) -> EnsembleVerdict:
    store = store or FrameStore()
    templates = templates or {}
    tools_used = (
        pick_tools_for_video(client, sample, toolkit, store=store, model_id=model_id) if video_specific else list(toolkit)
    )
    detections: List[Detection] = []
    skipped: List[str] = []
    for tool in tools_used:
        try:
            detections.append(
                detect_with_tool(
                    client, sample, tool, templates.get(tool), mode, store=store, repeat=repeat, model_id=model_id
                )
            )
        except ToolError as exc:
            LOG.warning("Skipping %s for %s: %s", tool, sample.id, exc)
            skipped.append(tool)
    return ensemble(sample.id, detections, tools_used=tools_used, skipped=skipped, run=repeat)


def _map_samples(samples: Sequence[VideoSample], jobs: int, worker) -> List:
    if jobs <= 1:
        return [worker(sample) for sample in samples]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, samples))


def run_detection(
    client: BaseLvlm,
    samples: Sequence[VideoSample],
    toolkit: Sequence[str],
    templates: Mapping[str, PromptTemplate] | None = None,
    *,
    mode: DetectionMode | str = DetectionMode.STRUCTURED,
    video_specific: bool = False,
    repeats: int = 1,
    jobs: int = 1,
    store: FrameStore | None = None,
    model_id: str = "",
    verdicts_path: Path | None = None,
) -> List[EnsembleVerdict]:
    if not toolkit:
        raise ValueError("toolkit must not be empty")
    store = store or FrameStore()
    verdicts: List[EnsembleVerdict] = []
    for run in range(repeats):
        LOG.info("Detection run %d/%d over %d video(s) with %s", run + 1, repeats, len(samples), ", ".join(toolkit))
        verdicts.extend(
            _map_samples(
                samples,
                jobs,
                lambda sample: detect(
                    client,
                    sample,
                    toolkit,
                    templates,
                    mode,
                    video_specific,
                    store=store,
                    repeat=run,
                    model_id=model_id,
                ),
            )
        )
    if verdicts_path is not None:
        write_jsonl(verdicts_path, (verdict.to_dict() for verdict in verdicts))
    return verdicts


def run_baseline(
    client: BaseLvlm,
    samples: Sequence[VideoSample],
    prompt: BaselinePrompt | str = BaselinePrompt.P1,
    mode: DetectionMode | str = DetectionMode.NON_STRUCTURED,
    *,
    repeats: int = 1,
    jobs: int = 1,
    store: FrameStore | None = None,
    model_id: str = "",
    verdicts_path: Path | None = None,
) -> List[EnsembleVerdict]:
    """Zero-shot baseline on raw frames only, one call per video per run."""

    store = store or FrameStore()
    prompt = BaselinePrompt(prompt)

    def worker(sample: VideoSample, run: int) -> EnsembleVerdict:
        images = store.images(sample, "rgb")
        rendered = render_baseline_prompt(prompt, mode, frame_count=len(images))
        tags = _tags("baseline", sample, "rgb", run, prompt=prompt.value)
        detection = _complete(client, sample, "rgb", rendered, images, tags, model_id)
        return ensemble(sample.id, [detection], tools_used=["rgb"], run=run)

    verdicts: List[EnsembleVerdict] = []
    for run in range(repeats):
        verdicts.extend(_map_samples(samples, jobs, lambda sample: worker(sample, run)))
    if verdicts_path is not None:
        write_jsonl(verdicts_path, (verdict.to_dict() for verdict in verdicts))
    return verdicts


__all__ = [
    "DEFAULT_CACHE_SIZE",
    "Detection",
    "EnsembleVerdict",
    "FrameStore",
    "detect",
    "detect_with_tool",
    "ensemble",
    "pick_tools_for_video",
    "run_baseline",
    "run_detection",
]
