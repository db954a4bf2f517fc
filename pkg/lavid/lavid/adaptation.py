"""Online adaptation of structured response templates.

Adaptation samples arrive in slots of ``batch_size_per_class`` real and AI videos.
Each slot first scores the incumbent template over every sample seen so far;
below the F1 threshold the LVLM is asked to rewrite the template, and a rewrite
replaces the incumbent only when it scores strictly higher. Every evaluated
template is appended to the ledger.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .common import LavidError, append_jsonl, load_json, save_json, utc_now, write_jsonl
from .config import PipelineConfig
from .dataset import GroundTruth, VideoSample
from .ektools import TooFewFrames, get_tool
from .inference import Detection, FrameStore, detect_with_tool
from .lvlm import VERDICT_FIELD, BaseLvlm, FieldKind, LvlmRequest, SchemaField, StructuredSchema, field_name_problems
from .prompting import (
    DetectionMode,
    PromptTemplate,
    TemplateProvenance,
    initial_template,
    parse_class_fields,
    render_schema,
)
from .selection import records_from_detections, weighted_f1

LOG = logging.getLogger(__name__)

PROHIBITED_STEMS = ("frame_rate", "resolution", "format", "duration")
PARSE_RETRIES = 3
FAILED_ROLE = "failed"
REWRITE_SYSTEM_TEXT = "You are a Python developer who designs Pydantic response classes for video analysis."


class RewriteParseFailed(LavidError):
    """The LVLM did not return a usable template after the allowed retries."""


class BudgetExhausted(LavidError):
    pass


class InsufficientData(LavidError, ValueError):
    pass


@dataclass(frozen=True)
class RewriteConstraints:
    max_fields: int = 5
    required_bool_field: str = VERDICT_FIELD
    other_field_kind: FieldKind = FieldKind.STR
    max_changed_fields: int = 2
    min_changed_fields: int = 1
    prohibited_names: Tuple[str, ...] = PROHIBITED_STEMS

    @classmethod
    def with_additions(cls, extra: Sequence[str]) -> "RewriteConstraints":
        names = list(PROHIBITED_STEMS)
        names.extend(name.strip().lower() for name in extra if name.strip() and name.strip().lower() not in names)
        return cls(prohibited_names=tuple(names))


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str


@dataclass(frozen=True)
class TemplateValidation:
    violations: Tuple[Violation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    @property
    def rules(self) -> Tuple[str, ...]:
        return tuple(sorted({violation.rule for violation in self.violations}))

    def __bool__(self) -> bool:
        return self.valid


def _as_fields(schema: StructuredSchema | Sequence[SchemaField]) -> Tuple[SchemaField, ...]:
    return tuple(schema.fields) if isinstance(schema, StructuredSchema) else tuple(schema)


def changed_fields(current: Sequence[SchemaField], previous: Sequence[SchemaField]) -> int:
    """Half the symmetric difference of the two field-name sets, rounded up."""

    difference = {item.name for item in current} ^ {item.name for item in previous}
    return math.ceil(len(difference) / 2)


def validate_template(
    schema: StructuredSchema | Sequence[SchemaField],
    previous: Sequence[StructuredSchema | Sequence[SchemaField]] = (),
    constraints: RewriteConstraints = RewriteConstraints(),
    *,
    seed_latitude: bool = False,
) -> TemplateValidation:
    """Check a proposed template against the rewrite rules.

    Rules: (a) a ``bool`` verdict field, (b) every other field ``str``, (c) at most
    ``max_fields`` fields, (d) no prohibited stems, (e) between ``min_changed_fields``
    and ``max_changed_fields`` changes from ``previous[-1]``, (f) differs from every
    earlier template. ``seed_latitude`` lifts the upper bound of (e) when
    ``previous[-1]`` is the initial template.
    """

    fields = _as_fields(schema)
    violations: List[Violation] = []

    verdicts = [item for item in fields if item.name == constraints.required_bool_field]
    if len(verdicts) != 1 or verdicts[0].kind is not FieldKind.BOOL:
        violations.append(Violation("a", f"must contain exactly one '{constraints.required_bool_field}: bool' field"))
    for item in fields:
        if item.name != constraints.required_bool_field and item.kind is not constraints.other_field_kind:
            violations.append(Violation("b", f"field {item.name!r} must be {constraints.other_field_kind.value}"))
    if len(fields) > constraints.max_fields:
        violations.append(Violation("c", f"{len(fields)} fields exceed the limit of {constraints.max_fields}"))
    for item in fields:
        lowered = item.name.lower()
        for stem in constraints.prohibited_names:
            if stem.lower() in lowered:
                violations.append(Violation("d", f"field {item.name!r} uses prohibited name {stem!r}"))
    names = [item.name for item in fields]
    if len(set(names)) != len(names):
        violations.append(Violation("names", "field names must be unique"))
    for name in names:
        violations.extend(Violation("names", problem) for problem in field_name_problems(name))

    history = [_as_fields(item) for item in previous]
    if history:
        distance = changed_fields(fields, history[-1])
        upper = math.inf if seed_latitude else constraints.max_changed_fields
        if not constraints.min_changed_fields <= distance <= upper:
            violations.append(
                Violation(
                    "e",
                    f"{distance} changed field(s); expected {constraints.min_changed_fields}"
                    f" to {constraints.max_changed_fields if upper != math.inf else 'any'}",
                )
            )
        current = set(names)
        repeats = [index for index, item in enumerate(history) if {f.name for f in item} == current]
        if repeats:
            violations.append(Violation("f", f"identical to previous template #{repeats[0] + 1}"))
    return TemplateValidation(tuple(violations))


@dataclass(frozen=True)
class HistoryEntry:
    slot: int
    attempt: int
    fields: Tuple[SchemaField, ...]
    f1: float
    accepted: bool
    role: str
    real_success: float
    ai_success: float
    version: int
    timestamp: str
    best_f1: float = 0.0

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(item.name for item in self.fields)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "slot": self.slot,
            "attempt": self.attempt,
            "role": self.role,
            "fields": list(self.names),
            "kinds": [item.kind.value for item in self.fields],
            "f1": self.f1,
            "real_success": self.real_success,
            "ai_success": self.ai_success,
            "accepted": self.accepted,
            "version": self.version,
            "timestamp": self.timestamp,
            "best_f1": self.best_f1,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "HistoryEntry":
        return cls(
            slot=int(payload["slot"]),
            attempt=int(payload["attempt"]),
            fields=tuple(SchemaField(name, FieldKind(kind)) for name, kind in zip(payload["fields"], payload["kinds"])),
            f1=float(payload["f1"]),
            accepted=bool(payload["accepted"]),
            role=str(payload["role"]),
            real_success=float(payload.get("real_success", 0.0)),
            ai_success=float(payload.get("ai_success", 0.0)),
            version=int(payload.get("version", 0)),
            timestamp=str(payload.get("timestamp", "")),
            best_f1=float(payload.get("best_f1", 0.0)),
        )


@dataclass
class AdaptationState:
    tool: str
    current_template: PromptTemplate
    history: List[HistoryEntry] = field(default_factory=list)
    slot_index: int = 0
    total_rewrites: int = 0
    failed_rewrites: int = 0
    best_f1: float = 0.0
    batch_size_per_class: int = 25
    f1_threshold: float = 0.8
    rewrite_budget: int = 20
    attempts_per_slot: int = 5
    completed: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tool": self.tool,
            "current_template": self.current_template.to_dict(),
            "history": [entry.to_dict() for entry in self.history],
            "slot_index": self.slot_index,
            "total_rewrites": self.total_rewrites,
            "failed_rewrites": self.failed_rewrites,
            "best_f1": self.best_f1,
            "batch_size_per_class": self.batch_size_per_class,
            "f1_threshold": self.f1_threshold,
            "rewrite_budget": self.rewrite_budget,
            "attempts_per_slot": self.attempts_per_slot,
            "completed": self.completed,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "AdaptationState":
        return cls(
            tool=str(payload["tool"]),
            current_template=PromptTemplate.from_dict(payload["current_template"]),
            history=[HistoryEntry.from_dict(item) for item in payload.get("history", [])],
            slot_index=int(payload.get("slot_index", 0)),
            total_rewrites=int(payload.get("total_rewrites", 0)),
            failed_rewrites=int(payload.get("failed_rewrites", 0)),
            best_f1=float(payload.get("best_f1", 0.0)),
            batch_size_per_class=int(payload.get("batch_size_per_class", 25)),
            f1_threshold=float(payload.get("f1_threshold", 0.8)),
            rewrite_budget=int(payload.get("rewrite_budget", 20)),
            attempts_per_slot=int(payload.get("attempts_per_slot", 5)),
            completed=bool(payload.get("completed", False)),
        )

    def previous_templates(self) -> List[Tuple[SchemaField, ...]]:
        """Distinct evaluated templates in first-seen order, ending with the incumbent."""

        incumbent = tuple(self.current_template.schema.fields)
        seen: List[Tuple[SchemaField, ...]] = []
        for entry in evaluated(self.history):
            if entry.fields != incumbent and entry.fields not in seen:
                seen.append(entry.fields)
        seen.append(incumbent)
        return seen


def evaluated(history: Sequence[HistoryEntry]) -> List[HistoryEntry]:
    """Entries that carry a scored template; rewrites that never parsed are skipped."""

    return [entry for entry in history if entry.role != FAILED_ROLE]


def format_history(history: Sequence[HistoryEntry]) -> str:
    return "\n".join(f"fields=[{', '.join(entry.names)}] f1={entry.f1:.4f}" for entry in evaluated(history))


def render_rewrite_prompt(tool: str, history: Sequence[HistoryEntry]) -> str:
    tool_name = get_tool(tool).name
    history_str = format_history(history)
    return f"""As a Python developer, your task is to create a new Pydantic class for analyzing video data using the tool {tool_name}.

Requirements:
- The class must include the field 'is_ai_generated: bool'.
- You may add any other fields you deem necessary to analyze video data with {tool_name}.
- All additional fields must be of type 'str'.
- Fields should represent analysis perspectives specific to the capabilities of {tool_name}.

Analysis Guidelines:
- Consider the aspects of videos that {tool_name} excels at analyzing.
- Reflect on patterns or anomalies that {tool_name} might reveal.
- Emphasize high-level analysis perspectives that leverage the strengths of {tool_name}.

Constraints:
- You may modify only one or two fields from previous class definitions at a time.
- Focus on high-level abstractions specific to the purpose of {tool_name}.

Prohibited Fields:
- Technical parameters (e.g., frame_rate, resolution, format, duration).
- Algorithm or implementation specifics.

Additional Notes:
- The total number of fields must not exceed five (5).
- There must be at least one field that differs from previous class definitions.

Previous outputs: {history_str}"""


def _retry_prompt(prompt: str, problems: Sequence[str]) -> str:
    if not problems:
        return prompt
    listed = "\n".join(f"- {problem}" for problem in problems)
    return (
        f"{prompt}\n\nYour previous proposal was rejected:\n{listed}\n"
        "Propose a different class that satisfies every requirement above."
    )


def propose_rewrite(
    client: BaseLvlm,
    tool: str,
    state: AdaptationState,
    constraints: RewriteConstraints = RewriteConstraints(),
    *,
    model_id: str = "",
    slot: int = 0,
    attempt: int = 0,
) -> StructuredSchema:
    """Ask the LVLM for a rewritten template; each retry carries the reasons the last replies were rejected."""

    if state.total_rewrites >= state.rewrite_budget:
        raise BudgetExhausted(
            f"Rewrite budget of {state.rewrite_budget} exhausted", detail={"tool": tool, "total": state.total_rewrites}
        )
    previous = state.previous_templates()
    seed_latitude = state.current_template.provenance is TemplateProvenance.INITIAL
    prompt = render_rewrite_prompt(tool, state.history)
    problems: List[str] = []
    for retry in range(PARSE_RETRIES):
        request = LvlmRequest(
            system_text=REWRITE_SYSTEM_TEXT,
            user_text=_retry_prompt(prompt, problems),
            model_id=model_id,
            tags={
                "purpose": "rewrite",
                "tool": tool,
                "current_fields": ",".join(state.current_template.fields),
                "slot": str(slot),
                "attempt": str(attempt),
                "rewrite": str(state.total_rewrites),
                "retry": str(retry),
            },
        )
        response = client.complete(request)
        fields = parse_class_fields(response.raw_text)
        if fields is None:
            problems.append("no class with bool/str fields found")
            LOG.warning("Rewrite %d/%d for %s: no usable class in reply", retry + 1, PARSE_RETRIES, tool)
            continue
        validation = validate_template(fields, previous, constraints, seed_latitude=seed_latitude)
        if not validation.valid:
            messages = [f"({violation.rule}) {violation.message}" for violation in validation.violations]
            problems.extend(messages)
            LOG.warning("Rewrite %d/%d for %s rejected: %s", retry + 1, PARSE_RETRIES, tool, "; ".join(messages))
            continue
        return StructuredSchema(fields)
    raise RewriteParseFailed(
        f"No valid template for {tool} after {PARSE_RETRIES} attempts", detail={"tool": tool, "problems": problems}
    )


@dataclass(frozen=True)
class TemplateScore:
    f1: float
    real_success: float
    ai_success: float


def evaluate_template(
    client: BaseLvlm,
    tool: str,
    template: PromptTemplate,
    samples: Sequence[VideoSample],
    *,
    store: FrameStore,
    jobs: int = 1,
    model_id: str = "",
    average: str = "binary",
) -> TemplateScore:
    """Unweighted F1 plus per-class success rates of ``template`` over ``samples``."""

    def worker(sample: VideoSample) -> Detection:
        try:
            return detect_with_tool(
                client, sample, tool, template, DetectionMode.STRUCTURED, store=store, model_id=model_id, purpose="adapt"
            )
        except TooFewFrames as exc:
            LOG.warning("%s cannot run on %s: %s", tool, sample.id, exc)
            return Detection(sample.id, tool, None, confidence=0.0)

    if jobs <= 1:
        detections = [worker(sample) for sample in samples]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            detections = list(pool.map(worker, samples))

    truths = {sample.id: sample.label for sample in samples}
    records = records_from_detections(detections, truths, weighted=False)
    _, _, f1 = weighted_f1(records, average=average)
    rates = {}
    for label in GroundTruth:
        subset = [record for record in records if record.truth is label]
        rates[label] = sum(1 for record in subset if record.predicted is label) / len(subset) if subset else 0.0
    return TemplateScore(f1, rates[GroundTruth.REAL], rates[GroundTruth.AI])


def slot_plan(adaptation_set: Sequence[VideoSample], batch_size_per_class: int, rewrite_budget: int, attempts_per_slot: int) -> int:
    per_class = min(sum(1 for sample in adaptation_set if sample.label is label) for label in GroundTruth)
    if rewrite_budget <= 0:
        return 0
    if per_class < batch_size_per_class:
        raise InsufficientData(
            f"Adaptation needs {batch_size_per_class} samples per class; smallest class has {per_class}",
            detail={"per_class": per_class, "batch_size_per_class": batch_size_per_class},
        )
    return min(per_class // batch_size_per_class, rewrite_budget // max(attempts_per_slot, 1))


def _slot_batch(adaptation_set: Sequence[VideoSample], slot: int, size: int) -> List[VideoSample]:
    batch: List[VideoSample] = []
    for label in GroundTruth:
        members = [sample for sample in adaptation_set if sample.label is label]
        batch.extend(members[slot * size : (slot + 1) * size])
    return batch


def _percent(value: float) -> str:
    return f"{value * 100:.2f}%"


def run_adaptation(
    client: BaseLvlm,
    tool: str,
    adaptation_set: Sequence[VideoSample],
    config: PipelineConfig,
    *,
    constraints: RewriteConstraints | None = None,
    store: FrameStore | None = None,
    ledger_path: Path | None = None,
    checkpoint_path: Path | None = None,
    resume: bool = False,
    clock: Callable[[], str] = utc_now,
) -> Tuple[PromptTemplate, AdaptationState]:
    tool = get_tool(tool).name
    constraints = constraints or RewriteConstraints.with_additions(config.prohibited_fields)
    store = store or FrameStore(config.window, config.adapters, cache_size=config.frame_cache_size)
    B = config.batch_size_per_class
    slots = slot_plan(adaptation_set, B, config.rewrite_budget, config.attempts_per_slot)

    state: Optional[AdaptationState] = None
    if resume and checkpoint_path is not None:
        payload = load_json(checkpoint_path, default=None)
        if payload:
            state = AdaptationState.from_dict(payload)
            LOG.info("Resuming adaptation for %s at slot %d", tool, state.slot_index + 1)
    if state is None:
        state = AdaptationState(
            tool=tool,
            current_template=initial_template(tool),
            batch_size_per_class=B,
            f1_threshold=config.f1_threshold,
            rewrite_budget=config.rewrite_budget,
            attempts_per_slot=config.attempts_per_slot,
        )
    if ledger_path is not None:
        write_jsonl(ledger_path, (entry.to_dict() for entry in state.history))
    if state.completed:
        return state.current_template, state

    def record(entry: HistoryEntry) -> None:
        if entry.accepted:
            state.best_f1 = max(state.best_f1, entry.f1)
        entry = replace(entry, best_f1=state.best_f1)
        state.history.append(entry)
        if ledger_path is not None:
            append_jsonl(ledger_path, entry.to_dict())

    def checkpoint(status: str) -> None:
        if checkpoint_path is not None:
            save_json(checkpoint_path, {**state.to_dict(), "status": status})

    def evaluate(template: PromptTemplate, samples: Sequence[VideoSample]) -> TemplateScore:
        return evaluate_template(
            client,
            tool,
            template,
            samples,
            store=store,
            jobs=config.jobs,
            model_id=config.provider.model_id,
            average=config.f1_average,
        )

    if state.slot_index == 0 and not state.history:
        counts = {label: sum(1 for sample in adaptation_set if sample.label is label) for label in GroundTruth}
        LOG.info(
            "Starting Template Evolution with %d Real and %d AI-Generated Test Videos.",
            counts[GroundTruth.REAL],
            counts[GroundTruth.AI],
        )

    try:
        while state.slot_index < slots:
            slot = state.slot_index + 1
            batch = _slot_batch(adaptation_set, state.slot_index, B)
            seen = _slot_batch(adaptation_set, 0, B * slot) if config.cumulative_f1 else batch
            LOG.info("--------- Slot %d/%d for %s ---------", slot, slots, tool)

            incumbent = state.current_template
            if slot == 1:
                LOG.info("Initial Template:\n%s", render_schema(incumbent.schema, "AIAnalysisResult"))
            else:
                LOG.info("Evaluating previous best template...")
            score = evaluate(incumbent, seen)
            LOG.info("%s F1 Score: %s", "Initial" if slot == 1 else "Previous Template", _percent(score.f1))
            record(
                HistoryEntry(
                    slot, 0, incumbent.schema.fields, score.f1, True, "incumbent",
                    score.real_success, score.ai_success, incumbent.version, clock(),
                )
            )
            incumbent_f1 = score.f1

            if incumbent_f1 >= state.f1_threshold:
                LOG.info("Previous template performs well on new slot!")
            else:
                for attempt in range(1, state.attempts_per_slot + 1):
                    if state.total_rewrites >= state.rewrite_budget or incumbent_f1 >= state.f1_threshold:
                        break
                    LOG.info("Attempt %d/%d", attempt, state.attempts_per_slot)
                    try:
                        proposal = propose_rewrite(
                            client,
                            tool,
                            state,
                            constraints,
                            model_id=config.provider.model_id,
                            slot=slot,
                            attempt=attempt,
                        )
                    except RewriteParseFailed as exc:
                        state.total_rewrites += 1
                        state.failed_rewrites += 1
                        LOG.warning("%s", exc)
                        record(
                            HistoryEntry(
                                slot, attempt, (), 0.0, False, FAILED_ROLE,
                                0.0, 0.0, state.current_template.version, clock(),
                            )
                        )
                        continue
                    state.total_rewrites += 1
                    candidate = PromptTemplate(proposal, state.total_rewrites, TemplateProvenance.REWRITTEN)
                    LOG.info("Proposed Template:\n%s", render_schema(proposal, "NewAnalysisResult"))
                    score = evaluate(candidate, seen)
                    LOG.info("Combined F1 Score: %s", _percent(score.f1))
                    LOG.info("Combined Real Success Rate: %s", _percent(score.real_success))
                    LOG.info("Combined AI Success Rate: %s", _percent(score.ai_success))
                    accepted = score.f1 > incumbent_f1
                    record(
                        HistoryEntry(
                            slot, attempt, proposal.fields, score.f1, accepted, "proposal",
                            score.real_success, score.ai_success, candidate.version, clock(),
                        )
                    )
                    if accepted:
                        LOG.info("Template improved!")
                        state.current_template = candidate
                        incumbent_f1 = score.f1
                    else:
                        LOG.info("Template not improved.")

            LOG.info("Slot %d Complete", slot)
            LOG.info("Best F1 Score so far: %s", _percent(state.best_f1))
            state.slot_index += 1
            checkpoint("partial")
    except BaseException:
        checkpoint("resumable")
        raise

    state.completed = True
    checkpoint("complete")
    LOG.info("--------- Template Evolution Completed ---------")
    LOG.info("Final Template:\n%s", render_schema(state.current_template.schema, "NewAnalysisResult"))
    return state.current_template, state


def adapt_toolkit(
    client: BaseLvlm,
    tools: Sequence[str],
    adaptation_set: Sequence[VideoSample],
    config: PipelineConfig,
    *,
    store: FrameStore | None = None,
    ledger_path_for: Callable[[str], Path] | None = None,
    checkpoint_path_for: Callable[[str], Path] | None = None,
    resume: bool = False,
    clock: Callable[[], str] = utc_now,
) -> Dict[str, PromptTemplate]:
    """Adapt one template per tool, sequentially, over the same adaptation stream."""

    store = store or FrameStore(config.window, config.adapters, cache_size=config.frame_cache_size)
    templates: Dict[str, PromptTemplate] = {}
    for tool in tools:
        template, _ = run_adaptation(
            client,
            tool,
            adaptation_set,
            config,
            store=store,
            ledger_path=ledger_path_for(tool) if ledger_path_for else None,
            checkpoint_path=checkpoint_path_for(tool) if checkpoint_path_for else None,
            resume=resume,
            clock=clock,
        )
        templates[get_tool(tool).name] = template
    return templates


__all__ = [
    "AdaptationState",
    "BudgetExhausted",
    "FAILED_ROLE",
    "HistoryEntry",
    "InsufficientData",
    "PROHIBITED_STEMS",
    "RewriteConstraints",
    "RewriteParseFailed",
    "TemplateScore",
    "TemplateValidation",
    "Violation",
    "adapt_toolkit",
    "changed_fields",
    "evaluate_template",
    "evaluated",
    "format_history",
    "propose_rewrite",
    "render_rewrite_prompt",
    "run_adaptation",
    "slot_plan",
    "validate_template",
]
