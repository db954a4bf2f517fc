"""Prompt text and response parsing.

Every ``render_*`` function is pure: the same arguments always produce the same
bytes. Parsers are total and never raise except :class:`ScoreMissing`.
"""

from __future__ import annotations

import functools
import importlib.resources
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

from .common import LavidError
from .ektools import REGISTRY, EKTool, get_tool
from .lvlm import CONFIDENCE_FIELD, VERDICT_FIELD, FieldKind, SchemaField, StructuredSchema

LOG = logging.getLogger(__name__)

SYSTEM_TEXT = "You are an AI video analyzer. Determine if the video is AI-generated or not?"
ANSWER_FORMAT = "Must return with 1) Yes or No only; 2) if Yes, explain the reason."
DETECTION_QUESTION = "Do you think this video is generated by AI or not?"
STRUCTURED_INSTRUCTION = "Analyze the frames and fill in every field of the structured response."
RESPONSE_CLASS_NAME = "Structured_Response"

_active_patterns_path: Optional[Path] = None


class ScoreMissing(LavidError):
    """No number could be read from a self-assessment reply."""


class DetectionMode(str, Enum):
    STRUCTURED = "structured"
    NON_STRUCTURED = "non_structured"


class TemplateProvenance(str, Enum):
    INITIAL = "initial"
    REWRITTEN = "rewritten"


class BaselinePrompt(str, Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"

    @property
    def text(self) -> str:
        return _BASELINE_TEXTS[self]


_BASELINE_TEXTS = {
    BaselinePrompt.P1: "Do you think this video is generated by AI or not?",
    BaselinePrompt.P2: "Tell me if there are synthetic artifacts in the video or not?",
    BaselinePrompt.P3: "Do you think this video was created with the help of AI?",
}


@dataclass(frozen=True)
class PromptTemplate:
    schema: StructuredSchema
    version: int = 0
    provenance: TemplateProvenance = TemplateProvenance.INITIAL

    @property
    def fields(self) -> Tuple[str, ...]:
        return self.schema.names

    def to_dict(self) -> Dict[str, Any]:
        return {"schema": self.schema.to_dict(), "version": self.version, "provenance": self.provenance.value}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "PromptTemplate":
        return cls(
            schema=StructuredSchema.from_dict(payload["schema"]),
            version=int(payload.get("version", 0)),
            provenance=TemplateProvenance(payload.get("provenance", TemplateProvenance.INITIAL.value)),
        )


class RenderedPrompt(NamedTuple):
    system_text: str
    user_text: str
    schema: Optional[StructuredSchema]


def initial_schema(tool: str | EKTool) -> StructuredSchema:
    name = get_tool(tool).name
    pairs: List[Tuple[str, str]] = [(VERDICT_FIELD, "bool"), ("raw_frame_analysis", "str")]
    if name != "rgb":
        pairs.append((f"{name}_analysis", "str"))
    pairs.append(("explanation", "str"))
    return StructuredSchema.of(*pairs)


def initial_template(tool: str | EKTool) -> PromptTemplate:
    return PromptTemplate(initial_schema(tool), version=0, provenance=TemplateProvenance.INITIAL)


def selection_schema(tool: str | EKTool, template: PromptTemplate | None = None) -> StructuredSchema:
    """Detection schema plus the confidence field used only while scoring tools."""

    base = template.schema if template is not None else initial_schema(tool)
    if CONFIDENCE_FIELD in base.names:
        return base
    return StructuredSchema(base.fields + (SchemaField(CONFIDENCE_FIELD, FieldKind.STR),))


def frames_sentence(count: int) -> str:
    return f"These {count} images are consecutive frames of a video."


def ek_sentence(tool: str | EKTool, count: int) -> str:
    resolved = get_tool(tool)
    return f"The following {count} images are the {resolved.label} of the same frames. {resolved.description}"


def render_detection_prompt(
    tool: str | EKTool,
    mode: DetectionMode | str,
    template: PromptTemplate | None = None,
    *,
    frame_count: int = 8,
    ek_count: int | None = None,
) -> RenderedPrompt:
    resolved = get_tool(tool)
    mode = DetectionMode(mode)
    if mode is DetectionMode.STRUCTURED and template is None:
        raise ValueError("structured detection requires a prompt template")

    parts = [frames_sentence(frame_count)]
    if resolved.name != "rgb":
        parts.append(ek_sentence(resolved, frame_count if ek_count is None else ek_count))
    if mode is DetectionMode.STRUCTURED:
        parts.append(STRUCTURED_INSTRUCTION)
        return RenderedPrompt(SYSTEM_TEXT, " ".join(parts), template.schema)
    parts.append(f"{DETECTION_QUESTION} {ANSWER_FORMAT}")
    return RenderedPrompt(SYSTEM_TEXT, " ".join(parts), None)


BASELINE_SCHEMA = StructuredSchema.of((VERDICT_FIELD, "bool"), ("explanation", "str"))


def render_baseline_prompt(
    prompt: BaselinePrompt | str,
    mode: DetectionMode | str = DetectionMode.NON_STRUCTURED,
    *,
    frame_count: int = 8,
) -> RenderedPrompt:
    """Zero-shot prompt on raw frames; the prompt text is inserted unchanged."""

    text = BaselinePrompt(prompt).text
    if DetectionMode(mode) is DetectionMode.STRUCTURED:
        return RenderedPrompt(SYSTEM_TEXT, f"{frames_sentence(frame_count)} {text}", BASELINE_SCHEMA)
    return RenderedPrompt(SYSTEM_TEXT, f"{frames_sentence(frame_count)} {text}. {ANSWER_FORMAT}", None)


def render_smp_prompt(tool: str | EKTool, fewshot_results: str) -> str:
    name = get_tool(tool).display_name
    return (
        f"- Prompts: \"You are given an AI-generated video detection task. Assess the additional feature: {name} "
        "that could support your determination.\"\n"
        f"- Analysis History: {fewshot_results}\n"
        "\n"
        "Evaluate your own analysis considering these factors:\n"
        "* Alignment with knowledge base\n"
        "* Interpretability and transparency\n"
        "* Robustness across scenarios\n"
        "\n"
        "- Scoring: Provide a score from 0 to 10 based on your self-assessment. "
        "Higher score indicates an effective feature."
    )


def render_preparation_prompt() -> str:
    return (
        "This is an AI-generated video detection task based on large vision-language models (LVLMs). "
        "Besides using raw frames from the video, are there any external tools that could help extract "
        "additional video information? These tools will used to facilitate LVLMs-based detection. "
        "Specifically, I'm looking for methods or tools that can generate features from the video like "
        "optical flow and sharpening. Please summarize the tool list for me."
    )


def render_tool_choice_prompt(toolkit: Sequence[str | EKTool], *, frame_count: int = 8) -> str:
    lines = [
        frames_sentence(frame_count),
        "To decide whether this video is AI-generated you may inspect it with the following tools:",
    ]
    for tool in toolkit:
        resolved = get_tool(tool)
        lines.append(f"- {resolved.name}: {resolved.description}")
    lines.append(
        "Based on the content of this video, choose the tools that would help most. "
        "Reply with the chosen tool names separated by commas."
    )
    return "\n".join(lines)


def render_schema(schema: StructuredSchema, class_name: str = RESPONSE_CLASS_NAME) -> str:
    lines = [f"class {class_name}(BaseModel):"]
    lines.extend(f"    {item.name}: {item.kind.value}" for item in schema.fields)
    return "\n".join(lines)


def render_schema_instruction(schema: StructuredSchema) -> str:
    return (
        "Respond with a single JSON object that matches this Pydantic class and nothing else:\n"
        f"{render_schema(schema)}\n"
        "Use the field names exactly as written; booleans must be true or false and all other values strings."
    )


# ------------------------------------------------------------------ parsing

_CLASS_LINE = re.compile(r"^\s*class\s+\w+\s*(\(.*\))?\s*:")
_FIELD_LINE = re.compile(r"^\s+([A-Za-z_]\w*)\s*:\s*([A-Za-z_][\w\[\], ]*?)\s*(=.*)?(#.*)?$")
_KINDS = {"bool": FieldKind.BOOL, "str": FieldKind.STR}


def parse_class_fields(text: str) -> Optional[Tuple[SchemaField, ...]]:
    """Read ``name: kind`` lines from the first class body in ``text``.

    Returns None when no class body is found or a field uses a kind other than
    ``bool``/``str``. Structural validity is left to the caller.
    """

    fields: List[SchemaField] = []
    inside = False
    for line in text.splitlines():
        if _CLASS_LINE.match(line):
            if inside and fields:
                break
            inside = True
            continue
        if not inside:
            continue
        stripped = line.strip()
        if stripped.startswith("```") and fields:
            break
        if not stripped or stripped.startswith(("#", '"""', "'''")):
            continue
        match = _FIELD_LINE.match(line)
        if not match:
            if fields and not line.startswith((" ", "\t")):
                break
            continue
        kind = _KINDS.get(match.group(2).strip())
        if kind is None:
            return None
        fields.append(SchemaField(match.group(1), kind))
    return tuple(fields) if fields else None


_MARKDOWN = re.compile(r"[*_#>`~\[\]()\"]")
_TOKEN = re.compile(r"[a-z']+|\d+")
_SKIPPED_LEADERS = {"answer", "response", "verdict", "final", "result", "1", "a"}


def set_refusal_patterns(path: Path | None) -> None:
    """Use ``path`` instead of the packaged pattern list for refusal detection."""

    global _active_patterns_path
    _active_patterns_path = Path(path) if path is not None else None


@functools.lru_cache(maxsize=8)
def load_refusal_patterns(path: Path | None = None) -> Tuple[re.Pattern[str], ...]:
    if path is None:
        resource = importlib.resources.files("lavid.resources").joinpath("refusal_patterns.txt")
        text = resource.read_text(encoding="utf-8")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise LavidError(f"Unable to read refusal patterns from {path}: {exc}", detail={"path": str(path)}) from exc
    patterns = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        patterns.append(re.compile(line, re.IGNORECASE))
    return tuple(patterns)


def is_refusal(text: str, patterns: Sequence[re.Pattern[str]] | None = None) -> bool:
    if patterns is None:
        patterns = load_refusal_patterns(_active_patterns_path)
    normalized = text.replace("’", "'")
    return any(pattern.search(normalized) for pattern in patterns)


def parse_yes_no(raw_text: str) -> Tuple[Optional[bool], bool]:
    """Return ``(verdict, refused)``; a verdict of True means AI-generated."""

    tokens = _TOKEN.findall(_MARKDOWN.sub(" ", raw_text.lower()))
    while tokens and tokens[0] in _SKIPPED_LEADERS:
        tokens.pop(0)
    if tokens and tokens[0] == "yes":
        return True, False
    if tokens and tokens[0] == "no":
        return False, False
    return None, is_refusal(raw_text)


_NUMBER = re.compile(r"(?<![\w.])-?\d+(?:\.\d+)?")


def parse_smp_score(raw_text: str) -> float:
    numbers = [float(match) for match in _NUMBER.findall(raw_text)]
    if not numbers:
        raise ScoreMissing("No score found in self-assessment", detail={"raw_text": raw_text[:200]})
    for number in numbers:
        if 0.0 <= number <= 10.0:
            return number
    return min(max(numbers[0], 0.0), 10.0)


def parse_confidence(value: Any, default: float = 1.0) -> float:
    """Confidence from a structured field: [0, 1] as-is, percentages scaled, otherwise ``default``."""

    if isinstance(value, bool) or value is None:
        return default
    if isinstance(value, str):
        match = _NUMBER.search(value)
        if match is None:
            return default
        number = float(match.group())
        if "%" in value:
            number /= 100.0
    else:
        try:
            number = float(value)
        except (TypeError, ValueError):
            return default
    if 0.0 <= number <= 1.0:
        return number
    if 1.0 < number <= 100.0:
        return number / 100.0
    return default


def _alias_pattern(alias: str) -> re.Pattern[str]:
    words = [re.escape(part) for part in re.split(r"[\s_]+", alias.strip()) if part]
    return re.compile(r"\b" + r"[\s_-]+".join(words), re.IGNORECASE)


_ALIASES: Tuple[Tuple[str, re.Pattern[str]], ...] = tuple(
    (tool.name, _alias_pattern(alias)) for tool in REGISTRY.values() for alias in (tool.name, *tool.aliases)
)


def match_tool_names(text: str, allowed: Sequence[str] | None = None) -> List[str]:
    """Canonical tool names mentioned in ``text``, in order of first mention."""

    found: Dict[str, int] = {}
    for name, pattern in _ALIASES:
        if allowed is not None and name not in allowed:
            continue
        match = pattern.search(text)
        if match and (name not in found or match.start() < found[name]):
            found[name] = match.start()
    return [name for name, _ in sorted(found.items(), key=lambda item: item[1])]


_HEADER = re.compile(r"^\s*(?:#{1,6}\s*|\*\*)?(?:\d+[.)]\s*|[-*]\s+\*\*)(.+?)(?:\*\*)?\s*:?\s*$")


def extract_tool_candidates(raw_text: str) -> List[str]:
    """Canonical tools named in numbered or bulleted headers of a preparation reply."""

    names: List[str] = []
    for line in raw_text.splitlines():
        match = _HEADER.match(line)
        if not match:
            continue
        for name in match_tool_names(match.group(1)):
            if name != "rgb" and name not in names:
                names.append(name)
    return names


def parse_tool_choice(raw_text: str, toolkit: Sequence[str]) -> List[str]:
    chosen = match_tool_names(raw_text)
    return [name for name in toolkit if name in chosen]


__all__ = [
    "ANSWER_FORMAT",
    "BASELINE_SCHEMA",
    "BaselinePrompt",
    "DetectionMode",
    "PromptTemplate",
    "RenderedPrompt",
    "SYSTEM_TEXT",
    "ScoreMissing",
    "TemplateProvenance",
    "extract_tool_candidates",
    "initial_schema",
    "initial_template",
    "is_refusal",
    "load_refusal_patterns",
    "match_tool_names",
    "parse_class_fields",
    "parse_confidence",
    "parse_smp_score",
    "parse_tool_choice",
    "parse_yes_no",
    "render_baseline_prompt",
    "render_detection_prompt",
    "render_preparation_prompt",
    "render_schema",
    "render_schema_instruction",
    "render_smp_prompt",
    "render_tool_choice_prompt",
    "selection_schema",
    "set_refusal_patterns",
]
