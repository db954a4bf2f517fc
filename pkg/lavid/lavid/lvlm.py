"""LVLM client abstraction: chat-completions transport and a deterministic mock.

``complete()`` takes an :class:`LvlmRequest` (system text, user text, PNG images,
optional :class:`StructuredSchema`) and returns an :class:`LvlmResponse`. When a
schema is supplied the provider is asked for schema-constrained JSON, natively
if it supports it and otherwise by appending the schema to the user text and
parsing the reply leniently.
"""

from __future__ import annotations

import base64
import functools
import hashlib
import json
import keyword
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import requests
from pydantic import BaseModel, ConfigDict, ValidationError, create_model

from .common import LavidError, append_jsonl, utc_now
from .config import MockSettings, ProviderSettings
from .dataset import GroundTruth

LOG = logging.getLogger(__name__)

VERDICT_FIELD = "is_ai_generated"
CONFIDENCE_FIELD = "confidence_0_to_1"
MAX_SCHEMA_FIELDS = 5
DEFAULT_MAX_IMAGES = 16

_JSON_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)


class ProviderError(LavidError):
    """The LVLM provider failed after retries or returned an unusable reply."""


class AuthError(ProviderError):
    pass


class RateLimited(ProviderError):
    pass


class LvlmTimeout(ProviderError):
    pass


class SchemaViolation(ProviderError):
    """Structured output could not be parsed into the requested schema."""


class InvalidBehavior(LavidError, ValueError):
    """Mock behaviour has probabilities outside [0, 1]."""


class FieldKind(str, Enum):
    BOOL = "bool"
    STR = "str"


@dataclass(frozen=True)
class SchemaField:
    name: str
    kind: FieldKind

    def __str__(self) -> str:
        return f"{self.name}: {self.kind.value}"


def field_name_problems(name: str) -> List[str]:
    problems = []
    if not name.isidentifier() or keyword.iskeyword(name):
        problems.append(f"{name!r} is not a valid identifier")
    elif name.startswith("_") or hasattr(BaseModel, name):
        problems.append(f"{name!r} is reserved")
    return problems


def schema_problems(fields: Sequence[SchemaField]) -> List[str]:
    """Structural problems shared by every schema: verdict field, kinds, size, names."""

    problems: List[str] = []
    verdicts = [item for item in fields if item.name == VERDICT_FIELD]
    if len(verdicts) != 1 or verdicts[0].kind is not FieldKind.BOOL:
        problems.append(f"schema must contain exactly one '{VERDICT_FIELD}: bool' field")
    for item in fields:
        if item.name != VERDICT_FIELD and item.kind is not FieldKind.STR:
            problems.append(f"field {item.name!r} must be str")
        problems.extend(field_name_problems(item.name))
    if len(fields) > MAX_SCHEMA_FIELDS:
        problems.append(f"schema has {len(fields)} fields; at most {MAX_SCHEMA_FIELDS} allowed")
    names = [item.name for item in fields]
    if len(set(names)) != len(names):
        problems.append("field names must be unique")
    return problems


@functools.lru_cache(maxsize=256)
def _response_model(fields: Tuple[SchemaField, ...]) -> type[BaseModel]:
    definitions: Dict[str, Any] = {
        item.name: (bool if item.kind is FieldKind.BOOL else str, ...) for item in fields
    }
    return create_model(
        "StructuredResponse",
        __config__=ConfigDict(extra="forbid", protected_namespaces=()),
        **definitions,
    )


@dataclass(frozen=True)
class StructuredSchema:
    fields: Tuple[SchemaField, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple(self.fields))
        problems = schema_problems(self.fields)
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def of(cls, *pairs: Tuple[str, str | FieldKind]) -> "StructuredSchema":
        return cls(tuple(SchemaField(name, FieldKind(kind)) for name, kind in pairs))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(item.name for item in self.fields)

    def model(self) -> type[BaseModel]:
        return _response_model(self.fields)

    def json_schema(self) -> Dict[str, Any]:
        return self.model().model_json_schema()

    def to_dict(self) -> List[Dict[str, str]]:
        return [{"name": item.name, "kind": item.kind.value} for item in self.fields]

    @classmethod
    def from_dict(cls, payload: Sequence[Mapping[str, str]]) -> "StructuredSchema":
        return cls(tuple(SchemaField(str(item["name"]), FieldKind(item["kind"])) for item in payload))

    def parse(self, text: str) -> Dict[str, Any]:
        """Parse provider text into exactly this schema's fields, in schema order."""

        model = self.model()
        try:
            return model.model_validate_json(text.strip()).model_dump()
        except ValidationError:
            pass

        candidate = text
        fenced = _JSON_FENCE.search(text)
        if fenced:
            candidate = fenced.group(1)
        start, end = candidate.find("{"), candidate.rfind("}")
        if start < 0 or end <= start:
            raise SchemaViolation("No JSON object in structured response", detail={"raw_text": text[:500]})
        try:
            payload = json.loads(candidate[start : end + 1])
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"Invalid JSON in structured response: {exc}", detail={"raw_text": text[:500]}) from exc
        if not isinstance(payload, dict):
            raise SchemaViolation("Structured response is not an object", detail={"raw_text": text[:500]})

        filtered: Dict[str, Any] = {}
        for item in self.fields:
            if item.name not in payload:
                continue
            value = payload[item.name]
            if item.kind is FieldKind.STR and isinstance(value, (int, float, bool)):
                value = str(value)
            elif item.kind is FieldKind.STR and isinstance(value, list):
                value = "; ".join(str(part) for part in value)
            filtered[item.name] = value
        try:
            return model.model_validate(filtered).model_dump()
        except ValidationError as exc:
            raise SchemaViolation(
                "Structured response does not match schema",
                detail={"errors": [error["msg"] for error in exc.errors()], "raw_text": text[:500]},
            ) from exc


@dataclass(frozen=True)
class LvlmRequest:
    system_text: str
    user_text: str
    images: Tuple[bytes, ...] = ()
    response_schema: Optional[StructuredSchema] = None
    temperature: float = 0.0
    model_id: str = ""
    tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must be within [0, 1]")


@dataclass(frozen=True)
class LvlmResponse:
    raw_text: str
    parsed_fields: Optional[Mapping[str, Any]] = None
    refused: bool = False
    usage: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class ProviderReply:
    text: str
    usage: Mapping[str, int] = field(default_factory=dict)
    refused: bool = False


class RateLimiter:
    """Token bucket shared by all threads using one client."""

    def __init__(
        self,
        rate_per_second: float,
        *,
        burst: float | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.rate = rate_per_second
        self.capacity = burst if burst is not None else max(1.0, rate_per_second)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._updated = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate <= 0:
            return
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._updated) * self.rate)
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


class TranscriptWriter:
    """Append request/response records as JSONL with credentials redacted."""

    def __init__(self, path: Path, *, secrets: Sequence[str] = ()) -> None:
        self.path = path
        self._secrets = [secret for secret in secrets if secret]

    def _redact(self, text: str) -> str:
        for secret in self._secrets:
            text = text.replace(secret, "***")
        return text

    def record(self, request: LvlmRequest, user_text: str, response: LvlmResponse | None, error: str | None = None) -> None:
        entry: Dict[str, Any] = {
            "timestamp": utc_now(),
            "model_id": request.model_id,
            "tags": dict(request.tags),
            "system_text": self._redact(request.system_text),
            "user_text": self._redact(user_text),
            "images": [hashlib.sha256(image).hexdigest()[:16] for image in request.images],
            "schema": request.response_schema.to_dict() if request.response_schema else None,
            "temperature": request.temperature,
        }
        if response is not None:
            entry.update(
                {
                    "raw_text": self._redact(response.raw_text),
                    "parsed_fields": dict(response.parsed_fields) if response.parsed_fields is not None else None,
                    "refused": response.refused,
                    "usage": dict(response.usage),
                }
            )
        if error:
            entry["error"] = self._redact(error)
        append_jsonl(self.path, entry)


class BaseLvlm:
    """Shared request handling; subclasses implement ``_send``."""

    native_schema: bool = True
    max_images: int = DEFAULT_MAX_IMAGES

    def __init__(self, *, transcript: TranscriptWriter | None = None) -> None:
        self.transcript = transcript

    def _send(self, request: LvlmRequest, user_text: str, native: bool) -> ProviderReply:
        raise NotImplementedError

    def complete(self, request: LvlmRequest) -> LvlmResponse:
        if len(request.images) > self.max_images:
            raise ValueError(f"Request has {len(request.images)} images; provider limit is {self.max_images}")

        schema = request.response_schema
        native = schema is not None and self.native_schema
        user_text = request.user_text
        if schema is not None and not native:
            from .prompting import render_schema_instruction

            user_text = f"{user_text}\n\n{render_schema_instruction(schema)}"

        try:
            reply = self._send(request, user_text, native)
            response = self._finalize(request, reply)
        except ProviderError as exc:
            if self.transcript is not None:
                self.transcript.record(request, user_text, None, error=str(exc))
            raise
        if self.transcript is not None:
            self.transcript.record(request, user_text, response)
        return response

    def _finalize(self, request: LvlmRequest, reply: ProviderReply) -> LvlmResponse:
        from .prompting import is_refusal, parse_yes_no

        schema = request.response_schema
        if reply.refused:
            return LvlmResponse(raw_text=reply.text, parsed_fields=None, refused=True, usage=reply.usage)
        if schema is None:
            verdict, refused = parse_yes_no(reply.text)
            return LvlmResponse(raw_text=reply.text, refused=verdict is None and refused, usage=reply.usage)
        try:
            parsed = schema.parse(reply.text)
        except SchemaViolation:
            if is_refusal(reply.text):
                return LvlmResponse(raw_text=reply.text, parsed_fields=None, refused=True, usage=reply.usage)
            raise
        return LvlmResponse(raw_text=reply.text, parsed_fields=parsed, refused=False, usage=reply.usage)


class HttpLvlm(BaseLvlm):
    """Chat-completions client (system/user roles, images as base64 PNG data URLs)."""

    def __init__(
        self,
        settings: ProviderSettings,
        *,
        transcript: TranscriptWriter | None = None,
        session: requests.Session | None = None,
        rate_limiter: RateLimiter | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        super().__init__(transcript=transcript)
        self.settings = settings
        self.native_schema = settings.native_schema
        self.max_images = settings.max_images
        self._session = session or requests.Session()
        self._limiter = rate_limiter or RateLimiter(settings.requests_per_second)
        self._sleep = sleep

    @property
    def url(self) -> str:
        return f"{self.settings.endpoint.rstrip('/')}/chat/completions"

    def build_payload(self, request: LvlmRequest, user_text: str, native: bool) -> Dict[str, Any]:
        content: List[Dict[str, Any]] = [{"type": "text", "text": user_text}]
        for image in request.images:
            encoded = base64.b64encode(image).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encoded}"}})
        payload: Dict[str, Any] = {
            "model": request.model_id or self.settings.model_id,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": content},
            ],
        }
        if native and request.response_schema is not None:
            payload["response_format"] = {
                "type": "json_schema",
                "json_schema": {
                    "name": "structured_response",
                    "strict": True,
                    "schema": request.response_schema.json_schema(),
                },
            }
        return payload

    def _send(self, request: LvlmRequest, user_text: str, native: bool) -> ProviderReply:
        if not self.settings.api_key:
            raise AuthError("LAVID_API_KEY is not set", detail={"endpoint": self.settings.endpoint})
        headers = {"Authorization": f"Bearer {self.settings.api_key}", "Content-Type": "application/json"}
        payload = self.build_payload(request, user_text, native)

        last_error: ProviderError | None = None
        attempts = self.settings.max_retries + 1
        for attempt in range(attempts):
            self._limiter.acquire()
            retry_after = 0.0
            try:
                response = self._session.post(self.url, json=payload, headers=headers, timeout=self.settings.timeout)
            except requests.Timeout:
                last_error = LvlmTimeout(f"Request timed out after {self.settings.timeout}s", detail={"attempt": attempt + 1})
            except requests.ConnectionError as exc:
                last_error = ProviderError(f"Connection failed: {exc}", detail={"attempt": attempt + 1})
            else:
                status = response.status_code
                if status in (401, 403):
                    raise AuthError(f"Provider rejected credentials (HTTP {status})", detail={"status": status})
                if status == 429:
                    last_error = RateLimited("Provider rate limit exceeded", detail={"status": status})
                    retry_after = _retry_after(response)
                elif status >= 500:
                    last_error = ProviderError(f"Provider error (HTTP {status})", detail={"status": status})
                elif status >= 400:
                    raise ProviderError(
                        f"Provider rejected request (HTTP {status})",
                        detail={"status": status, "body": response.text[:500]},
                    )
                else:
                    return self._reply(response)
            if attempt + 1 < attempts:
                delay = max(self.settings.backoff_seconds * (2**attempt), retry_after)
                LOG.warning("%s; retrying in %.1fs (%d/%d)", last_error, delay, attempt + 1, self.settings.max_retries)
                self._sleep(delay)
        assert last_error is not None
        raise last_error

    @staticmethod
    def _reply(response: requests.Response) -> ProviderReply:
        try:
            data = response.json()
            message = data["choices"][0]["message"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError("Malformed provider response", detail={"body": response.text[:500]}) from exc
        usage = {
            key: int(value)
            for key, value in (data.get("usage") or {}).items()
            if key in {"prompt_tokens", "completion_tokens", "total_tokens"} and isinstance(value, int)
        }
        refusal = message.get("refusal")
        if refusal:
            return ProviderReply(text=str(refusal), usage=usage, refused=True)
        return ProviderReply(text=str(message.get("content") or ""), usage=usage)


def _retry_after(response: requests.Response) -> float:
    try:
        return float(response.headers.get("Retry-After", 0))
    except (TypeError, ValueError):
        return 0.0


# --------------------------------------------------------------------- mock


@dataclass(frozen=True)
class MockRule:
    """Override for requests matching (tool, truth, template field); ``*`` matches anything."""

    tool: str = "*"
    truth: str = "*"
    field: Optional[str] = None
    p_correct: Optional[float] = None
    p_correct_boost: float = 0.0
    refusal: Optional[float] = None
    confidence: Optional[Tuple[float, float]] = None

    def matches(self, tool: str, truth: Optional[GroundTruth], fields: Sequence[str]) -> bool:
        if self.tool != "*" and self.tool != tool:
            return False
        if self.truth != "*" and (truth is None or self.truth != truth.value):
            return False
        if self.field is not None and self.field not in fields:
            return False
        return True


@dataclass(frozen=True)
class MockBehavior:
    seed: int = 0
    p_correct: float = 0.8
    tool_p_correct: Mapping[str, float] = field(default_factory=dict)
    confidence: Tuple[float, float] = (1.0, 1.0)
    refusal_nonstructured: float = 0.0
    refusal_structured: float = 0.0
    rules: Tuple[MockRule, ...] = ()
    smp_scores: Mapping[str, float] = field(default_factory=dict)
    default_smp: float = 5.0
    pick_probability: float = 1.0
    truths: Mapping[str, GroundTruth] = field(default_factory=dict)
    scripted: Mapping[str, Tuple[str, ...]] = field(default_factory=dict)
    native_schema: bool = True

    @classmethod
    def from_settings(
        cls, settings: MockSettings, *, seed: int, truths: Mapping[str, GroundTruth], native_schema: bool = True
    ) -> "MockBehavior":
        return cls(
            seed=seed,
            p_correct=settings.p_correct,
            tool_p_correct=dict(settings.tool_p_correct),
            confidence=(settings.confidence_low, settings.confidence_high),
            refusal_nonstructured=settings.refusal_nonstructured,
            refusal_structured=settings.refusal_structured,
            rules=tuple(
                MockRule(
                    tool=rule.tool,
                    truth=rule.truth,
                    field=rule.field,
                    p_correct=rule.p_correct,
                    p_correct_boost=rule.p_correct_boost,
                    refusal=rule.refusal,
                )
                for rule in settings.rules
            ),
            smp_scores=dict(settings.smp_scores),
            default_smp=settings.default_smp,
            pick_probability=settings.pick_probability,
            truths=dict(truths),
            native_schema=native_schema,
        )

    def probabilities(self) -> List[Tuple[str, float]]:
        values = [
            ("p_correct", self.p_correct),
            ("confidence_low", self.confidence[0]),
            ("confidence_high", self.confidence[1]),
            ("refusal_nonstructured", self.refusal_nonstructured),
            ("refusal_structured", self.refusal_structured),
            ("pick_probability", self.pick_probability),
        ]
        values.extend((f"tool_p_correct.{tool}", value) for tool, value in self.tool_p_correct.items())
        for index, rule in enumerate(self.rules):
            if rule.p_correct is not None:
                values.append((f"rules[{index}].p_correct", rule.p_correct))
            if rule.refusal is not None:
                values.append((f"rules[{index}].refusal", rule.refusal))
            if rule.confidence is not None:
                values.extend((f"rules[{index}].confidence", bound) for bound in rule.confidence)
        return values


@dataclass(frozen=True)
class MockOutcome:
    is_ai_generated: Optional[bool]
    refused: bool
    confidence: float


_REWRITE_POOL = (
    "boundary_clarity",
    "texture_consistency",
    "object_delineation",
    "temporal_edge_coherence",
    "spatial_anomaly_detection",
    "lighting_consistency",
    "motion_smoothness",
    "color_uniformity",
    "shadow_coherence",
    "structural_plausibility",
)

_PREPARATION_REPLY = """Here is a summary of tools that can extract additional information from video frames:

1. Optical Flow Extraction
   Dense optical flow estimates per-pixel motion between consecutive frames and exposes irregular motion.

2. Sharpening Filters
   Sharpening emphasises fine detail and edges, making blending artifacts easier to see.

3. Depth Map Estimation
   Monocular depth estimation reveals inconsistent scene geometry across frames.
"""

_REFUSAL_REPLY = "I'm sorry, but I can't help with determining whether this video is AI-generated."


class MockLvlm(BaseLvlm):
    """Deterministic LVLM double driven by :class:`MockBehavior`.

    Detection outcomes depend only on the seed and the request content (purpose,
    sample id, tool, schema field names, repeat index), so concurrent runs stay
    reproducible. Scripted replies are served per purpose in call order.
    """

    def __init__(self, behavior: MockBehavior, *, transcript: TranscriptWriter | None = None) -> None:
        super().__init__(transcript=transcript)
        self.behavior = behavior
        self.native_schema = behavior.native_schema
        self.call_history: List[Dict[str, Any]] = []
        self._counters: Dict[str, int] = {}
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return len(self.call_history)

    def _rng(self, *parts: object) -> np.random.Generator:
        key = "|".join([str(self.behavior.seed), *(str(part) for part in parts)])
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def resolve(self, tool: str, truth: Optional[GroundTruth], fields: Sequence[str], structured: bool) -> Tuple[float, Tuple[float, float], float]:
        behavior = self.behavior
        p_correct = behavior.tool_p_correct.get(tool, behavior.p_correct)
        confidence = behavior.confidence
        refusal = behavior.refusal_structured if structured else behavior.refusal_nonstructured
        for rule in behavior.rules:
            if not rule.matches(tool, truth, fields):
                continue
            if rule.p_correct is not None:
                p_correct = rule.p_correct
            p_correct += rule.p_correct_boost
            if rule.refusal is not None:
                refusal = rule.refusal
            if rule.confidence is not None:
                confidence = rule.confidence
        return min(max(p_correct, 0.0), 1.0), confidence, refusal

    def outcome(
        self,
        sample_id: str,
        tool: str,
        fields: Sequence[str] = (),
        *,
        structured: bool = True,
        repeat: int = 0,
    ) -> MockOutcome:
        """The verdict this mock gives for a detection request; pure in its arguments."""

        truth = self.behavior.truths.get(sample_id)
        p_correct, (low, high), refusal = self.resolve(tool, truth, fields, structured)
        rng = self._rng("detect", sample_id, tool, ",".join(fields), "structured" if structured else "free", repeat)
        u_refuse, u_correct, u_confidence = rng.random(3)
        if u_refuse < refusal:
            return MockOutcome(is_ai_generated=None, refused=True, confidence=0.0)
        if truth is None:
            predicted_ai = bool(u_correct < 0.5)
        else:
            correct = bool(u_correct < p_correct)
            predicted_ai = (truth is GroundTruth.AI) == correct
        return MockOutcome(is_ai_generated=predicted_ai, refused=False, confidence=float(low + (high - low) * u_confidence))

    def _next_index(self, purpose: str) -> int:
        with self._lock:
            index = self._counters.get(purpose, 0)
            self._counters[purpose] = index + 1
            return index

    def _send(self, request: LvlmRequest, user_text: str, native: bool) -> ProviderReply:
        tags = dict(request.tags)
        purpose = tags.get("purpose", "detect")
        index = self._next_index(purpose)
        with self._lock:
            self.call_history.append({"purpose": purpose, "tags": tags, "user_text": user_text, "native": native})

        scripted = self.behavior.scripted.get(purpose)
        if scripted:
            text = scripted[index % len(scripted)]
        elif purpose == "smp":
            tool = tags.get("tool", "")
            text = f"Score: {self.behavior.smp_scores.get(tool, self.behavior.default_smp):g}. The feature is interpretable."
        elif purpose == "prepare":
            text = _PREPARATION_REPLY
        elif purpose == "pick":
            text = self._pick_reply(tags)
        elif purpose == "rewrite":
            text = self._rewrite_reply(tags)
        else:
            text = self._detect_reply(request, tags, native)
        usage = {"prompt_tokens": len(user_text.split()), "completion_tokens": len(text.split())}
        usage["total_tokens"] = usage["prompt_tokens"] + usage["completion_tokens"]
        return ProviderReply(text=text, usage=usage)

    def _detect_reply(self, request: LvlmRequest, tags: Mapping[str, str], native: bool) -> str:
        schema = request.response_schema
        fields = schema.names if schema is not None else ()
        result = self.outcome(
            tags.get("sample_id", ""),
            tags.get("tool", "rgb"),
            fields,
            structured=schema is not None,
            repeat=int(tags.get("repeat", 0)),
        )
        if result.refused:
            return _REFUSAL_REPLY
        if schema is None:
            if result.is_ai_generated:
                return "Yes. The frames show synthetic artifacts."
            return "No."
        payload: Dict[str, Any] = {}
        for item in schema.fields:
            if item.kind is FieldKind.BOOL:
                payload[item.name] = result.is_ai_generated
            elif item.name == CONFIDENCE_FIELD:
                payload[item.name] = f"{result.confidence:.2f}"
            else:
                payload[item.name] = f"Observed {item.name.replace('_', ' ')}."
        body = json.dumps(payload)
        return body if native else f"```json\n{body}\n```"

    def _pick_reply(self, tags: Mapping[str, str]) -> str:
        toolkit = [name for name in tags.get("toolkit", "").split(",") if name]
        if not toolkit:
            return "None of the tools are needed."
        sample_id = tags.get("sample_id", "")
        chosen = [name for name in toolkit if self._rng("pick", sample_id, name).random() < self.behavior.pick_probability]
        if not chosen:
            chosen = [toolkit[int(self._rng("pick-fallback", sample_id).integers(len(toolkit)))]]
        return "Selected tools: " + ", ".join(chosen)

    def _rewrite_reply(self, tags: Mapping[str, str]) -> str:
        """Swap one analysis field for the next untried pool entry.

        The walk through the pool is a seeded permutation per tool, offset by the
        rewrite and retry counters carried in the request tags, so a resumed run
        replays the same proposals and every pool entry comes up within one lap.
        """

        tool = tags.get("tool", "")
        current = [name for name in tags.get("current_fields", "").split(",") if name]
        analysis = [name for name in current if name != VERDICT_FIELD]
        order = [_REWRITE_POOL[i] for i in self._rng("rewrite-order", tool).permutation(len(_REWRITE_POOL))]
        start = int(tags.get("rewrite", 0)) + int(tags.get("retry", 0))
        rotated = order[start % len(order) :] + order[: start % len(order)]
        fresh = next((name for name in rotated if name not in current), None)
        if fresh is not None:
            if analysis:
                rng = self._rng("rewrite", tool, ",".join(current), tags.get("slot", ""), tags.get("attempt", ""), tags.get("retry", ""))
                analysis[int(rng.integers(len(analysis)))] = fresh
            else:
                analysis.append(fresh)
        lines = ["```python", "class NewAnalysisResult(BaseModel):", f"    {VERDICT_FIELD}: bool"]
        lines.extend(f"    {name}: str" for name in analysis[: MAX_SCHEMA_FIELDS - 1])
        lines.append("```")
        return "\n".join(lines)


def mock_configure(behavior: MockBehavior, *, transcript: TranscriptWriter | None = None) -> MockLvlm:
    bad = [(name, value) for name, value in behavior.probabilities() if not 0.0 <= value <= 1.0]
    if bad:
        raise InvalidBehavior(
            "Mock probabilities must lie within [0, 1]", detail={"invalid": {name: value for name, value in bad}}
        )
    if behavior.confidence[0] > behavior.confidence[1]:
        raise InvalidBehavior("Mock confidence range is inverted", detail={"confidence": list(behavior.confidence)})
    return MockLvlm(behavior, transcript=transcript)


__all__ = [
    "AuthError",
    "BaseLvlm",
    "CONFIDENCE_FIELD",
    "FieldKind",
    "HttpLvlm",
    "InvalidBehavior",
    "LvlmRequest",
    "LvlmResponse",
    "LvlmTimeout",
    "MockBehavior",
    "MockLvlm",
    "MockOutcome",
    "MockRule",
    "ProviderError",
    "ProviderReply",
    "RateLimited",
    "RateLimiter",
    "SchemaField",
    "SchemaViolation",
    "StructuredSchema",
    "TranscriptWriter",
    "VERDICT_FIELD",
    "field_name_problems",
    "mock_configure",
    "schema_problems",
]
