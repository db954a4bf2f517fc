import base64
import hashlib
import json
from pathlib import Path

import pytest
import requests

from lavid.common import read_jsonl
from lavid.config import ProviderSettings
from lavid.dataset import GroundTruth
from lavid.lvlm import (
    CONFIDENCE_FIELD,
    VERDICT_FIELD,
    AuthError,
    HttpLvlm,
    InvalidBehavior,
    LvlmRequest,
    LvlmTimeout,
    MockBehavior,
    MockRule,
    ProviderError,
    RateLimited,
    RateLimiter,
    SchemaViolation,
    StructuredSchema,
    TranscriptWriter,
    mock_configure,
)

SCHEMA = StructuredSchema.of((VERDICT_FIELD, "bool"), ("edge_analysis", "str"), ("explanation", "str"))


class FakeResponse:
    def __init__(self, status_code=200, data=None, headers=None, text=""):
        self.status_code = status_code
        self._data = data
        self.headers = headers or {}
        self.text = text or json.dumps(data or {})

    def json(self):
        if self._data is None:
            raise ValueError("no json")
        return self._data


class FakeSession:
    def __init__(self, *outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def post(self, url, *, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def _chat(content=None, refusal=None, usage=None):
    message = {"role": "assistant", "content": content}
    if refusal is not None:
        message["refusal"] = refusal
    return FakeResponse(data={"choices": [{"message": message}], "usage": usage or {"prompt_tokens": 10, "completion_tokens": 3, "total_tokens": 13}})


def _client(session, sleeps=None, **settings):
    options = {"api_key": "sk-test", "endpoint": "https://llm.example/v1", "model_id": "vision-1"}
    options.update(settings)
    return HttpLvlm(
        ProviderSettings(**options),
        session=session,
        rate_limiter=RateLimiter(0),
        sleep=(sleeps.append if sleeps is not None else (lambda _: None)),
    )


def _detect_request(sample_id="s1", tool="edge", schema=None, repeat=0):
    return LvlmRequest(
        system_text="system",
        user_text="These 8 images are consecutive frames of a video.",
        response_schema=schema,
        tags={"purpose": "detect", "sample_id": sample_id, "tool": tool, "repeat": str(repeat)},
    )


# ------------------------------------------------------------------ schema


def test_schema_requires_verdict_field():
    with pytest.raises(ValueError):
        StructuredSchema.of(("explanation", "str"))


def test_schema_rejects_too_many_fields_and_bad_names():
    with pytest.raises(ValueError):
        StructuredSchema.of((VERDICT_FIELD, "bool"), *[(f"field_{index}", "str") for index in range(5)])
    with pytest.raises(ValueError):
        StructuredSchema.of((VERDICT_FIELD, "bool"), ("class", "str"))
    with pytest.raises(ValueError):
        StructuredSchema.of((VERDICT_FIELD, "bool"), ("explanation", "bool"))


def test_schema_json_schema_is_closed():
    schema = SCHEMA.json_schema()

    assert list(schema["properties"]) == [VERDICT_FIELD, "edge_analysis", "explanation"]
    assert schema["properties"][VERDICT_FIELD]["type"] == "boolean"
    assert schema["additionalProperties"] is False
    assert sorted(schema["required"]) == sorted(SCHEMA.names)


def test_schema_parse_strict_json():
    parsed = SCHEMA.parse('{"is_ai_generated": false, "edge_analysis": "clean", "explanation": "natural"}')

    assert parsed == {VERDICT_FIELD: False, "edge_analysis": "clean", "explanation": "natural"}


def test_schema_parse_recovers_fenced_json_with_noise():
    text = 'Here you go:\n```json\n{"is_ai_generated": true, "edge_analysis": ["jagged", "halo"], "explanation": 3, "extra": 1}\n```'

    parsed = SCHEMA.parse(text)

    assert parsed == {VERDICT_FIELD: True, "edge_analysis": "jagged; halo", "explanation": "3"}


@pytest.mark.parametrize("text", ["No JSON here.", '{"is_ai_generated": "perhaps"}', "{not json}"])
def test_schema_parse_failures_keep_the_raw_text(text):
    with pytest.raises(SchemaViolation) as excinfo:
        SCHEMA.parse(text)

    assert excinfo.value.detail["raw_text"] == text


# ------------------------------------------------------------------ http


def test_http_payload_uses_native_json_schema_and_data_urls():
    session = FakeSession(_chat('{"is_ai_generated": true, "edge_analysis": "halo", "explanation": "warped"}'))
    client = _client(session)
    request = LvlmRequest("system", "question", images=(b"png-bytes",), response_schema=SCHEMA)

    response = client.complete(request)

    call = session.calls[0]
    assert call["url"] == "https://llm.example/v1/chat/completions"
    assert call["headers"]["Authorization"] == "Bearer sk-test"
    payload = call["json"]
    assert payload["model"] == "vision-1"
    assert payload["temperature"] == 0.0
    assert payload["messages"][0] == {"role": "system", "content": "system"}
    content = payload["messages"][1]["content"]
    assert content[0] == {"type": "text", "text": "question"}
    assert content[1]["image_url"]["url"] == "data:image/png;base64," + base64.b64encode(b"png-bytes").decode()
    assert payload["response_format"]["json_schema"]["strict"] is True
    assert response.parsed_fields[VERDICT_FIELD] is True
    assert response.usage["total_tokens"] == 13


def test_http_without_native_schema_appends_instruction():
    session = FakeSession(_chat('```json\n{"is_ai_generated": false, "edge_analysis": "ok", "explanation": "ok"}\n```'))
    client = _client(session, native_schema=False)

    response = client.complete(LvlmRequest("system", "question", response_schema=SCHEMA))

    payload = session.calls[0]["json"]
    assert "response_format" not in payload
    text = payload["messages"][1]["content"][0]["text"]
    assert text.startswith("question\n\nRespond with a single JSON object")
    assert "    edge_analysis: str" in text
    assert response.parsed_fields[VERDICT_FIELD] is False


def test_http_retries_rate_limits_honouring_retry_after():
    sleeps = []
    session = FakeSession(FakeResponse(429, headers={"Retry-After": "2"}), _chat("No."))
    client = _client(session, sleeps)

    response = client.complete(LvlmRequest("system", "question"))

    assert response.raw_text == "No."
    assert sleeps == [2.0]


def test_http_server_errors_back_off_then_fail():
    sleeps = []
    session = FakeSession(*[FakeResponse(503, text="busy") for _ in range(4)])
    client = _client(session, sleeps, max_retries=3, backoff_seconds=1.0)

    with pytest.raises(ProviderError) as excinfo:
        client.complete(LvlmRequest("system", "question"))

    assert excinfo.value.detail["status"] == 503
    assert sleeps == [1.0, 2.0, 4.0]
    assert len(session.calls) == 4


def test_http_rate_limit_exhaustion_raises_rate_limited():
    session = FakeSession(*[FakeResponse(429) for _ in range(2)])

    with pytest.raises(RateLimited):
        _client(session, max_retries=1).complete(LvlmRequest("system", "question"))


def test_http_timeouts_surface_as_lvlm_timeout():
    session = FakeSession(requests.Timeout(), requests.Timeout())

    with pytest.raises(LvlmTimeout):
        _client(session, max_retries=1).complete(LvlmRequest("system", "question"))


@pytest.mark.parametrize("status", [401, 403])
def test_http_auth_failures_are_not_retried(status):
    session = FakeSession(FakeResponse(status))

    with pytest.raises(AuthError):
        _client(session).complete(LvlmRequest("system", "question"))

    assert len(session.calls) == 1


def test_http_client_errors_are_not_retried():
    session = FakeSession(FakeResponse(400, text="bad image"))

    with pytest.raises(ProviderError) as excinfo:
        _client(session).complete(LvlmRequest("system", "question"))

    assert excinfo.value.detail == {"status": 400, "body": "bad image"}


def test_http_missing_key_is_an_auth_error():
    session = FakeSession()

    with pytest.raises(AuthError):
        _client(session, api_key=None).complete(LvlmRequest("system", "question"))

    assert session.calls == []


def test_http_provider_refusal_is_flagged():
    session = FakeSession(_chat(None, refusal="I can't help with that."))

    response = _client(session).complete(LvlmRequest("system", "question", response_schema=SCHEMA))

    assert response.refused
    assert response.parsed_fields is None


def test_http_refusal_text_instead_of_json_counts_as_refusal():
    session = FakeSession(_chat("I'm sorry, but I can't determine that from these frames."))

    response = _client(session).complete(LvlmRequest("system", "question", response_schema=SCHEMA))

    assert response.refused


def test_image_limit_is_enforced():
    client = _client(FakeSession(), max_images=2)

    with pytest.raises(ValueError):
        client.complete(LvlmRequest("system", "question", images=(b"a", b"b", b"c")))


def test_transcript_redacts_credentials(tmp_path: Path):
    session = FakeSession(_chat("Yes, the edges shimmer."))
    client = _client(session)
    client.transcript = TranscriptWriter(tmp_path / "transcript.jsonl", secrets=["sk-test"])

    client.complete(LvlmRequest("system", "token sk-test should not leak", images=(b"png",), tags={"purpose": "detect"}))

    (entry,) = read_jsonl(tmp_path / "transcript.jsonl")
    assert entry["user_text"] == "token *** should not leak"
    assert entry["images"] == [hashlib.sha256(b"png").hexdigest()[:16]]
    assert entry["raw_text"] == "Yes, the edges shimmer."
    assert entry["tags"] == {"purpose": "detect"}


def test_rate_limiter_waits_for_tokens():
    now = [0.0]
    sleeps = []

    def sleep(seconds):
        sleeps.append(seconds)
        now[0] += seconds

    limiter = RateLimiter(2.0, burst=1, clock=lambda: now[0], sleep=sleep)
    limiter.acquire()
    limiter.acquire()

    assert sleeps == [pytest.approx(0.5)]


def test_request_temperature_is_bounded():
    with pytest.raises(ValueError):
        LvlmRequest("system", "question", temperature=1.5)


# ------------------------------------------------------------------ mock


def _truths(count):
    return {f"v{index}": (GroundTruth.AI if index % 2 else GroundTruth.REAL) for index in range(count)}


def test_mock_is_deterministic_per_seed():
    truths = _truths(200)
    first = mock_configure(MockBehavior(seed=3, p_correct=0.6, truths=truths))
    second = mock_configure(MockBehavior(seed=3, p_correct=0.6, truths=truths))
    other = mock_configure(MockBehavior(seed=4, p_correct=0.6, truths=truths))

    outcomes = [first.outcome(sample, "edge", SCHEMA.names) for sample in truths]

    assert outcomes == [second.outcome(sample, "edge", SCHEMA.names) for sample in truths]
    assert outcomes != [other.outcome(sample, "edge", SCHEMA.names) for sample in truths]


def test_mock_accuracy_tracks_configured_probability():
    truths = _truths(5000)
    mock = mock_configure(MockBehavior(seed=11, p_correct=0.7, tool_p_correct={"edge": 0.95}, truths=truths))

    def accuracy(tool):
        hits = 0
        for sample, truth in truths.items():
            outcome = mock.outcome(sample, tool, SCHEMA.names)
            hits += outcome.is_ai_generated == (truth is GroundTruth.AI)
        return hits / len(truths)

    assert accuracy("saturation") == pytest.approx(0.7, abs=0.03)
    assert accuracy("edge") == pytest.approx(0.95, abs=0.02)


def test_mock_rules_boost_templates_containing_a_field():
    truths = _truths(4000)
    mock = mock_configure(
        MockBehavior(seed=5, p_correct=0.6, truths=truths, rules=(MockRule(tool="edge", field="boundary_clarity", p_correct_boost=0.35),))
    )
    boosted = ("is_ai_generated", "boundary_clarity")

    def accuracy(fields):
        return sum(
            mock.outcome(sample, "edge", fields).is_ai_generated == (truth is GroundTruth.AI) for sample, truth in truths.items()
        ) / len(truths)

    assert mock.resolve("edge", GroundTruth.AI, boosted, True)[0] == pytest.approx(0.95)
    assert mock.resolve("sharpen", GroundTruth.AI, boosted, True)[0] == pytest.approx(0.6)
    assert accuracy(boosted) == pytest.approx(0.95, abs=0.02)
    assert accuracy(SCHEMA.names) == pytest.approx(0.6, abs=0.03)


def test_mock_refusal_rates_by_mode():
    truths = _truths(600)
    mock = mock_configure(MockBehavior(seed=42, truths=truths, refusal_nonstructured=0.1, refusal_structured=0.0))

    free = [mock.complete(_detect_request(sample)) for sample in truths]
    structured = [mock.complete(_detect_request(sample, schema=SCHEMA)) for sample in truths]

    assert sum(response.refused for response in free) / len(free) == pytest.approx(0.1, abs=0.03)
    assert not any(response.refused for response in structured)
    assert all(response.parsed_fields is not None for response in structured)


def test_mock_structured_replies_follow_the_schema():
    schema = StructuredSchema.of((VERDICT_FIELD, "bool"), ("edge_analysis", "str"), (CONFIDENCE_FIELD, "str"))
    mock = mock_configure(MockBehavior(seed=1, p_correct=1.0, confidence=(0.4, 0.6), truths={"a": GroundTruth.AI}))

    response = mock.complete(_detect_request("a", schema=schema))

    assert response.parsed_fields[VERDICT_FIELD] is True
    assert 0.4 <= float(response.parsed_fields[CONFIDENCE_FIELD]) <= 0.6
    assert response.parsed_fields["edge_analysis"] == "Observed edge analysis."


def test_mock_without_native_schema_replies_in_a_fence():
    mock = mock_configure(MockBehavior(seed=1, p_correct=1.0, truths={"a": GroundTruth.REAL}, native_schema=False))

    response = mock.complete(_detect_request("a", schema=SCHEMA))

    assert response.raw_text.startswith("```json")
    assert response.parsed_fields[VERDICT_FIELD] is False
    assert mock.call_history[0]["native"] is False
    assert "Respond with a single JSON object" in mock.call_history[0]["user_text"]


def test_mock_repeats_draw_independently():
    truths = _truths(400)
    mock = mock_configure(MockBehavior(seed=9, p_correct=0.5, truths=truths))

    first = [mock.outcome(sample, "edge", repeat=0).is_ai_generated for sample in truths]
    second = [mock.outcome(sample, "edge", repeat=1).is_ai_generated for sample in truths]

    assert first != second


def test_mock_scripted_replies_cycle_per_purpose():
    mock = mock_configure(MockBehavior(scripted={"smp": ("Score: 9", "Score: 2")}))
    request = LvlmRequest("system", "assess", tags={"purpose": "smp", "tool": "edge"})

    texts = [mock.complete(request).raw_text for _ in range(3)]

    assert texts == ["Score: 9", "Score: 2", "Score: 9"]
    assert mock.call_count == 3


def test_mock_self_assessment_uses_configured_scores():
    mock = mock_configure(MockBehavior(smp_scores={"edge": 8.5}, default_smp=4))

    edge = mock.complete(LvlmRequest("system", "assess", tags={"purpose": "smp", "tool": "edge"})).raw_text
    other = mock.complete(LvlmRequest("system", "assess", tags={"purpose": "smp", "tool": "depth"})).raw_text

    assert edge.startswith("Score: 8.5.")
    assert other.startswith("Score: 4.")


@pytest.mark.parametrize(
    "behavior",
    [
        MockBehavior(p_correct=1.2),
        MockBehavior(refusal_structured=-0.1),
        MockBehavior(confidence=(0.9, 0.1)),
        MockBehavior(rules=(MockRule(refusal=2.0),)),
    ],
)
def test_mock_configure_rejects_invalid_behavior(behavior):
    with pytest.raises(InvalidBehavior):
        mock_configure(behavior)
