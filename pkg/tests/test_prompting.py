from pathlib import Path

import pytest

from lavid.common import LavidError
from lavid.lvlm import CONFIDENCE_FIELD, VERDICT_FIELD, FieldKind, LvlmRequest, MockBehavior, SchemaField, StructuredSchema, mock_configure
from lavid.prompting import (
    ANSWER_FORMAT,
    BaselinePrompt,
    DetectionMode,
    PromptTemplate,
    ScoreMissing,
    TemplateProvenance,
    extract_tool_candidates,
    initial_schema,
    initial_template,
    is_refusal,
    match_tool_names,
    parse_class_fields,
    parse_confidence,
    parse_smp_score,
    parse_tool_choice,
    parse_yes_no,
    render_baseline_prompt,
    render_detection_prompt,
    render_preparation_prompt,
    render_schema,
    render_smp_prompt,
    render_tool_choice_prompt,
    selection_schema,
    set_refusal_patterns,
)

FRAMES = "These 8 images are consecutive frames of a video."
EDGE_SENTENCE = (
    "The following 8 images are the edge maps of the same frames. Synthetic videos often feature unnatural edge "
    "details, such as blurred, jagged, or discontinuous object boundaries. Edge detection identifies such "
    "abnormalities to pinpoint fake or synthetic elements."
)

REFUSALS = [
    "I'm sorry, but I can't help with that.",
    "I’m sorry, I can’t help with this request.",
    "I apologize, but I cannot determine whether this video is AI-generated.",
    "I cannot determine if the video was generated by AI.",
    "I am unable to verify the authenticity of these frames.",
    "As an AI model, I can only describe what I see.",
    "Unfortunately, I can't make that judgment.",
    "It is difficult to determine with certainty whether these frames are synthetic.",
    "I'm not able to tell whether this is real.",
    "There is little evidence; it's impossible to say conclusively.",
    "I must decline to analyze this content.",
    "I won't be able to identify AI generation here.",
    "Sorry, I cannot provide a definitive answer.",
    "The frames alone cannot be definitively determined as synthetic.",
    "I don't have the ability to verify video provenance.",
    "I do not have enough information to judge.",
    "Without more context, I can't say.",
    "I'm just an AI and cannot judge authenticity.",
    "This request is against my guidelines.",
    "I'm not comfortable making that call.",
    "I can't reliably determine that from eight frames.",
    "We are unable to determine the origin of this clip.",
]

ANSWERS = [
    "Yes. The edges shimmer between frames.",
    "No.",
    "The video shows natural motion blur and consistent lighting.",
    "Edges appear jagged around the hand, suggesting synthesis.",
    "The depth map is consistent across the sequence.",
    "I can see consistent shadows on every frame.",
]


# ------------------------------------------------------------------ rendering


def test_non_structured_detection_prompt_text():
    prompt = render_detection_prompt("edge", DetectionMode.NON_STRUCTURED)

    assert prompt.system_text == "You are an AI video analyzer. Determine if the video is AI-generated or not?"
    assert prompt.user_text == (
        f"{FRAMES} {EDGE_SENTENCE} Do you think this video is generated by AI or not? "
        "Must return with 1) Yes or No only; 2) if Yes, explain the reason."
    )
    assert prompt.schema is None


def test_structured_detection_prompt_carries_the_template_schema():
    template = initial_template("edge")

    prompt = render_detection_prompt("edge", "structured", template)

    assert prompt.user_text == (
        f"{FRAMES} {EDGE_SENTENCE} Analyze the frames and fill in every field of the structured response."
    )
    assert prompt.schema == template.schema


def test_raw_frame_prompt_has_no_tool_sentence():
    prompt = render_detection_prompt("rgb", "non_structured")

    assert prompt.user_text == f"{FRAMES} Do you think this video is generated by AI or not? {ANSWER_FORMAT}"


def test_flow_prompt_counts_its_own_images():
    prompt = render_detection_prompt("optical_flow", "non_structured", ek_count=7)

    assert "The following 7 images are the optical flow visualizations of the same frames." in prompt.user_text


def test_structured_prompt_requires_a_template():
    with pytest.raises(ValueError):
        render_detection_prompt("edge", "structured")


def test_rendering_is_pure():
    first = render_detection_prompt("depth", "structured", initial_template("depth"))
    second = render_detection_prompt("depth", "structured", initial_template("depth"))

    assert first == second


@pytest.mark.parametrize(
    "prompt, question",
    [
        (BaselinePrompt.P1, "Do you think this video is generated by AI or not?"),
        (BaselinePrompt.P2, "Tell me if there are synthetic artifacts in the video or not?"),
        (BaselinePrompt.P3, "Do you think this video was created with the help of AI?"),
    ],
)
def test_baseline_prompts_keep_the_question_verbatim(prompt, question):
    free = render_baseline_prompt(prompt)
    structured = render_baseline_prompt(prompt, DetectionMode.STRUCTURED)

    assert free.user_text == f"{FRAMES} {question}. {ANSWER_FORMAT}"
    assert free.schema is None
    assert structured.user_text == f"{FRAMES} {question}"
    assert structured.schema.names == (VERDICT_FIELD, "explanation")


def test_initial_schema_layout():
    assert initial_schema("edge").names == (VERDICT_FIELD, "raw_frame_analysis", "edge_analysis", "explanation")
    assert initial_schema("rgb").names == (VERDICT_FIELD, "raw_frame_analysis", "explanation")
    assert initial_template("depth").provenance is TemplateProvenance.INITIAL


def test_selection_schema_appends_confidence_once():
    schema = selection_schema("edge")

    assert schema.names[-1] == CONFIDENCE_FIELD
    assert len(schema.names) == 5
    template = PromptTemplate(schema)
    assert selection_schema("edge", template) == schema


def test_template_dict_roundtrip():
    template = PromptTemplate(
        StructuredSchema.of((VERDICT_FIELD, "bool"), ("boundary_clarity", "str")),
        version=3,
        provenance=TemplateProvenance.REWRITTEN,
    )

    assert PromptTemplate.from_dict(template.to_dict()) == template


def test_render_schema_as_pydantic_class():
    assert render_schema(initial_schema("sharpen")) == (
        "class Structured_Response(BaseModel):\n"
        "    is_ai_generated: bool\n"
        "    raw_frame_analysis: str\n"
        "    sharpen_analysis: str\n"
        "    explanation: str"
    )


def test_smp_prompt_names_the_feature():
    text = render_smp_prompt("rgb", "Accuracy 0.70 on 10 videos.")

    assert "Assess the additional feature: RGB that could support your determination." in text
    assert "- Analysis History: Accuracy 0.70 on 10 videos." in text
    assert text.endswith("Higher score indicates an effective feature.")


def test_preparation_and_tool_choice_prompts():
    assert "optical flow and sharpening" in render_preparation_prompt()

    text = render_tool_choice_prompt(["edge", "optical_flow"])

    assert text.splitlines()[0] == FRAMES
    assert text.splitlines()[2].startswith("- edge: Synthetic videos often feature")
    assert text.splitlines()[3].startswith("- optical_flow: ")


# ------------------------------------------------------------------ parsing


@pytest.mark.parametrize("text", REFUSALS)
def test_refusal_corpus_is_detected(text):
    assert is_refusal(text)


@pytest.mark.parametrize("text", ANSWERS)
def test_answers_are_not_refusals(text):
    assert not is_refusal(text)


def test_refusal_corpus_is_large_enough():
    assert len(REFUSALS) >= 20


def test_refusal_patterns_can_be_replaced(tmp_path: Path):
    patterns = tmp_path / "patterns.txt"
    patterns.write_text("# custom\n\\bnope\\b\n", encoding="utf-8")

    set_refusal_patterns(patterns)

    assert is_refusal("Nope, not answering.")
    assert not is_refusal("I'm sorry, but I can't help with that.")


def test_missing_refusal_pattern_file_is_reported(tmp_path: Path):
    set_refusal_patterns(tmp_path / "absent.txt")

    with pytest.raises(LavidError):
        is_refusal("anything")


@pytest.mark.parametrize(
    "text, expected",
    [
        ("Yes. The lighting flickers.", (True, False)),
        ("**Yes**, the hands are malformed.", (True, False)),
        ("Answer: No.", (False, False)),
        ("no", (False, False)),
        ("1) Yes 2) The edges are jagged.", (True, False)),
        ("I'm sorry, but I can't determine that.", (None, True)),
        ("Maybe, the frames are ambiguous.", (None, False)),
        ("", (None, False)),
    ],
)
def test_parse_yes_no(text, expected):
    assert parse_yes_no(text) == expected


@pytest.mark.parametrize(
    "text, expected",
    [
        ("Score: 8.5. The feature is interpretable.", 8.5),
        ("I'd give it 7/10.", 7.0),
        ("Score: 42", 10.0),
        ("-3", 0.0),
        ("On balance 0 out of 10.", 0.0),
    ],
)
def test_parse_smp_score(text, expected):
    assert parse_smp_score(text) == expected


def test_parse_smp_score_without_number():
    with pytest.raises(ScoreMissing):
        parse_smp_score("The feature is helpful.")


@pytest.mark.parametrize(
    "value, expected",
    [("0.85", 0.85), ("85%", 0.85), (0.3, 0.3), (70, 0.7), ("high", 1.0), (True, 1.0), (None, 1.0), (150, 1.0)],
)
def test_parse_confidence(value, expected):
    assert parse_confidence(value) == pytest.approx(expected)


def test_parse_class_fields_reads_fenced_class():
    text = (
        "Here is the improved template:\n"
        "```python\n"
        "class NewAnalysisResult(BaseModel):\n"
        "    is_ai_generated: bool\n"
        "    # boundaries\n"
        "    boundary_clarity: str\n"
        "    texture_consistency: str = ''\n"
        "```\n"
        "It focuses on edges."
    )

    assert parse_class_fields(text) == (
        SchemaField("is_ai_generated", FieldKind.BOOL),
        SchemaField("boundary_clarity", FieldKind.STR),
        SchemaField("texture_consistency", FieldKind.STR),
    )


@pytest.mark.parametrize(
    "text",
    [
        "No class here.",
        "class Result(BaseModel):\n    is_ai_generated: bool\n    score: int\n",
        "class Result(BaseModel):\n    pass\n",
    ],
)
def test_parse_class_fields_rejects(text):
    assert parse_class_fields(text) is None


def test_match_tool_names_in_mention_order():
    assert match_tool_names("Use the depth maps, then optical flow and edge detection.") == ["depth", "optical_flow", "edge"]
    assert match_tool_names("Denoising and color saturation help.", allowed=["saturation"]) == ["saturation"]


def test_candidates_from_the_preparation_reply():
    mock = mock_configure(MockBehavior())
    reply = mock.complete(LvlmRequest("system", render_preparation_prompt(), tags={"purpose": "prepare"})).raw_text

    assert extract_tool_candidates(reply) == ["optical_flow", "sharpen", "depth"]


def test_candidates_from_markdown_headers():
    reply = "## Useful tools\n- **Edge Detection**: Canny or Sobel.\n- **Noise Analysis**: residuals.\n3) RGB histograms\n"

    assert extract_tool_candidates(reply) == ["edge", "denoise"]


def test_parse_tool_choice_keeps_toolkit_order():
    assert parse_tool_choice("I'd use the optical flow and edge maps.", ["edge", "optical_flow", "depth"]) == ["edge", "optical_flow"]
    assert parse_tool_choice("None of them.", ["edge"]) == []
