import itertools
from pathlib import Path

import pytest

from lavid.common import read_jsonl
from lavid.dataset import GroundTruth
from lavid.inference import (
    Detection,
    EnsembleVerdict,
    FrameStore,
    detect,
    detect_with_tool,
    ensemble,
    pick_tools_for_video,
    run_baseline,
    run_detection,
)
from lavid.lvlm import VERDICT_FIELD, MockRule
from lavid.prompting import BaselinePrompt, PromptTemplate, initial_template

from conftest import write_sample

OUTCOMES = {"ai": True, "real": False, "refused": None}


def _detection(tool, outcome, confidence=1.0):
    verdict = OUTCOMES[outcome]
    return Detection("v", tool, verdict, confidence=confidence if verdict is not None else 0.0, refused=verdict is None)


@pytest.mark.parametrize("size", [1, 2, 3, 4])
def test_or_rule_over_every_vote_combination(size):
    for combination in itertools.product(OUTCOMES, repeat=size):
        detections = [_detection(f"tool{index}", outcome) for index, outcome in enumerate(combination)]

        verdict = ensemble("v", detections)

        if "ai" in combination:
            assert verdict.final is GroundTruth.AI
        else:
            assert verdict.final is GroundTruth.REAL
        assert verdict.all_refused == all(outcome == "refused" for outcome in combination)


@pytest.mark.parametrize("size", [1, 2, 3])
def test_an_extra_tool_never_turns_ai_into_real(size):
    for combination in itertools.product(OUTCOMES, repeat=size):
        base = [_detection(f"tool{index}", outcome) for index, outcome in enumerate(combination)]
        before = ensemble("v", base).final
        for extra in OUTCOMES:
            after = ensemble("v", [*base, _detection("extra", extra)]).final
            if before is GroundTruth.AI:
                assert after is GroundTruth.AI
            if extra == "ai":
                assert after is GroundTruth.AI


@pytest.mark.parametrize("outcome", ["ai", "real"])
def test_single_tool_ensemble_is_the_tool_verdict(outcome):
    verdict = ensemble("v", [_detection("edge", outcome, 0.7)])

    assert verdict.final is (GroundTruth.AI if outcome == "ai" else GroundTruth.REAL)
    assert verdict.confidence == 0.7
    assert verdict.tools_used == ("edge",)


def test_ensemble_confidence_follows_the_winning_side():
    detections = [_detection("edge", "real", 0.9), _detection("depth", "ai", 0.4), _detection("flow", "ai", 0.6)]

    verdict = ensemble("v", detections)

    assert verdict.final is GroundTruth.AI
    assert verdict.confidence == 0.6


def test_all_refused_defaults_to_real_with_zero_confidence():
    verdict = ensemble("v", [_detection("edge", "refused"), _detection("depth", "refused")])

    assert verdict.final is GroundTruth.REAL
    assert verdict.confidence == 0.0
    assert verdict.all_refused


def test_verdict_dict_roundtrip():
    verdict = ensemble("v", [_detection("edge", "ai", 0.5)], skipped=["depth"], run=2)

    assert EnsembleVerdict.from_dict(verdict.to_dict()) == verdict
    assert verdict.degraded


def test_frame_store_caches_windows_and_encodings(tmp_path: Path):
    sample = write_sample(tmp_path, "v", GroundTruth.REAL, count=12)
    store = FrameStore(window=8)

    first = store.images(sample, "edge")

    assert len(first) == 8
    assert store.images(sample, "edge") is first
    assert store.window(sample) is store.window(sample)
    assert len(store.images(sample, "optical_flow")) == 7


def test_frame_store_evicts_the_least_recently_used_sample(tmp_path: Path):
    samples = [write_sample(tmp_path, name, GroundTruth.REAL, count=8) for name in ("a", "b", "c")]
    store = FrameStore(window=8, cache_size=2)

    first = store.images(samples[0], "edge")
    second = store.images(samples[1], "edge")
    store.window(samples[0])
    store.images(samples[2], "edge")

    assert store.cached_samples == ("a", "c")
    kept = store.images(samples[0], "edge")
    assert kept is first
    again = store.images(samples[1], "edge")
    assert store.cached_samples == ("a", "b")
    assert again is not second
    assert again == second


def test_frame_store_rejects_an_empty_cache():
    with pytest.raises(ValueError):
        FrameStore(cache_size=0)


def test_detect_with_tool_sends_raw_and_tool_frames(make_samples, mock_for, store):
    (sample,) = make_samples(1, 0)
    client = mock_for([sample], p_correct=1.0)

    detection = detect_with_tool(client, sample, "edge", initial_template("edge"), store=store)

    assert detection.is_ai_generated is False
    assert detection.voted
    assert set(detection.field_analyses) == {"raw_frame_analysis", "edge_analysis", "explanation"}
    request_text = client.call_history[0]["user_text"]
    assert request_text.startswith("These 8 images are consecutive frames of a video. The following 8 images are the edge maps")


def test_detect_with_tool_non_structured(make_samples, mock_for, store):
    (sample,) = make_samples(0, 1)
    client = mock_for([sample], p_correct=1.0)

    detection = detect_with_tool(client, sample, "sharpen", mode="non_structured", store=store)

    assert detection.is_ai_generated is True
    assert detection.confidence == 1.0


def test_refusal_is_an_abstention(make_samples, mock_for, store):
    (sample,) = make_samples(1, 0)
    client = mock_for([sample], refusal_nonstructured=1.0)

    detection = detect_with_tool(client, sample, "edge", mode="non_structured", store=store)

    assert detection.refused
    assert not detection.voted


def test_unparseable_structured_reply_is_an_abstention(make_samples, mock_for, store):
    (sample,) = make_samples(1, 0)
    client = mock_for([sample], scripted={"detect": ('{"verdict": "unclear"}',)})

    detection = detect_with_tool(client, sample, "edge", initial_template("edge"), store=store)

    assert detection.is_ai_generated is None
    assert not detection.refused
    assert detection.raw_text == '{"verdict": "unclear"}'


def test_detect_skips_tools_that_cannot_run(make_samples, mock_for, store):
    (sample,) = make_samples(0, 1)
    client = mock_for([sample], p_correct=1.0)

    verdict = detect(client, sample, ["edge", "depth"], store=store)

    assert verdict.final is GroundTruth.AI
    assert verdict.degraded
    assert verdict.skipped_tools == ("depth",)
    assert [detection.tool for detection in verdict.per_tool] == ["edge"]


def test_detect_uses_adapted_templates(make_samples, mock_for, store):
    (sample,) = make_samples(0, 1)
    template = PromptTemplate(initial_template("edge").schema)
    client = mock_for(
        [sample],
        p_correct=0.0,
        rules=(MockRule(tool="edge", field="edge_analysis", p_correct=1.0),),
    )

    verdict = detect(client, sample, ["edge"], {"edge": template}, store=store)

    assert verdict.final is GroundTruth.AI
    assert verdict.per_tool[0].field_analyses["edge_analysis"] == "Observed edge analysis."


def test_video_specific_detection_uses_the_picked_subset(make_samples, mock_for, store):
    (sample,) = make_samples(1, 0)
    client = mock_for([sample], p_correct=1.0, scripted={"pick": ("I would use the edge maps only.",)})

    verdict = detect(client, sample, ["sharpen", "edge", "saturation"], video_specific=True, store=store)

    assert verdict.tools_used == ("edge",)
    assert [call["purpose"] for call in client.call_history] == ["pick", "detect"]
    pick_call = client.call_history[0]
    assert pick_call["tags"]["toolkit"] == "sharpen,edge,saturation"


def test_unusable_pick_falls_back_to_the_toolkit(make_samples, mock_for, store):
    (sample,) = make_samples(1, 0)
    client = mock_for([sample], scripted={"pick": ("Hard to say.",)})

    assert pick_tools_for_video(client, sample, ["edge", "sharpen"], store=store) == ["edge", "sharpen"]


def test_mock_pick_probability_selects_a_subset(make_samples, mock_for, store):
    samples = make_samples(5, 5)
    client = mock_for(samples, pick_probability=0.5)

    picks = [pick_tools_for_video(client, sample, ["edge", "sharpen", "saturation"], store=store) for sample in samples]

    assert all(1 <= len(chosen) <= 3 for chosen in picks)
    assert any(len(chosen) < 3 for chosen in picks)


def test_run_detection_repeats_and_writes_verdicts(make_samples, mock_for, tmp_path: Path):
    samples = make_samples(3, 3)
    client = mock_for(samples, p_correct=0.7, seed=5)
    out = tmp_path / "verdicts.jsonl"

    verdicts = run_detection(client, samples, ["edge", "sharpen"], repeats=2, jobs=3, store=FrameStore(8), verdicts_path=out)

    assert len(verdicts) == 12
    assert [verdict.run for verdict in verdicts] == [0] * 6 + [1] * 6
    assert [verdict.sample_id for verdict in verdicts[:6]] == [sample.id for sample in samples]
    assert [EnsembleVerdict.from_dict(item) for item in read_jsonl(out)] == verdicts


def test_run_detection_is_reproducible(make_samples, mock_for, tmp_path: Path):
    samples = make_samples(4, 4)

    for name, jobs in (("serial", 1), ("parallel", 4)):
        run_detection(
            mock_for(samples, p_correct=0.6, seed=8, confidence=(0.3, 0.9)),
            samples,
            ["edge", "saturation"],
            jobs=jobs,
            store=FrameStore(8),
            verdicts_path=tmp_path / f"{name}.jsonl",
        )

    assert (tmp_path / "serial.jsonl").read_bytes() == (tmp_path / "parallel.jsonl").read_bytes()


def test_run_detection_needs_a_toolkit(make_samples, mock_for):
    samples = make_samples(1, 1)

    with pytest.raises(ValueError):
        run_detection(mock_for(samples), samples, [])


@pytest.mark.parametrize("mode", ["non_structured", "structured"])
def test_baseline_uses_raw_frames_only(make_samples, mock_for, tmp_path: Path, mode):
    samples = make_samples(2, 2)
    client = mock_for(samples, p_correct=1.0)

    verdicts = run_baseline(client, samples, BaselinePrompt.P2, mode, store=FrameStore(8), verdicts_path=tmp_path / "b.jsonl")

    assert [verdict.final for verdict in verdicts] == [sample.label for sample in samples]
    assert all(verdict.tools_used == ("rgb",) for verdict in verdicts)
    call = client.call_history[0]
    assert call["tags"]["prompt"] == "P2"
    assert "Tell me if there are synthetic artifacts in the video or not?" in call["user_text"]
    assert "The following" not in call["user_text"]
    assert len(read_jsonl(tmp_path / "b.jsonl")) == 4


def test_baseline_refusals_follow_the_mode(make_samples, mock_for):
    samples = make_samples(30, 30)
    client = mock_for(samples, refusal_nonstructured=0.5, refusal_structured=0.0)

    free = run_baseline(client, samples, "P1", "non_structured", store=FrameStore(8))
    structured = run_baseline(client, samples, "P1", "structured", store=FrameStore(8))

    assert any(verdict.all_refused for verdict in free)
    assert not any(verdict.all_refused for verdict in structured)
    assert all(VERDICT_FIELD not in detection.field_analyses for verdict in structured for detection in verdict.per_tool)
