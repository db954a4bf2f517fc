"""EK tool selection: confidence-weighted F1 plus self-assessment, thresholded against raw RGB."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from sklearn.metrics import precision_recall_fscore_support

from .common import LavidError, load_json, save_json
from .dataset import EmptyClass, GroundTruth, VideoSample
from .ektools import TooFewFrames, get_tool, is_available
from .inference import Detection, FrameStore, detect_with_tool
from .lvlm import BaseLvlm, LvlmRequest
from .prompting import (
    SYSTEM_TEXT,
    DetectionMode,
    PromptTemplate,
    ScoreMissing,
    extract_tool_candidates,
    parse_smp_score,
    render_preparation_prompt,
    render_smp_prompt,
    selection_schema,
)

LOG = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.5
F1_AVERAGES = ("binary", "macro")


class EmptyRecords(LavidError, ValueError):
    """F1 requested over zero prediction records."""


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    truth: GroundTruth
    predicted: GroundTruth
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def weighted_f1(records: Sequence[PredictionRecord], *, average: str = "binary") -> Tuple[float, float, float]:
    """Confidence-weighted precision, recall and F1 with Real as the positive class.

    Each record contributes its confidence instead of 1 to TP/FP/FN; any 0/0 is 0.
    ``average="macro"`` averages the Real-positive and AI-positive scores instead.
    """

    if not records:
        raise EmptyRecords("weighted_f1 needs at least one record")
    if average not in F1_AVERAGES:
        raise ValueError(f"average must be one of {', '.join(F1_AVERAGES)}")
    y_true = [record.truth.value for record in records]
    y_pred = [record.predicted.value for record in records]
    weights = [record.confidence for record in records]
    options: Dict[str, Any] = {"pos_label": GroundTruth.REAL.value}
    if average == "macro":
        options = {"labels": [GroundTruth.REAL.value, GroundTruth.AI.value]}
    precision, recall, f1, _ = precision_recall_fscore_support(
        y_true, y_pred, average=average, sample_weight=weights, zero_division=0, **options
    )
    return float(precision), float(recall), float(f1)


@dataclass(frozen=True)
class ToolScore:
    tool: str
    f1_weighted: float
    s_mp_raw: float
    s_mp: float
    s_tool: float
    alpha: float
    precision: float = 0.0
    recall: float = 0.0
    n: int = 0
    misses: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tool": self.tool,
            "f1_weighted": self.f1_weighted,
            "precision": self.precision,
            "recall": self.recall,
            "s_mp_raw": self.s_mp_raw,
            "s_mp": self.s_mp,
            "s_tool": self.s_tool,
            "alpha": self.alpha,
            "n": self.n,
            "misses": self.misses,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "ToolScore":
        return cls(
            tool=str(payload["tool"]),
            f1_weighted=float(payload["f1_weighted"]),
            s_mp_raw=float(payload["s_mp_raw"]),
            s_mp=float(payload["s_mp"]),
            s_tool=float(payload["s_tool"]),
            alpha=float(payload["alpha"]),
            precision=float(payload.get("precision", 0.0)),
            recall=float(payload.get("recall", 0.0)),
            n=int(payload.get("n", 0)),
            misses=int(payload.get("misses", 0)),
        )


@dataclass(frozen=True)
class SelectionReport:
    alpha: float
    baseline: ToolScore
    scores: Tuple[ToolScore, ...]
    selected: Tuple[str, ...]
    skipped: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alpha": self.alpha,
            "baseline": self.baseline.to_dict(),
            "scores": [score.to_dict() for score in self.scores],
            "selected": list(self.selected),
            "skipped": list(self.skipped),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "SelectionReport":
        return cls(
            alpha=float(payload["alpha"]),
            baseline=ToolScore.from_dict(payload["baseline"]),
            scores=tuple(ToolScore.from_dict(item) for item in payload.get("scores", [])),
            selected=tuple(payload.get("selected", [])),
            skipped=tuple(payload.get("skipped", [])),
        )

    def save(self, path: Path) -> None:
        save_json(path, self.to_dict())

    @classmethod
    def load(cls, path: Path) -> "SelectionReport":
        return cls.from_dict(load_json(path))


def score_tool(
    records: Sequence[PredictionRecord],
    s_mp_raw: float,
    alpha: float = DEFAULT_ALPHA,
    *,
    tool: str = "rgb",
    average: str = "binary",
    misses: int = 0,
) -> ToolScore:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be within [0, 1]")
    precision, recall, f1 = weighted_f1(records, average=average)
    s_mp_raw = min(max(float(s_mp_raw), 0.0), 10.0)
    s_mp = s_mp_raw / 10.0
    return ToolScore(
        tool=tool,
        f1_weighted=f1,
        s_mp_raw=s_mp_raw,
        s_mp=s_mp,
        s_tool=alpha * f1 + (1.0 - alpha) * s_mp,
        alpha=alpha,
        precision=precision,
        recall=recall,
        n=len(records),
        misses=misses,
    )


def apply_threshold(baseline: ToolScore, scores: Sequence[ToolScore]) -> List[str]:
    """Tools scoring at least the RGB baseline, in candidate order."""

    return [score.tool for score in scores if score.tool != "rgb" and score.s_tool >= baseline.s_tool]


def records_from_detections(
    detections: Sequence[Detection], truths: Mapping[str, GroundTruth], *, weighted: bool = True
) -> List[PredictionRecord]:
    """One record per detection ordered by sample id.

    A refusal or unparseable reply counts as the wrong label, carrying confidence 0
    when ``weighted`` and 1 otherwise.
    """

    records = []
    for detection in sorted(detections, key=lambda item: item.sample_id):
        truth = truths[detection.sample_id]
        if detection.voted:
            predicted = detection.predicted
            confidence = detection.confidence if weighted else 1.0
        else:
            predicted = truth.opposite
            confidence = 0.0 if weighted else 1.0
        records.append(PredictionRecord(detection.sample_id, truth, predicted, confidence))
    return records


def summarize_outcomes(detections: Sequence[Detection], truths: Mapping[str, GroundTruth]) -> str:
    """Compact few-shot summary handed to the self-assessment prompt."""

    correct = {label: 0 for label in GroundTruth}
    totals = {label: 0 for label in GroundTruth}
    unanswered = 0
    for detection in detections:
        truth = truths[detection.sample_id]
        totals[truth] += 1
        if not detection.voted:
            unanswered += 1
        elif detection.predicted is truth:
            correct[truth] += 1
    right = sum(correct.values())
    return (
        f"{right}/{len(detections)} reference videos classified correctly "
        f"(real {correct[GroundTruth.REAL]}/{totals[GroundTruth.REAL]}, "
        f"AI-generated {correct[GroundTruth.AI]}/{totals[GroundTruth.AI]}); "
        f"{len(detections) - right - unanswered} incorrect, {unanswered} unanswered."
    )


def score_smp(client: BaseLvlm, tool: str, fewshot_results: str, *, model_id: str = "") -> float:
    request = LvlmRequest(
        system_text=SYSTEM_TEXT,
        user_text=render_smp_prompt(tool, fewshot_results),
        model_id=model_id,
        tags={"purpose": "smp", "tool": get_tool(tool).name},
    )
    response = client.complete(request)
    try:
        return parse_smp_score(response.raw_text)
    except ScoreMissing:
        LOG.warning("No self-assessment score for %s; using 0", tool)
        return 0.0


def propose_toolkit(client: BaseLvlm, *, model_id: str = "") -> List[str]:
    """Ask the LVLM which tools could help and keep the ones the registry implements."""

    request = LvlmRequest(
        system_text=SYSTEM_TEXT,
        user_text=render_preparation_prompt(),
        model_id=model_id,
        tags={"purpose": "prepare"},
    )
    response = client.complete(request)
    candidates = extract_tool_candidates(response.raw_text)
    if candidates:
        LOG.info("Proposed toolkit: %s", ", ".join(candidates))
    else:
        LOG.warning("The preparation reply named no implemented tools")
    return candidates


def _reference_detections(
    client: BaseLvlm,
    tool: str,
    reference: Sequence[VideoSample],
    *,
    store: FrameStore,
    jobs: int,
    model_id: str,
) -> List[Detection]:
    template = PromptTemplate(selection_schema(tool))

    def worker(sample: VideoSample) -> Detection:
        try:
            return detect_with_tool(
                client, sample, tool, template, DetectionMode.STRUCTURED, store=store, model_id=model_id, purpose="detect"
            )
        except TooFewFrames as exc:
            LOG.warning("%s cannot run on %s: %s", tool, sample.id, exc)
            return Detection(sample.id, tool, None, confidence=0.0)

    if jobs <= 1:
        return [worker(sample) for sample in reference]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, reference))


def _load_checkpoint(path: Optional[Path], resume: bool, alpha: float) -> Dict[str, ToolScore]:
    if path is None or not resume:
        return {}
    payload = load_json(path, default={})
    if not payload or payload.get("alpha") != alpha:
        return {}
    return {name: ToolScore.from_dict(item) for name, item in payload.get("scores", {}).items()}


def select_toolkit(
    client: BaseLvlm,
    candidates: Sequence[str],
    reference: Sequence[VideoSample],
    alpha: float = DEFAULT_ALPHA,
    *,
    store: FrameStore | None = None,
    jobs: int = 1,
    average: str = "binary",
    model_id: str = "",
    checkpoint_path: Path | None = None,
    report_path: Path | None = None,
    resume: bool = False,
) -> SelectionReport:
    """Score raw RGB and every candidate on the reference set and keep tools at or above RGB.

    Progress is checkpointed per tool; an interrupted run leaves a ``resumable``
    checkpoint that ``resume=True`` picks up.
    """

    if not candidates:
        raise ValueError("candidates must not be empty")
    truths = {sample.id: sample.label for sample in reference}
    for label in GroundTruth:
        if label not in truths.values():
            raise EmptyClass(f"Reference set has no {label.value} samples", detail={"label": label.value})

    store = store or FrameStore()
    names = [get_tool(tool).name for tool in candidates]
    runnable = [name for name in names if name != "rgb" and is_available(name, store.adapters)]
    skipped = [name for name in names if name != "rgb" and name not in runnable]
    for name in skipped:
        LOG.warning("Skipping %s: no adapter configured", name)

    done = _load_checkpoint(checkpoint_path, resume, alpha)
    if done:
        LOG.info("Resuming selection with %d scored tool(s)", len(done))

    def checkpoint(status: str) -> None:
        if checkpoint_path is not None:
            save_json(
                checkpoint_path,
                {"status": status, "alpha": alpha, "scores": {name: score.to_dict() for name, score in done.items()}},
            )

    try:
        for name in ["rgb", *runnable]:
            if name in done:
                continue
            detections = _reference_detections(client, name, reference, store=store, jobs=jobs, model_id=model_id)
            records = records_from_detections(detections, truths)
            misses = sum(1 for detection in detections if not detection.voted)
            s_mp_raw = score_smp(client, name, summarize_outcomes(detections, truths), model_id=model_id)
            done[name] = score_tool(records, s_mp_raw, alpha, tool=name, average=average, misses=misses)
            score = done[name]
            LOG.info(
                "%s: F1_weighted=%.4f S_MP=%.1f S_Tool=%.4f", get_tool(name).display_name, score.f1_weighted, s_mp_raw, score.s_tool
            )
            checkpoint("partial")
    except BaseException:
        checkpoint("resumable")
        raise

    baseline = done["rgb"]
    scores = tuple(done[name] for name in runnable)
    report = SelectionReport(
        alpha=alpha,
        baseline=baseline,
        scores=scores,
        selected=tuple(apply_threshold(baseline, scores)),
        skipped=tuple(skipped),
    )
    LOG.info(
        "Selected %s (baseline S_Tool %.4f)", ", ".join(report.selected) or "no tools", baseline.s_tool
    )
    checkpoint("complete")
    if report_path is not None:
        report.save(report_path)
    return report


__all__ = [
    "DEFAULT_ALPHA",
    "EmptyRecords",
    "PredictionRecord",
    "SelectionReport",
    "ToolScore",
    "apply_threshold",
    "propose_toolkit",
    "records_from_detections",
    "score_smp",
    "score_tool",
    "select_toolkit",
    "summarize_outcomes",
    "weighted_f1",
]
