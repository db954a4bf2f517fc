"""Video-level evaluation and Accuracy/F1 report tables."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix

from .common import LavidError, ensure_parent, load_json, save_json
from .dataset import GroundTruth
from .inference import EnsembleVerdict
from .selection import PredictionRecord, weighted_f1

LOG = logging.getLogger(__name__)

OVERALL = "overall"
LABELS = [GroundTruth.REAL.value, GroundTruth.AI.value]
CSV_COLUMNS = (
    "dataset",
    "n_real",
    "n_ai",
    "accuracy",
    "f1",
    "precision",
    "recall",
    "refusal_rate",
    "mean_tools_per_video",
    "runs",
    "all_refused",
    "degraded",
    "confusion_real_real",
    "confusion_real_ai",
    "confusion_ai_real",
    "confusion_ai_ai",
)


class MissingTruth(LavidError):
    """A verdict refers to a sample with no ground-truth label."""


@dataclass(frozen=True)
class EvalReport:
    dataset: str
    n_real: int
    n_ai: int
    accuracy: float
    f1: float
    precision: float
    recall: float
    refusal_rate: float
    mean_tools_per_video: float
    confusion: Tuple[Tuple[int, int], Tuple[int, int]]
    runs: int = 1
    all_refused: int = 0
    degraded: int = 0

    @property
    def cell(self) -> str:
        return format_cell(self.accuracy, self.f1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dataset": self.dataset,
            "n_real": self.n_real,
            "n_ai": self.n_ai,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "refusal_rate": self.refusal_rate,
            "mean_tools_per_video": self.mean_tools_per_video,
            "confusion": [list(row) for row in self.confusion],
            "runs": self.runs,
            "all_refused": self.all_refused,
            "degraded": self.degraded,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "EvalReport":
        confusion = payload["confusion"]
        return cls(
            dataset=str(payload["dataset"]),
            n_real=int(payload["n_real"]),
            n_ai=int(payload["n_ai"]),
            accuracy=float(payload["accuracy"]),
            f1=float(payload["f1"]),
            precision=float(payload["precision"]),
            recall=float(payload["recall"]),
            refusal_rate=float(payload["refusal_rate"]),
            mean_tools_per_video=float(payload["mean_tools_per_video"]),
            confusion=((int(confusion[0][0]), int(confusion[0][1])), (int(confusion[1][0]), int(confusion[1][1]))),
            runs=int(payload.get("runs", 1)),
            all_refused=int(payload.get("all_refused", 0)),
            degraded=int(payload.get("degraded", 0)),
        )


def format_cell(accuracy: float, f1: float) -> str:
    return f"{accuracy * 100:.2f}/{f1 * 100:.2f}"


def _report(dataset: str, verdicts: Sequence[EnsembleVerdict], truths: Mapping[str, GroundTruth]) -> EvalReport:
    runs: Dict[int, List[EnsembleVerdict]] = {}
    for verdict in verdicts:
        runs.setdefault(verdict.run, []).append(verdict)

    accuracies, f1s, precisions, recalls = [], [], [], []
    confusion = np.zeros((2, 2), dtype=int)
    for run in sorted(runs):
        members = sorted(runs[run], key=lambda verdict: verdict.sample_id)
        y_true = [truths[verdict.sample_id].value for verdict in members]
        y_pred = [verdict.final.value for verdict in members]
        accuracies.append(accuracy_score(y_true, y_pred))
        records = [
            PredictionRecord(verdict.sample_id, truths[verdict.sample_id], verdict.final) for verdict in members
        ]
        precision, recall, f1 = weighted_f1(records)
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
        confusion += confusion_matrix(y_true, y_pred, labels=LABELS)

    calls = [detection for verdict in verdicts for detection in verdict.per_tool]
    unanswered = sum(1 for detection in calls if not detection.voted)
    sample_ids = {verdict.sample_id for verdict in verdicts}
    return EvalReport(
        dataset=dataset,
        n_real=sum(1 for sample_id in sample_ids if truths[sample_id] is GroundTruth.REAL),
        n_ai=sum(1 for sample_id in sample_ids if truths[sample_id] is GroundTruth.AI),
        accuracy=float(np.mean(accuracies)),
        f1=float(np.mean(f1s)),
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        refusal_rate=unanswered / len(calls) if calls else 0.0,
        mean_tools_per_video=float(np.mean([len(verdict.tools_used) for verdict in verdicts])),
        confusion=((int(confusion[0, 0]), int(confusion[0, 1])), (int(confusion[1, 0]), int(confusion[1, 1]))),
        runs=len(runs),
        all_refused=sum(1 for verdict in verdicts if verdict.all_refused),
        degraded=sum(1 for verdict in verdicts if verdict.degraded),
    )


def evaluate(
    verdicts: Sequence[EnsembleVerdict],
    truths: Mapping[str, GroundTruth],
    sources: Mapping[str, str] | None = None,
) -> List[EvalReport]:
    """One report per source (sorted) followed by the overall report.

    F1 is unweighted with Real as the positive class. Runs are scored separately
    and averaged; the confusion matrix is summed over runs.
    """

    missing = sorted({verdict.sample_id for verdict in verdicts if verdict.sample_id not in truths})
    if missing:
        raise MissingTruth(f"No ground truth for {len(missing)} sample(s)", detail={"sample_ids": missing[:10]})
    if not verdicts:
        return []

    sources = sources or {}
    groups: Dict[str, List[EnsembleVerdict]] = {}
    for verdict in verdicts:
        source = sources.get(verdict.sample_id)
        if source:
            groups.setdefault(source, []).append(verdict)

    reports = [_report(source, groups[source], truths) for source in sorted(groups) if source != OVERALL]
    reports.append(_report(OVERALL, verdicts, truths))
    return reports


def render_table(reports: Sequence[EvalReport], *, label: str = "lavid") -> str:
    """Table with one Accuracy/F1 cell per dataset."""

    header = ["Method", *[report.dataset for report in reports]]
    row = [label, *[report.cell for report in reports]]
    rows = [header] if not reports else [header, row]
    widths = [max(len(line[index]) for line in rows) for index in range(len(header))]
    lines = [" | ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip() for line in rows]
    if reports:
        lines.insert(1, "-+-".join("-" * width for width in widths))
        for report in reports:
            lines.append(
                f"{report.dataset}: refusal rate {report.refusal_rate * 100:.2f}%, "
                f"{report.mean_tools_per_video:.2f} tools/video, runs {report.runs}"
            )
    return "\n".join(lines) + "\n"


def _csv_rows(reports: Sequence[EvalReport]) -> List[Dict[str, Any]]:
    rows = []
    for report in reports:
        payload = report.to_dict()
        confusion = payload.pop("confusion")
        payload.update(
            confusion_real_real=confusion[0][0],
            confusion_real_ai=confusion[0][1],
            confusion_ai_real=confusion[1][0],
            confusion_ai_ai=confusion[1][1],
        )
        rows.append(payload)
    return rows


def render_csv(reports: Sequence[EvalReport]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(_csv_rows(reports))
    return buffer.getvalue()


def render_report(reports: Sequence[EvalReport], out_prefix: Path | None = None, *, label: str = "lavid") -> str:
    """Render the text table and, with ``out_prefix``, write ``.txt``, ``.json`` and ``.csv`` next to it."""

    table = render_table(reports, label=label)
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        ensure_parent(out_prefix)
        out_prefix.with_suffix(".txt").write_text(table, encoding="utf-8")
        save_json(out_prefix.with_suffix(".json"), {"reports": [report.to_dict() for report in reports]})
        out_prefix.with_suffix(".csv").write_text(render_csv(reports), encoding="utf-8")
        LOG.info("Wrote %s.{txt,json,csv}", out_prefix)
    return table


def load_report_json(path: Path) -> List[EvalReport]:
    payload = load_json(path, default={"reports": []})
    return [EvalReport.from_dict(item) for item in payload.get("reports", [])]


def load_report_csv(path: Path) -> List[EvalReport]:
    reports = []
    with Path(path).open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            payload: Dict[str, Any] = dict(row)
            payload["confusion"] = [
                [row["confusion_real_real"], row["confusion_real_ai"]],
                [row["confusion_ai_real"], row["confusion_ai_ai"]],
            ]
            reports.append(EvalReport.from_dict(payload))
    return reports


__all__ = [
    "EvalReport",
    "MissingTruth",
    "OVERALL",
    "evaluate",
    "format_cell",
    "load_report_csv",
    "load_report_json",
    "render_csv",
    "render_report",
    "render_table",
]
