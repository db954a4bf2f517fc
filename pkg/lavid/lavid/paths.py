"""Canonical artifact paths for a lavid run.

Every stage reads and writes plain files under one output directory so any
stage can be inspected or re-run on its own. When the ``LAVID_OUT_DIR``
environment variable is set it replaces the default ``./out`` root.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

_out_override = os.environ.get("LAVID_OUT_DIR")
DEFAULT_OUT_DIR = Path(_out_override) if _out_override else Path("out")


@dataclass(frozen=True)
class ArtifactPaths:
    root: Path

    @property
    def frames_dir(self) -> Path:
        return self.root / "frames"

    @property
    def prepared_manifest(self) -> Path:
        return self.root / "manifest.prepared.jsonl"

    @property
    def split(self) -> Path:
        return self.root / "split.json"

    @property
    def candidates(self) -> Path:
        return self.root / "candidates.json"

    @property
    def selection_report(self) -> Path:
        return self.root / "selection_report.json"

    @property
    def templates(self) -> Path:
        return self.root / "templates.json"

    @property
    def verdicts(self) -> Path:
        return self.root / "verdicts.jsonl"

    @property
    def eval_json(self) -> Path:
        return self.root / "eval_report.json"

    @property
    def eval_csv(self) -> Path:
        return self.root / "eval_report.csv"

    @property
    def eval_txt(self) -> Path:
        return self.root / "eval_report.txt"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    def adaptation_ledger(self, tool: str) -> Path:
        return self.root / f"adaptation_{tool}.jsonl"

    def adaptation_checkpoint(self, tool: str) -> Path:
        return self.checkpoints / f"adaptation_{tool}.json"

    @property
    def selection_checkpoint(self) -> Path:
        return self.checkpoints / "selection.json"

    def baseline_verdicts(self, prompt_id: str, mode: str) -> Path:
        return self.root / f"baseline_{prompt_id}_{mode}.jsonl"

    def baseline_report(self, prompt_id: str, mode: str) -> Path:
        return self.root / f"baseline_{prompt_id}_{mode}_report"


def artifact_paths(root: Path | str | None = None) -> ArtifactPaths:
    return ArtifactPaths(Path(root) if root is not None else DEFAULT_OUT_DIR)


__all__ = ["ArtifactPaths", "DEFAULT_OUT_DIR", "artifact_paths"]
