"""External adapter protocol for model-based EK tools.

A configured command is invoked as ``<cmd> --tool <name> --in <frames_dir> --out <out_dir>``
and must write one image per input frame using the same file names.
"""

from __future__ import annotations

import logging
import tempfile
import threading
from pathlib import Path
from typing import Dict, Sequence, Tuple

from .common import CommandResult, run_command
from .config import AdapterSettings
from .dataset import FRAME_PATTERN, FrameSequence, read_frame, write_frame
from .ektools import AdapterUnavailable

LOG = logging.getLogger(__name__)

_LOCKS: Dict[Tuple[str, ...], threading.Lock] = {}
_LOCKS_GUARD = threading.Lock()


def _run_command(command: Sequence[str], *, timeout: float | None = None) -> CommandResult:
    return run_command(command, timeout=timeout)


def _command_lock(command: Tuple[str, ...]) -> threading.Lock:
    with _LOCKS_GUARD:
        lock = _LOCKS.get(command)
        if lock is None:
            lock = _LOCKS[command] = threading.Lock()
        return lock


def _invoke(tool: str, frames: FrameSequence, settings: AdapterSettings) -> FrameSequence:
    with tempfile.TemporaryDirectory(prefix=f"lavid-{tool}-") as workspace:
        in_dir = Path(workspace) / "in"
        out_dir = Path(workspace) / "out"
        in_dir.mkdir()
        out_dir.mkdir()
        names = [FRAME_PATTERN.format(index=index) for index in range(len(frames))]
        for name, frame in zip(names, frames):
            write_frame(in_dir / name, frame)

        command = [*settings.command, "--tool", tool, "--in", str(in_dir), "--out", str(out_dir)]
        result = _run_command(command, timeout=settings.timeout)
        if not result.ok:
            LOG.warning("Adapter for %s failed (returncode %s): %s", tool, result.returncode, result.stderr.strip())
            raise AdapterUnavailable(f"Adapter for {tool} failed", detail={"tool": tool, **result.to_dict()})

        missing = [name for name in names if not (out_dir / name).exists()]
        if missing:
            raise AdapterUnavailable(
                f"Adapter for {tool} did not produce {len(missing)} frame(s)",
                detail={"tool": tool, "missing": missing[:5]},
            )
        derived = [read_frame(out_dir / name) for name in names]

    if any(frame.shape != frames[0].shape for frame in derived):
        raise AdapterUnavailable(
            f"Adapter for {tool} changed frame dimensions", detail={"tool": tool, "expected": list(frames[0].shape)}
        )
    return FrameSequence.of(derived)


def run_adapter(tool: str, frames: FrameSequence, settings: AdapterSettings) -> FrameSequence:
    """Run the adapter command, serialized per command unless it is concurrency-safe."""

    if settings.concurrency_safe:
        return _invoke(tool, frames, settings)
    with _command_lock(tuple(settings.command)):
        return _invoke(tool, frames, settings)


__all__ = ["run_adapter"]
