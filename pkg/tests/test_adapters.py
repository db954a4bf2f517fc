from pathlib import Path

import numpy as np
import pytest

from lavid import adapters
from lavid.common import CommandResult
from lavid.config import AdapterSettings
from lavid.dataset import FrameSequence, read_frame, write_frame
from lavid.ektools import AdapterUnavailable, apply_tool

from conftest import procedural_frames


def _flag(argv, name):
    return argv[argv.index(name) + 1]


def _inverting_adapter(calls):
    def fake_run_command(argv, *, timeout=None):
        calls.append(list(argv))
        in_dir, out_dir = Path(_flag(argv, "--in")), Path(_flag(argv, "--out"))
        for path in sorted(in_dir.glob("frame_*.png")):
            write_frame(out_dir / path.name, 255 - read_frame(path))
        return CommandResult(command=list(argv), returncode=0)

    return fake_run_command


def test_adapter_protocol_round_trip(monkeypatch: pytest.MonkeyPatch):
    calls = []
    monkeypatch.setattr(adapters, "_run_command", _inverting_adapter(calls))
    frames = FrameSequence.of(procedural_frames(4, count=3))

    artifact = apply_tool("depth", frames, adapters={"depth": AdapterSettings(command=("depth-anything", "--small"))})

    assert len(calls) == 1
    assert calls[0][:4] == ["depth-anything", "--small", "--tool", "depth"]
    assert len(artifact.frames) == 3
    assert all(np.array_equal(got, 255 - want) for got, want in zip(artifact.frames, frames))
    assert artifact.meta["adapter"] == "depth-anything --small"


def test_adapter_failure_is_unavailable_with_output(monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setattr(
        adapters,
        "_run_command",
        lambda argv, *, timeout=None: CommandResult(command=list(argv), returncode=2, stderr="CUDA not available"),
    )
    frames = FrameSequence.of(procedural_frames(0, count=2))

    with pytest.raises(AdapterUnavailable) as excinfo:
        adapters.run_adapter("landmark", frames, AdapterSettings(command=("landmarks",)))

    assert excinfo.value.detail["tool"] == "landmark"
    assert excinfo.value.detail["returncode"] == 2
    assert excinfo.value.detail["stderr"] == "CUDA not available"


def test_adapter_missing_outputs_is_unavailable(monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setattr(adapters, "_run_command", lambda argv, *, timeout=None: CommandResult(command=list(argv), returncode=0))
    frames = FrameSequence.of(procedural_frames(0, count=2))

    with pytest.raises(AdapterUnavailable) as excinfo:
        adapters.run_adapter("segmentation", frames, AdapterSettings(command=("segment",), concurrency_safe=True))

    assert excinfo.value.detail["missing"] == ["frame_00000.png", "frame_00001.png"]


def test_adapter_timeout_passes_through(monkeypatch: pytest.MonkeyPatch):
    seen = {}

    def fake_run_command(argv, *, timeout=None):
        seen["timeout"] = timeout
        return CommandResult(command=list(argv), returncode=None, timeout=True, timeout_seconds=timeout)

    monkeypatch.setattr(adapters, "_run_command", fake_run_command)
    frames = FrameSequence.of(procedural_frames(0, count=1))

    with pytest.raises(AdapterUnavailable) as excinfo:
        adapters.run_adapter("depth", frames, AdapterSettings(command=("depth",), timeout=3.0))

    assert seen["timeout"] == 3.0
    assert excinfo.value.detail["timeout"] is True
