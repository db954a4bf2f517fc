import json
import subprocess
from pathlib import Path
from unittest import mock

import pytest

from lavid import common


def test_run_command_timeout_normalizes_bytes():
    timeout_exc = subprocess.TimeoutExpired(
        cmd=["ffmpeg", "-i", "clip.mp4"],
        timeout=2.5,
        output=b"frame-output",
        stderr=b"\xffdecoder-error",
    )
    with mock.patch.object(common.subprocess, "run", side_effect=timeout_exc):
        result = common.run_command(["ffmpeg", "-i", "clip.mp4"], timeout=2.5)

    payload = result.to_dict()
    assert not result.ok
    assert payload["stdout"] == "frame-output"
    assert "decoder-error" in payload["stderr"]
    assert payload["timeout"] is True
    assert payload["timeout_seconds"] == 2.5
    json.dumps(payload)


def test_run_command_missing_binary_is_exit_127():
    with mock.patch.object(common.subprocess, "run", side_effect=FileNotFoundError("no such file: ffmpeg")):
        result = common.run_command(["ffmpeg"])

    assert result.returncode == 127
    assert "ffmpeg" in result.stderr


def test_load_json_falls_back_on_missing_or_invalid(tmp_path: Path, log_capture):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")

    assert common.load_json(tmp_path / "absent.json") == {}
    assert common.load_json(tmp_path / "absent.json", default=["x"]) == ["x"]
    assert common.load_json(broken, default={"a": 1}) == {"a": 1}
    assert any("Invalid JSON" in message for message in log_capture.messages)


def test_save_json_is_atomic_and_newline_terminated(tmp_path: Path):
    path = tmp_path / "nested" / "report.json"

    common.save_json(path, {"b": 1})

    assert path.read_text(encoding="utf-8") == '{\n  "b": 1\n}\n'
    assert list(path.parent.iterdir()) == [path]


def test_jsonl_lines_are_sorted_and_compact(tmp_path: Path):
    path = tmp_path / "records.jsonl"

    assert common.write_jsonl(path, [{"b": 2, "a": 1}, {"c": [1, 2]}]) == 2
    common.append_jsonl(path, {"d": None})

    assert path.read_text(encoding="utf-8") == '{"a":1,"b":2}\n{"c":[1,2]}\n{"d":null}\n'
    assert common.read_jsonl(path) == [{"a": 1, "b": 2}, {"c": [1, 2]}, {"d": None}]


@pytest.mark.parametrize("line", ["{oops", "[1, 2]"])
def test_bad_jsonl_lines_name_the_line(tmp_path: Path, line):
    path = tmp_path / "records.jsonl"
    path.write_text('{"ok": true}\n\n' + line + "\n", encoding="utf-8")

    with pytest.raises(common.LavidError) as excinfo:
        common.read_jsonl(path)

    assert "line 3" in str(excinfo.value).lower()


def test_compact_payload_keeps_scalars_and_flat_lists():
    payload = common.response_payload(
        {"status": "ok", "message": "done", "scores": {"edge": 0.9}},
        {"selected": ["edge"], "nested": [{"x": 1}], "count": 2},
    )

    assert payload == {"status": "ok", "message": "done", "selected": ["edge"], "count": 2}


def test_verbose_payload_keeps_everything():
    payload = common.response_payload({"status": "ok", "scores": {"edge": 0.9}}, None, verbose=True)

    assert payload == {"status": "ok", "scores": {"edge": 0.9}}


def test_error_payload_carries_detail():
    error = common.LavidError("boom", detail={"stage": "select"})

    assert common.error_payload(error) == {
        "status": "error",
        "message": "boom",
        "error": "LavidError",
        "detail": {"stage": "select"},
    }
    assert "detail" not in common.error_payload(ValueError("bad"))


def test_attach_log_file_is_idempotent(tmp_path: Path, monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setattr(common, "LOG_DIR_OVERRIDE", None)

    first = common.attach_log_file(tmp_path / "logs")
    second = common.attach_log_file(tmp_path / "logs")

    assert first == second == tmp_path / "logs" / "lavid.log"
    handlers = [handler for handler in common.logger.handlers if isinstance(handler, common.RotatingFileHandler)]
    assert len(handlers) == 1
    assert common.attach_log_file(None) is None
