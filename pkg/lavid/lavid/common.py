"""Shared helpers for lavid pipeline stages.

This module owns the package logger, the base error type, JSON and JSONL
persistence for stage artifacts, and the subprocess runner used for frame
extraction and external adapters.
"""
from __future__ import annotations

import json
import logging
import os
import subprocess
import sys
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence

LOG_FILE_NAME = "lavid.log"
LOG_DIR_OVERRIDE = os.environ.get("LAVID_LOG_DIR")

logger = logging.getLogger("lavid")
logger.setLevel(logging.DEBUG)
if not logger.handlers:
    stream_handler = logging.StreamHandler(stream=sys.stderr)
    stream_handler.setLevel(logging.INFO)
    stream_handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    logger.addHandler(stream_handler)

logger.propagate = False

_jsonl_lock = threading.Lock()


class LavidError(RuntimeError):
    """Base error for pipeline failures that carry structured context."""

    def __init__(self, message: str, *, detail: Mapping[str, Any] | None = None) -> None:
        super().__init__(message)
        self.detail: Dict[str, Any] = dict(detail or {})


def attach_log_file(log_dir: Path | None) -> Optional[Path]:
    """Add a rotating DEBUG log file under ``log_dir`` (or ``LAVID_LOG_DIR``)."""

    target_dir = Path(LOG_DIR_OVERRIDE) if LOG_DIR_OVERRIDE else log_dir
    if target_dir is None:
        return None
    log_file = target_dir / LOG_FILE_NAME
    for handler in logger.handlers:
        if isinstance(handler, RotatingFileHandler) and Path(handler.baseFilename) == log_file.resolve():
            return log_file
    try:
        target_dir.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(log_file, maxBytes=1_000_000, backupCount=5, encoding="utf-8")
    except OSError as exc:  # pragma: no cover - permissions may block log file creation
        logger.debug("Could not create log file %s: %s", log_file, exc)
        return None
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s: %(message)s"))
    logger.addHandler(file_handler)
    return log_file


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def load_json(path: Path, *, default: Optional[Any] = None) -> Any:
    """Load a JSON file if present, returning a default fallback on error."""

    if default is None:
        fallback: Any = {}
    elif isinstance(default, Mapping):
        fallback = dict(default)
    elif isinstance(default, Sequence) and not isinstance(default, (str, bytes, bytearray)):
        fallback = list(default)
    else:
        fallback = default

    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        return fallback
    except json.JSONDecodeError as exc:
        logger.warning("Invalid JSON in %s: %s", path, exc)
        return fallback


def save_json(path: Path, payload: Any) -> None:
    ensure_parent(path)
    tmp_path = path.with_name(f".{path.name}.tmp")
    with tmp_path.open("w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")
    tmp_path.replace(path)


def dump_jsonl_line(record: Mapping[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def append_jsonl(path: Path, record: Mapping[str, Any]) -> None:
    ensure_parent(path)
    line = dump_jsonl_line(record)
    with _jsonl_lock:
        with path.open("a", encoding="utf-8") as handle:
            handle.write(line + "\n")


def write_jsonl(path: Path, records: Iterable[Mapping[str, Any]]) -> int:
    ensure_parent(path)
    count = 0
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(dump_jsonl_line(record) + "\n")
            count += 1
    return count


def iter_jsonl(path: Path) -> Iterator[Dict[str, Any]]:
    with path.open("r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise LavidError(
                    f"Invalid JSON on line {number} of {path}",
                    detail={"path": str(path), "line": number, "error": str(exc)},
                ) from exc
            if not isinstance(record, dict):
                raise LavidError(f"Line {number} of {path} is not an object", detail={"path": str(path)})
            yield record


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    return list(iter_jsonl(path))


def _normalize_timeout_stream(stream: object) -> str:
    if isinstance(stream, (bytes, bytearray)):
        try:
            return stream.decode("utf-8", errors="replace")
        except Exception:
            return str(stream)
    if stream is None:
        return ""
    return str(stream)


@dataclass
class CommandResult:
    command: List[str]
    returncode: Optional[int]
    stdout: str = ""
    stderr: str = ""
    timeout: bool = False
    timeout_seconds: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.returncode == 0 and not self.timeout

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "command": list(self.command),
            "stdout": self.stdout,
            "stderr": self.stderr,
            "returncode": self.returncode,
        }
        if self.timeout:
            payload["timeout"] = True
            payload["timeout_seconds"] = self.timeout_seconds
        return payload


def run_command(command: Sequence[str], *, timeout: float | None = None) -> CommandResult:
    argv = [str(part) for part in command]
    logger.debug("Running %s", " ".join(argv))
    try:
        process = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except FileNotFoundError as exc:
        return CommandResult(command=argv, returncode=127, stderr=str(exc))
    except subprocess.TimeoutExpired as exc:
        stdout = getattr(exc, "stdout", getattr(exc, "output", ""))
        stderr = getattr(exc, "stderr", "")
        return CommandResult(
            command=argv,
            returncode=None,
            stdout=_normalize_timeout_stream(stdout),
            stderr=_normalize_timeout_stream(stderr),
            timeout=True,
            timeout_seconds=timeout,
        )
    return CommandResult(command=argv, returncode=process.returncode, stdout=process.stdout, stderr=process.stderr)


def _is_simple_value(value: Any) -> bool:
    return isinstance(value, (str, int, float, bool)) or value is None


def _compact_payload(payload: Mapping[str, Any]) -> Dict[str, Any]:
    compact: Dict[str, Any] = {}
    for key in ("status", "message", "command"):
        if key in payload:
            compact[key] = payload[key]

    for key, value in payload.items():
        if key in compact:
            continue
        if _is_simple_value(value):
            compact[key] = value
        elif isinstance(value, list) and all(_is_simple_value(item) for item in value):
            compact[key] = value
    return compact


def response_payload(*sections: Mapping[str, Any] | None, verbose: bool = False) -> Dict[str, Any]:
    """Merge payload sections and optionally return a compact representation.

    Compact mode keeps status, message and simple scalar or list values; nested
    structures such as per-tool scores only appear when ``verbose`` is set.
    """

    merged: Dict[str, Any] = {}
    for section in sections:
        if section:
            merged.update(section)

    if verbose:
        return merged
    return _compact_payload(merged)


def error_payload(exc: BaseException) -> Dict[str, Any]:
    payload: Dict[str, Any] = {"status": "error", "message": str(exc), "error": type(exc).__name__}
    detail = getattr(exc, "detail", None)
    if detail:
        payload["detail"] = detail
    return payload


__all__ = [
    "CommandResult",
    "LavidError",
    "append_jsonl",
    "attach_log_file",
    "dump_jsonl_line",
    "ensure_parent",
    "error_payload",
    "iter_jsonl",
    "load_json",
    "logger",
    "read_jsonl",
    "response_payload",
    "run_command",
    "save_json",
    "utc_now",
    "write_jsonl",
]
