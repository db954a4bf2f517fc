import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Callable, List

import numpy as np
import pytest


ROOT = Path(__file__).resolve().parents[1]
PACKAGE_ROOT = ROOT / "lavid"
if str(PACKAGE_ROOT) not in sys.path:
    sys.path.insert(0, str(PACKAGE_ROOT))

from lavid import common  # noqa: E402
from lavid.dataset import GroundTruth, VideoSample, write_frame, write_manifest  # noqa: E402
from lavid.inference import FrameStore  # noqa: E402
from lavid.lvlm import MockBehavior, MockLvlm, mock_configure  # noqa: E402
from lavid.prompting import set_refusal_patterns  # noqa: E402


class _ListHandler(logging.Handler):
    def __init__(self):
        super().__init__()
        self.records: list[logging.LogRecord] = []

    def emit(self, record):  # pragma: no cover - logging internals
        self.records.append(record)

    @property
    def messages(self) -> list[str]:
        return [record.getMessage() for record in self.records]


def procedural_frames(seed: int, count: int = 8, size: int = 16, *, synthetic: bool = False) -> List[np.ndarray]:
    """Smooth moving gradients for real samples, noisy colour blocks for AI samples."""

    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = []
    for index in range(count):
        if synthetic:
            frame = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        else:
            phase = index * 0.3 + seed
            base = 127.5 + 100.0 * np.sin(2 * np.pi * (xs + index) / size + phase) * np.cos(2 * np.pi * ys / size)
            frame = np.stack([base, base * 0.8 + 20, 255 - base], axis=2)
            frame = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
        frames.append(frame)
    return frames


def write_sample(root: Path, sample_id: str, label: GroundTruth, *, source: str = "synthetic", seed: int = 0, count: int = 8, size: int = 16) -> VideoSample:
    frames_dir = root / sample_id
    for index, frame in enumerate(procedural_frames(seed, count, size, synthetic=label is GroundTruth.AI)):
        write_frame(frames_dir / f"frame_{index:05d}.png", frame)
    return VideoSample(sample_id, source, label, frames_dir, count)


@pytest.fixture(autouse=True)
def _default_refusal_patterns():
    set_refusal_patterns(None)
    yield
    set_refusal_patterns(None)


@pytest.fixture(autouse=True)
def _detach_log_files():
    yield
    for handler in list(common.logger.handlers):
        if isinstance(handler, RotatingFileHandler):
            common.logger.removeHandler(handler)
            handler.close()


@pytest.fixture
def log_handler():
    return _ListHandler()


@pytest.fixture
def log_capture(log_handler: _ListHandler):
    common.logger.addHandler(log_handler)
    try:
        yield log_handler
    finally:
        common.logger.removeHandler(log_handler)


@pytest.fixture
def make_samples(tmp_path: Path) -> Callable[..., List[VideoSample]]:
    """Build ``n_real`` + ``n_ai`` prepared samples under ``tmp_path/frames``."""

    def factory(n_real: int, n_ai: int, *, count: int = 8, size: int = 16, sources=("synthetic",), prefix: str = "") -> List[VideoSample]:
        samples = []
        for index in range(n_real):
            source = sources[index % len(sources)]
            samples.append(write_sample(tmp_path / "frames", f"{prefix}real_{index:03d}", GroundTruth.REAL, source=source, seed=index, count=count, size=size))
        for index in range(n_ai):
            source = sources[index % len(sources)]
            samples.append(write_sample(tmp_path / "frames", f"{prefix}ai_{index:03d}", GroundTruth.AI, source=source, seed=1000 + index, count=count, size=size))
        return samples

    return factory


@pytest.fixture
def manifest_path(tmp_path: Path, make_samples) -> Path:
    path = tmp_path / "manifest.jsonl"
    write_manifest(path, make_samples(20, 20, sources=("sora", "pika")))
    return path


@pytest.fixture
def store() -> FrameStore:
    return FrameStore(window=8)


@pytest.fixture
def mock_for() -> Callable[..., MockLvlm]:
    """Mock client knowing the ground truth of ``samples``."""

    def factory(samples, **behavior) -> MockLvlm:
        truths = {sample.id: sample.label for sample in samples}
        return mock_configure(MockBehavior(truths=truths, **behavior))

    return factory
