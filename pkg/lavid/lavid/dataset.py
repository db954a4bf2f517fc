"""Video manifests, frame extraction, windowing and dataset splits.

A manifest is line-delimited JSON with ``{id, source, label, video_path | frames_dir}``
per line. Frames are stored as ``frame_%05d.png`` (0-based, RGB 8-bit) and
decoded with OpenCV.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Sequence, Tuple

import cv2
import numpy as np

from .common import LavidError, dump_jsonl_line, ensure_parent, iter_jsonl, run_command
from .config import DEFAULT_FRAME_COMMAND

LOG = logging.getLogger(__name__)

FRAME_PATTERN = "frame_{index:05d}.png"
FRAME_GLOB = "frame_*.png"
DEFAULT_WINDOW = 8
DEFAULT_MAX_FRAMES = 100


class ExtractionFailed(LavidError):
    """The external frame-extraction command exited nonzero."""


class NotAVideo(LavidError):
    """Extraction succeeded but produced no frames."""


class EmptyClass(LavidError):
    """A label has no samples, so a stratified split is impossible."""


class ManifestError(LavidError, ValueError):
    """A manifest line is malformed or an id repeats."""


class GroundTruth(str, Enum):
    REAL = "real"
    AI = "ai"

    @classmethod
    def parse(cls, value: Any) -> "GroundTruth":
        if isinstance(value, GroundTruth):
            return value
        lowered = str(value).strip().lower()
        if lowered in {"real", "0", "authentic", "genuine"}:
            return cls.REAL
        if lowered in {"ai", "fake", "1", "generated", "synthetic"}:
            return cls.AI
        raise ValueError(f"Unknown label {value!r}; expected 'real' or 'ai'")

    @property
    def opposite(self) -> "GroundTruth":
        return GroundTruth.AI if self is GroundTruth.REAL else GroundTruth.REAL


@dataclass(frozen=True)
class VideoSample:
    id: str
    source: str
    label: GroundTruth
    frames_dir: Path | None = None
    frame_count: int = 0
    video_path: Path | None = None

    @property
    def prepared(self) -> bool:
        return self.frames_dir is not None and self.frame_count >= 1

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"id": self.id, "source": self.source, "label": self.label.value}
        if self.video_path is not None:
            payload["video_path"] = str(self.video_path)
        if self.frames_dir is not None:
            payload["frames_dir"] = str(self.frames_dir)
        payload["frame_count"] = self.frame_count
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any], *, base_dir: Path | None = None) -> "VideoSample":
        try:
            sample_id = str(payload["id"])
            label = GroundTruth.parse(payload["label"])
        except KeyError as exc:
            raise ManifestError(f"Manifest entry missing {exc.args[0]!r}", detail={"entry": dict(payload)}) from exc
        except ValueError as exc:
            raise ManifestError(str(exc), detail={"entry": dict(payload)}) from exc

        def resolve(key: str) -> Path | None:
            raw = payload.get(key)
            if not raw:
                return None
            path = Path(str(raw)).expanduser()
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return path

        video_path = resolve("video_path")
        frames_dir = resolve("frames_dir")
        if video_path is None and frames_dir is None:
            raise ManifestError(
                f"Manifest entry {sample_id} needs video_path or frames_dir", detail={"id": sample_id}
            )
        frame_count = int(payload.get("frame_count") or 0)
        if frames_dir is not None and not frame_count:
            frame_count = len(list_frame_files(frames_dir))
        return cls(
            id=sample_id,
            source=str(payload.get("source") or "unknown"),
            label=label,
            frames_dir=frames_dir,
            frame_count=frame_count,
            video_path=video_path,
        )


@dataclass(frozen=True)
class FrameSequence:
    """Ordered RGB frames of identical shape; arrays are read-only."""

    frames: Tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("FrameSequence must contain at least one frame")
        frozen: List[np.ndarray] = []
        shape = None
        for frame in self.frames:
            array = np.asarray(frame)
            if array.dtype != np.uint8 or array.ndim != 3 or array.shape[2] != 3:
                raise ValueError(f"Frames must be HxWx3 uint8 arrays, got {array.dtype} {array.shape}")
            if shape is None:
                shape = array.shape
            elif array.shape != shape:
                raise ValueError(f"Frame dimensions differ: {array.shape} != {shape}")
            if array.flags.writeable:
                array = array.copy()
                array.setflags(write=False)
            frozen.append(array)
        object.__setattr__(self, "frames", tuple(frozen))

    @classmethod
    def of(cls, frames: Sequence[np.ndarray]) -> "FrameSequence":
        return cls(tuple(frames))

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.frames)

    def __getitem__(self, index: int) -> np.ndarray:
        return self.frames[index]

    @property
    def height(self) -> int:
        return int(self.frames[0].shape[0])

    @property
    def width(self) -> int:
        return int(self.frames[0].shape[1])


@dataclass(frozen=True)
class DatasetSplit:
    reference: Tuple[VideoSample, ...]
    adaptation: Tuple[VideoSample, ...]
    inference: Tuple[VideoSample, ...]
    seed: int
    reference_fraction: float = 0.25

    def __post_init__(self) -> None:
        seen: Dict[str, str] = {}
        for name in ("reference", "adaptation", "inference"):
            for sample in getattr(self, name):
                if sample.id in seen:
                    raise ValueError(f"Sample {sample.id} appears in both {seen[sample.id]} and {name}")
                seen[sample.id] = name

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "reference_fraction": self.reference_fraction,
            "reference": [sample.id for sample in self.reference],
            "adaptation": [sample.id for sample in self.adaptation],
            "inference": [sample.id for sample in self.inference],
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any], samples: Mapping[str, VideoSample]) -> "DatasetSplit":
        def pick(key: str) -> Tuple[VideoSample, ...]:
            try:
                return tuple(samples[sample_id] for sample_id in payload.get(key, []))
            except KeyError as exc:
                raise ManifestError(f"Split references unknown sample {exc.args[0]}") from exc

        return cls(
            reference=pick("reference"),
            adaptation=pick("adaptation"),
            inference=pick("inference"),
            seed=int(payload.get("seed", 0)),
            reference_fraction=float(payload.get("reference_fraction", 0.25)),
        )


def list_frame_files(frames_dir: Path) -> List[Path]:
    if not frames_dir.is_dir():
        return []
    return sorted(frames_dir.glob(FRAME_GLOB))


def read_frame(path: Path) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise LavidError(f"Could not decode frame {path}", detail={"path": str(path)})
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def write_frame(path: Path, frame: np.ndarray) -> None:
    ensure_parent(path)
    if not cv2.imwrite(str(path), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR)):
        raise LavidError(f"Could not write frame {path}", detail={"path": str(path)})


def encode_png(frame: np.ndarray) -> bytes:
    ok, buffer = cv2.imencode(".png", cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    if not ok:
        raise LavidError("PNG encoding failed")
    return buffer.tobytes()


def load_manifest(path: Path) -> List[VideoSample]:
    samples: List[VideoSample] = []
    seen: set[str] = set()
    for record in iter_jsonl(path):
        sample = VideoSample.from_dict(record, base_dir=path.parent)
        if sample.id in seen:
            raise ManifestError(f"Duplicate sample id {sample.id} in {path}", detail={"id": sample.id})
        seen.add(sample.id)
        samples.append(sample)
    if not samples:
        raise ManifestError(f"Manifest {path} is empty", detail={"path": str(path)})
    return samples


def _relative_to(path: Path | None, base: Path) -> str | None:
    if path is None:
        return None
    resolved = path.resolve()
    try:
        return resolved.relative_to(base).as_posix()
    except ValueError:
        return str(resolved)


def write_manifest(path: Path, samples: Sequence[VideoSample]) -> None:
    """Write ``samples`` with paths relative to the manifest's directory where possible."""

    ensure_parent(path)
    base = path.parent.resolve()
    with path.open("w", encoding="utf-8") as handle:
        for sample in samples:
            payload = sample.to_dict()
            for key, value in (("video_path", sample.video_path), ("frames_dir", sample.frames_dir)):
                relative = _relative_to(value, base)
                if relative is not None:
                    payload[key] = relative
            handle.write(dump_jsonl_line(payload) + "\n")


def _run_command(command: Sequence[str], *, timeout: float | None = None):
    return run_command(command, timeout=timeout)


def prepare_frames(
    video_path: Path,
    out_dir: Path,
    max_frames: int = DEFAULT_MAX_FRAMES,
    *,
    command: Sequence[str] = DEFAULT_FRAME_COMMAND,
    timeout: float | None = None,
) -> int:
    """Extract up to ``max_frames`` consecutive frames from the start of ``video_path``."""

    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    if not video_path.exists():
        raise ExtractionFailed(f"Video not found: {video_path}", detail={"video": str(video_path)})
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in list_frame_files(out_dir):
        stale.unlink()

    argv = [
        part.format(video=str(video_path), out_dir=str(out_dir), max_frames=max_frames) for part in command
    ]
    result = _run_command(argv, timeout=timeout)
    if not result.ok:
        raise ExtractionFailed(
            f"Frame extraction failed for {video_path}",
            detail={"video": str(video_path), **result.to_dict()},
        )

    frames = list_frame_files(out_dir)
    for extra in frames[max_frames:]:
        extra.unlink()
    count = min(len(frames), max_frames)
    if count == 0:
        raise NotAVideo(f"No frames extracted from {video_path}", detail={"video": str(video_path)})
    LOG.debug("Extracted %d frame(s) from %s into %s", count, video_path, out_dir)
    return count


def prepare_sample(
    sample: VideoSample,
    frames_root: Path,
    *,
    max_frames: int = DEFAULT_MAX_FRAMES,
    command: Sequence[str] = DEFAULT_FRAME_COMMAND,
) -> VideoSample:
    if sample.frames_dir is not None and list_frame_files(sample.frames_dir):
        count = min(len(list_frame_files(sample.frames_dir)), max_frames)
        return VideoSample(sample.id, sample.source, sample.label, sample.frames_dir, count, sample.video_path)
    if sample.video_path is None:
        raise NotAVideo(f"Sample {sample.id} has no frames and no video", detail={"id": sample.id})
    out_dir = frames_root / sample.id
    count = prepare_frames(sample.video_path, out_dir, max_frames, command=command)
    return VideoSample(sample.id, sample.source, sample.label, out_dir, count, sample.video_path)


def prepare_manifest(
    samples: Sequence[VideoSample],
    frames_root: Path,
    *,
    max_frames: int = DEFAULT_MAX_FRAMES,
    command: Sequence[str] = DEFAULT_FRAME_COMMAND,
    jobs: int = 1,
) -> List[VideoSample]:
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(
            pool.map(lambda sample: prepare_sample(sample, frames_root, max_frames=max_frames, command=command), samples)
        )


def window_bounds(frame_count: int, window: int = DEFAULT_WINDOW) -> range:
    if window < 1:
        raise ValueError("window must be >= 1")
    if frame_count <= window:
        return range(0, max(frame_count, 0))
    start = (frame_count - window) // 2
    start = min(max(start, 0), frame_count - window)
    return range(start, start + window)


def select_window(sample: VideoSample, window: int = DEFAULT_WINDOW) -> FrameSequence:
    """Return the middle ``window`` frames of a prepared sample."""

    if sample.frames_dir is None:
        raise LavidError(f"Sample {sample.id} is not prepared", detail={"id": sample.id})
    files = list_frame_files(sample.frames_dir)[: sample.frame_count or None]
    indices = window_bounds(len(files), window)
    if not indices:
        raise NotAVideo(f"Sample {sample.id} has no frames", detail={"id": sample.id})
    return FrameSequence.of([read_frame(files[index]) for index in indices])


def _quota_by_source(groups: Mapping[str, List[VideoSample]], quota: int, fraction: float) -> Dict[str, int]:
    """Floor each source's share, then top up the largest sources until ``quota`` is met."""

    shares = {source: math.floor(fraction * len(members)) for source, members in groups.items()}
    remaining = quota - sum(shares.values())
    order = sorted(groups, key=lambda source: (-len(groups[source]), source))
    while remaining > 0:
        progressed = False
        for source in order:
            if remaining == 0:
                break
            if shares[source] < len(groups[source]):
                shares[source] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return shares


def _stratified_take(
    pools: Mapping[str, Mapping[str, List[VideoSample]]], fraction: float
) -> Tuple[List[VideoSample], Dict[str, Dict[str, List[VideoSample]]]]:
    taken: List[VideoSample] = []
    rest: Dict[str, Dict[str, List[VideoSample]]] = {}
    for label, groups in pools.items():
        label_total = sum(len(members) for members in groups.values())
        quota = math.floor(fraction * label_total)
        shares = _quota_by_source(groups, quota, fraction)
        rest[label] = {}
        for source in sorted(groups):
            members = groups[source]
            taken.extend(members[: shares[source]])
            rest[label][source] = members[shares[source]:]
    return taken, rest


def split_manifest(
    manifest: Sequence[VideoSample],
    reference_fraction: float = 0.25,
    seed: int = 0,
    *,
    adaptation_fraction: float = 0.5,
) -> DatasetSplit:
    """Split into reference, adaptation and inference sets stratified by label and source."""

    if not 0.0 < reference_fraction < 1.0:
        raise ValueError("reference_fraction must be strictly between 0 and 1")
    if not manifest:
        raise ValueError("manifest must not be empty")

    rng = np.random.default_rng(seed)
    ordered = sorted(manifest, key=lambda sample: sample.id)
    pools: Dict[str, Dict[str, List[VideoSample]]] = {}
    for label in GroundTruth:
        members = [sample for sample in ordered if sample.label is label]
        if not members:
            raise EmptyClass(f"No samples labelled {label.value}", detail={"label": label.value})
        by_source: Dict[str, List[VideoSample]] = {}
        for sample in members:
            by_source.setdefault(sample.source, []).append(sample)
        pools[label.value] = {
            source: [group[i] for i in rng.permutation(len(group))] for source, group in sorted(by_source.items())
        }

    reference, remaining = _stratified_take(pools, reference_fraction)
    adaptation, leftover = _stratified_take(remaining, adaptation_fraction)
    inference = [sample for label in leftover.values() for group in label.values() for sample in group]

    def shuffled(samples: List[VideoSample]) -> Tuple[VideoSample, ...]:
        return tuple(samples[i] for i in rng.permutation(len(samples)))

    split = DatasetSplit(
        reference=shuffled(reference),
        adaptation=shuffled(adaptation),
        inference=shuffled(inference),
        seed=seed,
        reference_fraction=reference_fraction,
    )
    LOG.info(
        "Split %d sample(s): reference=%d adaptation=%d inference=%d (seed %d)",
        len(manifest),
        len(split.reference),
        len(split.adaptation),
        len(split.inference),
        seed,
    )
    return split


__all__ = [
    "DatasetSplit",
    "EmptyClass",
    "ExtractionFailed",
    "FrameSequence",
    "GroundTruth",
    "ManifestError",
    "NotAVideo",
    "VideoSample",
    "encode_png",
    "list_frame_files",
    "load_manifest",
    "prepare_frames",
    "prepare_manifest",
    "prepare_sample",
    "read_frame",
    "select_window",
    "split_manifest",
    "window_bounds",
    "write_frame",
    "write_manifest",
]
