"""Explicit-knowledge (EK) tools that turn raw frames into derived images.

Appearance tools (saturation, denoise, sharpen, enhance, segmentation), motion
tools (optical flow, landmark) and geometry tools (depth, edge) follow the
canonical registry below. Filters and flow run in-process on numpy/OpenCV;
segmentation, landmark and depth are delegated to external adapter commands.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Sequence, Tuple

import cv2
import numpy as np

from .common import LavidError
from .dataset import FrameSequence

LOG = logging.getLogger(__name__)

DENOISE_KSIZE = 5
DENOISE_SIGMA = 1.5
SHARPEN_SIGMA = 1.0
SHARPEN_AMOUNT = 1.0
SHARPEN_KSIZE = 7
FLOW_LAMBDA = 0.1
FLOW_ITERATIONS = 100
FLOW_TOLERANCE = 1e-4

# Horn-Schunck neighbourhood average (weights sum to 1, centre excluded).
_HS_AVERAGE_KERNEL = np.array(
    [[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]],
    dtype=np.float64,
)


class ToolError(LavidError):
    """A tool failed; ``detail['tool']`` names it."""


class TooFewFrames(ToolError):
    """Optical flow needs at least two frames."""


class AdapterUnavailable(ToolError):
    """An external adapter tool is not configured or its command failed."""


class ToolCategory(str, Enum):
    APPEARANCE = "appearance"
    MOTION = "motion"
    GEOMETRY = "geometry"
    RAW = "raw"


class ToolKind(str, Enum):
    BUILTIN_FILTER = "builtin_filter"
    BUILTIN_FLOW = "builtin_flow"
    EXTERNAL_ADAPTER = "external_adapter"


@dataclass(frozen=True)
class EKTool:
    name: str
    category: ToolCategory
    kind: ToolKind
    label: str
    description: str
    aliases: Tuple[str, ...] = ()

    @property
    def display_name(self) -> str:
        return "RGB" if self.name == "rgb" else self.name


@dataclass(frozen=True)
class EKArtifact:
    tool: str
    frames: FrameSequence
    meta: Mapping[str, str] = field(default_factory=dict)


REGISTRY: Dict[str, EKTool] = {
    tool.name: tool
    for tool in (
        EKTool(
            "saturation",
            ToolCategory.APPEARANCE,
            ToolKind.BUILTIN_FILTER,
            "saturation maps",
            "AI-generated videos may exhibit anomalies in color rendering. Saturation estimation detects color "
            "unevenness, oversaturation, or undersaturation to identify artificial elements.",
            ("saturation", "colour saturation", "color saturation"),
        ),
        EKTool(
            "denoise",
            ToolCategory.APPEARANCE,
            ToolKind.BUILTIN_FILTER,
            "denoised frames",
            "Denoising isolates unnatural noise patterns present in AI-generated videos. Residual artifacts after "
            "denoising can signal synthesized or forged content.",
            ("denois", "noise reduction", "noise analysis"),
        ),
        EKTool(
            "sharpen",
            ToolCategory.APPEARANCE,
            ToolKind.BUILTIN_FILTER,
            "sharpened frames",
            "Sharpening frames emphasizes edges, making it easier to spot unnatural boundaries or blending "
            "artifacts, which may indicate forgery.",
            ("sharpen",),
        ),
        EKTool(
            "enhance",
            ToolCategory.APPEARANCE,
            ToolKind.BUILTIN_FILTER,
            "contrast-enhanced frames",
            "Image enhancement boosts details and contrast, revealing synthetic artifacts like unnatural textures "
            "or color inconsistencies.",
            ("enhance", "contrast"),
        ),
        EKTool(
            "segmentation",
            ToolCategory.APPEARANCE,
            ToolKind.EXTERNAL_ADAPTER,
            "segmentation maps",
            "Segmentation maps identify mismatched regions in synthesized content, such as areas where the object "
            "segmentation boundaries do not align with real-world logic.",
            ("segment",),
        ),
        EKTool(
            "optical_flow",
            ToolCategory.MOTION,
            ToolKind.BUILTIN_FLOW,
            "optical flow visualizations",
            "AI-generated videos may have abnormal motion patterns, such as discontinuous movements or unnatural "
            "trajectories. Optical flow estimation detects whether object motion in the video is smooth and "
            "adheres to physical laws.",
            ("optical flow", "optical_flow", "motion flow"),
        ),
        EKTool(
            "landmark",
            ToolCategory.MOTION,
            ToolKind.EXTERNAL_ADAPTER,
            "landmark maps",
            "In AI-generated videos, facial or body key point localization may show anomalies, such as "
            "misalignment or unnatural movement. Landmark estimation detects these anomalies to identify potential "
            "forgery.",
            ("landmark", "keypoint", "key point", "pose estimation"),
        ),
        EKTool(
            "depth",
            ToolCategory.GEOMETRY,
            ToolKind.EXTERNAL_ADAPTER,
            "depth maps",
            "Depth information is consistent in real scenes but may exhibit anomalies in AI-generated videos. "
            "Depth estimation detects issues like depth dislocation and discontinuity, helping identify forged "
            "content.",
            ("depth",),
        ),
        EKTool(
            "edge",
            ToolCategory.GEOMETRY,
            ToolKind.BUILTIN_FILTER,
            "edge maps",
            "Synthetic videos often feature unnatural edge details, such as blurred, jagged, or discontinuous "
            "object boundaries. Edge detection identifies such abnormalities to pinpoint fake or synthetic "
            "elements.",
            ("edge",),
        ),
        EKTool(
            "rgb",
            ToolCategory.RAW,
            ToolKind.BUILTIN_FILTER,
            "raw frames",
            "Raw RGB frames without additional processing.",
        ),
    )
}

CANDIDATE_TOOLS: Tuple[str, ...] = tuple(name for name in REGISTRY if name != "rgb")


def get_tool(tool: str | EKTool) -> EKTool:
    if isinstance(tool, EKTool):
        return tool
    try:
        return REGISTRY[str(tool).strip()]
    except KeyError as exc:
        raise ValueError(f"Unknown EK tool {tool!r}; expected one of {', '.join(REGISTRY)}") from exc


def resolve_tools(names: Sequence[str | EKTool]) -> List[EKTool]:
    return [get_tool(name) for name in names]


def saturation_map(frame: np.ndarray) -> np.ndarray:
    saturation = cv2.cvtColor(frame, cv2.COLOR_RGB2HSV)[..., 1]
    return np.repeat(saturation[..., None], 3, axis=2)


def denoise_frame(frame: np.ndarray) -> np.ndarray:
    return cv2.GaussianBlur(frame, (DENOISE_KSIZE, DENOISE_KSIZE), DENOISE_SIGMA)


def sharpen_frame(frame: np.ndarray, *, amount: float = SHARPEN_AMOUNT, sigma: float = SHARPEN_SIGMA) -> np.ndarray:
    """Unsharp mask with a separable 7-tap Gaussian and reflect-101 borders."""

    source = frame.astype(np.float64)
    kernel = cv2.getGaussianKernel(SHARPEN_KSIZE, sigma, cv2.CV_64F)
    blurred = cv2.sepFilter2D(source, cv2.CV_64F, kernel, kernel, borderType=cv2.BORDER_REFLECT_101)
    sharpened = source + amount * (source - blurred)
    return np.clip(np.rint(sharpened), 0, 255).astype(np.uint8)


def enhance_frame(frame: np.ndarray) -> np.ndarray:
    source = frame.astype(np.float64)
    out = np.zeros_like(source)
    for channel in range(source.shape[2]):
        plane = source[..., channel]
        low, high = float(plane.min()), float(plane.max())
        if high > low:
            out[..., channel] = (plane - low) * 255.0 / (high - low)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def edge_map(frame: np.ndarray) -> np.ndarray:
    gray = cv2.cvtColor(frame, cv2.COLOR_RGB2GRAY).astype(np.float64)
    gx = cv2.Sobel(gray, cv2.CV_64F, 1, 0, ksize=3)
    gy = cv2.Sobel(gray, cv2.CV_64F, 0, 1, ksize=3)
    magnitude = np.hypot(gx, gy)
    peak = float(magnitude.max())
    if peak > 0:
        magnitude = magnitude * 255.0 / peak
    edges = np.clip(np.rint(magnitude), 0, 255).astype(np.uint8)
    return np.repeat(edges[..., None], 3, axis=2)


def horn_schunck_flow(
    previous: np.ndarray,
    following: np.ndarray,
    *,
    lambda_: float = FLOW_LAMBDA,
    iterations: int = FLOW_ITERATIONS,
    tolerance: float = FLOW_TOLERANCE,
) -> Tuple[np.ndarray, np.ndarray]:
    """Dense (u, v) flow in pixels from ``previous`` to ``following`` (RGB uint8)."""

    first = cv2.cvtColor(previous, cv2.COLOR_RGB2GRAY).astype(np.float64) / 255.0
    second = cv2.cvtColor(following, cv2.COLOR_RGB2GRAY).astype(np.float64) / 255.0
    Iy, Ix = np.gradient((first + second) / 2.0)
    It = second - first

    u = np.zeros_like(first)
    v = np.zeros_like(first)
    denominator = lambda_**2 + Ix**2 + Iy**2
    for _ in range(iterations):
        u_mean = cv2.filter2D(u, -1, _HS_AVERAGE_KERNEL, borderType=cv2.BORDER_REPLICATE)
        v_mean = cv2.filter2D(v, -1, _HS_AVERAGE_KERNEL, borderType=cv2.BORDER_REPLICATE)
        alpha = (Ix * u_mean + Iy * v_mean + It) / denominator
        u_next = u_mean - alpha * Ix
        v_next = v_mean - alpha * Iy
        update = float(np.mean(np.abs(u_next - u) + np.abs(v_next - v)))
        u, v = u_next, v_next
        if update < tolerance:
            break
    return u, v


def flow_to_rgb(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Colour-wheel rendering: hue is direction, value is magnitude scaled to the frame maximum."""

    magnitude, angle = cv2.cartToPolar(u.astype(np.float32), v.astype(np.float32), angleInDegrees=True)
    hsv = np.zeros((*u.shape, 3), dtype=np.uint8)
    hsv[..., 0] = (np.rint(angle / 2.0).astype(np.int32) % 180).astype(np.uint8)
    hsv[..., 1] = 255
    peak = float(magnitude.max())
    if peak > 1e-6:
        hsv[..., 2] = np.clip(np.rint(magnitude * 255.0 / peak), 0, 255).astype(np.uint8)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


_FRAME_FILTERS = {
    "saturation": (saturation_map, {"color_space": "hsv", "channel": "s"}),
    "denoise": (denoise_frame, {"kernel": "gaussian", "ksize": str(DENOISE_KSIZE), "sigma": str(DENOISE_SIGMA)}),
    "sharpen": (
        sharpen_frame,
        {"kernel": "unsharp_mask", "ksize": str(SHARPEN_KSIZE), "sigma": str(SHARPEN_SIGMA), "amount": str(SHARPEN_AMOUNT)},
    ),
    "enhance": (enhance_frame, {"stretch": "per_channel_min_max"}),
    "edge": (edge_map, {"kernel": "sobel", "ksize": "3", "normalize": "max"}),
}


def _flow_artifact(frames: FrameSequence) -> EKArtifact:
    if len(frames) < 2:
        raise TooFewFrames("optical_flow needs at least two frames", detail={"tool": "optical_flow", "frames": len(frames)})
    rendered = []
    for previous, following in zip(frames.frames, frames.frames[1:]):
        u, v = horn_schunck_flow(previous, following)
        rendered.append(flow_to_rgb(u, v))
    meta = {
        "method": "horn_schunck",
        "lambda": str(FLOW_LAMBDA),
        "iterations": str(FLOW_ITERATIONS),
        "tolerance": str(FLOW_TOLERANCE),
        "visualization": "hsv_color_wheel",
    }
    return EKArtifact("optical_flow", FrameSequence.of(rendered), meta)


def apply_tool(tool: str | EKTool, frames: FrameSequence, *, adapters: Mapping[str, object] | None = None) -> EKArtifact:
    """Derive the EK artifact for ``tool`` from ``frames``."""

    resolved = get_tool(tool)
    if resolved.name == "rgb":
        return EKArtifact("rgb", frames, {"identity": "true"})
    if resolved.kind is ToolKind.BUILTIN_FLOW:
        return _flow_artifact(frames)
    if resolved.kind is ToolKind.EXTERNAL_ADAPTER:
        from .adapters import run_adapter

        settings = (adapters or {}).get(resolved.name)
        if settings is None:
            raise AdapterUnavailable(
                f"No adapter configured for {resolved.name}; add [adapters.{resolved.name}] to the config",
                detail={"tool": resolved.name},
            )
        derived = run_adapter(resolved.name, frames, settings)
        return EKArtifact(resolved.name, derived, {"adapter": " ".join(getattr(settings, "command", ()))})

    kernel, meta = _FRAME_FILTERS[resolved.name]
    return EKArtifact(resolved.name, FrameSequence.of([kernel(frame) for frame in frames]), dict(meta))


def apply_toolkit(
    tools: Sequence[str | EKTool], frames: FrameSequence, *, adapters: Mapping[str, object] | None = None
) -> List[EKArtifact]:
    if not tools:
        raise ValueError("tools must not be empty")
    artifacts: List[EKArtifact] = []
    for tool in tools:
        name = get_tool(tool).name
        try:
            artifacts.append(apply_tool(tool, frames, adapters=adapters))
        except LavidError as exc:
            exc.detail.setdefault("tool", name)
            raise
    return artifacts


def is_available(tool: str | EKTool, adapters: Mapping[str, object] | None = None) -> bool:
    resolved = get_tool(tool)
    return resolved.kind is not ToolKind.EXTERNAL_ADAPTER or resolved.name in (adapters or {})


__all__ = [
    "AdapterUnavailable",
    "CANDIDATE_TOOLS",
    "EKArtifact",
    "EKTool",
    "REGISTRY",
    "ToolCategory",
    "ToolError",
    "ToolKind",
    "TooFewFrames",
    "apply_tool",
    "apply_toolkit",
    "denoise_frame",
    "edge_map",
    "enhance_frame",
    "flow_to_rgb",
    "get_tool",
    "horn_schunck_flow",
    "is_available",
    "resolve_tools",
    "saturation_map",
    "sharpen_frame",
]
