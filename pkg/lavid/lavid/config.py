"""Pipeline configuration loaded from a TOML file with environment overrides.

Defaults are the reference hyperparameters (alpha 0.5, reference 25%,
window 8, max 100 frames, 25 samples per class per slot, F1 threshold 0.8,
20 rewrites, 5 attempts per slot). Only credentials and provider location come
from the environment (``LAVID_API_KEY``, ``LAVID_API_BASE``, ``LAVID_MODEL_ID``).
"""

from __future__ import annotations

import os
import tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

from .common import LavidError

DEFAULT_ENDPOINT = "https://api.openai.com/v1"
DEFAULT_MODEL_ID = "gpt-4o"
DEFAULT_FRAME_COMMAND: Tuple[str, ...] = (
    "ffmpeg",
    "-nostdin",
    "-loglevel",
    "error",
    "-i",
    "{video}",
    "-frames:v",
    "{max_frames}",
    "-start_number",
    "0",
    "-pix_fmt",
    "rgb24",
    "{out_dir}/frame_%05d.png",
)

MODES = ("structured", "non_structured")
PROVIDER_KINDS = ("http", "mock")
F1_AVERAGES = ("binary", "macro")
BASELINE_PROMPTS = ("P1", "P2", "P3")


class ConfigError(LavidError, ValueError):
    """Raised when a configuration file or override is invalid."""


def _coerce_float(raw: Any, key: str, *, low: float | None = None, high: float | None = None) -> float:
    if isinstance(raw, bool):
        raise ConfigError(f"{key} must be a number", detail={"key": key, "value": raw})
    try:
        value = float(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be a number", detail={"key": key, "value": raw}) from exc
    if low is not None and value < low:
        raise ConfigError(f"{key} must be >= {low}", detail={"key": key, "value": value})
    if high is not None and value > high:
        raise ConfigError(f"{key} must be <= {high}", detail={"key": key, "value": value})
    return value


def _coerce_int(raw: Any, key: str, *, low: int | None = None) -> int:
    if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
        raise ConfigError(f"{key} must be an integer", detail={"key": key, "value": raw})
    try:
        value = int(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be an integer", detail={"key": key, "value": raw}) from exc
    if low is not None and value < low:
        raise ConfigError(f"{key} must be >= {low}", detail={"key": key, "value": value})
    return value


def _coerce_bool(raw: Any, key: str) -> bool:
    if isinstance(raw, bool):
        return raw
    if isinstance(raw, str):
        lowered = raw.strip().lower()
        if lowered in {"1", "true", "yes", "on"}:
            return True
        if lowered in {"0", "false", "no", "off"}:
            return False
    raise ConfigError(f"{key} must be a boolean", detail={"key": key, "value": raw})


def _coerce_choice(raw: Any, key: str, choices: Tuple[str, ...]) -> str:
    value = str(raw).strip()
    if value not in choices:
        raise ConfigError(f"{key} must be one of {', '.join(choices)}", detail={"key": key, "value": raw})
    return value


def _coerce_command(raw: Any, key: str) -> Tuple[str, ...]:
    if isinstance(raw, str):
        parts = raw.split()
    elif isinstance(raw, (list, tuple)):
        parts = [str(part) for part in raw]
    else:
        raise ConfigError(f"{key} must be a list of strings", detail={"key": key, "value": raw})
    if not parts:
        raise ConfigError(f"{key} must not be empty", detail={"key": key})
    return tuple(parts)


def _coerce_path(raw: Any) -> Path | None:
    if not raw:
        return None
    return Path(str(raw)).expanduser()


def _reject_unknown(section: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(
            f"Unknown configuration key(s) in {where}: {', '.join(unknown)}",
            detail={"section": where, "unknown": unknown},
        )


def _section(raw: Any, where: str) -> Mapping[str, Any]:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where} must be a table", detail={"section": where})
    return raw


@dataclass(frozen=True)
class ProviderSettings:
    kind: str = "http"
    endpoint: str = DEFAULT_ENDPOINT
    model_id: str = DEFAULT_MODEL_ID
    api_key: str | None = field(default=None, repr=False)
    native_schema: bool = True
    max_images: int = 16
    requests_per_second: float = 2.0
    timeout: float = 60.0
    max_retries: int = 3
    backoff_seconds: float = 1.0

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload.pop("api_key", None)
        return payload


@dataclass(frozen=True)
class AdapterSettings:
    command: Tuple[str, ...]
    concurrency_safe: bool = False
    timeout: float | None = None

    def to_dict(self) -> Dict[str, Any]:
        return {"command": list(self.command), "concurrency_safe": self.concurrency_safe, "timeout": self.timeout}


@dataclass(frozen=True)
class MockRuleSettings:
    tool: str = "*"
    truth: str = "*"
    field: str | None = None
    p_correct: float | None = None
    p_correct_boost: float = 0.0
    refusal: float | None = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class MockSettings:
    p_correct: float = 0.8
    tool_p_correct: Mapping[str, float] = field(default_factory=dict)
    confidence_low: float = 1.0
    confidence_high: float = 1.0
    refusal_nonstructured: float = 0.0
    refusal_structured: float = 0.0
    smp_scores: Mapping[str, float] = field(default_factory=dict)
    default_smp: float = 5.0
    pick_probability: float = 1.0
    rules: Tuple[MockRuleSettings, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "p_correct": self.p_correct,
            "tool_p_correct": dict(self.tool_p_correct),
            "confidence_low": self.confidence_low,
            "confidence_high": self.confidence_high,
            "refusal_nonstructured": self.refusal_nonstructured,
            "refusal_structured": self.refusal_structured,
            "smp_scores": dict(self.smp_scores),
            "default_smp": self.default_smp,
            "pick_probability": self.pick_probability,
            "rules": [rule.to_dict() for rule in self.rules],
        }


@dataclass(frozen=True)
class PipelineConfig:
    provider: ProviderSettings = field(default_factory=ProviderSettings)
    alpha: float = 0.5
    reference_fraction: float = 0.25
    adaptation_fraction: float = 0.5
    window: int = 8
    max_frames: int = 100
    batch_size_per_class: int = 25
    f1_threshold: float = 0.8
    rewrite_budget: int = 20
    attempts_per_slot: int = 5
    adapters: Mapping[str, AdapterSettings] = field(default_factory=dict)
    seed: int = 0
    mode: str = "structured"
    video_specific: bool = False
    repeats: int = 1
    jobs: int = 1
    frame_cache_size: int = 256
    frame_command: Tuple[str, ...] = DEFAULT_FRAME_COMMAND
    refusal_patterns_path: Path | None = None
    f1_average: str = "binary"
    cumulative_f1: bool = True
    baseline_prompt: str = "P1"
    prohibited_fields: Tuple[str, ...] = ()
    candidates: Tuple[str, ...] = ()
    mock: MockSettings = field(default_factory=MockSettings)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "provider": self.provider.to_dict(),
            "alpha": self.alpha,
            "reference_fraction": self.reference_fraction,
            "adaptation_fraction": self.adaptation_fraction,
            "window": self.window,
            "max_frames": self.max_frames,
            "batch_size_per_class": self.batch_size_per_class,
            "f1_threshold": self.f1_threshold,
            "rewrite_budget": self.rewrite_budget,
            "attempts_per_slot": self.attempts_per_slot,
            "adapters": {name: settings.to_dict() for name, settings in sorted(self.adapters.items())},
            "seed": self.seed,
            "mode": self.mode,
            "video_specific": self.video_specific,
            "repeats": self.repeats,
            "jobs": self.jobs,
            "frame_cache_size": self.frame_cache_size,
            "frame_command": list(self.frame_command),
            "refusal_patterns_path": str(self.refusal_patterns_path) if self.refusal_patterns_path else None,
            "f1_average": self.f1_average,
            "cumulative_f1": self.cumulative_f1,
            "baseline_prompt": self.baseline_prompt,
            "prohibited_fields": list(self.prohibited_fields),
            "candidates": list(self.candidates),
            "mock": self.mock.to_dict(),
        }

    def with_overrides(self, **overrides: Any) -> "PipelineConfig":
        """Return a copy with CLI overrides applied; ``None`` values are ignored."""

        updates = {key: value for key, value in overrides.items() if value is not None}
        if not updates:
            return self
        unknown = sorted(set(updates) - _TOP_LEVEL_KEYS)
        if unknown:
            raise ConfigError(f"Unknown override(s): {', '.join(unknown)}", detail={"unknown": unknown})
        candidate = replace(self, **updates)
        _validate(candidate)
        return candidate


_TOP_LEVEL_KEYS = {f.name for f in fields(PipelineConfig)}
_PROVIDER_KEYS = {f.name for f in fields(ProviderSettings)}
_ADAPTER_KEYS = {f.name for f in fields(AdapterSettings)}
_MOCK_KEYS = {f.name for f in fields(MockSettings)}
_RULE_KEYS = {f.name for f in fields(MockRuleSettings)}


def _validate(config: PipelineConfig) -> None:
    _coerce_float(config.alpha, "alpha", low=0.0, high=1.0)
    if not 0.0 < config.reference_fraction < 1.0:
        raise ConfigError("reference_fraction must be strictly between 0 and 1", detail={"value": config.reference_fraction})
    if not 0.0 <= config.adaptation_fraction <= 1.0:
        raise ConfigError("adaptation_fraction must be within [0, 1]", detail={"value": config.adaptation_fraction})
    _coerce_int(config.window, "window", low=1)
    _coerce_int(config.max_frames, "max_frames", low=1)
    _coerce_int(config.batch_size_per_class, "batch_size_per_class", low=1)
    _coerce_float(config.f1_threshold, "f1_threshold", low=0.0, high=1.0)
    _coerce_int(config.rewrite_budget, "rewrite_budget", low=0)
    _coerce_int(config.attempts_per_slot, "attempts_per_slot", low=0)
    _coerce_int(config.repeats, "repeats", low=1)
    _coerce_int(config.jobs, "jobs", low=1)
    _coerce_int(config.frame_cache_size, "frame_cache_size", low=1)
    _coerce_choice(config.mode, "mode", MODES)
    _coerce_choice(config.f1_average, "f1_average", F1_AVERAGES)
    _coerce_choice(config.baseline_prompt, "baseline_prompt", BASELINE_PROMPTS)
    _coerce_choice(config.provider.kind, "provider.kind", PROVIDER_KINDS)
    if config.mock.confidence_low > config.mock.confidence_high:
        raise ConfigError("mock.confidence_low must not exceed mock.confidence_high")


def _load_provider(raw: Mapping[str, Any]) -> ProviderSettings:
    _reject_unknown(raw, _PROVIDER_KEYS - {"api_key"}, "provider")

    def pick(key: str, env_var: str | None = None) -> Any:
        if env_var and env_var in os.environ:
            return os.environ[env_var]
        return raw.get(key)

    defaults = ProviderSettings()
    endpoint = pick("endpoint", "LAVID_API_BASE") or defaults.endpoint
    model_id = pick("model_id", "LAVID_MODEL_ID") or defaults.model_id
    api_key = os.environ.get("LAVID_API_KEY") or None
    return ProviderSettings(
        kind=_coerce_choice(raw.get("kind", defaults.kind), "provider.kind", PROVIDER_KINDS),
        endpoint=str(endpoint).rstrip("/"),
        model_id=str(model_id),
        api_key=api_key,
        native_schema=_coerce_bool(raw.get("native_schema", defaults.native_schema), "provider.native_schema"),
        max_images=_coerce_int(raw.get("max_images", defaults.max_images), "provider.max_images", low=1),
        requests_per_second=_coerce_float(
            raw.get("requests_per_second", defaults.requests_per_second), "provider.requests_per_second", low=0.0
        ),
        timeout=_coerce_float(raw.get("timeout", defaults.timeout), "provider.timeout", low=0.0),
        max_retries=_coerce_int(raw.get("max_retries", defaults.max_retries), "provider.max_retries", low=0),
        backoff_seconds=_coerce_float(raw.get("backoff_seconds", defaults.backoff_seconds), "provider.backoff_seconds", low=0.0),
    )


def _load_adapters(raw: Mapping[str, Any]) -> Dict[str, AdapterSettings]:
    from .ektools import REGISTRY

    unknown = sorted(str(name) for name in raw if str(name) not in REGISTRY)
    if unknown:
        raise ConfigError(
            f"Unknown adapter tool(s): {', '.join(unknown)}", detail={"unknown": unknown, "known": sorted(REGISTRY)}
        )
    adapters: Dict[str, AdapterSettings] = {}
    for tool_name, table in raw.items():
        section = _section(table, f"adapters.{tool_name}")
        _reject_unknown(section, _ADAPTER_KEYS, f"adapters.{tool_name}")
        if "command" not in section:
            raise ConfigError(f"adapters.{tool_name}.command is required", detail={"tool": tool_name})
        timeout = section.get("timeout")
        adapters[str(tool_name)] = AdapterSettings(
            command=_coerce_command(section["command"], f"adapters.{tool_name}.command"),
            concurrency_safe=_coerce_bool(section.get("concurrency_safe", False), f"adapters.{tool_name}.concurrency_safe"),
            timeout=_coerce_float(timeout, f"adapters.{tool_name}.timeout", low=0.0) if timeout is not None else None,
        )
    return adapters


def _probability(raw: Any, key: str) -> float:
    return _coerce_float(raw, key, low=0.0, high=1.0)


def _load_mock(raw: Mapping[str, Any]) -> MockSettings:
    _reject_unknown(raw, _MOCK_KEYS, "mock")
    defaults = MockSettings()
    rules = []
    for index, rule_raw in enumerate(raw.get("rules", []) or []):
        rule = _section(rule_raw, f"mock.rules[{index}]")
        _reject_unknown(rule, _RULE_KEYS, f"mock.rules[{index}]")
        rules.append(
            MockRuleSettings(
                tool=str(rule.get("tool", "*")),
                truth=str(rule.get("truth", "*")),
                field=str(rule["field"]) if rule.get("field") else None,
                p_correct=_probability(rule["p_correct"], "mock.rules.p_correct") if "p_correct" in rule else None,
                p_correct_boost=_coerce_float(rule.get("p_correct_boost", 0.0), "mock.rules.p_correct_boost", low=-1.0, high=1.0),
                refusal=_probability(rule["refusal"], "mock.rules.refusal") if "refusal" in rule else None,
            )
        )
    tool_p = _section(raw.get("tool_p_correct"), "mock.tool_p_correct")
    smp = _section(raw.get("smp_scores"), "mock.smp_scores")
    return MockSettings(
        p_correct=_probability(raw.get("p_correct", defaults.p_correct), "mock.p_correct"),
        tool_p_correct={str(k): _probability(v, f"mock.tool_p_correct.{k}") for k, v in tool_p.items()},
        confidence_low=_probability(raw.get("confidence_low", defaults.confidence_low), "mock.confidence_low"),
        confidence_high=_probability(raw.get("confidence_high", defaults.confidence_high), "mock.confidence_high"),
        refusal_nonstructured=_probability(
            raw.get("refusal_nonstructured", defaults.refusal_nonstructured), "mock.refusal_nonstructured"
        ),
        refusal_structured=_probability(raw.get("refusal_structured", defaults.refusal_structured), "mock.refusal_structured"),
        smp_scores={str(k): _coerce_float(v, f"mock.smp_scores.{k}", low=0.0, high=10.0) for k, v in smp.items()},
        default_smp=_coerce_float(raw.get("default_smp", defaults.default_smp), "mock.default_smp", low=0.0, high=10.0),
        pick_probability=_probability(raw.get("pick_probability", defaults.pick_probability), "mock.pick_probability"),
        rules=tuple(rules),
    )


def config_from_mapping(raw: Mapping[str, Any]) -> PipelineConfig:
    _reject_unknown(raw, _TOP_LEVEL_KEYS, "top level")
    defaults = PipelineConfig()

    def get(key: str) -> Any:
        return raw.get(key, getattr(defaults, key))

    config = PipelineConfig(
        provider=_load_provider(_section(raw.get("provider"), "provider")),
        alpha=_coerce_float(get("alpha"), "alpha", low=0.0, high=1.0),
        reference_fraction=_coerce_float(get("reference_fraction"), "reference_fraction"),
        adaptation_fraction=_coerce_float(get("adaptation_fraction"), "adaptation_fraction"),
        window=_coerce_int(get("window"), "window", low=1),
        max_frames=_coerce_int(get("max_frames"), "max_frames", low=1),
        batch_size_per_class=_coerce_int(get("batch_size_per_class"), "batch_size_per_class", low=1),
        f1_threshold=_coerce_float(get("f1_threshold"), "f1_threshold", low=0.0, high=1.0),
        rewrite_budget=_coerce_int(get("rewrite_budget"), "rewrite_budget", low=0),
        attempts_per_slot=_coerce_int(get("attempts_per_slot"), "attempts_per_slot", low=0),
        adapters=_load_adapters(_section(raw.get("adapters"), "adapters")),
        seed=_coerce_int(get("seed"), "seed"),
        mode=_coerce_choice(get("mode"), "mode", MODES),
        video_specific=_coerce_bool(get("video_specific"), "video_specific"),
        repeats=_coerce_int(get("repeats"), "repeats", low=1),
        jobs=_coerce_int(get("jobs"), "jobs", low=1),
        frame_cache_size=_coerce_int(get("frame_cache_size"), "frame_cache_size", low=1),
        frame_command=_coerce_command(get("frame_command"), "frame_command"),
        refusal_patterns_path=_coerce_path(raw.get("refusal_patterns_path")),
        f1_average=_coerce_choice(get("f1_average"), "f1_average", F1_AVERAGES),
        cumulative_f1=_coerce_bool(get("cumulative_f1"), "cumulative_f1"),
        baseline_prompt=_coerce_choice(get("baseline_prompt"), "baseline_prompt", BASELINE_PROMPTS),
        prohibited_fields=tuple(str(name) for name in raw.get("prohibited_fields", ()) or ()),
        candidates=tuple(str(name) for name in raw.get("candidates", ()) or ()),
        mock=_load_mock(_section(raw.get("mock"), "mock")),
    )
    _validate(config)
    return config


def load_config(config_path: Path | None = None) -> PipelineConfig:
    """Load ``config_path`` (TOML); ``None`` yields defaults plus env overrides."""

    if config_path is None:
        return config_from_mapping({})
    try:
        with Path(config_path).open("rb") as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file not found: {config_path}", detail={"path": str(config_path)}) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"Invalid TOML in {config_path}: {exc}", detail={"path": str(config_path)}) from exc
    return config_from_mapping(raw)


__all__ = [
    "AdapterSettings",
    "ConfigError",
    "DEFAULT_FRAME_COMMAND",
    "MockRuleSettings",
    "MockSettings",
    "PipelineConfig",
    "ProviderSettings",
    "config_from_mapping",
    "load_config",
]
