"""Application configuration loaded from a JSON or YAML file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .harness import DEFAULT_TASK_TIMEOUT_S, BenchConfig
from .llm import DecodingParams, HttpBackend
from .orchestrator import Backends, LoopConfig, SandboxConfig
from .tools import DATA_MOUNT


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelEndpoint:
    base_url: str
    model: str
    api_key_env: str | None = None
    retries: int = 3
    timeout_s: float = 300.0

    def backend(self) -> HttpBackend:
        return HttpBackend(self.base_url, self.model, self.api_key_env, retries=self.retries, timeout_s=self.timeout_s)


@dataclass(frozen=True)
class AppConfig:
    text_model: ModelEndpoint | None = None
    vision_model: ModelEndpoint | None = None
    loop: LoopConfig = field(default_factory=LoopConfig)
    sandbox: SandboxConfig = field(default_factory=SandboxConfig)
    sandbox_root: Path | None = None
    task_timeout_s: float = DEFAULT_TASK_TIMEOUT_S
    workers: int = 1

    @property
    def has_endpoints(self) -> bool:
        return self.text_model is not None

    def backends(self) -> Backends:
        """HTTP backends for both roles; the vision role falls back to the text model."""
        if self.text_model is None:
            raise ConfigError("no text_model endpoint configured (or pass --scripted)")
        text = self.text_model.backend()
        vision = self.vision_model.backend() if self.vision_model else text
        return Backends(text, vision)

    def bench(self) -> BenchConfig:
        return BenchConfig(self.loop, self.sandbox, self.task_timeout_s, self.workers)


def _section(doc: dict, key: str) -> dict:
    raw = doc.get(key) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{key}: expected a mapping")
    return raw


def _build(cls: type, raw: dict, where: str) -> Any:
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _endpoint(doc: dict, key: str) -> ModelEndpoint | None:
    raw = doc.get(key)
    if raw is None:
        return None
    if not isinstance(raw, dict) or not {"base_url", "model"} <= raw.keys():
        raise ConfigError(f"{key}: needs base_url and model")
    return _build(ModelEndpoint, raw, key)


def config_from_dict(doc: dict) -> AppConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping")
    known = {"text_model", "vision_model", "loop", "decoding", "sandbox", "bench"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    decoding = _build(DecodingParams, _section(doc, "decoding"), "decoding")
    loop = _build(LoopConfig, _section(doc, "loop") | {"decoding": decoding}, "loop")
    sandbox_raw = dict(_section(doc, "sandbox"))
    root = sandbox_raw.pop("root", None)
    sandbox_raw.setdefault("data_mount", DATA_MOUNT)
    sandbox = _build(SandboxConfig, sandbox_raw, "sandbox")
    bench = _section(doc, "bench")
    unknown = set(bench) - {"task_timeout_s", "workers"}
    if unknown:
        raise ConfigError(f"bench: unknown keys {sorted(unknown)}")
    return AppConfig(
        text_model=_endpoint(doc, "text_model"),
        vision_model=_endpoint(doc, "vision_model"),
        loop=loop,
        sandbox=sandbox,
        sandbox_root=Path(root) if root else None,
        task_timeout_s=float(bench.get("task_timeout_s", DEFAULT_TASK_TIMEOUT_S)),
        workers=int(bench.get("workers", 1)),
    )


def load_config(path: str | Path | None) -> AppConfig:
    """Load a JSON or YAML config file; ``None`` gives the defaults."""
    if path is None:
        return AppConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc or {})
