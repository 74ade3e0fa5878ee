"""
Run configuration

Settings come from three places, later ones winning: environment (.env), a TOML
file passed with --config, and CLI flags.
"""

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator

from isg.errors import SchemaViolation
from isg.gateway import BackendConfig, BackendKind, DecodingParams

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
NOISY_LOGGERS = ("httpx", "httpcore", "openai", "uvicorn.access")


class VqaMode(str, Enum):
    SCORE = "score"
    YES_NO = "yesno"


class Level(str, Enum):
    STRUCTURAL = "structural"
    BLOCK = "block"
    IMAGE = "image"
    HOLISTIC = "holistic"


ALL_LEVELS = (Level.STRUCTURAL, Level.BLOCK, Level.IMAGE, Level.HOLISTIC)


class EvalConfig(BaseModel):
    vqa_mode: VqaMode = VqaMode.SCORE
    levels: tuple[Level, ...] = ALL_LEVELS
    use_golden: bool = True
    workers: int = Field(default=4, ge=1)
    temperature: float = Field(default=0.0, ge=0.0)
    max_output_tokens: int = Field(default=1024, gt=0)
    few_shot: bool = True
    block_vision_input: bool = False
    image_vision_input: bool = True

    @field_validator("levels", mode="before")
    @classmethod
    def _split_levels(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(part.strip() for part in value.split(",") if part.strip())
        return value

    @field_validator("levels")
    @classmethod
    def _order_levels(cls, value: tuple[Level, ...]) -> tuple[Level, ...]:
        # Block and image levels hang off the structure prediction
        wanted = set(value)
        if wanted & {Level.BLOCK, Level.IMAGE}:
            wanted.add(Level.STRUCTURAL)
        return tuple(level for level in ALL_LEVELS if level in wanted)

    def enabled(self, level: Level) -> bool:
        return level in self.levels

    @property
    def decoding(self) -> DecodingParams:
        return DecodingParams(
            temperature=self.temperature, max_output_tokens=self.max_output_tokens
        )


class RunConfig(BaseModel):
    backend: BackendConfig
    eval: EvalConfig = EvalConfig()

    def echo(self) -> dict[str, Any]:
        """Config summary written into report.json. No paths, no secrets."""
        return {
            "backend": self.backend.kind.value,
            "model": self.backend.model,
            "temperature": self.eval.temperature,
            "max_output_tokens": self.eval.max_output_tokens,
            "vqa_mode": self.eval.vqa_mode.value,
            "levels": [level.value for level in self.eval.levels],
            "use_golden": self.eval.use_golden,
            "few_shot": self.eval.few_shot,
            "block_vision_input": self.eval.block_vision_input,
            "image_vision_input": self.eval.image_vision_input,
            "workers": self.eval.workers,
        }


def read_toml(path: Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise SchemaViolation(str(path), "<toml>", str(e)) from e


def _first_error_field(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"]) or "<root>"


def load_run_config(
    path: Optional[Path] = None,
    backend_overrides: Optional[dict[str, Any]] = None,
    eval_overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """
    Build the run configuration from an optional TOML file plus CLI overrides.

    None-valued overrides are ignored so unset CLI flags keep file values.

    Raises:
        SchemaViolation: the file or the merged settings do not validate
    """
    raw: dict[str, Any] = read_toml(path) if path is not None else {}
    base_dir = path.parent if path is not None else Path.cwd()

    backend_raw = dict(raw.get("backend", {}))
    backend_raw.update({k: v for k, v in (backend_overrides or {}).items() if v is not None})
    for key in ("cache_dir", "fixture"):
        if key in backend_raw and backend_raw[key] is not None:
            candidate = Path(backend_raw[key])
            if path is not None and key not in (backend_overrides or {}) and not candidate.is_absolute():
                candidate = base_dir / candidate
            backend_raw[key] = candidate

    eval_raw = dict(raw.get("eval", {}))
    eval_raw.update({k: v for k, v in (eval_overrides or {}).items() if v is not None})

    source = str(path) if path is not None else "<cli>"
    try:
        backend = BackendConfig(**backend_raw)
    except ValidationError as e:
        raise SchemaViolation(source, f"backend.{_first_error_field(e)}", e.errors()[0]["msg"]) from e
    try:
        eval_config = EvalConfig(**eval_raw)
    except ValidationError as e:
        raise SchemaViolation(source, f"eval.{_first_error_field(e)}", e.errors()[0]["msg"]) from e

    if backend.kind is BackendKind.HTTP_CHAT and not os.getenv(backend.api_key_env):
        logger.warning(f"{backend.api_key_env} is not set; the HTTP backend may reject requests")
    return RunConfig(backend=backend, eval=eval_config)


class ToolEndpoint(BaseModel):
    kind: str = "http"
    endpoint: Optional[str] = None
    timeout: float = Field(default=120.0, gt=0)

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, value: str) -> str:
        if value not in ("http", "mock"):
            raise ValueError(f"unknown tool kind '{value}'")
        return value


def load_tools_config(path: Optional[Path]) -> dict[str, ToolEndpoint]:
    """Read tools.toml: one table per tool name with either `endpoint` or `kind = "mock"`."""
    if path is None:
        return {}
    raw = read_toml(path)
    tools: dict[str, ToolEndpoint] = {}
    for name, table in raw.items():
        if not isinstance(table, dict):
            raise SchemaViolation(str(path), name, "expected a table")
        try:
            entry = ToolEndpoint(**table)
        except ValidationError as e:
            raise SchemaViolation(str(path), f"{name}.{_first_error_field(e)}", e.errors()[0]["msg"]) from e
        if entry.kind == "http" and not entry.endpoint:
            raise SchemaViolation(str(path), f"{name}.endpoint", "required for http tools")
        tools[name] = entry
    return tools


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)
    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)
