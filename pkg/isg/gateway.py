"""
Model gateway

Every language / vision-language model call goes through ModelGateway.complete:
it fingerprints the request, serves repeats from the response cache, retries
transient backend errors with exponential backoff and appends new spend to the
run ledger.
"""

import asyncio
import hashlib
import json
import logging
import math
import os
import re
import threading
from contextlib import asynccontextmanager
from enum import Enum
from pathlib import Path
from typing import Any, AsyncIterator, Optional, Protocol, Union

import openai
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tenacity import (
    AsyncRetrying,
    RetryError,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from isg.content import ImageRef
from isg.errors import BackendUnreachable, FixtureMiss, NoJsonFound

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_MODEL = os.getenv("ISG_JUDGE_MODEL", "gpt-4o")
DEFAULT_ENDPOINT = os.getenv("ISG_ENDPOINT")
DEFAULT_CACHE_DIR = os.getenv("ISG_CACHE_DIR")


class BackendKind(str, Enum):
    HTTP_CHAT = "http"
    MOCK = "mock"


class DecodingParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    temperature: float = Field(default=0.0, ge=0.0)
    max_output_tokens: int = Field(default=1024, gt=0)


class ModelRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    role_prompt: str
    user_parts: tuple[Union[str, ImageRef], ...]
    decoding: DecodingParams = DecodingParams()

    @field_validator("user_parts")
    @classmethod
    def _non_empty(cls, value: tuple) -> tuple:
        if not value:
            raise ValueError("user_parts must not be empty")
        return value

    @property
    def text(self) -> str:
        """All textual content of the request, role prompt first."""
        return "\n".join([self.role_prompt] + [p for p in self.user_parts if isinstance(p, str)])


class TokenUsage(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_tokens: int = Field(default=0, ge=0)
    output_tokens: int = Field(default=0, ge=0)

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            input_tokens=self.input_tokens + other.input_tokens,
            output_tokens=self.output_tokens + other.output_tokens,
        )


class ModelResponse(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    usage: TokenUsage
    estimated: bool = False
    cached: bool = False


class BackendConfig(BaseModel):
    kind: BackendKind = BackendKind.HTTP_CHAT
    endpoint: Optional[str] = DEFAULT_ENDPOINT
    model: str = DEFAULT_MODEL
    api_key_env: str = "OPENAI_API_KEY"
    cache_dir: Optional[Path] = Path(DEFAULT_CACHE_DIR) if DEFAULT_CACHE_DIR else None
    retries: int = Field(default=2, ge=0)
    timeout: float = Field(default=120.0, gt=0)
    backoff: float = Field(default=1.0, ge=0)
    fixture: Optional[Path] = None

    @model_validator(mode="after")
    def _check_kind(self) -> "BackendConfig":
        if self.kind is BackendKind.MOCK and self.fixture is None:
            raise ValueError("MOCK backend requires a fixture path")
        return self


class LedgerEntry(BaseModel):
    fingerprint: str
    purpose: str
    input_tokens: int
    output_tokens: int
    estimated: bool
    sample_id: Optional[str] = None


class Ledger:
    """Append-only record of new token spend for one run."""

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    def append(self, entry: LedgerEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def total(self) -> TokenUsage:
        usage = TokenUsage()
        for entry in self.entries:
            usage = usage + TokenUsage(
                input_tokens=entry.input_tokens, output_tokens=entry.output_tokens
            )
        return usage

    def dump(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump([e.model_dump() for e in self.entries], f, indent=2)


# --- helpers ---


def request_fingerprint(req: ModelRequest) -> str:
    """Deterministic digest over role prompt, parts (images by content hash) and decoding."""
    parts = []
    for part in req.user_parts:
        if isinstance(part, str):
            parts.append({"text": part})
        else:
            parts.append({"image_sha256": part.digest(), "media_type": part.media_type})
    payload = {
        "role_prompt": req.role_prompt,
        "parts": parts,
        "temperature": req.decoding.temperature,
        "max_output_tokens": req.decoding.max_output_tokens,
    }
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_FENCE = re.compile(r"```(?:json|JSON)?\s*\n?(.*?)```", re.DOTALL)


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite number {name} in JSON")


def extract_json(text: str) -> Any:
    """
    Return the first parsable JSON object or array in a model reply.

    Markdown code fences are tried first, then every '{' / '[' position in the
    text, so leading and trailing prose is ignored.

    Raises:
        NoJsonFound: when no balanced JSON object/array exists (NaN and
            Infinity are not JSON)
    """
    decoder = json.JSONDecoder(parse_constant=_reject_constant)
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    for candidate in candidates:
        for position, char in enumerate(candidate):
            if char not in "{[":
                continue
            try:
                value, _ = decoder.raw_decode(candidate, position)
            except ValueError:
                continue
            return value
    raise NoJsonFound(f"no JSON object or array in reply: {text[:80]!r}")


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


# --- backends ---


class TransientBackendError(Exception):
    """Raised by backends for errors worth retrying."""


class BackendReply(BaseModel):
    text: str
    usage: Optional[TokenUsage] = None


class ModelBackend(Protocol):
    async def send(self, req: ModelRequest, fingerprint: str, purpose: str) -> BackendReply: ...


class OpenAIChatBackend:
    """OpenAI-compatible chat completions endpoint."""

    def __init__(self, config: BackendConfig):
        self.model = config.model
        self.client = openai.AsyncOpenAI(
            base_url=config.endpoint,
            api_key=os.getenv(config.api_key_env) or "EMPTY",
            timeout=config.timeout,
            max_retries=0,
        )

    @staticmethod
    def build_messages(req: ModelRequest) -> list[dict[str, Any]]:
        content: list[dict[str, Any]] = []
        for part in req.user_parts:
            if isinstance(part, str):
                content.append({"type": "text", "text": part})
            else:
                content.append({"type": "image_url", "image_url": {"url": part.data_url()}})
        return [
            {"role": "system", "content": req.role_prompt},
            {"role": "user", "content": content},
        ]

    async def send(self, req: ModelRequest, fingerprint: str, purpose: str) -> BackendReply:
        try:
            completion = await self.client.chat.completions.create(
                model=self.model,
                messages=self.build_messages(req),
                temperature=req.decoding.temperature,
                max_tokens=req.decoding.max_output_tokens,
            )
        except (openai.APIConnectionError, openai.APITimeoutError, openai.RateLimitError) as e:
            raise TransientBackendError(str(e)) from e
        except openai.APIStatusError as e:
            if e.status_code >= 500:
                raise TransientBackendError(str(e)) from e
            raise BackendUnreachable(f"{purpose}: backend rejected request: {e}") from e

        text = completion.choices[0].message.content or ""
        usage = None
        if completion.usage is not None:
            usage = TokenUsage(
                input_tokens=completion.usage.prompt_tokens,
                output_tokens=completion.usage.completion_tokens,
            )
        return BackendReply(text=text, usage=usage)


class MockRule(BaseModel):
    """Scripted reply chosen when purpose and substring both match."""

    purpose: Optional[str] = None
    contains: Optional[str] = None
    response: Any
    usage: Optional[TokenUsage] = None

    def matches(self, req: ModelRequest, purpose: str) -> bool:
        if self.purpose is not None and self.purpose != purpose:
            return False
        if self.contains is not None and self.contains not in req.text:
            return False
        return True

    def reply_text(self) -> str:
        if isinstance(self.response, str):
            return self.response
        return json.dumps(self.response, ensure_ascii=False)


class MockBackend:
    """
    Deterministic backend for tests and demos.

    Replies are looked up by request fingerprint first, then by the first
    matching rule (purpose and/or substring of the request text).
    """

    def __init__(
        self,
        responses: Optional[dict[str, Any]] = None,
        rules: Optional[list[Union[MockRule, dict[str, Any]]]] = None,
    ):
        self.responses = dict(responses or {})
        self.rules = [r if isinstance(r, MockRule) else MockRule(**r) for r in rules or []]
        self.calls: list[tuple[str, str]] = []

    @classmethod
    def from_fixture(cls, path: Path) -> "MockBackend":
        with open(path, "r", encoding="utf-8") as f:
            fixture = json.load(f)
        return cls(responses=fixture.get("responses"), rules=fixture.get("rules"))

    async def send(self, req: ModelRequest, fingerprint: str, purpose: str) -> BackendReply:
        self.calls.append((purpose, fingerprint))
        if fingerprint in self.responses:
            reply = self.responses[fingerprint]
            text = reply if isinstance(reply, str) else json.dumps(reply, ensure_ascii=False)
            return BackendReply(text=text)
        for rule in self.rules:
            if rule.matches(req, purpose):
                return BackendReply(text=rule.reply_text(), usage=rule.usage)
        raise FixtureMiss(fingerprint, purpose)

    def count(self, purpose_prefix: str = "") -> int:
        return sum(1 for purpose, _ in self.calls if purpose.startswith(purpose_prefix))


def build_backend(config: BackendConfig) -> ModelBackend:
    if config.kind is BackendKind.MOCK:
        return MockBackend.from_fixture(config.fixture)
    return OpenAIChatBackend(config)


# --- gateway ---


class ResponseCache:
    """Fingerprint-keyed store, in memory and optionally one JSON file per key on disk."""

    def __init__(self, cache_dir: Optional[Path] = None):
        self.cache_dir = cache_dir
        self._memory: dict[str, ModelResponse] = {}
        if cache_dir is not None:
            cache_dir.mkdir(parents=True, exist_ok=True)

    def get(self, fingerprint: str) -> Optional[ModelResponse]:
        if fingerprint in self._memory:
            return self._memory[fingerprint]
        if self.cache_dir is None:
            return None
        path = self.cache_dir / f"{fingerprint}.json"
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as f:
            response = ModelResponse.model_validate(json.load(f))
        self._memory[fingerprint] = response
        return response

    def put(self, fingerprint: str, response: ModelResponse) -> None:
        self._memory[fingerprint] = response
        if self.cache_dir is not None:
            path = self.cache_dir / f"{fingerprint}.json"
            with open(path, "w", encoding="utf-8") as f:
                json.dump(response.model_dump(), f, ensure_ascii=False)

    def count(self) -> int:
        return len(self._memory)


class ModelGateway:
    """Single choke-point for model calls: cache, retries, usage ledger."""

    def __init__(
        self,
        backend: ModelBackend,
        cache_dir: Optional[Path] = None,
        retries: int = 2,
        backoff: float = 1.0,
        ledger: Optional[Ledger] = None,
        decoding: Optional[DecodingParams] = None,
    ):
        self.backend = backend
        self.cache = ResponseCache(cache_dir)
        self.retries = retries
        self.backoff = backoff
        self.ledger = ledger if ledger is not None else Ledger()
        self.decoding = decoding or DecodingParams()
        # fingerprint -> (lock, number of callers holding or waiting on it)
        self._flights: dict[str, tuple[asyncio.Lock, int]] = {}
        self._flights_guard = threading.Lock()

    @classmethod
    def from_config(
        cls, config: BackendConfig, decoding: Optional[DecodingParams] = None
    ) -> "ModelGateway":
        return cls(
            build_backend(config),
            cache_dir=config.cache_dir,
            retries=config.retries,
            backoff=config.backoff,
            decoding=decoding,
        )

    def request(self, role_prompt: str, *parts: Union[str, ImageRef]) -> ModelRequest:
        """Build a request with this gateway's default decoding parameters."""
        return ModelRequest(role_prompt=role_prompt, user_parts=tuple(parts), decoding=self.decoding)

    @asynccontextmanager
    async def _flight(self, fingerprint: str) -> AsyncIterator[None]:
        """Serialize identical requests; the entry is dropped once nobody holds or waits on it."""
        with self._flights_guard:
            lock, users = self._flights.get(fingerprint, (None, 0))
            if lock is None:
                lock = asyncio.Lock()
            self._flights[fingerprint] = (lock, users + 1)
        try:
            async with lock:
                yield
        finally:
            with self._flights_guard:
                lock, users = self._flights[fingerprint]
                if users == 1:
                    del self._flights[fingerprint]
                else:
                    self._flights[fingerprint] = (lock, users - 1)

    async def complete(
        self, req: ModelRequest, purpose: str = "generic", sample_id: Optional[str] = None
    ) -> ModelResponse:
        """
        Send a request, or serve it from cache.

        Raises:
            BackendUnreachable: backend still failing after the retry budget
            FixtureMiss: MOCK backend has no scripted reply for this request
        """
        fingerprint = request_fingerprint(req)
        async with self._flight(fingerprint):
            cached = self.cache.get(fingerprint)
            if cached is not None:
                logger.debug(f"Cache hit for {purpose} ({fingerprint[:12]})")
                return cached.model_copy(update={"cached": True})

            reply = await self._send_with_retry(req, fingerprint, purpose)
            estimated = reply.usage is None
            usage = reply.usage or TokenUsage(
                input_tokens=estimate_tokens(req.text), output_tokens=estimate_tokens(reply.text)
            )
            response = ModelResponse(text=reply.text, usage=usage, estimated=estimated)
            self.cache.put(fingerprint, response)
            self.ledger.append(
                LedgerEntry(
                    fingerprint=fingerprint,
                    purpose=purpose,
                    input_tokens=usage.input_tokens,
                    output_tokens=usage.output_tokens,
                    estimated=estimated,
                    sample_id=sample_id,
                )
            )
            logger.debug(f"{purpose} reply: {reply.text[:200]!r}")
            return response

    async def _send_with_retry(
        self, req: ModelRequest, fingerprint: str, purpose: str
    ) -> BackendReply:
        attempts = 0
        try:
            async for attempt in AsyncRetrying(
                stop=stop_after_attempt(self.retries + 1),
                wait=wait_exponential(multiplier=self.backoff, max=30),
                retry=retry_if_exception_type(TransientBackendError),
                reraise=False,
            ):
                with attempt:
                    attempts += 1
                    if attempts > 1:
                        logger.warning(f"Retrying {purpose} (attempt {attempts})")
                    return await self.backend.send(req, fingerprint, purpose)
        except RetryError as e:
            raise BackendUnreachable(
                f"{purpose}: backend unreachable after {attempts} attempt(s): "
                f"{e.last_attempt.exception()}"
            ) from e
        raise BackendUnreachable(f"{purpose}: no attempt made")

    def scoped(self, sample_id: str) -> "ScopedGateway":
        return ScopedGateway(self, sample_id)


class ScopedGateway:
    """
    View of a gateway for one sample: tags ledger entries with the sample id and
    meters the nominal usage of every response consumed, per purpose.
    """

    def __init__(self, gateway: ModelGateway, sample_id: str):
        self.gateway = gateway
        self.sample_id = sample_id
        self.usage_by_purpose: dict[str, TokenUsage] = {}

    @property
    def decoding(self) -> DecodingParams:
        return self.gateway.decoding

    def request(self, role_prompt: str, *parts: Union[str, ImageRef]) -> ModelRequest:
        return self.gateway.request(role_prompt, *parts)

    async def complete(self, req: ModelRequest, purpose: str = "generic") -> ModelResponse:
        response = await self.gateway.complete(req, purpose=purpose, sample_id=self.sample_id)
        previous = self.usage_by_purpose.get(purpose, TokenUsage())
        self.usage_by_purpose[purpose] = previous + response.usage
        return response

    def usage(self, prefix: str = "") -> TokenUsage:
        total = TokenUsage()
        for purpose, usage in self.usage_by_purpose.items():
            if purpose.startswith(prefix):
                total = total + usage
        return total


# Evaluators accept either the run-wide gateway or a per-sample view of it
Gateway = Union[ModelGateway, ScopedGateway]
