"""
Tool box for the answer-generation agent.

Declares the five generation tools with their input/output contracts, maps plan
step text to tools by keyword, and provides two clients: a deterministic mock
that paints flat-colour images, and an HTTP client for remote tool servers.
"""

import base64
import hashlib
import io
import logging
import re
from typing import Any, Optional, Protocol

import httpx
from PIL import Image, PngImagePlugin
from pydantic import BaseModel, ConfigDict, Field

from isg.config import ToolEndpoint
from isg.content import ImageRef

logger = logging.getLogger(__name__)

DEFAULT_FRAME_COUNT = 4
DEFAULT_VIEW_COUNT = 4
MORPH_FRAME_COUNT = 4
MOCK_IMAGE_SIZE = (64, 64)


class ToolSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    image_arity: int = Field(ge=0)
    exclusive: bool = False
    keywords: tuple[str, ...]
    description: str

    @property
    def max_uses_per_plan(self) -> Optional[int]:
        return 1 if self.exclusive else None

    def output_count(self, text: str) -> int:
        """Number of images one call returns for the given step text."""
        if self.name == "VideoGeneration":
            return requested_frame_count(text)
        if self.name == "Video3DGeneration":
            return requested_view_count(text)
        if self.name == "ImageMorph":
            return MORPH_FRAME_COUNT
        return 1


TOOL_BOX: tuple[ToolSpec, ...] = (
    ToolSpec(
        name="ImageGeneration",
        image_arity=0,
        keywords=("generate one image", "generate an image"),
        description="one image from text only",
    ),
    ToolSpec(
        name="ImageEdit",
        image_arity=1,
        keywords=("edit the image",),
        description="edit one input image following text",
    ),
    ToolSpec(
        name="VideoGeneration",
        image_arity=1,
        exclusive=True,
        keywords=("generate a continuous video",),
        description="frames of a continuous event from text and one image",
    ),
    ToolSpec(
        name="Video3DGeneration",
        image_arity=1,
        exclusive=True,
        keywords=("generate 3d views",),
        description="requested views of a 3D object from one image",
    ),
    ToolSpec(
        name="ImageMorph",
        image_arity=2,
        exclusive=True,
        keywords=("morphing from",),
        description="four images morphing from the first image to the second",
    ),
)


def tool_registry(tools: Optional[list[ToolSpec]] = None) -> dict[str, ToolSpec]:
    return {tool.name: tool for tool in tools or TOOL_BOX}


_NUMBER_WORDS = {
    "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10,
}
_FRAME_REQUEST = re.compile(
    r"\b(\d+|" + "|".join(_NUMBER_WORDS) + r")\s+(?:images|frames|screenshots|pictures)\b",
    re.IGNORECASE,
)
_VIEW_ENTRY = re.compile(r"\bAngle\s*\d+\s*:", re.IGNORECASE)


def requested_frame_count(text: str) -> int:
    match = _FRAME_REQUEST.search(text or "")
    if not match:
        return DEFAULT_FRAME_COUNT
    raw = match.group(1).lower()
    count = int(raw) if raw.isdigit() else _NUMBER_WORDS[raw]
    return count if count > 0 else DEFAULT_FRAME_COUNT


def requested_view_count(text: str) -> int:
    views = len(_VIEW_ENTRY.findall(text or ""))
    return views or DEFAULT_VIEW_COUNT


def detect_tools(text: Optional[str], tools: Optional[list[ToolSpec]] = None) -> list[ToolSpec]:
    """
    Map a Call_tool instruction to candidate tools by guidance phrase.

    Returns every tool whose phrase occurs in the text, in tool box order.
    """
    if not text:
        return []
    lowered = " ".join(text.lower().split())
    return [tool for tool in tools or TOOL_BOX if any(k in lowered for k in tool.keywords)]


def narrow_by_arity(candidates: list[ToolSpec], image_count: int) -> list[ToolSpec]:
    """Prefer candidates whose image arity fits; keep all when none does."""
    fitting = [tool for tool in candidates if tool.image_arity == image_count]
    return fitting or candidates


# --- tool calls ---


class ToolRequest(BaseModel):
    prompt: str = ""
    images: list[str] = []
    count: int = Field(default=1, ge=1)
    step: int = Field(default=0, ge=0)


class ToolResult(BaseModel):
    success: bool
    images: list[ImageRef] = []
    error: Optional[str] = None


class ToolClient(Protocol):
    async def run(
        self, tool: ToolSpec, prompt: str, images: list[ImageRef], count: int, step: int
    ) -> ToolResult: ...


def render_flat_image(tool: str, prompt: str, step: int, index: int, sources: list[str]) -> bytes:
    """Flat-colour PNG whose colour and metadata identify the call that produced it."""
    seed = "|".join([tool, prompt, str(step), str(index), *sources])
    digest = hashlib.sha256(seed.encode("utf-8")).digest()
    image = Image.new("RGB", MOCK_IMAGE_SIZE, color=(digest[0], digest[1], digest[2]))
    info = PngImagePlugin.PngInfo()
    info.add_text("isg-tool", tool)
    info.add_text("isg-step", str(step))
    info.add_text("isg-index", str(index))
    buffer = io.BytesIO()
    image.save(buffer, format="PNG", pnginfo=info)
    return buffer.getvalue()


def read_stamp(image: ImageRef) -> dict[str, str]:
    """Metadata stamped by render_flat_image, or {} for other images."""
    with Image.open(io.BytesIO(image.read_bytes())) as loaded:
        return {k: v for k, v in loaded.info.items() if k.startswith("isg-")}


class MockToolClient:
    """
    Deterministic tool backend.

    failures maps a plan step number to how many times its calls should fail
    before succeeding.
    """

    def __init__(self, failures: Optional[dict[int, int]] = None):
        self.failures = dict(failures or {})
        self.calls: list[tuple[int, str]] = []

    async def run(
        self, tool: ToolSpec, prompt: str, images: list[ImageRef], count: int, step: int
    ) -> ToolResult:
        self.calls.append((step, tool.name))
        if len(images) != tool.image_arity:
            return ToolResult(
                success=False,
                error=f"{tool.name} takes {tool.image_arity} image(s), got {len(images)}",
            )
        if self.failures.get(step, 0) > 0:
            self.failures[step] -= 1
            return ToolResult(success=False, error=f"{tool.name} failed at step {step}")
        sources = [image.digest() for image in images]
        outputs = [
            ImageRef.from_bytes(render_flat_image(tool.name, prompt, step, index, sources))
            for index in range(count)
        ]
        return ToolResult(success=True, images=outputs)


def encode_image(image: ImageRef) -> str:
    return base64.b64encode(image.read_bytes()).decode("ascii")


class HttpToolClient:
    """Calls POST {endpoint}/tools/{name} on a tool server; errors come back as failed results."""

    def __init__(self, endpoints: dict[str, str], timeout: Optional[float] = 120.0, transport: Any = None):
        self.endpoints = endpoints
        self.timeout = timeout
        self.transport = transport

    async def run(
        self, tool: ToolSpec, prompt: str, images: list[ImageRef], count: int, step: int
    ) -> ToolResult:
        endpoint = self.endpoints.get(tool.name)
        if endpoint is None:
            return ToolResult(success=False, error=f"no endpoint configured for {tool.name}")
        payload = ToolRequest(
            prompt=prompt, images=[encode_image(i) for i in images], count=count, step=step
        )
        url = f"{endpoint.rstrip('/')}/tools/{tool.name}"
        try:
            async with httpx.AsyncClient(timeout=self.timeout, transport=self.transport) as client:
                response = await client.post(url, json=payload.model_dump())
                response.raise_for_status()
                body = response.json()
        except httpx.HTTPError as e:
            return ToolResult(success=False, error=f"{tool.name} request failed: {e}")
        except ValueError as e:
            return ToolResult(success=False, error=f"{tool.name} returned invalid JSON: {e}")

        if not isinstance(body, dict) or not body.get("success", False):
            error = body.get("error") if isinstance(body, dict) else f"unexpected response {type(body)}"
            return ToolResult(success=False, error=error or "tool reported failure")
        try:
            outputs = [ImageRef.from_bytes(base64.b64decode(data)) for data in body.get("images", [])]
        except (TypeError, ValueError) as e:
            return ToolResult(success=False, error=f"{tool.name} returned undecodable images: {e}")
        return ToolResult(success=True, images=outputs)


class RoutedToolClient:
    """Dispatches each tool to its configured client (mock or HTTP)."""

    def __init__(self, routes: dict[str, ToolClient], default: Optional[ToolClient] = None):
        self.routes = routes
        self.default = default

    async def run(
        self, tool: ToolSpec, prompt: str, images: list[ImageRef], count: int, step: int
    ) -> ToolResult:
        client = self.routes.get(tool.name, self.default)
        if client is None:
            return ToolResult(success=False, error=f"no client configured for {tool.name}")
        return await client.run(tool, prompt, images, count, step)


def build_tool_client(endpoints: dict[str, ToolEndpoint]) -> ToolClient:
    """
    Client for a tools.toml mapping. Tools declared `kind = "mock"` share one
    mock client; with no tools file at all every tool is mocked.
    """
    if not endpoints:
        return MockToolClient()
    mock = MockToolClient()
    routes: dict[str, ToolClient] = {}
    for name, entry in endpoints.items():
        if name not in tool_registry():
            logger.warning(f"tools config names unknown tool '{name}', ignoring it")
            continue
        if entry.kind == "mock":
            routes[name] = mock
        else:
            routes[name] = HttpToolClient({name: entry.endpoint}, timeout=entry.timeout)
    return RoutedToolClient(routes)
