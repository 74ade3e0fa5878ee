"""
HTTP tool server.

Serves the tool box over REST so the agent can reach tools through
HttpToolClient. Images are rendered by the deterministic flat-colour backend.
"""

import base64
import binascii
import logging
from typing import Optional

import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from isg.agent.tools import MockToolClient, ToolRequest, encode_image, tool_registry
from isg.content import ImageRef
from isg.prompts import AGENT_TOOL_FUNCTIONS

logger = logging.getLogger(__name__)


class ToolResponse(BaseModel):
    success: bool
    tool: str
    images: list[str] = []
    error: Optional[str] = None


def create_app(client: Optional[MockToolClient] = None) -> FastAPI:
    app = FastAPI(
        title="ISG Tool Server",
        description="REST API for the agent's image generation tools",
        version="1.0.0",
    )
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )
    backend = client or MockToolClient()
    registry = tool_registry()

    @app.get("/health")
    async def health_check():
        return {"status": "healthy", "service": "isg-tools"}

    @app.get("/tools")
    async def list_tools():
        """Tool specs plus their function-calling definitions"""
        return {
            "tools": [tool.model_dump() for tool in registry.values()],
            "functions": AGENT_TOOL_FUNCTIONS,
        }

    @app.post("/tools/{name}", response_model=ToolResponse)
    async def run_tool(name: str, request: ToolRequest):
        tool = registry.get(name)
        if tool is None:
            raise HTTPException(status_code=404, detail=f"Unknown tool: {name}")
        if len(request.images) != tool.image_arity:
            raise HTTPException(
                status_code=400,
                detail=f"{name} takes {tool.image_arity} image(s), got {len(request.images)}",
            )
        try:
            images = [ImageRef.from_bytes(base64.b64decode(data, validate=True)) for data in request.images]
        except (binascii.Error, ValueError):
            raise HTTPException(status_code=400, detail="images must be base64 encoded")

        logger.info(f"{name} step {request.step}: {len(images)} input image(s), {request.count} output(s)")
        result = await backend.run(tool, request.prompt, images, request.count, request.step)
        if not result.success:
            return ToolResponse(success=False, tool=name, error=result.error)
        return ToolResponse(success=True, tool=name, images=[encode_image(i) for i in result.images])

    return app


app = create_app()


def serve(host: str = "0.0.0.0", port: int = 8010) -> None:
    logger.info(f"Starting tool server on {host}:{port}")
    uvicorn.run(app, host=host, port=port)
