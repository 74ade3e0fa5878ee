import io
import shutil
from pathlib import Path
from typing import Any, Optional

import pytest
from PIL import Image

from isg.content import ImageRef
from isg.gateway import MockBackend, ModelGateway

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def png_bytes(color: tuple[int, int, int] = (200, 40, 40), size: tuple[int, int] = (8, 8)) -> bytes:
    buffer = io.BytesIO()
    Image.new("RGB", size, color=color).save(buffer, format="PNG")
    return buffer.getvalue()


def png_ref(seed: int = 0) -> ImageRef:
    """Distinct small image per seed."""
    return ImageRef.from_bytes(png_bytes(((seed * 37) % 256, (seed * 91) % 256, (seed * 13) % 256)))


def scripted_gateway(
    rules: Optional[list[dict[str, Any]]] = None, responses: Optional[dict[str, Any]] = None
) -> ModelGateway:
    """Gateway over a mock backend, no retries, no disk cache."""
    return ModelGateway(MockBackend(responses=responses, rules=rules), retries=0, backoff=0)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def corpus_copy(tmp_path: Path) -> Path:
    """Writable copy of the fixture corpus and answers."""
    shutil.copytree(FIXTURES / "corpus", tmp_path / "corpus")
    shutil.copytree(FIXTURES / "answers", tmp_path / "answers")
    return tmp_path
