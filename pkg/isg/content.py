"""
Interleaved content model.

Queries, golden answers and model answers are all InterleavedSequence values:
ordered TEXT/IMAGE blocks. Blocks are addressed from prompts with content
tokens such as <gen_img2> or <query_text1> (1-based, counted per kind).
"""

import base64
import hashlib
import io
import json
import logging
import mimetypes
import os
import re
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from PIL import Image
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_validator,
    model_serializer,
    model_validator,
)

from isg.errors import InvalidToken, TokenOutOfRange

logger = logging.getLogger(__name__)


class BlockKind(str, Enum):
    TEXT = "text"
    IMAGE = "image"

    @property
    def letter(self) -> str:
        return "T" if self is BlockKind.TEXT else "I"


class ImageSource(str, Enum):
    FILE_PATH = "file_path"
    INLINE_BYTES = "inline_bytes"


class TokenScope(str, Enum):
    QUERY = "query"
    GEN = "gen"


class ImageRef(BaseModel):
    """Reference to a raster image, either on disk or held in memory."""

    model_config = ConfigDict(frozen=True)

    source: ImageSource
    path: Optional[Path] = None
    data: Optional[bytes] = Field(default=None, repr=False)
    media_type: str = "image/png"
    width: Optional[int] = None
    height: Optional[int] = None

    @model_validator(mode="after")
    def _check_source(self) -> "ImageRef":
        if self.source is ImageSource.FILE_PATH and self.path is None:
            raise ValueError("FILE_PATH image needs a path")
        if self.source is ImageSource.INLINE_BYTES and not self.data:
            raise ValueError("INLINE_BYTES image needs data")
        return self

    @field_validator("path")
    @classmethod
    def _normalize_path(cls, value: Optional[Path]) -> Optional[Path]:
        return Path(os.path.normpath(value)) if value is not None else None

    @classmethod
    def from_path(cls, path: Union[str, Path]) -> "ImageRef":
        media_type = mimetypes.guess_type(str(path))[0] or "image/png"
        return cls(source=ImageSource.FILE_PATH, path=Path(path), media_type=media_type)

    @classmethod
    def from_bytes(cls, data: bytes, media_type: str = "image/png") -> "ImageRef":
        return cls(source=ImageSource.INLINE_BYTES, data=data, media_type=media_type)

    def read_bytes(self) -> bytes:
        if self.source is ImageSource.INLINE_BYTES:
            return self.data
        return self.path.read_bytes()

    def digest(self) -> str:
        return hashlib.sha256(self.read_bytes()).hexdigest()

    def load(self) -> "ImageRef":
        """Return a copy with width/height filled in from the image header."""
        with Image.open(io.BytesIO(self.read_bytes())) as img:
            media_type = Image.MIME.get(img.format or "", self.media_type)
            return self.model_copy(
                update={"width": img.width, "height": img.height, "media_type": media_type}
            )

    def data_url(self) -> str:
        encoded = base64.b64encode(self.read_bytes()).decode("ascii")
        return f"data:{self.media_type};base64,{encoded}"


class Block(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: BlockKind
    text: Optional[str] = None
    image: Optional[ImageRef] = None

    @model_validator(mode="after")
    def _check_payload(self) -> "Block":
        if self.kind is BlockKind.TEXT:
            if self.image is not None or self.text is None:
                raise ValueError("TEXT block carries text only")
            if not self.text.strip():
                raise ValueError("TEXT block is empty")
        elif self.text is not None or self.image is None:
            raise ValueError("IMAGE block carries an image only")
        return self

    @classmethod
    def of_text(cls, text: str) -> "Block":
        return cls(kind=BlockKind.TEXT, text=text)

    @classmethod
    def of_image(cls, image: ImageRef) -> "Block":
        return cls(kind=BlockKind.IMAGE, image=image)


class StructureSignature(BaseModel):
    model_config = ConfigDict(frozen=True)

    sequence: tuple[BlockKind, ...] = ()

    @model_serializer
    def _as_text(self) -> str:
        return str(self)

    @field_validator("sequence")
    @classmethod
    def _no_adjacent_text(cls, value: tuple[BlockKind, ...]) -> tuple[BlockKind, ...]:
        for left, right in zip(value, value[1:]):
            if left is BlockKind.TEXT and right is BlockKind.TEXT:
                raise ValueError("structure signature contains adjacent TEXT entries")
        return value

    def __len__(self) -> int:
        return len(self.sequence)

    def __str__(self) -> str:
        return ",".join(kind.letter for kind in self.sequence)


class InterleavedSequence(BaseModel):
    model_config = ConfigDict(frozen=True)

    blocks: tuple[Block, ...] = ()

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    @property
    def is_normalized(self) -> bool:
        return all(
            not (a.kind is BlockKind.TEXT and b.kind is BlockKind.TEXT)
            for a, b in zip(self.blocks, self.blocks[1:])
        )

    def of_kind(self, kind: BlockKind) -> list[Block]:
        return [block for block in self.blocks if block.kind is kind]

    @property
    def images(self) -> list[ImageRef]:
        return [block.image for block in self.of_kind(BlockKind.IMAGE)]

    @property
    def texts(self) -> list[str]:
        return [block.text for block in self.of_kind(BlockKind.TEXT)]

    @classmethod
    def of(cls, *blocks: Union[Block, str, ImageRef]) -> "InterleavedSequence":
        """Build a sequence from blocks, plain strings and image refs."""
        converted = []
        for item in blocks:
            if isinstance(item, str):
                converted.append(Block.of_text(item))
            elif isinstance(item, ImageRef):
                converted.append(Block.of_image(item))
            else:
                converted.append(item)
        return cls(blocks=tuple(converted))

    # --- external document format ---

    @classmethod
    def from_document(
        cls, document: dict[str, Any], base_dir: Optional[Path] = None
    ) -> "InterleavedSequence":
        """
        Parse the interleaved document JSON shape.

        Image paths are resolved relative to base_dir. Inline images may be given
        as base64 under "data".

        Raises:
            ValueError: if the document does not follow the format
        """
        if not isinstance(document, dict) or not isinstance(document.get("blocks"), list):
            raise ValueError("document must be an object with a 'blocks' list")
        blocks = []
        for position, entry in enumerate(document["blocks"]):
            if not isinstance(entry, dict):
                raise ValueError(f"blocks[{position}] is not an object")
            block_type = entry.get("type")
            if block_type == "text":
                content = entry.get("content")
                if not isinstance(content, str):
                    raise ValueError(f"blocks[{position}].content must be a string")
                blocks.append(Block.of_text(content))
            elif block_type == "image":
                if isinstance(entry.get("path"), str):
                    raw = Path(entry["path"])
                    path = raw if base_dir is None or raw.is_absolute() else base_dir / raw
                    blocks.append(Block.of_image(ImageRef.from_path(path)))
                elif isinstance(entry.get("data"), str):
                    data = base64.b64decode(entry["data"])
                    media_type = entry.get("media_type", "image/png")
                    blocks.append(Block.of_image(ImageRef.from_bytes(data, media_type)))
                else:
                    raise ValueError(f"blocks[{position}] image needs 'path' or 'data'")
            else:
                raise ValueError(f"blocks[{position}].type must be 'text' or 'image'")
        return cls(blocks=tuple(blocks))

    def to_document(
        self, base_dir: Optional[Path] = None, image_dir: Optional[Path] = None
    ) -> dict[str, Any]:
        """
        Serialize to the interleaved document JSON shape.

        File images are written relative to base_dir when given. Inline images are
        saved under image_dir (content-addressed) when given, otherwise embedded.
        """
        entries = []
        for block in self.blocks:
            if block.kind is BlockKind.TEXT:
                entries.append({"type": "text", "content": block.text})
                continue
            image = block.image
            if image.source is ImageSource.INLINE_BYTES and image_dir is not None:
                image_dir.mkdir(parents=True, exist_ok=True)
                extension = mimetypes.guess_extension(image.media_type) or ".png"
                target = image_dir / f"{image.digest()[:16]}{extension}"
                if not target.exists():
                    target.write_bytes(image.data)
                image = ImageRef.from_path(target)
            if image.source is ImageSource.INLINE_BYTES:
                entries.append(
                    {
                        "type": "image",
                        "data": base64.b64encode(image.data).decode("ascii"),
                        "media_type": image.media_type,
                    }
                )
            else:
                path = image.path
                if base_dir is not None:
                    path = Path(os.path.relpath(path, base_dir))
                entries.append({"type": "image", "path": path.as_posix()})
        return {"blocks": entries}

    @classmethod
    def load(cls, path: Path) -> "InterleavedSequence":
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
        return cls.from_document(document, base_dir=path.parent)

    def dump(self, path: Path, image_dir: Optional[Path] = None) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        document = self.to_document(base_dir=path.parent, image_dir=image_dir)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2, ensure_ascii=False)


_TOKEN_PATTERN = re.compile(r"^<(query|gen)_(img|text)(\d+)>$")


class ContentToken(BaseModel):
    model_config = ConfigDict(frozen=True)

    scope: TokenScope
    kind: BlockKind
    index: int = Field(ge=1)

    @model_validator(mode="before")
    @classmethod
    def _from_text(cls, value: Any) -> Any:
        if isinstance(value, str):
            token = cls.parse(value)
            return {"scope": token.scope, "kind": token.kind, "index": token.index}
        return value

    @model_serializer
    def _as_text(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, raw: str) -> "ContentToken":
        match = _TOKEN_PATTERN.match(raw.strip()) if isinstance(raw, str) else None
        if not match:
            raise InvalidToken(f"not a content token: {raw!r}")
        scope, kind, index = match.groups()
        if int(index) < 1:
            raise InvalidToken(f"token index must be 1-based: {raw!r}")
        return cls(
            scope=TokenScope(scope),
            kind=BlockKind.IMAGE if kind == "img" else BlockKind.TEXT,
            index=int(index),
        )

    def render(self) -> str:
        kind = "img" if self.kind is BlockKind.IMAGE else "text"
        return f"<{self.scope.value}_{kind}{self.index}>"

    def __str__(self) -> str:
        return self.render()


def normalize_sequence(seq: InterleavedSequence) -> InterleavedSequence:
    """Merge runs of consecutive TEXT blocks with a newline; images stay as they are."""
    merged: list[Block] = []
    for block in seq.blocks:
        if merged and block.kind is BlockKind.TEXT and merged[-1].kind is BlockKind.TEXT:
            merged[-1] = Block.of_text(f"{merged[-1].text}\n{block.text}")
        else:
            merged.append(block)
    return InterleavedSequence(blocks=tuple(merged))


def structure_signature(seq: InterleavedSequence) -> StructureSignature:
    return StructureSignature(sequence=tuple(block.kind for block in seq.blocks))


def resolve_token(
    token: ContentToken, query: InterleavedSequence, answer: InterleavedSequence
) -> Block:
    """
    Look up the block a token points at.

    Raises:
        TokenOutOfRange: when the index exceeds the number of blocks of that kind
    """
    source = query if token.scope is TokenScope.QUERY else answer
    candidates = source.of_kind(token.kind)
    if token.index > len(candidates):
        raise TokenOutOfRange(token.render(), len(candidates))
    return candidates[token.index - 1]


def labelled_parts(
    seq: InterleavedSequence,
    scope: TokenScope,
    with_images: bool = True,
    prefix: Optional[str] = None,
) -> list[Union[str, ImageRef]]:
    """
    Render a sequence as prompt parts, each block preceded by its content token.

    Without images, image blocks are represented by their token only. A prefix
    replaces the scope in the labels ("golden" gives <golden_img1>); such
    labels are for display and do not parse back as content tokens.
    """
    parts: list[Union[str, ImageRef]] = []
    counters = {BlockKind.TEXT: 0, BlockKind.IMAGE: 0}
    for block in seq.blocks:
        counters[block.kind] += 1
        token = ContentToken(scope=scope, kind=block.kind, index=counters[block.kind]).render()
        if prefix is not None:
            token = token.replace(f"<{scope.value}_", f"<{prefix}_", 1)
        if block.kind is BlockKind.TEXT:
            parts.append(f"{token}: {block.text}")
        elif with_images:
            parts.append(f"{token}:")
            parts.append(block.image)
        else:
            parts.append(f"{token}: [image]")
    return parts


def tokens_for(seq: Iterable[Block], scope: TokenScope) -> list[ContentToken]:
    """Content tokens naming each block of a sequence, in order."""
    counters = {BlockKind.TEXT: 0, BlockKind.IMAGE: 0}
    tokens = []
    for block in seq:
        counters[block.kind] += 1
        tokens.append(ContentToken(scope=scope, kind=block.kind, index=counters[block.kind]))
    return tokens
