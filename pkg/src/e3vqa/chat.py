"""Vendor-neutral chat request/response types and content-addressed fingerprints."""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional


class ImageUnreadable(Exception):
    """An ImageRef could not be resolved to non-empty bytes."""


class Role(str, Enum):
    USER = "User"
    ASSISTANT = "Assistant"


class ImageSource(str, Enum):
    LOCAL_PATH = "LocalPath"
    URI = "Uri"
    INLINE_BASE64 = "InlineBase64"


class FinishReason(str, Enum):
    STOP = "Stop"
    LENGTH = "Length"
    FILTERED = "Filtered"
    ERROR = "Error"


@dataclass(frozen=True)
class ImageRef:
    source: ImageSource
    value: str
    media_type: str = "image/jpeg"

    def load_bytes(self) -> bytes:
        """Resolve to raw image bytes. Uri refs are never fetched here."""
        if self.source is ImageSource.LOCAL_PATH:
            try:
                data = Path(self.value).read_bytes()
            except OSError as exc:
                raise ImageUnreadable(f"cannot read image file: {self.value}") from exc
        elif self.source is ImageSource.INLINE_BASE64:
            try:
                data = base64.b64decode(self.value, validate=True)
            except Exception as exc:
                raise ImageUnreadable("invalid base64 image payload") from exc
        else:
            raise ImageUnreadable(f"Uri image refs carry no local bytes: {self.value}")
        if not data:
            raise ImageUnreadable(f"empty image payload: {self.value}")
        return data

    def content_digest(self) -> str:
        if self.source is ImageSource.URI:
            return hashlib.sha256(("uri:" + self.value).encode("utf-8")).hexdigest()
        return hashlib.sha256(self.load_bytes()).hexdigest()


@dataclass(frozen=True)
class ContentPart:
    kind: str  # "Text" | "Image"
    text: Optional[str] = None
    image: Optional[ImageRef] = None

    def __post_init__(self) -> None:
        if self.kind == "Text":
            if self.image is not None or self.text is None or not self.text.strip():
                raise ValueError("Text part requires non-blank text and no image")
        elif self.kind == "Image":
            if self.text is not None or self.image is None:
                raise ValueError("Image part requires an image and no text")
        else:
            raise ValueError(f"unknown part kind: {self.kind}")


def text_part(text: str) -> ContentPart:
    return ContentPart(kind="Text", text=text)


def image_part(image: ImageRef) -> ContentPart:
    return ContentPart(kind="Image", image=image)


@dataclass(frozen=True)
class Turn:
    role: Role
    parts: tuple[ContentPart, ...]


def user_turn(parts: Iterable[ContentPart]) -> Turn:
    return Turn(role=Role.USER, parts=tuple(parts))


def assistant_turn(text: str) -> Turn:
    return Turn(role=Role.ASSISTANT, parts=(text_part(text),))


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system: str
    turns: tuple[Turn, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: Optional[int] = None


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: FinishReason = FinishReason.STOP
    usage: Usage = field(default_factory=Usage)
    latency_ms: int = 0
    from_cache: bool = False


def validate_request(request: ChatRequest) -> None:
    """Raise ValueError on any structural invariant breach."""
    if not request.turns:
        raise ValueError("request has no turns")
    if request.turns[0].role is not Role.USER:
        raise ValueError("first turn must be User")
    for prev, cur in zip(request.turns, request.turns[1:]):
        if prev.role is cur.role:
            raise ValueError("turn roles must alternate User/Assistant")
    for turn in request.turns:
        if not turn.parts:
            raise ValueError("turn has no parts")
        if turn.role is Role.ASSISTANT and any(p.kind != "Text" for p in turn.parts):
            raise ValueError("Assistant turns may contain only Text parts")
    if request.temperature < 0:
        raise ValueError("temperature must be >= 0")
    if request.max_tokens <= 0:
        raise ValueError("max_tokens must be positive")


def _canonical_part(part: ContentPart) -> dict:
    if part.kind == "Text":
        return {"kind": "text", "text": part.text}
    assert part.image is not None
    return {
        "kind": "image",
        "digest": part.image.content_digest(),
        "media_type": part.image.media_type,
    }


def fingerprint(request: ChatRequest) -> str:
    """Deterministic hex digest of the full request content.

    Image parts contribute their byte digest, so the same picture supplied via
    LocalPath or InlineBase64 fingerprints identically, and any byte flip in a
    referenced file changes the result.
    """
    canonical = {
        "model_id": request.model_id,
        "system": request.system,
        "turns": [
            {"role": turn.role.value, "parts": [_canonical_part(p) for p in turn.parts]}
            for turn in request.turns
        ],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "seed": request.seed,
    }
    payload = json.dumps(canonical, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
