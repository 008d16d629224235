"""Model access: chat completion and embedding behind one gateway.

Two backends ship with the package: an OpenAI-compatible HTTP backend and
a fully deterministic offline mock.  The mock answers chat requests from a
script table keyed by a stable hash of the rendered prompt and produces
embeddings by hashing the input into a fixed-dimensional unit vector, so
every test and demo runs without a network and reproduces byte-identical
artifacts.

The :class:`Gateway` wraps a backend with an in-flight throttle, retry
with exponential backoff for transient failures, unit-norm enforcement on
embeddings, and optional recording of chat replies into a script file the
mock can replay later.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Union

import numpy as np

from .errors import (
    BackendError,
    BackendUnavailable,
    DimensionMismatch,
    InvalidVector,
    RateLimited,
    ResponseEmpty,
    UnreadableImage,
)

logger = logging.getLogger(__name__)

SCRIPT_FORMAT_VERSION = 1
_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    """An image attached to a request.

    ``tag`` travels with the image (e.g. its asset id) so prompts can tell
    the model which attachment is which.
    """

    path: str
    tag: str = ""


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ChatRequest:
    """One chat call: a system prompt plus ordered user content parts."""

    system_prompt: str
    parts: tuple[Part, ...]
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self):
        if not self.parts:
            raise ValueError("a chat request needs at least one content part")

    def text_parts(self) -> list[str]:
        return [p.text for p in self.parts if isinstance(p, TextPart)]

    def image_parts(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]


def read_image_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc


def request_hash(request: ChatRequest) -> str:
    """Stable digest of the rendered prompt.

    Covers the system prompt and every part in order; images contribute
    the digest of their bytes, so byte-identical images hash identically
    wherever the file lives.  Sampling parameters are excluded, keeping
    recorded scripts valid across temperature or length tweaks.
    """
    parts: list[list[str]] = []
    for part in request.parts:
        if isinstance(part, TextPart):
            parts.append(["text", part.text])
        else:
            digest = hashlib.sha256(read_image_bytes(part.path)).hexdigest()
            parts.append(["image", digest, part.tag])
    canon = json.dumps(
        {"system": request.system_prompt, "parts": parts},
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


_JSON_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def parse_json_reply(reply: str):
    """Extract the JSON payload from a model reply.

    Tolerates markdown code fences and prose around the payload; raises
    ValueError when no JSON document can be found.
    """
    text = reply.strip()
    fenced = _JSON_FENCE.search(text)
    if fenced:
        text = fenced.group(1).strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    starts = [i for i in (text.find("{"), text.find("[")) if i != -1]
    if starts:
        start = min(starts)
        closer = "}" if text[start] == "{" else "]"
        end = text.rfind(closer)
        if end > start:
            try:
                return json.loads(text[start : end + 1])
            except json.JSONDecodeError:
                pass
    raise ValueError(f"no JSON payload in reply: {reply[:200]!r}")


class Backend(Protocol):
    """What the gateway needs from a model provider."""

    embedding_dim: int | None

    def complete(self, request: ChatRequest) -> str: ...

    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_image(self, path: str | Path) -> np.ndarray: ...


# --- deterministic mock -------------------------------------------------------

def _hash_vector(seed: int, data: bytes, dim: int) -> np.ndarray:
    """Expand sha256 digests of ``data`` into a deterministic unit vector."""
    values = np.empty(dim, dtype=np.float64)
    prefix = seed.to_bytes(8, "little", signed=True) + data
    filled = 0
    block = 0
    while filled < dim:
        digest = hashlib.sha256(prefix + block.to_bytes(4, "little")).digest()
        for offset in range(0, 32, 8):
            if filled >= dim:
                break
            word = int.from_bytes(digest[offset : offset + 8], "little")
            values[filled] = word / 2**63 - 1.0
            filled += 1
        block += 1
    norm = float(np.linalg.norm(values))
    if norm == 0.0:
        values[0] = 1.0
        norm = 1.0
    return (values / norm).astype(np.float32)


class MockBackend:
    """Offline backend: scripted chat, hash-projection embeddings.

    Chat requests are looked up in ``script`` by :func:`request_hash`;
    misses fall through to ``mode``: ``echo`` returns the request's text
    parts joined by newlines, ``strict`` raises ResponseEmpty.

    ``embed_aliases`` maps an input (a text string, or ``img:<sha256>`` of
    the image bytes) to a substitute token that is embedded instead, which
    lets a fixture plant exact similarities between chosen inputs.

    Call counters and request/embed logs are exposed for tests.
    """

    def __init__(
        self,
        dim: int = 64,
        seed: int = 0,
        script: dict[str, str] | None = None,
        embed_aliases: dict[str, str] | None = None,
        mode: str = "echo",
    ):
        if mode not in ("echo", "strict"):
            raise ValueError(f"unknown mock mode {mode!r}")
        self.embedding_dim = dim
        self.seed = seed
        self.script = dict(script or {})
        self.embed_aliases = dict(embed_aliases or {})
        self.mode = mode
        self.chat_calls = 0
        self.embed_calls = 0
        self.requests: list[ChatRequest] = []
        self.embedded: list[str] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        digest = request_hash(request)
        with self._lock:
            self.chat_calls += 1
            self.requests.append(request)
        reply = self.script.get(digest)
        if reply is not None:
            return reply
        if self.mode == "echo":
            return "\n".join(request.text_parts())
        raise ResponseEmpty(f"no scripted reply for request {digest}")

    def _embed_key(self, key: str) -> np.ndarray:
        with self._lock:
            self.embed_calls += 1
            self.embedded.append(key)
        token = self.embed_aliases.get(key, key)
        return _hash_vector(self.seed, token.encode("utf-8"), self.embedding_dim)

    def embed_text(self, text: str) -> np.ndarray:
        return self._embed_key(text)

    def embed_image(self, path: str | Path) -> np.ndarray:
        digest = hashlib.sha256(read_image_bytes(path)).hexdigest()
        return self._embed_key(f"img:{digest}")

    # --- script persistence ---

    def to_script_file(self, path: str | Path) -> None:
        payload = {
            "format_version": SCRIPT_FORMAT_VERSION,
            "dim": self.embedding_dim,
            "seed": self.seed,
            "mode": self.mode,
            "chat": dict(sorted(self.script.items())),
            "embed_aliases": dict(sorted(self.embed_aliases.items())),
        }
        Path(path).write_text(
            json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def from_script_file(cls, path: str | Path, **overrides) -> "MockBackend":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        kwargs = dict(
            dim=obj.get("dim", 64),
            seed=obj.get("seed", 0),
            script=obj.get("chat", {}),
            embed_aliases=obj.get("embed_aliases", {}),
            mode=obj.get("mode", "strict"),
        )
        kwargs.update(overrides)
        return cls(**kwargs)


# --- HTTP backend -------------------------------------------------------------

def _image_data_uri(path: str | Path) -> str:
    data = read_image_bytes(path)
    mime = "image/png" if data.startswith(_PNG_MAGIC) else "image/jpeg"
    return f"data:{mime};base64," + base64.b64encode(data).decode("ascii")


class HttpBackend:
    """OpenAI-compatible chat and embeddings over HTTP.

    Images are inlined as base64 data URIs.  The embeddings endpoint must
    accept image inputs the same way for image embedding to work; text and
    images must share one embedding space for retrieval to be meaningful.
    """

    def __init__(
        self,
        chat_endpoint: str,
        embed_endpoint: str,
        chat_model: str,
        embed_model: str,
        api_key: str = "",
        embedding_dim: int | None = None,
        timeout: float = 120.0,
    ):
        self.chat_endpoint = chat_endpoint
        self.embed_endpoint = embed_endpoint
        self.chat_model = chat_model
        self.embed_model = embed_model
        self.api_key = api_key
        self.embedding_dim = embedding_dim
        self.timeout = timeout

    def _post(self, endpoint: str, payload: dict) -> dict:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = requests.post(
                endpoint, json=payload, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(f"{endpoint}: {exc}") from exc
        if response.status_code == 429:
            raise RateLimited(f"{endpoint}: rate limited")
        if response.status_code != 200:
            raise BackendUnavailable(
                f"{endpoint}: HTTP {response.status_code}: {response.text[:200]}"
            )
        try:
            return response.json()
        except ValueError as exc:
            raise BackendUnavailable(f"{endpoint}: non-JSON response") from exc

    def complete(self, request: ChatRequest) -> str:
        content: list[dict] = []
        for part in request.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                if part.tag:
                    content.append({"type": "text", "text": f"[image: {part.tag}]"})
                content.append(
                    {"type": "image_url", "image_url": {"url": _image_data_uri(part.path)}}
                )
        messages = []
        if request.system_prompt:
            messages.append({"role": "system", "content": request.system_prompt})
        messages.append({"role": "user", "content": content})
        payload = {
            "model": self.chat_model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        data = self._post(self.chat_endpoint, payload)
        try:
            reply = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ResponseEmpty(f"malformed chat response: {exc}") from exc
        if not reply or not reply.strip():
            raise ResponseEmpty("chat response had empty content")
        return reply

    def _embed(self, item: object) -> np.ndarray:
        payload = {"model": self.embed_model, "input": [item]}
        data = self._post(self.embed_endpoint, payload)
        try:
            vector = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError) as exc:
            raise ResponseEmpty(f"malformed embedding response: {exc}") from exc
        return vector

    def embed_text(self, text: str) -> np.ndarray:
        return self._embed(text)

    def embed_image(self, path: str | Path) -> np.ndarray:
        return self._embed(
            {"type": "image_url", "image_url": {"url": _image_data_uri(path)}}
        )


# --- gateway ------------------------------------------------------------------

class Gateway:
    """Backend wrapper enforcing the cross-pipeline model-call contract.

    Responsibilities: cap concurrent in-flight calls, retry transient
    failures (unavailable backend, rate limits) with exponential backoff,
    check and enforce embedding dimensionality and unit norm, and record
    chat replies to a replayable script file when asked.
    """

    def __init__(
        self,
        backend: Backend,
        max_in_flight: int = 4,
        max_retries: int = 2,
        retry_base_delay: float = 0.5,
        record_path: str | Path | None = None,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        self.backend = backend
        self.max_retries = max_retries
        self.retry_base_delay = retry_base_delay
        self.record_path = Path(record_path) if record_path else None
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._record_lock = threading.Lock()

    @property
    def embedding_dim(self) -> int | None:
        return self.backend.embedding_dim

    def _with_retry(self, call):
        attempt = 0
        while True:
            try:
                with self._slots:
                    return call()
            except (BackendUnavailable, RateLimited) as exc:
                if attempt >= self.max_retries:
                    raise
                delay = self.retry_base_delay * (2**attempt)
                logger.warning(
                    "backend call failed (%s), retry %d/%d in %.2fs",
                    exc,
                    attempt + 1,
                    self.max_retries,
                    delay,
                )
                time.sleep(delay)
                attempt += 1

    def complete(self, request: ChatRequest) -> str:
        reply = self._with_retry(lambda: self.backend.complete(request))
        if self.record_path is not None:
            self._record(request_hash(request), reply)
        return reply

    def _finish_vector(self, vector: np.ndarray, source: str) -> np.ndarray:
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        expected = self.backend.embedding_dim
        if expected is None:
            self.backend.embedding_dim = vector.size
        elif vector.size != expected:
            raise DimensionMismatch(
                f"{source}: expected dimension {expected}, got {vector.size}"
            )
        if not np.all(np.isfinite(vector)):
            raise InvalidVector(f"{source}: embedding has non-finite values")
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise InvalidVector(f"{source}: embedding has zero norm")
        return (vector / norm).astype(np.float32)

    def embed_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        vector = self._with_retry(lambda: self.backend.embed_text(text))
        return self._finish_vector(vector, "embed_text")

    def embed_image(self, path: str | Path) -> np.ndarray:
        read_image_bytes(path)  # surface UnreadableImage before the call
        vector = self._with_retry(lambda: self.backend.embed_image(path))
        return self._finish_vector(vector, "embed_image")

    def _record(self, digest: str, reply: str) -> None:
        with self._record_lock:
            payload = {
                "format_version": SCRIPT_FORMAT_VERSION,
                "chat": {},
            }
            if self.record_path.exists():
                try:
                    payload = json.loads(self.record_path.read_text(encoding="utf-8"))
                except (json.JSONDecodeError, UnicodeDecodeError):
                    logger.warning("record file %s unreadable; starting over", self.record_path)
                    payload = {"format_version": SCRIPT_FORMAT_VERSION, "chat": {}}
            payload.setdefault("chat", {})[digest] = reply
            payload["chat"] = dict(sorted(payload["chat"].items()))
            self.record_path.parent.mkdir(parents=True, exist_ok=True)
            self.record_path.write_text(
                json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
                encoding="utf-8",
            )
