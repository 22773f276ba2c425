"""Completion backends: an OpenAI-style HTTP client and a scripted mock.

Both implement ``complete(request) -> GenerationSample``.  The HTTP backend
sends one chat/completions request per sample with ``logprobs`` enabled so
that every returned sample carries its own token log-probabilities.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Protocol, Union

import httpx

from .errors import BackendUnavailable, TransientBackendError
from .types import FinishReason, GenerationSample

logger = logging.getLogger(__name__)

SAMPLE = "sample"
ANSWER = "answer"
PROBE_GENERATION = "probe_generation"

RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.25

_SYSTEM_PROMPTS = {
    SAMPLE: None,
    ANSWER: "Answer the question about the image with yes or no, then stop.",
    PROBE_GENERATION: (
        "You write yes/no verification questions for radiology report sentences. "
        "Reply with a JSON list of objects with keys \"question\" and \"answer\", "
        "where answer is \"yes\" or \"no\" and is implied by the sentence."
    ),
}


@dataclass(frozen=True)
class CompletionRequest:
    """One sampling request.

    ``key`` is the text a mock uses to look up scripted responses (the query,
    the probe question, or the source sentence), ``prompt`` is what is sent.
    """

    kind: str
    context_id: str
    key: str
    prompt: str
    sample_index: int = 0
    image_ref: Optional[str] = None
    temperature: float = 1.0
    top_p: float = 0.9
    max_tokens: int = 256
    logprobs: bool = True


class Backend(Protocol):
    def complete(self, request: CompletionRequest) -> GenerationSample: ...


def with_retry(
    fn: Callable[[], Any],
    attempts: int = RETRY_ATTEMPTS,
    base_delay: float = RETRY_BASE_DELAY,
    sleep: Callable[[float], None] = time.sleep,
) -> Any:
    """Call ``fn``, retrying transient failures with exponential backoff."""
    delay = base_delay
    for attempt in range(attempts):
        try:
            return fn()
        except TransientBackendError as e:
            if attempt == attempts - 1:
                raise BackendUnavailable(f"giving up after {attempts} attempts: {e}") from e
            logger.debug("transient backend error (attempt %d): %s", attempt + 1, e)
            sleep(delay)
            delay *= 2.0


class JSONClient:
    """Thin JSON-over-HTTP client shared by the completion, NLI and labeler clients."""

    def __init__(
        self,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        timeout: float = 60.0,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        base_url = base_url or os.environ.get("UQ_API_BASE")
        if not base_url:
            raise BackendUnavailable("no endpoint configured (set UQ_API_BASE or pass base_url)")
        api_key = api_key if api_key is not None else os.environ.get("UQ_API_KEY")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.base_url = base_url.rstrip("/")
        self._sleep = sleep
        self._client = httpx.Client(
            base_url=self.base_url, headers=headers, timeout=timeout, transport=transport
        )

    def _post_once(self, path: str, body: Mapping[str, Any]) -> Any:
        try:
            resp = self._client.post(path, json=body)
        except httpx.TransportError as e:
            raise TransientBackendError(f"transport error: {e}") from e
        if resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code} from {path}")
        if resp.status_code >= 400:
            raise BackendUnavailable(f"HTTP {resp.status_code} from {path}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as e:
            raise BackendUnavailable(f"non-JSON response from {path}") from e

    def post(self, path: str, body: Mapping[str, Any]) -> Any:
        return with_retry(lambda: self._post_once(path, body), sleep=self._sleep)

    def close(self) -> None:
        self._client.close()


def build_chat_body(request: CompletionRequest, model: str) -> dict[str, Any]:
    messages: list[dict[str, Any]] = []
    system = _SYSTEM_PROMPTS.get(request.kind)
    if system:
        messages.append({"role": "system", "content": system})
    if request.image_ref:
        content: Any = [
            {"type": "image_url", "image_url": {"url": request.image_ref}},
            {"type": "text", "text": request.prompt},
        ]
    else:
        content = request.prompt
    messages.append({"role": "user", "content": content})
    return {
        "model": model,
        "messages": messages,
        "temperature": request.temperature,
        "top_p": request.top_p,
        "max_tokens": request.max_tokens,
        "logprobs": request.logprobs,
    }


def parse_chat_response(payload: Mapping[str, Any]) -> GenerationSample:
    """Turn a chat/completions payload into a sample.

    Token log-probabilities are read from ``choices[0].logprobs.content[*].logprob``
    (chat shape) or ``choices[0].logprobs.token_logprobs`` (legacy completions).
    """
    try:
        choice = payload["choices"][0]
    except (KeyError, IndexError, TypeError):
        raise BackendUnavailable("response has no choices") from None
    message = choice.get("message") or {}
    text = message.get("content")
    if text is None:
        text = choice.get("text", "")
    token_logprobs: list[float] = []
    lp = choice.get("logprobs")
    if isinstance(lp, Mapping):
        if isinstance(lp.get("content"), list):
            token_logprobs = [float(t["logprob"]) for t in lp["content"]]
        elif isinstance(lp.get("token_logprobs"), list):
            token_logprobs = [float(x) for x in lp["token_logprobs"] if x is not None]
    reason = choice.get("finish_reason")
    finish = FinishReason.LENGTH if reason == "length" else FinishReason.STOP
    if not text:
        finish = FinishReason.ERROR
    return GenerationSample(text=text or "", token_logprobs=tuple(token_logprobs), finish_reason=finish)


class HTTPBackend:
    """OpenAI-compatible chat/completions backend."""

    def __init__(
        self,
        base_url: Optional[str] = None,
        model: str = "default",
        api_key: Optional[str] = None,
        timeout: float = 60.0,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.model = model
        self._http = JSONClient(base_url, api_key, timeout, transport, sleep)

    def complete(self, request: CompletionRequest) -> GenerationSample:
        body = build_chat_body(request, self.model)
        return parse_chat_response(self._http.post("/chat/completions", body))

    def close(self) -> None:
        self._http.close()


Responder = Callable[[CompletionRequest], Union[GenerationSample, Mapping[str, Any], str, None]]

_SECTIONS = {SAMPLE: ("samples",), ANSWER: ("answers", "samples"), PROBE_GENERATION: ("probes",)}


class MockBackend:
    """Deterministic scripted backend.

    Scripts are looked up by request kind, then by ``"<context_id>::<key>"``,
    ``key``, ``context_id`` and finally ``"*"``.  Each script is a list of
    entries indexed by ``sample_index`` (cycling when shorter).  A responder
    callable may be given instead of, or in addition to, the scripts; it is
    consulted first and returning None falls through to the scripts.
    """

    def __init__(
        self,
        scripts: Optional[Mapping[str, Any]] = None,
        responder: Optional[Responder] = None,
    ) -> None:
        self.scripts = dict(scripts or {})
        self.responder = responder
        self.requests: list[CompletionRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "MockBackend":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def _lookup(self, request: CompletionRequest) -> Any:
        for section in _SECTIONS.get(request.kind, ()):
            table = self.scripts.get(section) or {}
            for k in (f"{request.context_id}::{request.key}", request.key, request.context_id, "*"):
                if k in table:
                    entries = table[k]
                    if isinstance(entries, list) and request.kind != PROBE_GENERATION:
                        return entries[request.sample_index % len(entries)]
                    return entries
        return None

    def complete(self, request: CompletionRequest) -> GenerationSample:
        with self._lock:
            self.requests.append(request)
        entry = self.responder(request) if self.responder is not None else None
        if entry is None:
            entry = self._lookup(request)
        if entry is None:
            if request.kind == PROBE_GENERATION:
                return GenerationSample(text="", finish_reason=FinishReason.ERROR)
            raise BackendUnavailable(
                f"mock has no script for {request.kind} {request.context_id!r}/{request.key!r}"
            )
        if isinstance(entry, GenerationSample):
            return entry
        if request.kind == PROBE_GENERATION:
            text = entry if isinstance(entry, str) else json.dumps(entry)
            return GenerationSample(text=text)
        if isinstance(entry, str):
            return GenerationSample(text=entry)
        return GenerationSample.from_dict(entry)
