"""Uniform access to chat, raw-completion and embedding backends.

Real backends speak the common HTTP chat-completions / embeddings wire
formats. The mock backend answers from fixture files keyed by prompt
content hash, either strictly (miss = error, for golden tests) or
generatively (miss = deterministic canned answer). Every returned
embedding is L2-normalized by the gateway regardless of what the backend
produced.

The gateway is shareable across concurrent pipeline workers: each backend
gets a token-bucket rate limiter and an in-flight semaphore, and requests
are retried on transient failures with capped exponential backoff.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

from . import mockgen
from .records import InvariantViolation, canonical_dumps, content_hash

log = logging.getLogger(__name__)

RETRY_CEILING = 5
BACKOFF_BASE_S = 0.5
BACKOFF_CAP_S = 8.0
HTTP_TIMEOUT_S = 120.0


class GatewayError(RuntimeError):
    pass


class BackendUnavailable(GatewayError):
    """Retries exhausted against a backend."""


class PermanentRequestError(GatewayError):
    """Request rejected for a non-transient reason (HTTP 4xx, fixture miss)."""


class ProtocolError(GatewayError):
    """Backend answered with a malformed or inconsistent payload."""


class BackendKind(str, Enum):
    CHAT = "chat"
    RAW_COMPLETION = "raw_completion"
    EMBEDDING = "embedding"
    MOCK = "mock"


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    max_tokens: int = 4096
    n_samples: int = 1
    stop: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.temperature < 0:
            raise InvariantViolation("temperature non-negative")
        if self.max_tokens < 1:
            raise InvariantViolation("max_tokens >= 1")
        if self.n_samples < 1:
            raise InvariantViolation("n_samples >= 1")


@dataclass(frozen=True)
class ChatTurn:
    role: str  # "user" | "assistant"
    content: str


@dataclass(frozen=True)
class ChatPrompt:
    """A chat request; ``prefill`` is a forced prefix the model continues.

    Raw-completion prompts are expressed as an empty turn list with the
    fully rendered template in ``prefill``.
    """

    system: str | None = None
    turns: tuple[ChatTurn, ...] = ()
    prefill: str | None = None
    sampling: SamplingParams = field(default_factory=SamplingParams)

    def validate(self) -> None:
        if not self.turns and self.prefill is None:
            raise InvariantViolation("turns non-empty or prefill present")
        for i, turn in enumerate(self.turns):
            expected = "user" if i % 2 == 0 else "assistant"
            if turn.role != expected:
                raise InvariantViolation(
                    "roles alternate starting with user",
                    f"turn {i} is {turn.role!r}",
                )
        self.sampling.validate()

    def content_key(self) -> dict[str, Any]:
        """The hashed identity of this prompt: content only, no sampling."""
        return {
            "system": self.system,
            "turns": [{"role": t.role, "content": t.content} for t in self.turns],
            "prefill": self.prefill,
        }

    @property
    def prompt_hash(self) -> str:
        return content_hash(self.content_key())

    def rendered_text(self) -> str:
        """Flat text view used by the generative mock to classify prompts."""
        parts = []
        if self.system:
            parts.append(self.system)
        parts.extend(t.content for t in self.turns)
        if self.prefill:
            parts.append(self.prefill)
        return "\n".join(parts)


def user_prompt(text: str, sampling: SamplingParams | None = None,
                system: str | None = None) -> ChatPrompt:
    return ChatPrompt(
        system=system,
        turns=(ChatTurn("user", text),),
        sampling=sampling or SamplingParams(),
    )


@dataclass(frozen=True)
class Completion:
    text: str
    finish_reason: FinishReason


@dataclass(frozen=True)
class BackendDescriptor:
    """Where and how to reach one backend."""

    kind: BackendKind
    model_id: str
    endpoint: str = ""
    auth: str = ""  # name of the env var holding the API key
    rate: int | None = None  # requests per minute, None = uncapped
    max_inflight: int = 4
    fixtures: str = ""  # mock only
    mock_mode: str = "generative"  # "strict" | "generative"
    embedding_dim: int = 16  # generative mock vectors

    def validate(self) -> None:
        if self.kind is BackendKind.MOCK:
            if not self.fixtures:
                raise InvariantViolation("mock kind requires a fixture path")
            if self.endpoint:
                raise InvariantViolation("mock kind takes a fixture path instead of endpoint")
            if self.mock_mode not in ("strict", "generative"):
                raise InvariantViolation("mock_mode strict|generative", self.mock_mode)
        else:
            if not self.endpoint:
                raise InvariantViolation("non-mock backend requires endpoint")
        if self.max_inflight < 1:
            raise InvariantViolation("max_inflight positive")
        if self.rate is not None and self.rate < 1:
            raise InvariantViolation("rate positive when set")


class TokenBucket:
    """Requests-per-minute token bucket; acquire blocks until a token frees."""

    def __init__(self, rpm: int, clock: Callable[[], float], sleeper: Callable[[float], None]):
        self.capacity = float(rpm)
        self.refill_per_s = rpm / 60.0
        self.tokens = float(rpm)
        self.updated = clock()
        self.clock = clock
        self.sleeper = sleeper
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.refill_per_s)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.refill_per_s
            self.sleeper(wait)


class _BackendState:
    def __init__(self, descriptor: BackendDescriptor,
                 clock: Callable[[], float], sleeper: Callable[[float], None]):
        descriptor.validate()
        self.descriptor = descriptor
        self.semaphore = threading.BoundedSemaphore(descriptor.max_inflight)
        self.bucket = TokenBucket(descriptor.rate, clock, sleeper) if descriptor.rate else None
        self.mock = MockBackend(descriptor) if descriptor.kind is BackendKind.MOCK else None


class MockBackend:
    """Deterministic offline backend driven by a fixtures file.

    Fixture format (JSON)::

        {"completions": {"<prompt_hash>": "text" | ["text", ...]},
         "embeddings": {"<exact text>": [floats, ...]},
         "embedding_dim": 16}

    List-valued completions are consumed in order by a per-hash counter, so
    one fixture can script successive calls (or the n samples of one call).
    In strict mode a miss or an exhausted list is a permanent request error;
    in generative mode it falls back to a canned answer derived purely from
    (prompt_hash, nonce, sample index), which keeps interrupted-and-resumed
    runs byte-identical to uninterrupted ones.
    """

    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor
        path = Path(descriptor.fixtures)
        if path.exists():
            data = json.loads(path.read_text(encoding="utf-8"))
        elif descriptor.mock_mode == "generative":
            data = {}
        else:
            raise PermanentRequestError(f"mock fixtures file not found: {path}")
        self.completions: dict[str, Any] = data.get("completions", {})
        self.embeddings: dict[str, list[float]] = data.get("embeddings", {})
        self.embedding_dim: int = data.get("embedding_dim", descriptor.embedding_dim)
        self._cursors: dict[str, int] = {}
        self._lock = threading.Lock()
        # instrumentation for the in-flight bound property test
        self._inflight = 0
        self.max_observed_inflight = 0

    def _enter(self) -> None:
        with self._lock:
            self._inflight += 1
            self.max_observed_inflight = max(self.max_observed_inflight, self._inflight)

    def _exit(self) -> None:
        with self._lock:
            self._inflight -= 1

    def _next_scripted(self, prompt_hash: str) -> str | None:
        entry = self.completions.get(prompt_hash)
        if entry is None:
            return None
        if isinstance(entry, str):
            return entry
        with self._lock:
            cursor = self._cursors.get(prompt_hash, 0)
            if cursor >= len(entry):
                return None
            self._cursors[prompt_hash] = cursor + 1
        return entry[cursor]

    def complete(self, prompt: ChatPrompt, nonce: str | None) -> list[Completion]:
        self._enter()
        try:
            out: list[Completion] = []
            for i in range(prompt.sampling.n_samples):
                text = self._next_scripted(prompt.prompt_hash)
                if text is None:
                    if self.descriptor.mock_mode == "strict":
                        raise PermanentRequestError(
                            f"strict mock: no fixture for prompt_hash {prompt.prompt_hash}"
                        )
                    text = mockgen.canned_completion(
                        prompt.rendered_text(), prompt.prompt_hash, nonce or "", i
                    )
                out.append(Completion(text=text, finish_reason=FinishReason.STOP))
            return out
        finally:
            self._exit()

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        self._enter()
        try:
            out = []
            for text in texts:
                vec = self.embeddings.get(text)
                if vec is None:
                    if self.descriptor.mock_mode == "strict":
                        raise PermanentRequestError("strict mock: no embedding fixture")
                    vec = mockgen.canned_embedding(text, self.embedding_dim)
                out.append(list(vec))
            return out
        finally:
            self._exit()


def l2_normalize(vec: Sequence[float]) -> list[float]:
    norm = math.sqrt(sum(x * x for x in vec))
    if norm < 1e-12:
        raise ProtocolError("zero-norm embedding vector")
    return [x / norm for x in vec]


class Gateway:
    """Role-indexed access point for all backend calls in a run."""

    def __init__(
        self,
        backends: dict[str, BackendDescriptor],
        transcripts_path: Path | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
        http_client: httpx.Client | None = None,
    ):
        self._states = {role: _BackendState(d, clock, sleeper) for role, d in backends.items()}
        self._sleeper = sleeper
        self._transcripts_path = transcripts_path
        self._transcript_lock = threading.Lock()
        self._http = http_client

    def descriptor(self, role: str) -> BackendDescriptor:
        return self._state(role).descriptor

    def mock_backend(self, role: str) -> MockBackend | None:
        return self._state(role).mock

    def _state(self, role: str) -> _BackendState:
        if role not in self._states:
            raise GatewayError(f"backend role {role!r} is not configured")
        return self._states[role]

    def complete(self, role: str, prompt: ChatPrompt, nonce: str | None = None) -> list[Completion]:
        """Return exactly n_samples completions for the prompt.

        Each request attempt is logged with the prompt content hash; the
        sampling nonce distinguishes repeated requests for the same prompt
        (regeneration attempts) without changing its hash.
        """
        prompt.validate()
        state = self._state(role)
        with state.semaphore:
            if state.bucket:
                state.bucket.acquire()
            if state.mock is not None:
                completions = state.mock.complete(prompt, nonce)
            else:
                completions = self._http_complete(state.descriptor, prompt)
        if len(completions) != prompt.sampling.n_samples:
            raise ProtocolError(
                f"expected {prompt.sampling.n_samples} completions, got {len(completions)}"
            )
        log.debug(
            "complete role=%s prompt_hash=%s nonce=%s n=%d",
            role, prompt.prompt_hash, nonce, prompt.sampling.n_samples,
        )
        self._transcribe(role, prompt, nonce, completions)
        return completions

    def embed(self, role: str, texts: Sequence[str]) -> list[list[float]]:
        """Embed texts, one unit vector per text (gateway-side normalization)."""
        if not texts:
            raise InvariantViolation("texts non-empty")
        state = self._state(role)
        if state.descriptor.kind not in (BackendKind.EMBEDDING, BackendKind.MOCK):
            raise GatewayError(f"backend role {role!r} is not an embedding backend")
        with state.semaphore:
            if state.bucket:
                state.bucket.acquire()
            if state.mock is not None:
                raw = state.mock.embed(texts)
            else:
                raw = self._http_embed(state.descriptor, texts)
        if len(raw) != len(texts):
            raise ProtocolError(f"expected {len(texts)} vectors, got {len(raw)}")
        dims = {len(v) for v in raw}
        if len(dims) != 1:
            raise ProtocolError(f"mixed embedding dimensions in one batch: {sorted(dims)}")
        return [l2_normalize(v) for v in raw]

    # -- HTTP plumbing ------------------------------------------------------

    def _client(self) -> httpx.Client:
        if self._http is None:
            self._http = httpx.Client(timeout=HTTP_TIMEOUT_S)
        return self._http

    def _headers(self, descriptor: BackendDescriptor) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if descriptor.auth:
            key = os.environ.get(descriptor.auth)
            if not key:
                raise PermanentRequestError(
                    f"auth env var {descriptor.auth} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post_with_retries(self, descriptor: BackendDescriptor, payload: dict[str, Any]) -> dict[str, Any]:
        last_error: Exception | None = None
        for attempt in range(RETRY_CEILING):
            if attempt:
                self._sleeper(min(BACKOFF_CAP_S, BACKOFF_BASE_S * 2 ** (attempt - 1)))
            try:
                resp = self._client().post(
                    descriptor.endpoint, json=payload, headers=self._headers(descriptor)
                )
            except httpx.TransportError as exc:
                last_error = exc
                log.warning("transient transport error against %s: %s", descriptor.endpoint, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = GatewayError(f"HTTP {resp.status_code}")
                log.warning("transient HTTP %s from %s", resp.status_code, descriptor.endpoint)
                continue
            if resp.status_code >= 400:
                raise PermanentRequestError(
                    f"HTTP {resp.status_code} from {descriptor.endpoint}: {resp.text[:200]}"
                )
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"non-JSON response from {descriptor.endpoint}") from exc
        raise BackendUnavailable(
            f"retries exhausted against {descriptor.endpoint}: {last_error}"
        )

    def _http_complete(self, descriptor: BackendDescriptor, prompt: ChatPrompt) -> list[Completion]:
        sampling = prompt.sampling
        if descriptor.kind is BackendKind.RAW_COMPLETION:
            text = prompt.prefill or ""
            if prompt.turns:
                raise GatewayError("raw completion backends take rendered text via prefill")
            payload: dict[str, Any] = {
                "model": descriptor.model_id,
                "prompt": text,
                "temperature": sampling.temperature,
                "max_tokens": sampling.max_tokens,
                "n": sampling.n_samples,
            }
            if sampling.stop:
                payload["stop"] = list(sampling.stop)
            data = self._post_with_retries(descriptor, payload)
            return [
                Completion(c.get("text", ""), _finish(c.get("finish_reason")))
                for c in _choices(data)
            ]
        if descriptor.kind is BackendKind.CHAT:
            if prompt.prefill is not None:
                raise GatewayError("prefill is not supported on HTTP chat backends")
            messages = []
            if prompt.system:
                messages.append({"role": "system", "content": prompt.system})
            messages.extend({"role": t.role, "content": t.content} for t in prompt.turns)
            payload = {
                "model": descriptor.model_id,
                "messages": messages,
                "temperature": sampling.temperature,
                "max_tokens": sampling.max_tokens,
                "n": sampling.n_samples,
            }
            if sampling.stop:
                payload["stop"] = list(sampling.stop)
            data = self._post_with_retries(descriptor, payload)
            return [
                Completion(
                    c.get("message", {}).get("content", ""),
                    _finish(c.get("finish_reason")),
                )
                for c in _choices(data)
            ]
        raise GatewayError(f"backend kind {descriptor.kind} cannot complete")

    def _http_embed(self, descriptor: BackendDescriptor, texts: Sequence[str]) -> list[list[float]]:
        payload = {"model": descriptor.model_id, "input": list(texts)}
        data = self._post_with_retries(descriptor, payload)
        rows = data.get("data")
        if not isinstance(rows, list):
            raise ProtocolError("embeddings response missing 'data' array")
        return [row["embedding"] for row in rows]

    def _transcribe(self, role: str, prompt: ChatPrompt, nonce: str | None,
                    completions: list[Completion]) -> None:
        if self._transcripts_path is None:
            return
        entry = {
            "role": role,
            "model_id": self._state(role).descriptor.model_id,
            "prompt_hash": prompt.prompt_hash,
            "nonce": nonce,
            "n_samples": prompt.sampling.n_samples,
            "finish_reasons": [c.finish_reason.value for c in completions],
            "response_bytes": [len(c.text.encode("utf-8")) for c in completions],
        }
        with self._transcript_lock:
            self._transcripts_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self._transcripts_path, "a", encoding="utf-8") as f:
                f.write(canonical_dumps(entry) + "\n")


def _choices(data: dict[str, Any]) -> list[dict[str, Any]]:
    choices = data.get("choices")
    if not isinstance(choices, list):
        raise ProtocolError("completion response missing 'choices' array")
    return choices


def _finish(raw: Any) -> FinishReason:
    return FinishReason.LENGTH if raw == "length" else FinishReason.STOP
