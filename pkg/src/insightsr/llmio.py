"""Chat backends for the three LLM roles (main, data, idea).

``HttpChatBackend`` speaks the OpenAI-compatible chat-completions protocol.
``ReplayBackend`` serves a recorded script so full runs are reproducible
offline, and ``ScriptedBackend`` wraps a Python callable for tests.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import httpx

log = logging.getLogger(__name__)

ROLES = ("main", "data", "idea")

ENV_API_BASE = "INSIGHTSR_API_BASE"
ENV_API_KEY = "INSIGHTSR_API_KEY"
ENV_MODEL = "INSIGHTSR_MODEL"


class LLMError(Exception):
    """Any failure to obtain completions from a backend."""


class TransportError(LLMError):
    pass


class ScriptExhaustedError(LLMError):
    pass


class MalformedResponseError(LLMError):
    pass


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.8
    top_k: Optional[int] = None
    top_p: float = 0.95

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k is not None and self.top_k <= 0:
            raise ValueError("top_k must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")


# Data-role values follow the reference configuration; main/idea are our defaults.
DEFAULT_SAMPLING = {
    "main": Sampling(temperature=0.8, top_p=0.95),
    "data": Sampling(temperature=0.6, top_k=30, top_p=0.3),
    "idea": Sampling(temperature=0.8, top_p=0.95),
}


@dataclass(frozen=True)
class ChatRequest:
    role: str
    system_prompt: str
    user_prompt: str
    sampling: Sampling = field(default_factory=Sampling)
    n_samples: int = 1

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass(frozen=True)
class ChatResponse:
    completions: tuple[str, ...]
    latency_ms: int
    backend_id: str


class Backend:
    backend_id = "abstract"
    # Whether complete() may be called from several threads with results
    # independent of call order.
    concurrent_safe = False

    def complete(self, req: ChatRequest) -> ChatResponse:  # pragma: no cover - interface
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Replay


@dataclass(frozen=True)
class ReplayEntry:
    role: str
    sequence_index: int
    completions: tuple[str, ...]


class ReplayScript:
    """Ordered completions keyed by ``(role, sequence_index)``.

    File format: a JSON array of
    ``{"match": {"role": ..., "sequence_index": ...}, "completions": [...]}``.
    """

    def __init__(self, entries: Sequence[ReplayEntry]):
        self.entries = list(entries)
        self._index: dict[tuple[str, int], ReplayEntry] = {}
        for entry in self.entries:
            if entry.role not in ROLES:
                raise ValueError(f"unknown role {entry.role!r} in replay script")
            key = (entry.role, entry.sequence_index)
            if key in self._index:
                raise ValueError(f"duplicate replay entry for {key}")
            self._index[key] = entry

    def lookup(self, role: str, index: int) -> Optional[ReplayEntry]:
        return self._index.get((role, index))

    @classmethod
    def from_role_lists(cls, **by_role: Sequence[Union[str, Sequence[str]]]) -> "ReplayScript":
        """Build a script from per-role lists; a bare string is a one-sample entry."""
        entries = []
        for role, items in by_role.items():
            for i, item in enumerate(items):
                texts = (item,) if isinstance(item, str) else tuple(item)
                entries.append(ReplayEntry(role, i, texts))
        return cls(entries)

    def to_json(self) -> list:
        return [
            {"match": {"role": e.role, "sequence_index": e.sequence_index}, "completions": list(e.completions)}
            for e in self.entries
        ]

    @classmethod
    def from_json(cls, data: list) -> "ReplayScript":
        if not isinstance(data, list):
            raise ValueError("replay script must be a JSON array")
        entries = []
        for item in data:
            match = item["match"]
            entries.append(ReplayEntry(match["role"], int(match["sequence_index"]), tuple(item["completions"])))
        return cls(entries)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ReplayScript":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class ReplayBackend(Backend):
    backend_id = "replay"

    def __init__(self, script: ReplayScript):
        self.script = script
        self._counters = {role: 0 for role in ROLES}
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            index = self._counters[req.role]
            entry = self.script.lookup(req.role, index)
            if entry is None:
                raise ScriptExhaustedError(f"no scripted entry for role={req.role} index={index}")
            self._counters[req.role] = index + 1
        if len(entry.completions) != req.n_samples:
            raise MalformedResponseError(
                f"entry ({req.role}, {index}) holds {len(entry.completions)} completions, "
                f"request asked for {req.n_samples}"
            )
        return ChatResponse(entry.completions, 0, self.backend_id)


class ScriptedBackend(Backend):
    """Calls ``responder(request, per_role_index)`` for completions."""

    backend_id = "scripted"

    def __init__(self, responder: Callable[[ChatRequest, int], Union[str, Sequence[str]]]):
        self.responder = responder
        self.requests: list[ChatRequest] = []
        self._counters = {role: 0 for role in ROLES}
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            index = self._counters[req.role]
            self._counters[req.role] += 1
            self.requests.append(req)
        out = self.responder(req, index)
        texts = (out,) if isinstance(out, str) else tuple(out)
        if len(texts) != req.n_samples:
            raise MalformedResponseError(f"responder returned {len(texts)} texts for n={req.n_samples}")
        return ChatResponse(texts, 0, self.backend_id)


# ---------------------------------------------------------------------------
# HTTP


def _is_rejection_of(response: httpx.Response, name: str) -> bool:
    if response.status_code not in (400, 422):
        return False
    return name in response.text


class HttpChatBackend(Backend):
    backend_id = "http"
    concurrent_safe = True

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: Optional[str] = None,
        *,
        max_retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        max_concurrency: int = 4,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        base = base_url.rstrip("/")
        self.url = base + ("/chat/completions" if base.endswith("/v1") else "/v1/chat/completions")
        self.model = model
        self.api_key = api_key
        self.max_retries = max_retries
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self._send_top_k = True
        self._multi_n = True
        self.backend_id = f"http:{model}"

    @classmethod
    def from_env(cls, **kwargs) -> "HttpChatBackend":
        base = kwargs.pop("base_url", None) or os.environ.get(ENV_API_BASE)
        model = kwargs.pop("model", None) or os.environ.get(ENV_MODEL)
        if not base or not model:
            raise LLMError(f"set {ENV_API_BASE} and {ENV_MODEL} (or pass base_url/model)")
        key = kwargs.pop("api_key", None) or os.environ.get(ENV_API_KEY)
        return cls(base, model, key, **kwargs)

    def _payload(self, req: ChatRequest, n: int) -> dict:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.sampling.temperature,
            "top_p": req.sampling.top_p,
            "n": n,
        }
        if req.sampling.top_k is not None and self._send_top_k:
            payload["top_k"] = req.sampling.top_k
        return payload

    def _post(self, req: ChatRequest, n: int) -> list[str]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        attempt = 0
        while True:
            try:
                resp = self.client.post(self.url, json=self._payload(req, n), headers=headers)
            except httpx.HTTPError as exc:
                error: Exception = exc
            else:
                if resp.status_code == 200:
                    return self._parse(resp)
                if self._send_top_k and "top_k" in self._payload(req, n) and _is_rejection_of(resp, "top_k"):
                    log.warning("endpoint rejected top_k; dropping it from further requests")
                    self._send_top_k = False
                    continue
                if n > 1 and _is_rejection_of(resp, '"n"'):
                    raise _MultiSampleUnsupported()
                if resp.status_code != 429 and resp.status_code < 500:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:300]}")
                error = TransportError(f"HTTP {resp.status_code}")
            if attempt >= self.max_retries:
                raise TransportError(f"giving up after {attempt + 1} attempts: {error}") from error
            delay = self.backoff * 2**attempt
            log.warning("chat request failed (%s); retrying in %.1fs", error, delay)
            self.sleep(delay)
            attempt += 1

    @staticmethod
    def _parse(resp: httpx.Response) -> list[str]:
        try:
            body = resp.json()
            return [choice["message"]["content"] or "" for choice in body["choices"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected payload: {resp.text[:300]}") from exc

    def complete(self, req: ChatRequest) -> ChatResponse:
        start = time.monotonic()
        with self._slots:
            texts: list[str] = []
            if req.n_samples > 1 and self._multi_n:
                try:
                    texts = self._post(req, req.n_samples)
                except _MultiSampleUnsupported:
                    texts = []
                if len(texts) != req.n_samples:
                    log.warning("endpoint did not honour n=%d; falling back to single requests", req.n_samples)
                    self._multi_n = False
                    texts = []
            while len(texts) < req.n_samples:
                got = self._post(req, 1)
                if not got:
                    raise MalformedResponseError("response has no choices")
                texts.append(got[0])
        latency = int((time.monotonic() - start) * 1000)
        return ChatResponse(tuple(texts), latency, self.backend_id)


class _MultiSampleUnsupported(Exception):
    pass
