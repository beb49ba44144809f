"""Teacher-model clients, the on-disk annotation cache, and the retrying client."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import httpx

from .. import jsonl

log = logging.getLogger(__name__)


class TeacherError(Exception):
    pass


class TransientTeacherError(TeacherError):
    """Transport failure or rate limit; worth retrying."""

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class TeacherProtocolError(TeacherError):
    pass


class FixtureMiss(TeacherError):
    pass


class EmptyCompletion(TeacherError):
    pass


class BudgetExhausted(TeacherError):
    pass


@dataclass(frozen=True)
class TeacherRequest:
    prompt: str
    max_tokens: int = 96
    temperature: float = 0.0
    stop: tuple[str, ...] = ()
    # structured inputs behind the prompt; never sent upstream, never hashed
    kind: str = field(default="", compare=False)
    context: Mapping[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def wire(self) -> dict:
        return {"prompt": self.prompt, "max_tokens": self.max_tokens, "temperature": self.temperature}

    @property
    def digest(self) -> str:
        return jsonl.digest({**self.wire(), "stop": list(self.stop)})


class TeacherClient(Protocol):
    deterministic: bool

    def complete(self, request: TeacherRequest) -> str: ...


@dataclass
class PromptSet:
    version: str
    prompts: dict[str, str]
    max_tokens: int = 96
    temperature: float = 0.0
    stop: tuple[str, ...] = ()

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> PromptSet:
        if path is None:
            raw = (resources.files("recinstruct") / "data" / "prompts.json").read_text(encoding="utf-8")
        else:
            raw = Path(path).read_text(encoding="utf-8")
        doc = json.loads(raw)
        params = doc.get("params", {})
        return cls(
            doc["version"],
            dict(doc["prompts"]),
            params.get("max_tokens", 96),
            params.get("temperature", 0.0),
            tuple(params.get("stop", ())),
        )

    def request(self, kind: str, context: Mapping[str, Any], **fields: str) -> TeacherRequest:
        template = self.prompts.get(kind)
        if not template:
            raise TeacherError(f"prompt {kind!r} is not configured in prompt set {self.version}")
        return TeacherRequest(
            template.format(**fields), self.max_tokens, self.temperature, self.stop,
            kind=kind, context=dict(context),
        )


# -- backends ----------------------------------------------------------------


class HTTPTeacher:
    """POSTs ``{"prompt", "max_tokens", "temperature"}`` and reads ``{"text"}``."""

    deterministic = False

    def __init__(
        self,
        endpoint: str,
        *,
        api_key: str | None = None,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.calls = 0

    def complete(self, request: TeacherRequest) -> str:
        self.calls += 1
        try:
            resp = self._http.post(self.endpoint, json=request.wire())
        except httpx.TransportError as exc:
            raise TransientTeacherError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientTeacherError(
                f"upstream returned {resp.status_code}", _retry_after(resp.headers.get("Retry-After"))
            )
        if resp.status_code != 200:
            raise TeacherError(f"upstream returned {resp.status_code}: {resp.text[:200]}")
        try:
            text = resp.json()["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise TeacherProtocolError(f"malformed teacher response: {resp.text[:200]!r}") from exc
        if not isinstance(text, str):
            raise TeacherProtocolError(f"'text' is not a string: {resp.text[:200]!r}")
        return text

    def close(self) -> None:
        self._http.close()


def _retry_after(value: str | None) -> float | None:
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


class FixtureTeacher:
    """Replays recorded completions keyed by request digest."""

    deterministic = True

    def __init__(self, responses: Mapping[str, str]):
        self.responses = dict(responses)
        self.calls = 0
        self.calls_by_digest: Counter = Counter()

    @classmethod
    def load(cls, path: str | os.PathLike) -> FixtureTeacher:
        _, rows = jsonl.read_jsonl(path)
        return cls({r["digest"]: r["text"] for r in rows})

    def complete(self, request: TeacherRequest) -> str:
        self.calls += 1
        self.calls_by_digest[request.digest] += 1
        try:
            return self.responses[request.digest]
        except KeyError:
            raise FixtureMiss(f"no recorded response for request {request.digest[:12]}") from None


def save_fixture(path: str | os.PathLike, recorded: Mapping[str, tuple[TeacherRequest, str]]) -> None:
    rows = (
        {"digest": d, "request": {**req.wire(), "stop": list(req.stop)}, "text": text}
        for d, (req, text) in sorted(recorded.items())
    )
    jsonl.write_jsonl(path, rows, {"kind": "teacher-fixture"})


# third-person -> first-person word rewrites for the offline teacher
REWRITE_TABLE = {
    "he": "I", "she": "I", "they": "I",
    "him": "me", "them": "me",
    "his": "my", "her": "my", "their": "my",
    "hers": "mine", "theirs": "mine",
    "himself": "myself", "herself": "myself", "themselves": "myself",
    "he's": "I'm", "she's": "I'm", "they're": "I'm",
}
_MULTIWORD = (("the user", "I"), ("the buyer", "I"), ("the customer", "I"))
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_WORD = re.compile(r"[A-Za-z']+")


def first_person(sentence: str) -> str:
    for phrase, repl in _MULTIWORD:
        sentence = re.sub(rf"\b{phrase}\b", repl, sentence, flags=re.IGNORECASE)

    def swap(m: re.Match) -> str:
        word = m.group(0)
        repl = REWRITE_TABLE.get(word.lower())
        if repl is None:
            return word
        if word[0].isupper() and repl != "I" and not repl.startswith("I'"):
            return repl[0].upper() + repl[1:]
        return repl

    return _WORD.sub(swap, sentence)


class DeterministicTeacher:
    """Offline stand-in teacher built from the structured request context.

    * explicit preference: ``He prefers <leaf category> items such as <t1> and <t2>.``
      where the leaf category is the most frequent last category label in the
      history (ties go to the most recent) and the titles are the two most
      recent ones;
    * vague intention: the review's first sentence, re-cast to first person
      with :data:`REWRITE_TABLE`.
    """

    deterministic = True

    def __init__(self):
        self.calls = 0

    def complete(self, request: TeacherRequest) -> str:
        self.calls += 1
        ctx = request.context
        if request.kind == "explicit_preference":
            return self.preference(ctx.get("titles", ()), ctx.get("leaf_categories", ()))
        if request.kind.startswith("vague_intention"):
            return self.intention(ctx.get("review", ""))
        raise TeacherError(f"deterministic teacher cannot answer {request.kind!r}")

    @staticmethod
    def preference(titles, leaf_categories) -> str:
        recent = list(titles)[-2:][::-1]
        leaves = [c for c in leaf_categories if c]
        if leaves:
            counts = Counter(leaves)
            top = max(counts.values())
            # walk newest first so ties resolve to the most recent label
            leaf = next(c for c in reversed(leaves) if counts[c] == top)
            head = f"He prefers {leaf} items"
        else:
            head = "He prefers items"
        if not recent:
            return head + "."
        return f"{head} such as {' and '.join(recent)}."

    @staticmethod
    def intention(review: str) -> str:
        text = " ".join(review.split())
        if not text:
            return ""
        first = _SENTENCE_END.split(text, maxsplit=1)[0]
        first = first_person(first).rstrip()
        if first[-1] not in ".!?":
            first += "."
        return first


# -- cache -------------------------------------------------------------------


class AnnotationCache:
    """Completions stored one file per request digest; entries never change."""

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def _path(self, digest: str) -> Path:
        return self.directory / digest[:2] / f"{digest}.json"

    def get(self, digest: str) -> str | None:
        path = self._path(digest)
        try:
            return json.loads(path.read_text(encoding="utf-8"))["text"]
        except FileNotFoundError:
            return None

    def __contains__(self, digest: str) -> bool:
        return self._path(digest).exists()

    def put(self, request: TeacherRequest, text: str) -> None:
        path = self._path(request.digest)
        with self._write_lock:
            if path.exists():
                return
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(
                jsonl.dumps({"request": {**request.wire(), "stop": list(request.stop)}, "text": text}),
                encoding="utf-8",
            )
            os.replace(tmp, path)

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*/*.json"))


class MemoryCache(AnnotationCache):
    def __init__(self):
        self._data: dict[str, str] = {}
        self._write_lock = threading.Lock()

    def get(self, digest: str) -> str | None:
        return self._data.get(digest)

    def __contains__(self, digest: str) -> bool:
        return digest in self._data

    def put(self, request: TeacherRequest, text: str) -> None:
        with self._write_lock:
            self._data.setdefault(request.digest, text)

    def __len__(self) -> int:
        return len(self._data)


class AnnotationClient:
    """Cache-first access to a teacher with retries and an upstream-call budget.

    Transient failures are retried up to ``attempts`` times with exponential
    backoff starting at ``backoff`` seconds (a server ``Retry-After`` wins when
    longer). An empty completion is retried once.
    """

    def __init__(
        self,
        teacher: TeacherClient,
        cache: AnnotationCache | None = None,
        *,
        prompts: PromptSet | None = None,
        max_upstream_calls: int | None = None,
        attempts: int = 3,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        offline: bool = False,
    ):
        self.teacher = teacher
        self.cache = cache if cache is not None else MemoryCache()
        self.prompts = prompts or PromptSet.load()
        self.max_upstream_calls = max_upstream_calls
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = sleep
        self.offline = offline
        self.upstream_calls = 0
        self.cache_hits = 0
        self._lock = threading.Lock()
        self._inflight: dict[str, threading.Lock] = {}

    def request(self, kind: str, context: Mapping[str, Any], **fields: str) -> TeacherRequest:
        return self.prompts.request(kind, context, **fields)

    def cached(self, request: TeacherRequest) -> bool:
        return request.digest in self.cache

    def complete(self, request: TeacherRequest) -> str:
        digest = request.digest
        with self._lock:
            key_lock = self._inflight.setdefault(digest, threading.Lock())
        # one upstream call per digest even under concurrent callers
        with key_lock:
            hit = self.cache.get(digest)
            if hit is not None:
                with self._lock:
                    self.cache_hits += 1
                return hit
            if self.offline:
                raise TeacherError(f"cache miss for {digest[:12]} in offline mode")
            text = self._call_upstream(request)
            self.cache.put(request, text)
            return text

    def _reserve(self) -> None:
        with self._lock:
            if self.max_upstream_calls is not None and self.upstream_calls >= self.max_upstream_calls:
                raise BudgetExhausted(f"upstream call budget {self.max_upstream_calls} exhausted")
            self.upstream_calls += 1

    def _call_upstream(self, request: TeacherRequest) -> str:
        empty_retries = 1
        attempt = 0
        while True:
            self._reserve()
            try:
                text = self.teacher.complete(request)
            except TransientTeacherError as exc:
                attempt += 1
                if attempt >= self.attempts:
                    raise
                delay = self.backoff * 2 ** (attempt - 1)
                if exc.retry_after is not None:
                    delay = max(delay, exc.retry_after)
                log.warning("teacher call failed (%s); retrying in %.1fs", exc, delay)
                self.sleep(delay)
                continue
            if text.strip():
                return text.strip()
            if empty_retries == 0:
                raise EmptyCompletion(f"teacher returned an empty completion for {request.digest[:12]}")
            empty_retries -= 1
