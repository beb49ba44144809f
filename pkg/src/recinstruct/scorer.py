"""Candidate scoring by summed output log-likelihood, and stable ranking.

Every scorer maps a :class:`ScoreRequest` to one :class:`LogLikelihood` per
candidate, in candidate order. Model hosts plug in through the HTTP protocol
implemented by :class:`RemoteScorer` (``POST /v1/score``).
"""

from __future__ import annotations

import hashlib
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from . import jsonl


class ScorerError(Exception):
    pass


class RetriableScorerError(ScorerError):
    pass


class ScorerProtocolError(ScorerError):
    pass


class FixtureMissing(ScorerError):
    pass


@dataclass(frozen=True)
class ScoreRequest:
    instruction_text: str
    candidate_outputs: tuple[str, ...]
    # ground-truth output, read only by scripted mock scorers; never sent
    reference: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "candidate_outputs", tuple(self.candidate_outputs))
        if not self.candidate_outputs:
            raise ValueError("at least one candidate is required")
        if any(not c for c in self.candidate_outputs):
            raise ValueError("candidates must be non-empty")

    def wire(self) -> dict:
        return {"instruction": self.instruction_text, "candidates": list(self.candidate_outputs)}

    @property
    def digest(self) -> str:
        return jsonl.digest(self.wire())


@dataclass(frozen=True)
class LogLikelihood:
    total: float
    token_count: int

    def __post_init__(self):
        if not math.isfinite(self.total):
            raise ValueError("log-likelihood must be finite")
        if self.total > 1e-9:
            raise ValueError(f"log-likelihood {self.total} is positive")
        if self.token_count < 1:
            raise ValueError("token_count must be >= 1")

    @property
    def per_token(self) -> float:
        return self.total / self.token_count

    def as_dict(self) -> dict:
        return {"total": self.total, "token_count": self.token_count}


class Scorer(Protocol):
    identity: str

    def score(self, request: ScoreRequest) -> list[LogLikelihood]: ...


def score(scorer: Scorer, request: ScoreRequest) -> list[LogLikelihood]:
    result = scorer.score(request)
    if len(result) != len(request.candidate_outputs):
        raise ScorerProtocolError(
            f"{scorer.identity} returned {len(result)} scores for {len(request.candidate_outputs)} candidates"
        )
    return list(result)


def rank(scores: Sequence[LogLikelihood], *, per_token: bool = False) -> list[int]:
    """Candidate indices, best first; equal scores keep their original order."""
    if not scores:
        raise ValueError("nothing to rank")
    value = (lambda s: s.per_token) if per_token else (lambda s: s.total)
    return sorted(range(len(scores)), key=lambda i: (-value(scores[i]), i))


def tokens(text: str) -> set[str]:
    return set(text.casefold().split())


def lexical_baseline_score(instruction_text: str, candidate: str) -> LogLikelihood:
    """ln((1 + shared tokens) / (1 + candidate tokens)) over case-folded word sets."""
    if not instruction_text or not candidate:
        raise ValueError("inputs must be non-empty")
    cand = tokens(candidate)
    overlap = len(tokens(instruction_text) & cand)
    return LogLikelihood(math.log((1 + overlap) / (1 + len(cand))), max(1, len(cand)))


class LexicalScorer:
    identity = "lexical"

    def score(self, request: ScoreRequest) -> list[LogLikelihood]:
        return [lexical_baseline_score(request.instruction_text, c) for c in request.candidate_outputs]


# -- scripted mocks ----------------------------------------------------------


class ConstantProbScorer:
    """Every output token gets probability ``p``."""

    def __init__(self, p: float):
        if not 0 < p <= 1:
            raise ValueError("p must be in (0, 1]")
        self.p = p
        self.identity = f"mock-constant:{p}"

    def score(self, request: ScoreRequest) -> list[LogLikelihood]:
        out = []
        for c in request.candidate_outputs:
            n = len(c.split()) or 1
            out.append(LogLikelihood(n * math.log(self.p), n))
        return out


class OracleScorer:
    """Scores the reference output 0 and everything else -1 (or the reverse)."""

    def __init__(self, inverse: bool = False):
        self.inverse = inverse
        self.identity = "mock-inverse-oracle" if inverse else "mock-oracle"

    def score(self, request: ScoreRequest) -> list[LogLikelihood]:
        if request.reference is None:
            raise ScorerError("oracle scorer needs request.reference")
        hit, miss = (-2.0, -1.0) if self.inverse else (0.0, -1.0)
        return [LogLikelihood(hit if c == request.reference else miss, 1) for c in request.candidate_outputs]


class RandomScorer:
    """Pseudo-random scores keyed on (seed, instruction, candidate).

    A candidate's score does not depend on its position, so permuting the
    candidates permutes the scores.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.identity = f"mock-random:{seed}"
        self._prefix = f"{seed}\x00".encode()

    def _u(self, instruction: bytes, candidate: str) -> float:
        h = hashlib.blake2b(self._prefix + instruction + b"\x00" + candidate.encode(), digest_size=8)
        return (int.from_bytes(h.digest(), "big") + 1) / 2.0**64

    def score(self, request: ScoreRequest) -> list[LogLikelihood]:
        inst = request.instruction_text.encode()
        return [LogLikelihood(-self._u(inst, c), 1) for c in request.candidate_outputs]


# -- fixtures ----------------------------------------------------------------


def _fixture_identity(entries: Mapping[str, list[LogLikelihood]]) -> str:
    body = [(d, [s.as_dict() for s in entries[d]]) for d in sorted(entries)]
    return "fixture:" + jsonl.digest(body)[:16]


class FixtureScorer:
    """Replays recorded score lists keyed by request digest."""

    def __init__(self, entries: Mapping[str, list[LogLikelihood]]):
        self.entries = dict(entries)
        self.identity = _fixture_identity(self.entries)
        self.calls = 0

    @classmethod
    def load(cls, path: str | os.PathLike) -> FixtureScorer:
        _, rows = jsonl.read_jsonl(path)
        return cls({r["digest"]: [LogLikelihood(s["total"], s["token_count"]) for s in r["scores"]] for r in rows})

    def score(self, request: ScoreRequest) -> list[LogLikelihood]:
        self.calls += 1
        try:
            return list(self.entries[request.digest])
        except KeyError:
            raise FixtureMissing(f"no recorded scores for request {request.digest[:12]}") from None


class RecordingScorer:
    """Wraps a scorer and keeps every request/response pair for a fixture file."""

    def __init__(self, inner: Scorer):
        self.inner = inner
        self.identity = inner.identity
        self.recorded: dict[str, tuple[ScoreRequest, list[LogLikelihood]]] = {}
        self._lock = threading.Lock()

    def score(self, request: ScoreRequest) -> list[LogLikelihood]:
        result = score(self.inner, request)
        with self._lock:
            self.recorded[request.digest] = (request, result)
        return result

    def save(self, path: str | os.PathLike) -> None:
        rows = (
            {"digest": d, "request": req.wire(), "scores": [s.as_dict() for s in res]}
            for d, (req, res) in sorted(self.recorded.items())
        )
        jsonl.write_jsonl(path, rows, {"kind": "scorer-fixture", "recorded_from": self.inner.identity})


# -- remote ------------------------------------------------------------------


class RemoteScorer:
    """Client for a model server speaking ``POST /v1/score``.

    5xx, 408 and 429 replies and transport failures are retried (``attempts``
    total, exponential backoff from ``backoff`` seconds). Other 4xx replies
    fail at once with :class:`ScorerError`. Malformed bodies raise
    :class:`ScorerProtocolError` carrying an excerpt of the payload.
    """

    def __init__(
        self,
        base_url: str,
        *,
        timeout: float = 30.0,
        attempts: int = 3,
        backoff: float = 1.0,
        api_key: str | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = sleep
        self._identity: str | None = None

    @property
    def identity(self) -> str:
        if self._identity is None:
            try:
                resp = self._http.get(f"{self.base_url}/v1/info")
                self._identity = resp.json()["scorer"] if resp.status_code == 200 else None
            except (httpx.HTTPError, ValueError, KeyError):
                self._identity = None
            if self._identity is None:
                self._identity = f"remote:{self.base_url}"
        return self._identity

    def score(self, request: ScoreRequest) -> list[LogLikelihood]:
        attempt = 0
        while True:
            try:
                return self._post(request)
            except RetriableScorerError:
                attempt += 1
                if attempt >= self.attempts:
                    raise
                self.sleep(self.backoff * 2 ** (attempt - 1))

    def _post(self, request: ScoreRequest) -> list[LogLikelihood]:
        try:
            resp = self._http.post(f"{self.base_url}/v1/score", json=request.wire())
        except httpx.TransportError as exc:
            raise RetriableScorerError(f"transport error: {exc}") from exc
        if 400 <= resp.status_code < 500 and resp.status_code not in (408, 429):
            # the request itself is at fault; repeating it cannot help
            raise ScorerError(f"score endpoint rejected request ({resp.status_code}): {resp.text[:200]}")
        if resp.status_code != 200:
            raise RetriableScorerError(f"score endpoint returned {resp.status_code}: {resp.text[:200]}")
        try:
            scores = resp.json()["scores"]
            out = [LogLikelihood(float(s["total"]), int(s["token_count"])) for s in scores]
        except (ValueError, KeyError, TypeError) as exc:
            raise ScorerProtocolError(f"malformed score response: {resp.text[:200]!r}") from exc
        if len(out) != len(request.candidate_outputs):
            raise ScorerProtocolError(
                f"expected {len(request.candidate_outputs)} scores, got {len(out)}: {resp.text[:200]!r}"
            )
        return out

    def close(self) -> None:
        self._http.close()
