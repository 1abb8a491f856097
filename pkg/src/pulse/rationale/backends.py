"""Text-generation backends: a deterministic mock and an HTTP client."""
from __future__ import annotations

import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import requests

from pulse.errors import (BackendProtocolError, BackendUnavailable, InvalidArgument,
                          UnsupportedByBackend)
from pulse.rationale.prompts import load_templates
from pulse.text import hash_token, tokenize
from pulse.utils import derive_seed

log = logging.getLogger(__name__)

MAX_TOKENS = 512


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = MAX_TOKENS
    temperature: float = 0.7
    seed: int | None = None

    def __post_init__(self):
        if not self.prompt:
            raise InvalidArgument("prompt must be non-empty")
        if not 1 <= self.max_tokens <= MAX_TOKENS:
            raise InvalidArgument(f"max_tokens must be in [1, {MAX_TOKENS}]")
        if self.temperature < 0:
            raise InvalidArgument("temperature must be >= 0")

    def to_json(self) -> dict:
        body = {"prompt": self.prompt, "max_tokens": self.max_tokens, "temperature": self.temperature}
        if self.seed is not None:
            body["seed"] = self.seed
        return body


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    logprob: float | None = None


class Backend(Protocol):
    name: str

    def generate(self, request: GenerationRequest) -> GenerationResponse: ...

    def loglik(self, text: str) -> float: ...


def generate(backend: Backend, request: GenerationRequest) -> GenerationResponse:
    resp = backend.generate(request)
    if not resp.text or not resp.text.strip():
        raise BackendProtocolError(f"{backend.name} backend returned empty text")
    return resp


# -- mock ------------------------------------------------------------------
_STOP = frozenset("""title description rating review shopper shoppers purchases purchase item items
oldest first picked next with that this their they them from what looking record records similar
bought under consideration reason sentences sentence explain state describes describing refine
make sharper more specific taste which about into have there where your the and for one two""".split())

_OPENERS = (
    "This shopper keeps coming back to {t} products",
    "A steady pull toward {t} items runs through this record",
    "The purchases lean clearly {t}",
    "What ties these picks together is a liking for {t} things",
    "The shopper looks for a {t} character in what they buy",
)
_REFINED = (
    "More precisely, the shopper wants {t} goods",
    "Sharper: the common thread is {t}",
    "Put specifically, {t} is what this shopper responds to",
    "The deciding factor is the {t} quality of each item",
    "Narrowing it down, the taste is for {t} pieces",
)
_DETAILS = (
    "and seldom strays from it.", "over plainer alternatives.", "even at a higher price.",
    "across several categories.", "in repeat purchases.", "which shapes the next choice.",
    "more than brand or size.", "as the record shows.",
)


class MockBackend:
    """Deterministic stand-in for a small language model.

    With a trait ``lexicon`` it names the most common lexicon word across the
    prompt's lines (each line counted once per word, ties alphabetical). On a
    refinement prompt it carries the parent's trait forward, switching to a
    different lexicon word with probability ``drift``. Output depends only on
    (prompt, request seed, backend seed).
    """

    name = "mock"

    def __init__(self, lexicon: Sequence[str] | None = None, drift: float = 0.3, seed: int = 0,
                 templates: dict | None = None):
        if not 0.0 <= drift <= 1.0:
            raise InvalidArgument("drift must lie in [0, 1]")
        self.lexicon = tuple(sorted(set(lexicon))) if lexicon else ()
        self.drift = drift
        self.seed = seed
        self.templates = templates or load_templates()
        self.calls = 0
        self._lock = threading.Lock()

    def _split_parent(self, prompt: str) -> tuple[str | None, str]:
        sec = self.templates["refine"]
        start, end = prompt.find(sec["parent_open"]), prompt.find(sec["parent_close"])
        if start < 0 or end < start:
            return None, prompt
        parent = prompt[start + len(sec["parent_open"]):end]
        return parent, prompt[:start] + prompt[end + len(sec["parent_close"]):]

    def _modal_word(self, text: str) -> str | None:
        counts: Counter[str] = Counter()
        for line in text.splitlines():
            toks = set(tokenize(line))
            if self.lexicon:
                counts.update(toks & set(self.lexicon))
            else:
                counts.update(t for t in toks if t.isalpha() and len(t) >= 4 and t not in _STOP)
        if not counts:
            return None
        return min(counts, key=lambda w: (-counts[w], w))

    def _first_lexicon_word(self, text: str) -> str | None:
        lex = set(self.lexicon)
        for tok in tokenize(text):
            if tok in lex:
                return tok
        return None

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._lock:
            self.calls += 1
        rng = np.random.default_rng(derive_seed("mock", self.seed, request.prompt, request.seed))
        parent, rest = self._split_parent(request.prompt)
        if parent is not None:
            word = (self._first_lexicon_word(parent) if self.lexicon else self._modal_word(parent))
            word = word or self._modal_word(rest) or "quality"
            if self.lexicon and len(self.lexicon) > 1 and rng.random() < self.drift:
                others = [w for w in self.lexicon if w != word]
                word = others[int(rng.integers(len(others)))]
            opener = _REFINED[int(rng.integers(len(_REFINED)))]
        else:
            word = self._modal_word(request.prompt) or "quality"
            opener = _OPENERS[int(rng.integers(len(_OPENERS)))]
        detail = _DETAILS[int(rng.integers(len(_DETAILS)))]
        text = f"{opener.format(t=word)} {detail}"
        return GenerationResponse(text, self.loglik(text))

    def token_logprob(self, token: str) -> float:
        """Surrogate per-token log-probability in [-3, -1]."""
        return -1.0 - 2.0 * hash_token(f"{self.seed}:{token}", 10_000) / 9_999

    def loglik(self, text: str) -> float:
        toks = tokenize(text)
        if not toks:
            raise InvalidArgument("cannot score text without tokens")
        return float(sum(self.token_logprob(t) for t in toks))


# -- HTTP ------------------------------------------------------------------
class HttpBackend:
    """Client for ``POST {base_url}/generate``.

    Connection errors, timeouts and 5xx responses are retried with backoff;
    4xx and malformed bodies are protocol errors and are not retried.
    """

    name = "http"

    def __init__(self, base_url: str, timeout: float = 30.0, backoff: Sequence[float] = (0.5, 1.0, 2.0),
                 sleep: Callable[[float], None] = time.sleep, session: requests.Session | None = None):
        if not base_url:
            raise InvalidArgument("base_url must be non-empty")
        self.url = base_url.rstrip("/") + "/generate"
        self.timeout = timeout
        self.backoff = tuple(backoff)
        self.sleep = sleep
        self.session = session
        self.calls = 0
        self.retries = 0
        self._lock = threading.Lock()

    def _post(self, body: dict) -> requests.Response:
        poster = self.session.post if self.session is not None else requests.post
        return poster(self.url, json=body, timeout=self.timeout)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._lock:
            self.calls += 1
        body = request.to_json()
        last = "no attempt made"
        for attempt in range(len(self.backoff) + 1):
            if attempt:
                with self._lock:
                    self.retries += 1
                self.sleep(self.backoff[attempt - 1])
            try:
                resp = self._post(body)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("generation attempt %d failed: %s", attempt + 1, last)
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                log.warning("generation attempt %d failed: %s", attempt + 1, last)
                continue
            if resp.status_code != 200:
                raise BackendProtocolError(f"generation server answered HTTP {resp.status_code}")
            return self._parse(resp)
        raise BackendUnavailable(f"generation server unavailable after {len(self.backoff) + 1} attempts ({last})")

    @staticmethod
    def _parse(resp: requests.Response) -> GenerationResponse:
        try:
            payload = resp.json()
        except ValueError:
            raise BackendProtocolError("generation server returned a non-JSON body") from None
        text = payload.get("text") if isinstance(payload, dict) else None
        if not isinstance(text, str) or not text.strip():
            raise BackendProtocolError("generation server returned empty or missing text")
        lp = payload.get("logprob")
        if lp is not None and (isinstance(lp, bool) or not isinstance(lp, (int, float))):
            raise BackendProtocolError("logprob must be a number")
        return GenerationResponse(text, None if lp is None else float(lp))

    def loglik(self, text: str) -> float:
        raise UnsupportedByBackend("the HTTP backend cannot score arbitrary text")


class CountingBackend:
    """Wraps a backend and counts calls (used for call-budget assertions)."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.name = inner.name
        self.calls = 0
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._lock:
            self.calls += 1
        return self.inner.generate(request)

    def loglik(self, text: str) -> float:
        return self.inner.loglik(text)
