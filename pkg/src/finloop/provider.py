"""Chat-completion backends behind one small contract.

Every LLM call in the system goes through ``complete(ChatRequest) ->
ChatResponse``. Two implementations exist: an HTTP client for
chat-completions style endpoints, and a scripted mock that answers from an
ordered rule table so the full pipeline runs offline and deterministically.

Design notes:
- Requests are tagged with the role that issues them (generator, voter,
  solver, ...); per-role temperature and token defaults live here so the
  rest of the code never hardcodes sampling parameters.
- The mock matches rules against the request's message texts joined with
  blank lines, in order, first match wins. Identical requests always get
  identical responses.
- A shared ``TokenBudget`` can be attached to any backend; it refuses a
  call *before* the ceiling would be crossed.
"""

from __future__ import annotations

import json
import logging
import random
import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol

import httpx

from .errors import AuthError, BudgetExceeded, ContractError, TransportError

logger = logging.getLogger(__name__)

SPEAKERS = ("system", "user", "assistant")


class Role(str, Enum):
    GENERATOR = "generator"
    VOTER = "voter"
    ANALYZER = "analyzer"
    RECOMMENDER = "recommender"
    REVISER = "reviser"
    SOLVER = "solver"


# (temperature, max_tokens) per role. Generation and revision produce long
# artifacts, hence the larger completion budget.
_ROLE_PARAMS: dict[Role, tuple[float, int]] = {
    Role.GENERATOR: (0.5, 2048),
    Role.VOTER: (0.0, 512),
    Role.ANALYZER: (0.0, 512),
    Role.RECOMMENDER: (0.5, 512),
    Role.REVISER: (0.0, 2048),
    Role.SOLVER: (0.0, 512),
}


def role_params(role_tag: Role | str) -> tuple[float, int]:
    """Default (temperature, max_tokens) for a role tag."""
    return _ROLE_PARAMS[Role(role_tag)]


@dataclass(frozen=True)
class Message:
    speaker: str
    text: str


@dataclass(frozen=True)
class ChatRequest:
    role_tag: Role
    messages: tuple[Message, ...]
    temperature: float
    max_tokens: int
    seed: int | None = None

    def validate(self) -> None:
        if not self.messages:
            raise ContractError("request has no messages")
        if self.messages[0].speaker != "system":
            raise ContractError("first message must come from the system speaker")
        for m in self.messages:
            if m.speaker not in SPEAKERS:
                raise ContractError(f"unknown speaker {m.speaker!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ContractError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens <= 0:
            raise ContractError(f"max_tokens must be positive, got {self.max_tokens}")

    def match_text(self) -> str:
        """Message texts joined with blank lines; what mock rules match on."""
        return "\n\n".join(m.text for m in self.messages)


def build_request(
    role_tag: Role | str,
    system: str,
    user: str,
    *,
    temperature: float | None = None,
    max_tokens: int | None = None,
    seed: int | None = None,
) -> ChatRequest:
    """Assemble a two-message request with the role's default parameters."""
    role = Role(role_tag)
    default_temp, default_max = role_params(role)
    return ChatRequest(
        role_tag=role,
        messages=(Message("system", system), Message("user", user)),
        temperature=default_temp if temperature is None else temperature,
        max_tokens=default_max if max_tokens is None else max_tokens,
        seed=seed,
    )


@dataclass(frozen=True)
class ChatResponse:
    text: str
    token_usage: tuple[int, int]  # (prompt_tokens, completion_tokens)
    backend_id: str

    def __post_init__(self) -> None:
        if self.token_usage[0] < 0 or self.token_usage[1] < 0:
            raise ContractError("token counts must be non-negative")


class Provider(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


def _estimate_tokens(text: str) -> int:
    # Coarse 4-chars-per-token estimate, shared by budget checks and the mock.
    return len(text) // 4


class TokenBudget:
    """Cumulative token meter with a hard ceiling.

    ``check`` is called with a conservative estimate before each call and
    raises at the boundary; ``charge`` records what the backend actually
    reported. Safe to share across threads.
    """

    def __init__(self, ceiling: int):
        if ceiling < 0:
            raise ContractError("token ceiling must be >= 0")
        self.ceiling = ceiling
        self.used = 0
        self._lock = threading.Lock()

    def check(self, estimate: int) -> None:
        with self._lock:
            if self.used + estimate > self.ceiling:
                raise BudgetExceeded(
                    f"call estimated at {estimate} tokens would exceed the "
                    f"ceiling ({self.used}/{self.ceiling} used)"
                )

    def charge(self, prompt_tokens: int, completion_tokens: int) -> None:
        with self._lock:
            self.used += prompt_tokens + completion_tokens


def _call_estimate(request: ChatRequest) -> int:
    return _estimate_tokens(request.match_text()) + request.max_tokens


@dataclass(frozen=True)
class MatchRule:
    role: str  # a Role value or "*" for any
    kind: str  # "contains" | "regex" | "always"
    pattern: str
    response: str

    def matches(self, request: ChatRequest) -> bool:
        if self.role != "*" and self.role != request.role_tag.value:
            return False
        if self.kind == "always":
            return True
        text = request.match_text()
        if self.kind == "contains":
            return self.pattern in text
        if self.kind == "regex":
            return re.search(self.pattern, text) is not None
        raise ContractError(f"unknown rule kind {self.kind!r}")


@dataclass(frozen=True)
class ScriptedBehavior:
    """Ordered rule table for the mock backend. Immutable after load."""

    rules: tuple[MatchRule, ...]
    default_response: str = ""

    @classmethod
    def from_dict(cls, data: dict) -> ScriptedBehavior:
        rules = []
        for i, raw in enumerate(data.get("rules", [])):
            when = raw.get("when", {})
            if "contains" in when:
                kind, pattern = "contains", when["contains"]
            elif "regex" in when:
                kind, pattern = "regex", when["regex"]
            elif when.get("always"):
                kind, pattern = "always", ""
            else:
                raise ContractError(f"rule {i} has no usable predicate: {when!r}")
            rules.append(
                MatchRule(
                    role=raw.get("role", "*"),
                    kind=kind,
                    pattern=pattern,
                    response=raw["respond"],
                )
            )
        return cls(rules=tuple(rules), default_response=data.get("default_response", ""))

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBehavior:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def respond(self, request: ChatRequest) -> str:
        for rule in self.rules:
            if rule.matches(request):
                return rule.response
        return self.default_response


class MockProvider:
    """Deterministic scripted backend; no network access."""

    def __init__(self, behavior: ScriptedBehavior, *, budget: TokenBudget | None = None,
                 backend_id: str = "mock"):
        self.behavior = behavior
        self.budget = budget
        self.backend_id = backend_id

    def complete(self, request: ChatRequest) -> ChatResponse:
        request.validate()
        if self.budget is not None:
            self.budget.check(_call_estimate(request))
        text = self.behavior.respond(request)
        prompt_tokens = _estimate_tokens(request.match_text())
        completion_tokens = min(_estimate_tokens(text), request.max_tokens)
        if self.budget is not None:
            self.budget.charge(prompt_tokens, completion_tokens)
        return ChatResponse(text=text, token_usage=(prompt_tokens, completion_tokens),
                            backend_id=self.backend_id)


_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class HttpProvider:
    """Client for chat-completions style HTTP endpoints.

    Transient failures (retryable status codes and transport errors) are
    retried with exponential backoff and full jitter: attempt *k* sleeps a
    uniform draw from [0, base_delay * 2**k]. At most ``max_attempts``
    transport attempts are made per call.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str,
        *,
        backend_id: str | None = None,
        max_attempts: int = 5,
        base_delay: float = 0.5,
        timeout: float = 60.0,
        budget: TokenBudget | None = None,
        transport: httpx.BaseTransport | None = None,
        rng: random.Random | None = None,
    ):
        if max_attempts < 1:
            raise ContractError("max_attempts must be >= 1")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.backend_id = backend_id or model
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.budget = budget
        self._rng = rng or random.Random()
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _body(self, request: ChatRequest) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": m.speaker, "content": m.text} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def complete(self, request: ChatRequest) -> ChatResponse:
        request.validate()
        if self.budget is not None:
            self.budget.check(_call_estimate(request))
        headers = {"Authorization": f"Bearer {self.api_key}",
                   "Content-Type": "application/json"}
        body = self._body(request)
        last_failure = "no attempt made"
        for attempt in range(self.max_attempts):
            if attempt > 0:
                time.sleep(self._rng.uniform(0, self.base_delay * 2 ** (attempt - 1)))
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_failure = f"transport failure: {exc}"
                logger.warning("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, exc)
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"backend rejected credential (HTTP {resp.status_code})")
            if resp.status_code in _RETRYABLE_STATUS:
                last_failure = f"HTTP {resp.status_code}"
                logger.warning("attempt %d/%d got HTTP %d", attempt + 1, self.max_attempts,
                               resp.status_code)
                continue
            if resp.status_code >= 400:
                raise ContractError(
                    f"backend rejected request: HTTP {resp.status_code}: {resp.text[:200]}"
                )
            return self._parse(resp)
        raise TransportError(
            f"gave up after {self.max_attempts} attempts; last failure: {last_failure}"
        )

    def _parse(self, resp: httpx.Response) -> ChatResponse:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unparseable backend response: {exc}") from exc
        if text is None:
            text = ""
        usage = data.get("usage") or {}
        prompt_tokens = int(usage.get("prompt_tokens", 0))
        completion_tokens = int(usage.get("completion_tokens", 0))
        if self.budget is not None:
            self.budget.charge(prompt_tokens, completion_tokens)
        return ChatResponse(text=text, token_usage=(prompt_tokens, completion_tokens),
                            backend_id=self.backend_id)


class RoleRouter:
    """Dispatch requests to per-role backends, falling back to a default."""

    def __init__(self, providers: dict[str, Provider]):
        if not providers:
            raise ContractError("router needs at least one backend")
        self._providers = dict(providers)

    def complete(self, request: ChatRequest) -> ChatResponse:
        provider = self._providers.get(request.role_tag.value) or self._providers.get("default")
        if provider is None:
            raise ContractError(f"no backend configured for role {request.role_tag.value!r}")
        return provider.complete(request)
