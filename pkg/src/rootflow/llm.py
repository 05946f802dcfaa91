"""Provider-agnostic completion access: prompt construction, an HTTP
chat-completion adapter, and a deterministic stub backed by a fixture table.

Prompt layout is a fixed contract so downstream script extraction stays
parseable: a role preamble, TASK/TARGET lines, an optional FLOWCHART section
(structured style only), an optional PREVIOUS FAILURE section carrying the
prior attempt's log excerpt, and a closing output-format instruction that
demands fenced, interpreter-tagged code blocks.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Callable, Optional

import yaml

from .errors import (
    AuthenticationError,
    EmptyCompletionError,
    FixtureError,
    PromptError,
    TransportError,
)

BUNDLED_FIXTURES = "llm_stub.responses"

# Failure-log excerpt bounds: last 50 lines or 4 KiB, whichever is smaller.
EXCERPT_MAX_LINES = 50
EXCERPT_MAX_BYTES = 4096

RETRY_ATTEMPTS = 3
RETRY_BACKOFF_SECONDS = (1.0, 2.0, 4.0)
RETRY_JITTER = 0.2


class PromptStyle(str, Enum):
    GENERAL = "general"
    STRUCTURED = "structured"


class ProviderKind(str, Enum):
    STUB = "stub"
    HTTP_CHAT_COMPLETION = "http_chat_completion"


@dataclass(frozen=True)
class FailureContext:
    """Feedback carried into a re-prompt after a failed attempt."""

    attempt_number: int
    log_excerpt: str
    prior_script_digest: str

    def __post_init__(self):
        if self.attempt_number < 2:
            raise PromptError("failure context only applies from attempt 2 onward")


@dataclass(frozen=True)
class PromptRequest:
    step_id: str
    step_title: str
    profile_summary: str
    style: PromptStyle
    flowchart: Optional[str] = None
    failure_context: Optional[FailureContext] = None

    def __post_init__(self):
        if self.style is PromptStyle.STRUCTURED and not self.flowchart:
            raise PromptError("structured prompts require a flowchart")
        if self.style is PromptStyle.GENERAL and self.flowchart:
            raise PromptError("general prompts must not carry a flowchart")


@dataclass(frozen=True)
class ProviderConfig:
    kind: ProviderKind
    model_name: str = "stub-pentest"
    base_url: Optional[str] = None
    timeout: float = 30.0
    credential_source: Optional[str] = None

    def __post_init__(self):
        if self.kind is ProviderKind.HTTP_CHAT_COMPLETION:
            if not self.base_url or not self.credential_source:
                raise ValueError("http provider requires base_url and credential_source")


@dataclass(frozen=True)
class LlmResponse:
    raw_text: str
    provider_id: str
    latency_ms: float
    session_id: str


def bound_log_excerpt(log_text: str) -> str:
    """Clip a failure log to the configured excerpt cap and neutralize the
    flowchart section token so general prompts never contain it."""
    lines = log_text.splitlines()[-EXCERPT_MAX_LINES:]
    excerpt = "\n".join(lines)
    data = excerpt.encode("utf-8")[-EXCERPT_MAX_BYTES:]
    return data.decode("utf-8", errors="ignore").replace("FLOWCHART:", "FLOWCHART :")


_PREAMBLE = (
    "You are assisting an authorized Android security assessment. Every target\n"
    "is an operator-owned test device; all generated scripts are reviewed by a\n"
    "human before any execution."
)

_FORMAT_INSTRUCTION = (
    "Respond with one or more fenced code blocks, each labeled with an\n"
    "interpreter tag (```bash, ```adb, or ```text). The final block must be a\n"
    "validation check for this step."
)


def build_prompt(request: PromptRequest) -> str:
    """Render a request to prompt text. Pure: identical requests produce
    byte-identical prompts."""
    parts = [
        _PREAMBLE,
        "",
        f"TASK: {request.step_id} - {request.step_title}",
        f"TARGET: {request.profile_summary}",
    ]
    if request.style is PromptStyle.STRUCTURED:
        parts += ["", "FLOWCHART:", "<<<", request.flowchart.rstrip("\n"), ">>>"]
    if request.failure_context is not None:
        ctx = request.failure_context
        parts += [
            "",
            "PREVIOUS FAILURE:",
            "<<<",
            f"ATTEMPT: {ctx.attempt_number}",
            f"prior script digest: {ctx.prior_script_digest}",
            bound_log_excerpt(ctx.log_excerpt),
            ">>>",
        ]
    parts += ["", _FORMAT_INSTRUCTION]
    return "\n".join(parts) + "\n"


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


# --- stub provider -----------------------------------------------------------

_FENCE_RE = re.compile(r"```[^\n]*\n.*?```", re.DOTALL)


@dataclass
class StubFixture:
    step_id: str
    root_state: str  # rooted | unrooted | any
    initial: str
    refined: str


class StubFixtureTable:
    """Fixture records keyed by (step, root_state); attempt >= 2 selects the
    refined variant. Unknown keys fall back to the generic record, whose body
    carries a `generic: true` marker line."""

    def __init__(self, fixtures: dict[tuple[str, str], StubFixture], generic: StubFixture):
        self._fixtures = fixtures
        self._generic = generic

    @classmethod
    def from_text(cls, text: str, source: str = "<fixtures>") -> "StubFixtureTable":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise FixtureError(f"{source}: fixture file does not parse: {exc}") from exc
        if not isinstance(data, dict) or "fixtures" not in data:
            raise FixtureError(f"{source}: expected a top-level 'fixtures' list")

        fixtures: dict[tuple[str, str], StubFixture] = {}
        for i, raw in enumerate(data["fixtures"] or []):
            fx = cls._parse_record(raw, f"{source} fixtures[{i}]")
            key = (fx.step_id, fx.root_state)
            if key in fixtures:
                raise FixtureError(f"{source}: duplicate fixture key {key}")
            fixtures[key] = fx

        generic_raw = data.get("generic")
        if not generic_raw:
            raise FixtureError(f"{source}: missing 'generic' fallback fixture")
        generic = cls._parse_record({"step": "__generic__", **generic_raw}, f"{source} generic")
        for body in (generic.initial, generic.refined):
            if "generic: true" not in body:
                raise FixtureError(f"{source}: generic fixture must carry a 'generic: true' marker")
        return cls(fixtures, generic)

    @staticmethod
    def _parse_record(raw: dict, where: str) -> StubFixture:
        for key in ("step", "initial", "refined"):
            if key not in raw or raw[key] is None:
                raise FixtureError(f"{where}: missing field {key!r}")
        root_state = str(raw.get("root_state", "any"))
        if root_state not in ("rooted", "unrooted", "any"):
            raise FixtureError(f"{where}: root_state must be rooted, unrooted, or any")
        record = StubFixture(
            step_id=str(raw["step"]),
            root_state=root_state,
            initial=str(raw["initial"]),
            refined=str(raw["refined"]),
        )
        for variant, body in (("initial", record.initial), ("refined", record.refined)):
            if not _FENCE_RE.search(body):
                raise FixtureError(f"{where}: {variant} body must contain a fenced code block")
        return record

    @classmethod
    def bundled(cls) -> "StubFixtureTable":
        text = (resources.files("rootflow.data") / "fixtures" / BUNDLED_FIXTURES).read_text()
        return cls.from_text(text, source=BUNDLED_FIXTURES)

    def lookup(self, step_id: str, profile_summary: str, attempt_number: int) -> str:
        root_state = "unrooted" if "unrooted" in profile_summary else "rooted"
        record = (
            self._fixtures.get((step_id, root_state))
            or self._fixtures.get((step_id, "any"))
            or self._generic
        )
        return record.initial if attempt_number <= 1 else record.refined


_TASK_RE = re.compile(r"^TASK: (\S+) - ", re.MULTILINE)
_TARGET_RE = re.compile(r"^TARGET: (.*)$", re.MULTILINE)
_ATTEMPT_RE = re.compile(r"^ATTEMPT: (\d+)$", re.MULTILINE)


class StubProvider:
    """Offline provider: parses the structured prompt back into a fixture key
    and returns canned text. Performs no network activity and records every
    prompt it serves for test assertions."""

    provider_id = "stub"

    def __init__(self, table: Optional[StubFixtureTable] = None):
        self.table = table or StubFixtureTable.bundled()
        self.calls: list[str] = []

    def complete(self, prompt: str) -> LlmResponse:
        self.calls.append(prompt)
        task = _TASK_RE.search(prompt)
        target = _TARGET_RE.search(prompt)
        attempt = _ATTEMPT_RE.search(prompt)
        step_id = task.group(1) if task else "__unknown__"
        summary = target.group(1) if target else ""
        attempt_number = int(attempt.group(1)) if attempt else 1
        text = self.table.lookup(step_id, summary, attempt_number)
        if not text.strip():
            raise EmptyCompletionError("stub fixture produced empty text")
        return LlmResponse(
            raw_text=text,
            provider_id=self.provider_id,
            latency_ms=0.0,
            session_id=prompt_digest(prompt),
        )


# --- HTTP chat-completion provider -------------------------------------------

Transport = Callable[[str, dict, dict, float], dict]
"""(url, headers, payload, timeout) -> decoded JSON response body."""


def _urllib_transport(url: str, headers: dict, payload: dict, timeout: float) -> dict:
    body = json.dumps(payload).encode("utf-8")
    request = urllib.request.Request(url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(request, timeout=timeout) as response:
            return json.loads(response.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        if exc.code in (401, 403):
            raise AuthenticationError(f"provider rejected credential (HTTP {exc.code})") from exc
        raise TransportError(f"provider returned HTTP {exc.code}") from exc
    except (urllib.error.URLError, TimeoutError, OSError) as exc:
        raise TransportError(f"transport failure: {exc}") from exc


class HttpChatProvider:
    """Adapter for the common JSON chat-completion request/response shape.
    The credential is read from the environment variable named in the config
    and never stored on the instance."""

    def __init__(
        self,
        config: ProviderConfig,
        transport: Transport = _urllib_transport,
        sleep: Callable[[float], None] = time.sleep,
        jitter: Optional[Callable[[], float]] = None,
    ):
        self.config = config
        self.provider_id = f"http:{config.model_name}"
        self._transport = transport
        self._sleep = sleep
        self._jitter = jitter or (lambda: random.uniform(-1.0, 1.0))

    def _credential(self) -> str:
        value = os.environ.get(self.config.credential_source or "")
        if not value:
            raise AuthenticationError(
                f"credential environment variable {self.config.credential_source!r} not set"
            )
        return value

    def complete(self, prompt: str) -> LlmResponse:
        token = self._credential()
        headers = {"Authorization": f"Bearer {token}", "Content-Type": "application/json"}
        payload = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
        }
        last_error: Optional[TransportError] = None
        for attempt in range(RETRY_ATTEMPTS):
            started = time.monotonic()
            try:
                body = self._transport(self.config.base_url, headers, payload, self.config.timeout)
            except TransportError as exc:
                last_error = exc
                if attempt + 1 < RETRY_ATTEMPTS:
                    base = RETRY_BACKOFF_SECONDS[attempt]
                    self._sleep(base * (1.0 + RETRY_JITTER * self._jitter()))
                continue
            latency = (time.monotonic() - started) * 1000.0
            text = self._extract_text(body)
            if not text:
                raise EmptyCompletionError("provider returned an empty completion")
            return LlmResponse(
                raw_text=text,
                provider_id=self.provider_id,
                latency_ms=latency,
                session_id=str(body.get("id", prompt_digest(prompt))),
            )
        raise last_error

    @staticmethod
    def _extract_text(body: dict) -> str:
        choices = body.get("choices") or []
        if not choices:
            return ""
        message = choices[0].get("message") or {}
        return message.get("content") or ""


def make_provider(
    config: ProviderConfig,
    fixture_table: Optional[StubFixtureTable] = None,
    transport: Optional[Transport] = None,
    sleep: Callable[[float], None] = time.sleep,
):
    if config.kind is ProviderKind.STUB:
        return StubProvider(fixture_table)
    return HttpChatProvider(config, transport=transport or _urllib_transport, sleep=sleep)


def complete(config: ProviderConfig, prompt: str, **provider_kwargs) -> LlmResponse:
    """One-shot completion against a fresh provider built from `config`."""
    return make_provider(config, **provider_kwargs).complete(prompt)
