from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from rootflow.errors import (
    AuthenticationError,
    EmptyCompletionError,
    FixtureError,
    PromptError,
    TransportError,
)
from rootflow.llm import (
    EXCERPT_MAX_BYTES,
    EXCERPT_MAX_LINES,
    FailureContext,
    HttpChatProvider,
    PromptRequest,
    PromptStyle,
    ProviderConfig,
    ProviderKind,
    StubFixtureTable,
    StubProvider,
    bound_log_excerpt,
    build_prompt,
    complete,
)


def _request(style=PromptStyle.GENERAL, failure=None, flowchart=None):
    return PromptRequest(
        step_id="magisk_sideload",
        step_title="Sideload Magisk.zip",
        profile_summary="android-13-unrooted: Android 13, unrooted test device",
        style=style,
        flowchart=flowchart,
        failure_context=failure,
    )


def test_structured_prompt_contains_flowchart_section():
    prompt = build_prompt(_request(style=PromptStyle.STRUCTURED, flowchart="a: A\nb: B"))
    assert "FLOWCHART:" in prompt
    assert "a: A\nb: B" in prompt


def test_general_prompt_never_contains_flowchart_section():
    prompt = build_prompt(_request())
    assert "FLOWCHART:" not in prompt


def test_structured_style_requires_flowchart():
    with pytest.raises(PromptError):
        PromptRequest(
            step_id="s", step_title="S", profile_summary="p",
            style=PromptStyle.STRUCTURED,
        )


def test_failure_context_appears_verbatim():
    failure = FailureContext(
        attempt_number=2, log_excerpt="exit=1\nsu: not found", prior_script_digest="abc123",
    )
    prompt = build_prompt(_request(failure=failure))
    assert "PREVIOUS FAILURE:" in prompt
    assert "exit=1\nsu: not found" in prompt
    assert "ATTEMPT: 2" in prompt


def test_reprompt_differs_from_first_attempt_prompt():
    base = build_prompt(_request())
    retry = build_prompt(_request(failure=FailureContext(2, "boom", "d1")))
    assert base != retry


def test_prompt_ends_with_fenced_block_instruction():
    assert build_prompt(_request()).rstrip().endswith("validation check for this step.")
    assert "```bash" in build_prompt(_request())


def test_failure_context_rejects_attempt_one():
    with pytest.raises(PromptError):
        FailureContext(attempt_number=1, log_excerpt="x", prior_script_digest="d")


def test_excerpt_is_bounded_and_neutralizes_section_token():
    long_log = "\n".join(f"line {i}" for i in range(500)) + "\nFLOWCHART: sneaky"
    excerpt = bound_log_excerpt(long_log)
    assert len(excerpt.splitlines()) <= EXCERPT_MAX_LINES
    assert len(excerpt.encode()) <= EXCERPT_MAX_BYTES
    assert "FLOWCHART:" not in excerpt


@given(
    step=st.text(st.characters(whitelist_categories=("L", "N")), min_size=1, max_size=20),
    summary=st.text(st.characters(blacklist_categories=("Cs", "Cc")), max_size=80),
    structured=st.booleans(),
)
def test_build_prompt_is_pure(step, summary, structured):
    request = PromptRequest(
        step_id=step, step_title=step, profile_summary=summary,
        style=PromptStyle.STRUCTURED if structured else PromptStyle.GENERAL,
        flowchart="f: F" if structured else None,
    )
    assert build_prompt(request) == build_prompt(request)


# -- stub provider -------------------------------------------------------------


def test_stub_root_verify_fixture_contains_su_validation():
    table = StubFixtureTable.bundled()
    body = table.lookup("root_verify", "rooted test device", 1)
    assert "su -c id" in body
    assert "```bash" in body


def test_stub_rce_initial_and_refined_differ():
    table = StubFixtureTable.bundled()
    first = table.lookup("rce_malware", "unrooted test device", 1)
    second = table.lookup("rce_malware", "unrooted test device", 2)
    assert first != second


def test_stub_unknown_step_returns_generic_marker():
    table = StubFixtureTable.bundled()
    body = table.lookup("warp_core_breach", "rooted test device", 1)
    assert "generic: true" in body


def test_stub_unrooted_key_not_confused_with_rooted():
    table = StubFixtureTable.bundled()
    unrooted = table.lookup("rce_malware", "something unrooted something", 1)
    rooted = table.lookup("rce_malware", "something rooted something", 1)
    assert unrooted != rooted


def test_stub_completion_is_deterministic():
    provider = StubProvider()
    prompt = build_prompt(_request())
    assert provider.complete(prompt).raw_text == provider.complete(prompt).raw_text


def test_stub_adb_wifi_fixture_has_single_adb_block():
    table = StubFixtureTable.bundled()
    body = table.lookup("adb_wifi", "rooted test device", 1)
    assert body.count("```adb") == 1
    assert body.count("```") == 2


def test_fixture_file_requires_fenced_blocks():
    bad = """
fixtures:
  - step: x
    initial: no fences here
    refined: still none
generic:
  initial: |
    generic: true
    ```bash
    echo hi
    ```
  refined: |
    generic: true
    ```bash
    echo hi again
    ```
"""
    with pytest.raises(FixtureError, match="fenced code block"):
        StubFixtureTable.from_text(bad)


def test_complete_with_stub_makes_no_transport_calls():
    calls = []

    def recording_transport(url, headers, payload, timeout):
        calls.append(url)
        return {}

    response = complete(
        ProviderConfig(kind=ProviderKind.STUB),
        build_prompt(_request()),
        transport=recording_transport,
    )
    assert calls == []
    assert response.provider_id == "stub"


# -- http provider ---------------------------------------------------------------


def _http_config():
    return ProviderConfig(
        kind=ProviderKind.HTTP_CHAT_COMPLETION,
        base_url="http://provider.test/v1/chat/completions",
        model_name="pentest-model",
        credential_source="ROOTFLOW_TEST_KEY",
    )


def test_http_missing_credential_fails_before_any_network(monkeypatch):
    monkeypatch.delenv("ROOTFLOW_TEST_KEY", raising=False)
    calls = []

    def transport(url, headers, payload, timeout):
        calls.append(url)
        return {}

    provider = HttpChatProvider(_http_config(), transport=transport)
    with pytest.raises(AuthenticationError):
        provider.complete("hello")
    assert calls == []


def test_http_retries_transient_failures_with_backoff(monkeypatch):
    monkeypatch.setenv("ROOTFLOW_TEST_KEY", "sekrit")
    attempts = []
    sleeps = []

    def flaky(url, headers, payload, timeout):
        attempts.append(url)
        if len(attempts) < 3:
            raise TransportError("connection reset")
        return {"choices": [{"message": {"content": "ok"}}], "id": "r1"}

    provider = HttpChatProvider(
        _http_config(), transport=flaky, sleep=sleeps.append, jitter=lambda: 0.0,
    )
    response = provider.complete("hello")
    assert response.raw_text == "ok"
    assert len(attempts) == 3
    assert sleeps == [1.0, 2.0]


def test_http_gives_up_after_three_attempts(monkeypatch):
    monkeypatch.setenv("ROOTFLOW_TEST_KEY", "sekrit")
    attempts = []

    def down(url, headers, payload, timeout):
        attempts.append(url)
        raise TransportError("unreachable")

    provider = HttpChatProvider(_http_config(), transport=down, sleep=lambda s: None)
    with pytest.raises(TransportError):
        provider.complete("hello")
    assert len(attempts) == 3


def test_http_never_retries_authentication_failure(monkeypatch):
    monkeypatch.setenv("ROOTFLOW_TEST_KEY", "wrong")
    attempts = []

    def reject(url, headers, payload, timeout):
        attempts.append(url)
        raise AuthenticationError("401")

    provider = HttpChatProvider(_http_config(), transport=reject, sleep=lambda s: None)
    with pytest.raises(AuthenticationError):
        provider.complete("hello")
    assert len(attempts) == 1


def test_http_empty_completion_is_an_error(monkeypatch):
    monkeypatch.setenv("ROOTFLOW_TEST_KEY", "sekrit")
    provider = HttpChatProvider(
        _http_config(),
        transport=lambda *a: {"choices": [{"message": {"content": ""}}]},
    )
    with pytest.raises(EmptyCompletionError):
        provider.complete("hello")


def test_http_sends_bearer_credential_from_environment(monkeypatch):
    monkeypatch.setenv("ROOTFLOW_TEST_KEY", "sekrit")
    seen = {}

    def transport(url, headers, payload, timeout):
        seen.update(headers=headers, payload=payload)
        return {"choices": [{"message": {"content": "fine"}}]}

    HttpChatProvider(_http_config(), transport=transport).complete("hello")
    assert seen["headers"]["Authorization"] == "Bearer sekrit"
    assert seen["payload"]["messages"][0]["content"] == "hello"
