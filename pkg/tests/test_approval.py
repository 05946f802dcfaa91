from __future__ import annotations

import threading

import pytest
from hypothesis import given, strategies as st

from rootflow.approval import (
    ApprovalGate,
    ApprovalPolicy,
    Cleared,
    Denied,
    PolicyMode,
    bundled_deny_rules,
    load_deny_rules,
    screen,
)
from rootflow.errors import ApprovalError, PolicyError, ScreeningRejectedError
from rootflow.scripts import (
    ApprovalState,
    GeneratedScript,
    Interpreter,
    RiskLevel,
    ScriptKind,
    ScriptSource,
    script_digest,
)


def _script(body: str, risk=RiskLevel.MEDIUM) -> GeneratedScript:
    return GeneratedScript(
        script_id=script_digest(body),
        kind=ScriptKind.ROOTING,
        interpreter=Interpreter.SHELL,
        body=body,
        source=ScriptSource(session_id="s", step_id="backup", attempt_number=1),
        risk=risk,
    )


def _policy(mode=PolicyMode.MANUAL_ALL) -> ApprovalPolicy:
    return ApprovalPolicy.default(mode=mode)


def test_destructive_fs_wipe_is_denied():
    result = screen(_script("adb shell rm -rf / --no-preserve-root"), _policy())
    assert isinstance(result, Denied)
    assert result.rule_id == "destructive-fs"


def test_raw_block_write_is_denied():
    result = screen(_script("dd if=/dev/zero of=/dev/block/mmcblk0"), _policy())
    assert isinstance(result, Denied)
    assert result.rule_id == "raw-block-write"


def test_benign_getprop_is_cleared():
    script = _script("adb shell getprop ro.boot.verifiedbootstate")
    assert isinstance(screen(script, _policy()), Cleared)
    assert script.approval_state is ApprovalState.PENDING


def test_denied_script_is_marked_auto_denied_permanently():
    script = _script("mkfs.ext4 /dev/block/sda1")
    screen(script, _policy())
    assert script.approval_state is ApprovalState.AUTO_DENIED


def test_first_matching_rule_wins_in_list_order():
    # "rm -rf /data" matches both the root-wipe literal and the userdata
    # rule; the earlier rule must claim it.
    result = screen(_script("adb shell rm -rf /data"), _policy())
    assert isinstance(result, Denied)
    assert result.rule_id == "destructive-fs"


@given(st.text(max_size=2000))
def test_screening_is_total_over_bodies(body):
    script = _script(body or "noop")
    result = screen(script, _policy())
    assert isinstance(result, (Cleared, Denied))


def test_rules_file_rejects_bad_regex():
    bad = 'rules:\n  - {id: broken, kind: regex, pattern: "([", reason: nope}\n'
    with pytest.raises(PolicyError, match="does not compile"):
        load_deny_rules(bad)


def test_rules_file_rejects_duplicate_ids():
    dup = (
        "rules:\n"
        "  - {id: a, kind: literal, pattern: x, reason: r}\n"
        "  - {id: a, kind: literal, pattern: y, reason: r}\n"
    )
    with pytest.raises(PolicyError, match="duplicate"):
        load_deny_rules(dup)


def test_bundled_rules_all_compile_and_have_reasons():
    rules = bundled_deny_rules()
    assert len(rules) >= 5
    assert all(rule.reason for rule in rules)


# -- tickets -----------------------------------------------------------------------


def test_request_approval_is_idempotent_per_script():
    gate = ApprovalGate(_policy())
    script = _script("echo hello")
    ticket = gate.request_approval(script)
    assert gate.request_approval(script) is ticket
    assert ticket.open


def test_request_approval_refuses_auto_denied():
    gate = ApprovalGate(_policy())
    script = _script("rm -rf /sdcard; rm -rf /")
    gate.screen(script)
    with pytest.raises(ApprovalError):
        gate.request_approval(script)


def test_approve_unedited_keeps_version():
    gate = ApprovalGate(_policy())
    script = _script("echo ok")
    ticket = gate.request_approval(script)
    new_version = gate.resolve(ticket, approved=True, operator="casey")
    assert new_version is None
    assert script.approval_state is ApprovalState.APPROVED
    assert script.version == 1
    assert not ticket.open


def test_approve_with_edit_creates_immutable_new_version():
    gate = ApprovalGate(_policy())
    script = _script("echo ok")
    ticket = gate.request_approval(script)
    edited = gate.resolve(
        ticket, approved=True, operator="casey",
        edited_body="echo ok\nlogger rootflow-audit",
    )
    assert edited.version == 2
    assert edited.approval_state is ApprovalState.APPROVED
    assert script.body == "echo ok"
    assert ticket.edited_body == "echo ok\nlogger rootflow-audit"


def test_edit_matching_deny_rule_fails_and_keeps_ticket_open():
    gate = ApprovalGate(_policy())
    script = _script("echo ok")
    ticket = gate.request_approval(script)
    with pytest.raises(ScreeningRejectedError):
        gate.resolve(ticket, approved=True, operator="casey",
                     edited_body="echo ok && rm -rf /")
    assert ticket.open
    new_version = gate.resolve(ticket, approved=True, operator="casey")
    assert new_version is None and not ticket.open


def test_reject_records_reason_and_state():
    gate = ApprovalGate(_policy())
    script = _script("echo nope")
    ticket = gate.request_approval(script)
    gate.resolve(ticket, approved=False, operator="casey", reason="out of scope")
    assert script.approval_state is ApprovalState.REJECTED
    assert ticket.decision.reason == "out of scope"


def test_double_resolution_fails():
    gate = ApprovalGate(_policy())
    ticket = gate.request_approval(_script("echo once"))
    gate.resolve(ticket, approved=True, operator="casey")
    with pytest.raises(ApprovalError, match="already resolved"):
        gate.resolve(ticket, approved=False, operator="dana")


def test_concurrent_resolutions_first_wins():
    gate = ApprovalGate(_policy())
    ticket = gate.request_approval(_script("echo race"))
    outcomes = []

    def worker(name):
        try:
            gate.resolve(ticket, approved=True, operator=name)
            outcomes.append("won")
        except ApprovalError:
            outcomes.append("lost")

    threads = [threading.Thread(target=worker, args=(f"op{i}",)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert outcomes.count("won") == 1
    assert outcomes.count("lost") == 3


def test_manual_all_gives_no_auto_decision_even_for_low_risk():
    gate = ApprovalGate(_policy(PolicyMode.MANUAL_ALL))
    assert gate.auto_decision(_script("echo hi", risk=RiskLevel.LOW)) is None


def test_auto_approve_low_risk_mode_approves_only_low():
    gate = ApprovalGate(_policy(PolicyMode.AUTO_APPROVE_LOW_RISK))
    low = _script("echo low", risk=RiskLevel.LOW)
    decision = gate.auto_decision(low)
    assert decision is not None and decision.approved
    assert low.approval_state is ApprovalState.APPROVED
    assert gate.auto_decision(_script("echo high", risk=RiskLevel.HIGH)) is None


def test_allowlist_blocks_real_endpoints_and_passes_simulators():
    gate = ApprovalGate(_policy())
    gate.check_endpoint_allowed("sim:android-13-unrooted")
    with pytest.raises(PolicyError, match="allowlist"):
        gate.check_endpoint_allowed("adb:emulator-5554@localhost:5037")
    allowing = ApprovalGate(
        ApprovalPolicy.default(target_allowlist=frozenset({"adbcli:unit-test-serial"}))
    )
    allowing.check_endpoint_allowed("adbcli:unit-test-serial")


def test_audit_log_records_screen_and_decisions():
    gate = ApprovalGate(_policy())
    script = _script("echo audited")
    gate.screen(script)
    ticket = gate.request_approval(script)
    gate.resolve(ticket, approved=True, operator="casey")
    events = [record.event for record in gate.audit_log]
    assert events == ["screened_cleared", "approved"]
    assert gate.approved_script_ids() == {script.script_id}
