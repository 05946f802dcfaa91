from __future__ import annotations

import pytest

from rootflow.approval import ApprovalGate, ApprovalPolicy, PolicyMode
from rootflow.engine import (
    Campaign,
    CampaignRunner,
    RunStatus,
    auto_operator,
    evaluate_verdict,
    run_campaign,
)
from rootflow.errors import CampaignError
from rootflow.harness import parse_endpoint
from rootflow.harness.simulator import DetectionEvent, ShellResult
from rootflow.llm import PromptStyle, ProviderConfig, ProviderKind, StubFixtureTable
from rootflow.plan import SecurityMechanism, Verdict, VerdictKind
from rootflow.store import RunStore

from conftest import CANONICAL_DEVICES, GATED_STEPS, make_campaign

GENERIC_BLOCK = (
    "generic:\n"
    "  initial: |\n"
    "    generic: true\n"
    "    ```bash\n"
    "    adb shell getprop ro.build.version.release\n"
    "    ```\n"
    "  refined: |\n"
    "    generic: true\n"
    "    ```bash\n"
    "    adb shell getprop\n"
    "    ```\n"
)

# Attempt 1 ships only an action block (no validation command), so the
# attempt fails verification; the refined variant adds the check and passes.
FAIL_THEN_SUCCEED = (
    "fixtures:\n"
    "  - step: backup\n"
    "    root_state: any\n"
    "    initial: |\n"
    "      ```bash\n"
    "      adb backup -apk -all -f staging.ab\n"
    "      ```\n"
    "    refined: |\n"
    "      ```bash\n"
    "      adb backup -apk -all -f staging.ab\n"
    "      mv staging.ab device-backup.ab\n"
    "      ```\n"
    "      ```bash\n"
    "      ls -l device-backup.ab\n"
    "      ```\n" + GENERIC_BLOCK
)


def _run(campaign, fixture_text=None, operator=auto_operator):
    store = RunStore()
    table = StubFixtureTable.from_text(fixture_text) if fixture_text else None
    runner = CampaignRunner(campaign, store, operator=operator, fixture_table=table)
    record = runner.run()
    return record, runner, store


# -- evaluate_verdict ---------------------------------------------------------


def _result(exit_code=0, stdout="", stderr=""):
    return ShellResult(exit_code=exit_code, stdout=stdout, stderr=stderr, duration_ms=1.0)


def test_verdict_worked_requires_exit_zero_and_marker(bundled_plan):
    step = bundled_plan.step("root_verify")
    ok = _result(stdout="uid=0(root) gid=0(root)")
    assert evaluate_verdict(step, [ok], ok, []) == Verdict.worked()


def test_verdict_detection_beats_everything(bundled_plan):
    step = bundled_plan.step("rce_malware")
    ok = _result(stdout="rce-proof uid=0(root)")
    event = DetectionEvent(mechanism=SecurityMechanism.SELINUX, step_id=step.id, at=0.0)
    verdict = evaluate_verdict(step, [ok], ok, [event])
    assert verdict.kind is VerdictKind.BLOCKED
    assert verdict.mechanism is SecurityMechanism.SELINUX


def test_verdict_marker_absent_means_not_worked(bundled_plan):
    step = bundled_plan.step("root_verify")
    no_marker = _result(stdout="uid=2000(shell)")
    assert evaluate_verdict(step, [no_marker], no_marker, []) == Verdict.not_worked()


def test_verdict_missing_validation_means_not_worked(bundled_plan):
    step = bundled_plan.step("root_verify")
    assert evaluate_verdict(step, [_result()], None, []) == Verdict.not_worked()


# -- campaign basics -----------------------------------------------------------


def test_empty_device_list_is_a_precondition_error(bundled_plan):
    with pytest.raises(CampaignError, match="at least one device"):
        make_campaign(bundled_plan, devices=())


def test_retry_budget_is_capped(bundled_plan):
    with pytest.raises(CampaignError, match="retry budget"):
        make_campaign(bundled_plan, retry_budget=6)


def test_step_filter_must_name_known_steps(bundled_plan):
    with pytest.raises(CampaignError, match="unknown steps"):
        make_campaign(bundled_plan, step_filter=frozenset({"nope"}))


def test_step_filter_single_step_single_device(bundled_plan):
    campaign = make_campaign(
        bundled_plan, devices=("sim:android-13-unrooted",),
        step_filter=frozenset({"backup"}),
    )
    record, _, _ = _run(campaign)
    assert len(record.outcomes) == 1
    outcome = record.outcome("sim:android-13-unrooted", "backup")
    assert outcome.final_verdict == Verdict.worked()


def test_gated_step_gets_verdict_without_llm_call(bundled_plan):
    campaign = make_campaign(
        bundled_plan, devices=("sim:android-13-unrooted",),
        step_filter=frozenset({"bootloader_check"}),
    )
    record, runner, _ = _run(campaign)
    outcome = record.outcome("sim:android-13-unrooted", "bootloader_check")
    assert outcome.final_verdict.display() == "Fastboot Not Available"
    assert outcome.attempts == []
    assert runner.provider.calls == []


def test_no_llm_calls_for_any_gated_step_in_full_run(bundled_plan):
    record, runner, _ = _run(make_campaign(bundled_plan, devices=("sim:android-11-rooted",)))
    prompted_steps = {
        line.split(" ")[1] for prompt in runner.provider.calls
        for line in prompt.splitlines() if line.startswith("TASK: ")
    }
    assert prompted_steps.isdisjoint(GATED_STEPS)


def test_budget_zero_failing_step_yields_single_not_worked_attempt(bundled_plan):
    campaign = make_campaign(
        bundled_plan, devices=("sim:android-13-unrooted",),
        step_filter=frozenset({"backup"}), retry_budget=0,
    )
    record, _, _ = _run(campaign, fixture_text=FAIL_THEN_SUCCEED)
    outcome = record.outcome("sim:android-13-unrooted", "backup")
    assert len(outcome.attempts) == 1
    assert outcome.final_verdict == Verdict.not_worked()


def test_fail_then_succeed_chain_has_length_two(bundled_plan):
    campaign = make_campaign(
        bundled_plan, devices=("sim:android-13-unrooted",),
        step_filter=frozenset({"backup"}), retry_budget=2,
    )
    record, runner, _ = _run(campaign, fixture_text=FAIL_THEN_SUCCEED)
    outcome = record.outcome("sim:android-13-unrooted", "backup")
    assert [a.attempt_number for a in outcome.attempts] == [1, 2]
    assert outcome.final_verdict == Verdict.worked()
    retry_prompt = runner.provider.calls[1]
    assert "PREVIOUS FAILURE:" in retry_prompt
    assert "no validation script in this attempt" in retry_prompt


def test_reprompt_carries_prior_script_digest(bundled_plan):
    campaign = make_campaign(
        bundled_plan, devices=("sim:android-13-unrooted",),
        step_filter=frozenset({"backup"}), retry_budget=1,
    )
    record, runner, _ = _run(campaign, fixture_text=FAIL_THEN_SUCCEED)
    outcome = record.outcome("sim:android-13-unrooted", "backup")
    first_script = outcome.attempts[0].script_ids[-1]
    assert f"prior script digest: {first_script}" in runner.provider.calls[1]


def test_kernel_exploit_exhausts_budget_and_is_environment_noted(bundled_plan):
    campaign = make_campaign(
        bundled_plan, devices=("sim:android-12-rooted",),
        step_filter=frozenset({"kernel_exploit"}), retry_budget=2,
    )
    record, _, _ = _run(campaign)
    outcome = record.outcome("sim:android-12-rooted", "kernel_exploit")
    assert len(outcome.attempts) == 3  # budget + 1
    assert outcome.final_verdict == Verdict.not_worked()
    assert outcome.environment_note
    assert not outcome.counts_as_attempt()


def test_blocked_outcome_is_terminal_no_reprompt(bundled_plan):
    campaign = make_campaign(
        bundled_plan, devices=("sim:android-14-unrooted",),
        step_filter=frozenset({"rce_malware"}), retry_budget=3,
    )
    record, runner, _ = _run(campaign)
    outcome = record.outcome("sim:android-14-unrooted", "rce_malware")
    assert len(outcome.attempts) == 1
    assert outcome.final_verdict.kind is VerdictKind.BLOCKED
    assert outcome.final_verdict.display() == "Not Worked"
    assert len(runner.provider.calls) == 1


def test_rejecting_operator_ends_step_not_worked(bundled_plan):
    def rejecting_operator(gate, ticket, script):
        gate.resolve(ticket, approved=False, operator="vetoer", reason="not today")

    campaign = make_campaign(
        bundled_plan, devices=("sim:android-11-rooted",),
        step_filter=frozenset({"backup"}),
    )
    record, runner, _ = _run(campaign, operator=rejecting_operator)
    outcome = record.outcome("sim:android-11-rooted", "backup")
    assert outcome.final_verdict == Verdict.not_worked()
    assert any("operator rejected" in a for attempt in outcome.attempts
               for a in attempt.annotations)
    assert len(runner.provider.calls) == 1  # veto is terminal, no re-prompt


def test_every_executed_script_has_an_approval_record(bundled_plan):
    campaign = make_campaign(bundled_plan, devices=("sim:android-13-unrooted",))
    store = RunStore()
    gate = ApprovalGate(campaign.policy)
    runner = CampaignRunner(campaign, store, gate=gate, operator=auto_operator)
    record = runner.run()
    executed = record.executed_script_ids()
    assert executed
    assert executed <= gate.approved_script_ids()


def test_full_campaign_is_deterministic_across_runs(bundled_plan):
    first, _, _ = _run(make_campaign(bundled_plan))
    second, _, _ = _run(make_campaign(bundled_plan))
    assert first.verdict_matrix() == second.verdict_matrix()


def test_run_status_progression(bundled_plan):
    record, _, _ = _run(make_campaign(bundled_plan, devices=("sim:android-11-rooted",)))
    assert record.status is RunStatus.COMPLETED
    assert record.started_at <= record.ended_at


def test_attempt_chain_bounds_over_budgets(bundled_plan):
    for budget in range(0, 6):
        campaign = make_campaign(
            bundled_plan, devices=("sim:android-13-unrooted",),
            step_filter=frozenset({"kernel_exploit"}), retry_budget=budget,
        )
        record, _, _ = _run(campaign)
        outcome = record.outcome("sim:android-13-unrooted", "kernel_exploit")
        assert len(outcome.attempts) == budget + 1
        numbers = [a.attempt_number for a in outcome.attempts]
        assert numbers == sorted(numbers)


def test_generic_text_scripts_are_never_executed(bundled_plan):
    fixture = (
        "fixtures:\n"
        "  - step: metasploit\n"
        "    root_state: any\n"
        "    initial: |\n"
        "      ```python\n"
        "      print('not executable')\n"
        "      ```\n"
        "      ```bash\n"
        "      tail -n 20 msfconsole.log\n"
        "      ```\n"
        "    refined: |\n"
        "      ```bash\n"
        "      tail -n 20 msfconsole.log\n"
        "      ```\n" + GENERIC_BLOCK
    )
    campaign = make_campaign(
        bundled_plan, devices=("sim:android-11-rooted",),
        step_filter=frozenset({"metasploit"}),
    )
    record, _, store = _run(campaign, fixture_text=fixture)
    skipped = [e for e in store.events() if e.type == "script_skipped"]
    assert skipped and "never executable" in skipped[0].payload["why"]
    executed_bodies = {
        record.scripts[sid]["body"]
        for sid in record.executed_script_ids()
    }
    assert all("print(" not in body for body in executed_bodies)
    # The step still succeeds off the executable validation block.
    assert record.outcome("sim:android-11-rooted", "metasploit").final_verdict == Verdict.worked()
