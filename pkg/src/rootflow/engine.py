"""Campaign driver: per device x step, prompt -> completion -> extraction ->
screening/approval -> execution -> validation -> verdict, with a bounded
failure-feedback loop.

Every state change goes through the run store as an event, so a replayed log
rebuilds the exact same run record. Device workers run concurrently; a
single device's steps are strictly sequential.
"""

from __future__ import annotations

import logging
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .approval import ApprovalGate, ApprovalPolicy, ApprovalTicket, Denied
from .errors import (
    ApprovalError,
    CampaignError,
    ExtractionError,
    ProviderError,
    ShellTimeout,
)
from .harness import DeviceEndpoint, SimulatorRegistry, open_session
from .harness.simulator import DetectionEvent, ShellResult
from .llm import (
    FailureContext,
    PromptRequest,
    PromptStyle,
    ProviderConfig,
    StubFixtureTable,
    bound_log_excerpt,
    build_prompt,
    make_provider,
    prompt_digest,
)
from .plan import (
    PlanGraph,
    PlanStep,
    Verdict,
    VerdictKind,
    eligible_steps,
    environment_gate,
    serialize_flowchart,
)
from .scripts import (
    ApprovalState,
    GeneratedScript,
    Interpreter,
    ScriptKind,
    extract_scripts,
    last_validation_script,
    script_digest,
)

logger = logging.getLogger(__name__)

MAX_RETRY_BUDGET = 5
DEFAULT_SHELL_TIMEOUT_S = 30.0


class RunStatus(str, Enum):
    RUNNING = "running"
    AWAITING_APPROVAL = "awaiting_approval"
    COMPLETED = "completed"
    ABORTED = "aborted"


Operator = Callable[[ApprovalGate, ApprovalTicket, GeneratedScript], None]


def auto_operator(gate: ApprovalGate, ticket: ApprovalTicket, script: GeneratedScript):
    """Unattended reviewer persona: approves every cleared script instantly,
    still exercising the full ticket path."""
    try:
        gate.resolve(ticket, approved=True, operator="auto-operator")
    except ApprovalError:
        pass  # a concurrent worker resolved the shared ticket first


@dataclass
class Campaign:
    plan: PlanGraph
    devices: list[DeviceEndpoint]
    prompt_style: PromptStyle
    provider: ProviderConfig
    policy: ApprovalPolicy
    retry_budget: int = 2
    step_filter: Optional[frozenset[str]] = None
    shell_timeout_s: float = DEFAULT_SHELL_TIMEOUT_S

    def __post_init__(self):
        if not self.devices:
            raise CampaignError("campaign requires at least one device")
        if not 0 <= self.retry_budget <= MAX_RETRY_BUDGET:
            raise CampaignError(f"retry budget must be within 0..{MAX_RETRY_BUDGET}")
        if self.step_filter is not None:
            unknown = set(self.step_filter) - set(self.plan.steps)
            if unknown:
                raise CampaignError(f"step filter names unknown steps: {sorted(unknown)}")

    def snapshot(self) -> dict:
        return {
            "plan_name": self.plan.name,
            "devices": [d.key for d in self.devices],
            "prompt_style": self.prompt_style.value,
            "provider_kind": self.provider.kind.value,
            "policy_mode": self.policy.mode.value,
            "retry_budget": self.retry_budget,
            "step_filter": sorted(self.step_filter) if self.step_filter else None,
        }


@dataclass
class StepAttempt:
    attempt_number: int
    prompt_digest: str
    script_ids: list[str] = field(default_factory=list)
    shell_results: list[ShellResult] = field(default_factory=list)
    detection_events: list[DetectionEvent] = field(default_factory=list)
    verdict: Optional[Verdict] = None
    annotations: list[str] = field(default_factory=list)
    started_at: float = 0.0
    ended_at: Optional[float] = None


@dataclass
class StepOutcome:
    device: str
    step_id: str
    attempts: list[StepAttempt] = field(default_factory=list)
    final_verdict: Optional[Verdict] = None
    annotations: list[str] = field(default_factory=list)
    environment_note: Optional[str] = None

    def counts_as_attempt(self) -> bool:
        """Environment artifacts (unsupported gates or environment-noted
        failures) don't count toward metric denominators."""
        if self.final_verdict is None:
            return False
        if self.final_verdict.kind is VerdictKind.ENVIRONMENT_UNSUPPORTED:
            return False
        return self.environment_note is None

    def limitation_note(self) -> Optional[str]:
        if self.final_verdict is not None and \
                self.final_verdict.kind is VerdictKind.ENVIRONMENT_UNSUPPORTED:
            return self.final_verdict.display()
        return self.environment_note


@dataclass
class RunRecord:
    run_id: str
    campaign: dict = field(default_factory=dict)
    device_keys: list[str] = field(default_factory=list)
    device_labels: dict[str, str] = field(default_factory=dict)
    outcomes: dict[tuple[str, str], StepOutcome] = field(default_factory=dict)
    status: RunStatus = RunStatus.RUNNING
    started_at: Optional[float] = None
    ended_at: Optional[float] = None
    open_tickets: set[str] = field(default_factory=set)
    scripts: dict[str, dict] = field(default_factory=dict)

    def outcome(self, device_key: str, step_id: str) -> Optional[StepOutcome]:
        return self.outcomes.get((device_key, step_id))

    def verdict_matrix(self) -> dict[str, dict[str, str]]:
        """step_id -> device_key -> display cell."""
        matrix: dict[str, dict[str, str]] = {}
        for (device, step_id), outcome in self.outcomes.items():
            if outcome.final_verdict is not None:
                matrix.setdefault(step_id, {})[device] = outcome.final_verdict.display()
        return matrix

    def executed_script_ids(self) -> set[str]:
        executed = set()
        for outcome in self.outcomes.values():
            for attempt in outcome.attempts:
                executed.update(attempt.script_ids)
        return executed


class RunRecordBuilder:
    """Folds run events into a RunRecord; used identically by the live store
    and by log replay, which is what makes replay deterministic."""

    def __init__(self):
        self.records: dict[str, RunRecord] = {}

    def apply(self, event) -> None:
        run = self.records.get(event.run_id)
        if run is None:
            run = RunRecord(run_id=event.run_id)
            self.records[event.run_id] = run
        payload = event.payload
        kind = event.type

        if kind == "run_created":
            run.campaign = payload["campaign"]
            run.device_keys = [d["key"] for d in payload["devices"]]
            run.device_labels = {d["key"]: d["label"] for d in payload["devices"]}
            run.started_at = event.at
        elif kind == "step_gated":
            outcome = self._outcome(run, payload)
            outcome.final_verdict = Verdict.from_dict(payload["verdict"])
            outcome.annotations.append("environment gate")
        elif kind == "attempt_started":
            outcome = self._outcome(run, payload)
            outcome.attempts.append(
                StepAttempt(
                    attempt_number=payload["attempt"],
                    prompt_digest=payload["prompt_digest"],
                    started_at=event.at,
                )
            )
        elif kind == "scripts_extracted":
            for raw in payload["scripts"]:
                run.scripts[raw["script_id"]] = raw
        elif kind == "script_executed":
            attempt = self._attempt(run, payload)
            attempt.script_ids.append(payload["script_id"])
            raw = payload["result"]
            attempt.shell_results.append(
                ShellResult(
                    exit_code=raw["exit_code"], stdout=raw["stdout"],
                    stderr=raw["stderr"], duration_ms=raw["duration_ms"],
                )
            )
        elif kind == "detection":
            from .plan import SecurityMechanism

            attempt = self._attempt(run, payload)
            attempt.detection_events.append(
                DetectionEvent(
                    mechanism=SecurityMechanism(payload["mechanism"]),
                    step_id=payload["step_id"],
                    at=payload["at"],
                )
            )
        elif kind == "approval_requested":
            run.open_tickets.add(payload["ticket_id"])
            if run.status is RunStatus.RUNNING:
                run.status = RunStatus.AWAITING_APPROVAL
        elif kind == "approval_resolved":
            run.open_tickets.discard(payload["ticket_id"])
            if not run.open_tickets and run.status is RunStatus.AWAITING_APPROVAL:
                run.status = RunStatus.RUNNING
        elif kind == "attempt_ended":
            attempt = self._attempt(run, payload)
            attempt.verdict = Verdict.from_dict(payload["verdict"])
            attempt.annotations = list(payload.get("annotations") or [])
            attempt.ended_at = event.at
        elif kind == "step_final":
            outcome = self._outcome(run, payload)
            outcome.final_verdict = Verdict.from_dict(payload["verdict"])
            outcome.annotations.extend(payload.get("annotations") or [])
            outcome.environment_note = payload.get("environment_note")
        elif kind == "run_completed":
            run.status = RunStatus(payload["status"])
            run.ended_at = event.at

    @staticmethod
    def _outcome(run: RunRecord, payload: dict) -> StepOutcome:
        key = (payload["device"], payload["step_id"])
        if key not in run.outcomes:
            run.outcomes[key] = StepOutcome(device=key[0], step_id=key[1])
        return run.outcomes[key]

    def _attempt(self, run: RunRecord, payload: dict) -> StepAttempt:
        outcome = self._outcome(run, payload)
        number = payload["attempt"]
        for attempt in outcome.attempts:
            if attempt.attempt_number == number:
                return attempt
        attempt = StepAttempt(attempt_number=number, prompt_digest="")
        outcome.attempts.append(attempt)
        return attempt


def evaluate_verdict(
    step: PlanStep,
    shell_results: list[ShellResult],
    validation_result: Optional[ShellResult],
    detection_events: list[DetectionEvent],
) -> Verdict:
    """Blocked beats Worked beats NotWorked. Success requires the validation
    check to exit 0 with the expected marker in its stdout."""
    if detection_events:
        return Verdict.blocked(detection_events[0].mechanism)
    if (
        validation_result is not None
        and validation_result.exit_code == 0
        and step.validation.marker in validation_result.stdout
    ):
        return Verdict.worked()
    return Verdict.not_worked()


def _failure_excerpt(results: list[ShellResult], annotations: list[str]) -> str:
    lines = list(annotations)
    for result in results[-3:]:
        lines.append(f"exit={result.exit_code}")
        if result.stdout.strip():
            lines.extend(result.stdout.strip().splitlines()[-10:])
        if result.stderr.strip():
            lines.extend(result.stderr.strip().splitlines()[-10:])
    return bound_log_excerpt("\n".join(lines) or "attempt produced no output")


class CampaignRunner:
    """Shared context for one run_campaign invocation."""

    def __init__(
        self,
        campaign: Campaign,
        store,
        gate: Optional[ApprovalGate] = None,
        operator: Optional[Operator] = auto_operator,
        registry: Optional[SimulatorRegistry] = None,
        fixture_table: Optional[StubFixtureTable] = None,
        approval_timeout_s: Optional[float] = None,
        run_id: Optional[str] = None,
    ):
        self.campaign = campaign
        self.store = store
        self.gate = gate or ApprovalGate(campaign.policy)
        self.operator = operator
        self.registry = registry
        self.fixture_table = fixture_table
        self.approval_timeout_s = approval_timeout_s
        self.run_id = run_id or uuid.uuid4().hex[:16]
        self.provider = make_provider(campaign.provider, fixture_table=fixture_table)
        self.flowchart = (
            serialize_flowchart(campaign.plan)
            if campaign.prompt_style is PromptStyle.STRUCTURED
            else None
        )

    # -- event helpers ---------------------------------------------------------

    def _emit(self, type_: str, payload: dict):
        return self.store.emit(self.run_id, type_, payload)

    # -- top level -------------------------------------------------------------

    def run(self) -> RunRecord:
        campaign = self.campaign
        sessions = []
        try:
            for endpoint in campaign.devices:
                self.gate.check_endpoint_allowed(endpoint.key)
                sessions.append(open_session(endpoint, registry=self.registry, seed=0))

            self._emit(
                "run_created",
                {
                    "campaign": campaign.snapshot(),
                    "devices": [
                        {"key": s.endpoint_key, "label": s.profile.column_label()}
                        for s in sessions
                    ],
                },
            )

            aborted = False
            if len(sessions) == 1:
                self._run_device(sessions[0])
            else:
                with ThreadPoolExecutor(max_workers=len(sessions)) as pool:
                    futures = [pool.submit(self._run_device, s) for s in sessions]
                    for future in futures:
                        future.result()
        except Exception:
            self._emit("run_completed", {"status": RunStatus.ABORTED.value})
            raise
        finally:
            for session in sessions:
                session.close()
        self._emit("run_completed", {"status": RunStatus.COMPLETED.value})
        return self.store.run_record(self.run_id)

    # -- per device ------------------------------------------------------------

    def _run_device(self, session):
        campaign = self.campaign
        plan = campaign.plan
        scope = set(campaign.step_filter) if campaign.step_filter else set(plan.steps)
        resolved: set[str] = set()
        while len(resolved) < len(plan.steps):
            frontier = eligible_steps(plan, resolved)
            if not frontier:
                raise CampaignError("plan walk stalled (cycle should be impossible here)")
            for step in frontier:
                if step.id in scope:
                    self._run_step(session, step)
                resolved.add(step.id)

    def _run_step(self, session, step: PlanStep):
        device = session.endpoint_key
        gate_verdict = environment_gate(step, session.profile)
        if gate_verdict is not None:
            # No prompt, no scripts, no execution for unsupported environments.
            self._emit(
                "step_gated",
                {"device": device, "step_id": step.id, "verdict": gate_verdict.to_dict()},
            )
            self._emit(
                "step_final",
                {
                    "device": device,
                    "step_id": step.id,
                    "verdict": gate_verdict.to_dict(),
                    "annotations": ["environment gate"],
                },
            )
            return

        campaign = self.campaign
        budget = campaign.retry_budget
        failure: Optional[FailureContext] = None
        final_verdict = Verdict.not_worked()
        final_annotations: list[str] = []
        environment_note: Optional[str] = None

        for attempt_number in range(1, budget + 2):
            attempt_verdict, annotations, excerpt, digest, note = self._run_attempt(
                session, step, attempt_number, failure
            )
            final_verdict = attempt_verdict
            final_annotations = annotations
            if note and attempt_verdict.kind is VerdictKind.NOT_WORKED:
                environment_note = note
            if attempt_verdict.kind in (VerdictKind.WORKED, VerdictKind.BLOCKED):
                break
            if "operator rejected" in annotations:
                break
            if attempt_number <= budget:
                failure = FailureContext(
                    attempt_number=attempt_number + 1,
                    log_excerpt=excerpt,
                    prior_script_digest=digest,
                )

        payload = {
            "device": device,
            "step_id": step.id,
            "verdict": final_verdict.to_dict(),
            "annotations": final_annotations,
        }
        if environment_note:
            payload["environment_note"] = environment_note
        self._emit("step_final", payload)

    # -- per attempt -------------------------------------------------------------

    def _run_attempt(
        self,
        session,
        step: PlanStep,
        attempt_number: int,
        failure: Optional[FailureContext],
    ) -> tuple[Verdict, list[str], str, str, Optional[str]]:
        """Returns (verdict, annotations, failure_excerpt, script_digest,
        environment_note)."""
        device = session.endpoint_key
        campaign = self.campaign
        request = PromptRequest(
            step_id=step.id,
            step_title=step.title,
            profile_summary=session.profile.summary(),
            style=campaign.prompt_style,
            flowchart=self.flowchart,
            failure_context=failure,
        )
        prompt = build_prompt(request)
        digest = prompt_digest(prompt)
        self._emit(
            "attempt_started",
            {"device": device, "step_id": step.id, "attempt": attempt_number,
             "prompt_digest": digest},
        )

        annotations: list[str] = []
        try:
            response = self.provider.complete(prompt)
        except ProviderError as exc:
            annotations.append(f"provider failure: {exc}")
            verdict = Verdict.not_worked()
            self._end_attempt(device, step, attempt_number, verdict, annotations)
            return verdict, annotations, _failure_excerpt([], annotations), digest, None

        try:
            scripts = extract_scripts(response, step, attempt_number)
        except ExtractionError as exc:
            annotations.append(f"unusable completion: {exc}")
            verdict = Verdict.not_worked()
            self._end_attempt(device, step, attempt_number, verdict, annotations)
            return (
                verdict, annotations, _failure_excerpt([], annotations),
                script_digest(response.raw_text), None,
            )

        self._emit(
            "scripts_extracted",
            {
                "device": device,
                "step_id": step.id,
                "attempt": attempt_number,
                "scripts": [s.to_dict() for s in scripts],
            },
        )

        approved = self._screen_and_approve(device, step, scripts, annotations)
        last_digest = scripts[-1].script_id
        if "operator rejected" in annotations:
            verdict = Verdict.not_worked()
            self._end_attempt(device, step, attempt_number, verdict, annotations)
            return verdict, annotations, _failure_excerpt([], annotations), last_digest, None

        executable = [s for s in approved if s.interpreter is not Interpreter.GENERIC_TEXT]
        for script in approved:
            if script.interpreter is Interpreter.GENERIC_TEXT:
                self._emit(
                    "script_skipped",
                    {"device": device, "step_id": step.id, "attempt": attempt_number,
                     "script_id": script.script_id,
                     "why": "generic text is never executable"},
                )
        if not executable:
            annotations.append("no executable script cleared screening and approval")
            verdict = Verdict.not_worked()
            self._end_attempt(device, step, attempt_number, verdict, annotations)
            return verdict, annotations, _failure_excerpt([], annotations), last_digest, None

        results: list[ShellResult] = []
        validation_result: Optional[ShellResult] = None
        environment_note: Optional[str] = None
        for script in executable:
            try:
                result = session.run_script(
                    script, step.category, step.id, campaign.shell_timeout_s
                )
            except ShellTimeout as exc:
                annotations.append(f"timeout: {exc}")
                result = ShellResult(exit_code=-1, stdout="", stderr=str(exc), duration_ms=0.0)
            results.append(result)
            self._emit(
                "script_executed",
                {
                    "device": device,
                    "step_id": step.id,
                    "attempt": attempt_number,
                    "script_id": script.script_id,
                    "result": result.to_dict(),
                },
            )
            if script.kind is ScriptKind.VALIDATION:
                validation_result = result

        behavior_note = getattr(session, "spec", None)
        if behavior_note is not None:
            entry = behavior_note.behavior.get(step.category)
            if entry is not None and entry.environment_note:
                environment_note = entry.environment_note

        detections = session.drain_detections()
        for event in detections:
            self._emit(
                "detection",
                {
                    "device": device,
                    "step_id": step.id,
                    "attempt": attempt_number,
                    "mechanism": event.mechanism.value
                    if hasattr(event.mechanism, "value") else event.mechanism,
                    "at": event.at,
                },
            )

        if validation_result is None:
            annotations.append("no validation script in this attempt")
        verdict = evaluate_verdict(step, results, validation_result, detections)
        self._end_attempt(device, step, attempt_number, verdict, annotations)
        excerpt = _failure_excerpt(results, annotations)
        return verdict, annotations, excerpt, executable[-1].script_id, environment_note

    def _end_attempt(self, device, step, attempt_number, verdict, annotations):
        self._emit(
            "attempt_ended",
            {
                "device": device,
                "step_id": step.id,
                "attempt": attempt_number,
                "verdict": verdict.to_dict(),
                "annotations": annotations,
            },
        )

    # -- screening + approval -----------------------------------------------------

    def _screen_and_approve(
        self,
        device: str,
        step: PlanStep,
        scripts: list[GeneratedScript],
        annotations: list[str],
    ) -> list[GeneratedScript]:
        approved: list[GeneratedScript] = []
        for script in scripts:
            result = self.gate.screen(script)
            denied = isinstance(result, Denied)
            self._emit(
                "script_screened",
                {
                    "device": device,
                    "step_id": step.id,
                    "script_id": script.script_id,
                    "result": "denied" if denied else "cleared",
                    **({"rule_id": result.rule_id, "reason": result.reason} if denied else {}),
                },
            )
            if denied:
                annotations.append(f"script denied by rule {result.rule_id}")
                continue

            if self.gate.auto_decision(script) is not None:
                self._emit(
                    "approval_resolved",
                    {"ticket_id": f"auto:{script.script_id[:12]}",
                     "script_id": script.script_id, "approved": True,
                     "operator": "policy:auto_low_risk"},
                )
                approved.append(script)
                continue

            try:
                ticket = self.gate.request_approval(script)
            except ApprovalError as exc:
                annotations.append(str(exc))
                continue

            if ticket.open:
                self._emit(
                    "approval_requested",
                    {"ticket_id": ticket.ticket_id, "script_id": script.script_id,
                     "device": device, "step_id": step.id},
                )
                if self.operator is not None:
                    self.operator(self.gate, ticket, script)
                if not self.gate.wait_for_decision(ticket, self.approval_timeout_s):
                    annotations.append("approval timed out")
                    continue
                decision = ticket.decision
                self._emit(
                    "approval_resolved",
                    {"ticket_id": ticket.ticket_id, "script_id": script.script_id,
                     "approved": decision.approved, "operator": decision.by,
                     "reason": decision.reason,
                     **({"edited_body": True} if ticket.edited_body else {})},
                )
            decision = ticket.decision

            if not decision.approved:
                annotations.append("operator rejected")
                script.approval_state = ApprovalState.REJECTED
                continue

            if ticket.edited_body is not None and ticket.edited_body != script.body:
                edited = script.with_edited_body(ticket.edited_body)
                edited.approval_state = ApprovalState.APPROVED
                approved.append(edited)
            else:
                script.approval_state = ApprovalState.APPROVED
                approved.append(script)
        return approved


def run_campaign(campaign: Campaign, store, **kwargs) -> RunRecord:
    """Execute a campaign to completion and return its run record."""
    return CampaignRunner(campaign, store, **kwargs).run()
