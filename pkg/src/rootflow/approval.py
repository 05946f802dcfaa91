"""Ethical-control surface: static denylist screening and mandatory review.

Nothing executes without an approval record: screening runs first and is
total over script bodies; cleared scripts either get a human ticket
(ManualAll) or, in AutoApproveLowRisk mode, an automatic approval for
low-risk scripts only. Edits made during review create a new immutable
script version that is re-screened before the approval lands.
"""

from __future__ import annotations

import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Callable, Optional, Union

import yaml

from .errors import ApprovalError, PolicyError, ScreeningRejectedError
from .scripts import ApprovalState, GeneratedScript, RiskLevel

BUNDLED_DENY_RULES = "deny.rules"


class PatternKind(str, Enum):
    LITERAL = "literal"
    REGEX = "regex"


@dataclass(frozen=True)
class DenyRule:
    rule_id: str
    kind: PatternKind
    pattern: str
    reason: str
    _compiled: Optional[re.Pattern] = field(default=None, compare=False, repr=False)

    def matches(self, body: str) -> bool:
        if self.kind is PatternKind.LITERAL:
            return self.pattern in body
        return self._compiled.search(body) is not None


def _compile_rule(raw: dict, where: str) -> DenyRule:
    for key in ("id", "kind", "pattern", "reason"):
        if key not in raw or raw[key] is None:
            raise PolicyError(f"{where}: missing field {key!r}")
    kind = PatternKind(str(raw["kind"]))
    pattern = str(raw["pattern"])
    compiled = None
    if kind is PatternKind.REGEX:
        try:
            compiled = re.compile(pattern)
        except re.error as exc:
            raise PolicyError(f"{where}: pattern does not compile: {exc}") from exc
    return DenyRule(
        rule_id=str(raw["id"]), kind=kind, pattern=pattern, reason=str(raw["reason"]),
        _compiled=compiled,
    )


def load_deny_rules(text: str, source: str = "<rules>") -> list[DenyRule]:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise PolicyError(f"{source}: rules file does not parse: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("rules"), list):
        raise PolicyError(f"{source}: expected a top-level 'rules' list")
    rules = [_compile_rule(raw, f"{source} rules[{i}]") for i, raw in enumerate(data["rules"])]
    seen = set()
    for rule in rules:
        if rule.rule_id in seen:
            raise PolicyError(f"{source}: duplicate rule id {rule.rule_id!r}")
        seen.add(rule.rule_id)
    return rules


def bundled_deny_rules() -> list[DenyRule]:
    text = (resources.files("rootflow.data") / "policy" / BUNDLED_DENY_RULES).read_text()
    return load_deny_rules(text, source=BUNDLED_DENY_RULES)


class PolicyMode(str, Enum):
    MANUAL_ALL = "manual_all"
    AUTO_APPROVE_LOW_RISK = "auto_approve_low_risk"


@dataclass(frozen=True)
class ApprovalPolicy:
    mode: PolicyMode = PolicyMode.MANUAL_ALL
    deny_rules: tuple[DenyRule, ...] = ()
    target_allowlist: frozenset[str] = frozenset()

    @classmethod
    def default(cls, mode: PolicyMode = PolicyMode.MANUAL_ALL,
                target_allowlist: frozenset[str] = frozenset()) -> "ApprovalPolicy":
        return cls(mode=mode, deny_rules=tuple(bundled_deny_rules()),
                   target_allowlist=target_allowlist)


@dataclass(frozen=True)
class Cleared:
    pass


@dataclass(frozen=True)
class Denied:
    rule_id: str
    reason: str


ScreenResult = Union[Cleared, Denied]


def screen(script: GeneratedScript, policy: ApprovalPolicy) -> ScreenResult:
    """First matching deny rule wins; a denial is permanent (AutoDenied)."""
    for rule in policy.deny_rules:
        if rule.matches(script.body):
            script.approval_state = ApprovalState.AUTO_DENIED
            return Denied(rule_id=rule.rule_id, reason=rule.reason)
    return Cleared()


@dataclass(frozen=True)
class Decision:
    approved: bool
    by: str
    at: float
    reason: Optional[str] = None


@dataclass
class ApprovalTicket:
    ticket_id: str
    script_id: str
    created_at: float
    decision: Optional[Decision] = None
    edited_body: Optional[str] = None

    @property
    def open(self) -> bool:
        return self.decision is None


@dataclass(frozen=True)
class AuditRecord:
    script_id: str
    event: str  # screened_cleared | screened_denied | approved | rejected
    detail: str
    at: float
    operator: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "script_id": self.script_id,
            "event": self.event,
            "detail": self.detail,
            "at": self.at,
            "operator": self.operator,
        }


class ApprovalGate:
    """Shared mutable review state: ticket registry plus an append-only audit
    trail. Resolution is atomic — the first resolver wins."""

    def __init__(self, policy: ApprovalPolicy, clock: Callable[[], float] = time.time):
        self.policy = policy
        self._clock = clock
        self._lock = threading.Lock()
        self._tickets_by_script: dict[str, ApprovalTicket] = {}
        self._tickets_by_id: dict[str, ApprovalTicket] = {}
        self._scripts_by_ticket: dict[str, GeneratedScript] = {}
        self._events: dict[str, threading.Event] = {}
        self.audit_log: list[AuditRecord] = []

    # -- screening ------------------------------------------------------------

    def screen(self, script: GeneratedScript) -> ScreenResult:
        result = screen(script, self.policy)
        if isinstance(result, Denied):
            self._audit(script.script_id, "screened_denied",
                        f"rule {result.rule_id}: {result.reason}")
        else:
            self._audit(script.script_id, "screened_cleared", "no deny rule matched")
        return result

    # -- tickets ----------------------------------------------------------------

    def request_approval(self, script: GeneratedScript) -> ApprovalTicket:
        if script.approval_state is ApprovalState.AUTO_DENIED:
            raise ApprovalError(f"script {script.script_id[:12]} was denied by screening")
        with self._lock:
            existing = self._tickets_by_script.get(script.script_id)
            if existing is not None:
                return existing
            if script.approval_state is not ApprovalState.PENDING:
                raise ApprovalError(
                    f"script {script.script_id[:12]} already decided "
                    f"({script.approval_state.value})"
                )
            ticket = ApprovalTicket(
                ticket_id=uuid.uuid4().hex[:12],
                script_id=script.script_id,
                created_at=self._clock(),
            )
            self._tickets_by_script[script.script_id] = ticket
            self._tickets_by_id[ticket.ticket_id] = ticket
            self._scripts_by_ticket[ticket.ticket_id] = script
            self._events[ticket.ticket_id] = threading.Event()
            return ticket

    def ticket(self, ticket_id: str) -> ApprovalTicket:
        try:
            return self._tickets_by_id[ticket_id]
        except KeyError:
            raise ApprovalError(f"unknown ticket {ticket_id!r}") from None

    def pending_tickets(self) -> list[ApprovalTicket]:
        with self._lock:
            return [t for t in self._tickets_by_id.values() if t.open]

    def decision_for(self, script_id: str) -> Optional[Decision]:
        ticket = self._tickets_by_script.get(script_id)
        return ticket.decision if ticket else None

    def script_for(self, ticket: ApprovalTicket) -> Optional[GeneratedScript]:
        return self._scripts_by_ticket.get(ticket.ticket_id)

    def resolve(
        self,
        ticket: ApprovalTicket,
        approved: bool,
        operator: str,
        reason: Optional[str] = None,
        edited_body: Optional[str] = None,
    ) -> Optional[GeneratedScript]:
        """Decide a ticket. Approving with an edit spawns and re-screens a new
        script version; a denylisted edit fails and leaves the ticket open.
        Returns the new version when an edit was applied, else None.
        """
        with self._lock:
            if not ticket.open:
                raise ApprovalError(f"ticket {ticket.ticket_id} already resolved")

            script = self._scripts_by_ticket.get(ticket.ticket_id)
            new_version: Optional[GeneratedScript] = None
            if approved and edited_body is not None and script is not None \
                    and edited_body != script.body:
                candidate = script.with_edited_body(edited_body)
                result = screen(candidate, self.policy)
                if isinstance(result, Denied):
                    self._audit(candidate.script_id, "screened_denied",
                                f"rule {result.rule_id}: {result.reason} (edit rejected)",
                                operator=operator)
                    raise ScreeningRejectedError(result.rule_id, result.reason)
                new_version = candidate
                ticket.edited_body = edited_body

            ticket.decision = Decision(
                approved=approved, by=operator, at=self._clock(), reason=reason
            )
            if approved:
                target = new_version if new_version is not None else script
                if target is not None:
                    target.approval_state = ApprovalState.APPROVED
                if new_version is not None:
                    # The decision covers the edited version, not the original.
                    self._tickets_by_script[new_version.script_id] = ticket
                subject = new_version.script_id if new_version else ticket.script_id
                detail = "approved with edit" if new_version else "approved unedited"
                self._audit(subject, "approved", detail, operator=operator)
            else:
                if script is not None:
                    script.approval_state = ApprovalState.REJECTED
                self._audit(ticket.script_id, "rejected", reason or "", operator=operator)
            self._events[ticket.ticket_id].set()
            return new_version

    def wait_for_decision(self, ticket: ApprovalTicket, timeout: Optional[float] = None) -> bool:
        event = self._events[ticket.ticket_id]
        return event.wait(timeout)

    def auto_decision(self, script: GeneratedScript) -> Optional[Decision]:
        """AutoApproveLowRisk grants low-risk scripts without a ticket; every
        other combination requires the manual path."""
        if self.policy.mode is PolicyMode.AUTO_APPROVE_LOW_RISK and script.risk is RiskLevel.LOW:
            script.approval_state = ApprovalState.APPROVED
            decision = Decision(approved=True, by="policy:auto_low_risk", at=self._clock())
            self._audit(script.script_id, "approved", "auto-approved (low risk)",
                        operator=decision.by)
            return decision
        return None

    def approved_script_ids(self) -> set[str]:
        return {r.script_id for r in self.audit_log if r.event == "approved"}

    def check_endpoint_allowed(self, endpoint_key: str):
        """Real-device endpoints must be explicitly allowlisted; simulator
        endpoints are always in scope."""
        if endpoint_key.startswith("sim:"):
            return
        if endpoint_key not in self.policy.target_allowlist:
            raise PolicyError(f"endpoint {endpoint_key!r} is not on the target allowlist")

    def _audit(self, script_id: str, event: str, detail: str, operator: Optional[str] = None):
        self.audit_log.append(
            AuditRecord(script_id=script_id, event=event, detail=detail,
                        at=self._clock(), operator=operator)
        )
