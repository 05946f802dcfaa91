"""Turns raw completions into structured script artifacts.

Pure transformation layer: no execution, no network. Fenced code blocks
become GeneratedScript records; the fence label picks the interpreter
(unknown labels degrade to generic text, which is never executable).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

from .errors import ExtractionError
from .llm import LlmResponse
from .plan import ROOTING_CATEGORIES, AutomationLevel, PlanStep


class ScriptKind(str, Enum):
    ROOTING = "rooting"
    EXPLOIT = "exploit"
    VALIDATION = "validation"


class Interpreter(str, Enum):
    SHELL = "shell"
    ADB_DIRECT = "adb_direct"
    GENERIC_TEXT = "generic_text"


class RiskLevel(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class ApprovalState(str, Enum):
    PENDING = "pending"
    APPROVED = "approved"
    REJECTED = "rejected"
    AUTO_DENIED = "auto_denied"


_FENCE_LABELS = {
    "sh": Interpreter.SHELL,
    "bash": Interpreter.SHELL,
    "shell": Interpreter.SHELL,
    "adb": Interpreter.ADB_DIRECT,
}


@dataclass(frozen=True)
class ScriptSource:
    session_id: str
    step_id: str
    attempt_number: int


@dataclass
class GeneratedScript:
    script_id: str
    kind: ScriptKind
    interpreter: Interpreter
    body: str
    source: ScriptSource
    risk: RiskLevel
    approval_state: ApprovalState = ApprovalState.PENDING
    version: int = 1

    def to_dict(self) -> dict:
        return {
            "script_id": self.script_id,
            "kind": self.kind.value,
            "interpreter": self.interpreter.value,
            "body": self.body,
            "source": {
                "session_id": self.source.session_id,
                "step_id": self.source.step_id,
                "attempt_number": self.source.attempt_number,
            },
            "risk": self.risk.value,
            "approval_state": self.approval_state.value,
            "version": self.version,
        }

    def with_edited_body(self, body: str) -> "GeneratedScript":
        """Next version of this script; the original stays untouched."""
        return replace(
            self,
            script_id=script_digest(body),
            body=body,
            approval_state=ApprovalState.PENDING,
            version=self.version + 1,
        )


def script_digest(body: str) -> str:
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


_FENCE_BLOCK_RE = re.compile(r"^```([^\n`]*)\n(.*?)^```[ \t]*$", re.DOTALL | re.MULTILINE)


def interpreter_for_label(label: str) -> Interpreter:
    return _FENCE_LABELS.get(label.strip().lower(), Interpreter.GENERIC_TEXT)


def classify_kind(body: str, step: PlanStep) -> ScriptKind:
    """Deterministic kind rule: validation if the body carries the step's
    checker command or its expected marker, otherwise by step category."""
    if step.validation.command in body or step.validation.marker in body:
        return ScriptKind.VALIDATION
    if step.category in ROOTING_CATEGORIES:
        return ScriptKind.ROOTING
    return ScriptKind.EXPLOIT


_RISK_BY_AUTOMATION = {
    AutomationLevel.HUMAN_VERIFIED: RiskLevel.LOW,
    AutomationLevel.PARTIALLY_AUTOMATED: RiskLevel.MEDIUM,
    AutomationLevel.FULLY_AUTOMATED: RiskLevel.HIGH,
}


def classify_risk(step: PlanStep) -> RiskLevel:
    """Misuse risk tracks how automatable the step is: fully automated
    flows are the easiest to abuse."""
    return _RISK_BY_AUTOMATION[step.automation_level]


def extract_scripts(
    response: LlmResponse, step: PlanStep, attempt_number: int = 1
) -> list[GeneratedScript]:
    """One script per fenced code block, in order of appearance.

    Raises ExtractionError when the completion has no usable block, which
    signals the re-prompt path upstream.
    """
    if not response.raw_text:
        raise ExtractionError("completion is empty")
    scripts: list[GeneratedScript] = []
    risk = classify_risk(step)
    for match in _FENCE_BLOCK_RE.finditer(response.raw_text):
        label, body = match.group(1), match.group(2)
        body = body.rstrip("\n")
        if not body.strip():
            continue
        scripts.append(
            GeneratedScript(
                script_id=script_digest(body),
                kind=classify_kind(body, step),
                interpreter=interpreter_for_label(label),
                body=body,
                source=ScriptSource(
                    session_id=response.session_id,
                    step_id=step.id,
                    attempt_number=attempt_number,
                ),
                risk=risk,
            )
        )
    if not scripts:
        raise ExtractionError("completion contained no fenced code blocks")
    return scripts


def last_validation_script(scripts: list[GeneratedScript]) -> Optional[GeneratedScript]:
    for script in reversed(scripts):
        if script.kind is ScriptKind.VALIDATION:
            return script
    return None
