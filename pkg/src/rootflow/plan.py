"""Campaign plan graph: rooting workflow steps, device profiles, verdicts.

A plan is a DAG of steps (the rooting chain plus prerequisite-free attack
surface steps). Device profiles describe targets; verdicts are the closed
outcome vocabulary used in every report cell.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Iterable, Optional, Union

import yaml

from .errors import PlanError

BUNDLED_PLAN = "android-rooting.plan"


class StepCategory(str, Enum):
    BACKUP = "backup"
    BOOTLOADER_CHECK = "bootloader_check"
    BOOTLOADER_UNLOCK = "bootloader_unlock"
    RECOVERY_FLASH = "recovery_flash"
    RECOVERY_BOOT = "recovery_boot"
    MAGISK_SIDELOAD = "magisk_sideload"
    KERNEL_EXPLOIT = "kernel_exploit"
    BOOT_IMAGE_PATCH = "boot_image_patch"
    ROOT_VERIFY = "root_verify"
    ADB_WIFI = "adb_wifi"
    FRAMEWORK_EXPLOIT = "framework_exploit"
    RCE = "rce"
    ADB_DEBUG_EXPLOIT = "adb_debug_exploit"
    MITM_NETWORK = "mitm_network"
    COMPONENT_HIJACK = "component_hijack"


# Categories that belong to the rooting chain proper (backup through
# post-root housekeeping); everything else is attack-surface exploitation.
ROOTING_CATEGORIES = frozenset(
    {
        StepCategory.BACKUP,
        StepCategory.BOOTLOADER_CHECK,
        StepCategory.BOOTLOADER_UNLOCK,
        StepCategory.RECOVERY_FLASH,
        StepCategory.RECOVERY_BOOT,
        StepCategory.MAGISK_SIDELOAD,
        StepCategory.BOOT_IMAGE_PATCH,
        StepCategory.ROOT_VERIFY,
        StepCategory.ADB_WIFI,
    }
)


class CapabilityFlag(str, Enum):
    FASTBOOT = "fastboot"
    RECOVERY_PARTITION = "recovery_partition"
    AB_PARTITIONS = "ab_partitions"
    ADB_TCP = "adb_tcp"
    ROOT_SHELL = "root_shell"


class AutomationLevel(str, Enum):
    HUMAN_VERIFIED = "human_verified"
    PARTIALLY_AUTOMATED = "partially_automated"
    FULLY_AUTOMATED = "fully_automated"


class RootState(str, Enum):
    ROOTED = "rooted"
    UNROOTED = "unrooted"


class SecurityMechanism(str, Enum):
    SELINUX = "selinux"
    PLAY_PROTECT = "play_protect"
    VERIFIED_BOOT = "verified_boot"


class UnsupportedReason(str, Enum):
    FASTBOOT_NOT_AVAILABLE = "fastboot_not_available"
    NO_RECOVERY_AVAILABLE = "no_recovery_available"
    PARTITION_SCHEME_MISSING = "partition_scheme_missing"


class VerdictKind(str, Enum):
    WORKED = "worked"
    NOT_WORKED = "not_worked"
    ENVIRONMENT_UNSUPPORTED = "environment_unsupported"
    BLOCKED = "blocked"


@dataclass(frozen=True)
class Verdict:
    """One outcome per (device, step): exactly one variant.

    ``reason`` is set only for ENVIRONMENT_UNSUPPORTED, ``mechanism`` only
    for BLOCKED.
    """

    kind: VerdictKind
    reason: Optional[UnsupportedReason] = None
    mechanism: Optional[SecurityMechanism] = None

    def __post_init__(self):
        if self.kind is VerdictKind.ENVIRONMENT_UNSUPPORTED and self.reason is None:
            raise ValueError("environment_unsupported verdict requires a reason")
        if self.kind is VerdictKind.BLOCKED and self.mechanism is None:
            raise ValueError("blocked verdict requires a mechanism")
        if self.kind not in (VerdictKind.ENVIRONMENT_UNSUPPORTED,) and self.reason is not None:
            raise ValueError("reason only valid on environment_unsupported")
        if self.kind is not VerdictKind.BLOCKED and self.mechanism is not None:
            raise ValueError("mechanism only valid on blocked")

    def display(self) -> str:
        """Report-cell text. Blocked outcomes read "Not Worked": the cell
        vocabulary has no blocked label; detection is reported separately."""
        return VERDICT_DISPLAY[self._display_key()]

    def _display_key(self) -> str:
        if self.kind is VerdictKind.ENVIRONMENT_UNSUPPORTED:
            return self.reason.value
        if self.kind is VerdictKind.BLOCKED:
            return VerdictKind.NOT_WORKED.value
        return self.kind.value

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        if self.reason is not None:
            out["reason"] = self.reason.value
        if self.mechanism is not None:
            out["mechanism"] = self.mechanism.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Verdict":
        return cls(
            kind=VerdictKind(data["kind"]),
            reason=UnsupportedReason(data["reason"]) if data.get("reason") else None,
            mechanism=SecurityMechanism(data["mechanism"]) if data.get("mechanism") else None,
        )

    @classmethod
    def worked(cls) -> "Verdict":
        return cls(VerdictKind.WORKED)

    @classmethod
    def not_worked(cls) -> "Verdict":
        return cls(VerdictKind.NOT_WORKED)

    @classmethod
    def environment_unsupported(cls, reason: UnsupportedReason) -> "Verdict":
        return cls(VerdictKind.ENVIRONMENT_UNSUPPORTED, reason=reason)

    @classmethod
    def blocked(cls, mechanism: SecurityMechanism) -> "Verdict":
        return cls(VerdictKind.BLOCKED, mechanism=mechanism)


VERDICT_DISPLAY = {
    VerdictKind.WORKED.value: "Worked",
    VerdictKind.NOT_WORKED.value: "Not Worked",
    UnsupportedReason.FASTBOOT_NOT_AVAILABLE.value: "Fastboot Not Available",
    UnsupportedReason.NO_RECOVERY_AVAILABLE.value: "No Recovery Available",
    UnsupportedReason.PARTITION_SCHEME_MISSING.value: "Emulator Doesn't Have This Partition Scheme",
}


@dataclass(frozen=True)
class ValidationSpec:
    """How an attempt proves success: a checker command plus the marker its
    stdout must contain."""

    marker: str
    command: str


@dataclass(frozen=True)
class PlanStep:
    id: str
    title: str
    category: StepCategory
    requires: frozenset[CapabilityFlag]
    automation_level: AutomationLevel
    validation: ValidationSpec
    prerequisites: frozenset[str]


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    android_version: int
    root_state: RootState
    capabilities: frozenset[CapabilityFlag]
    security_mechanisms: frozenset[SecurityMechanism]

    def __post_init__(self):
        if self.android_version < 1:
            raise ValueError(f"android_version must be >= 1, got {self.android_version}")
        if self.root_state is RootState.ROOTED and CapabilityFlag.ROOT_SHELL not in self.capabilities:
            raise ValueError(f"rooted profile {self.name!r} must include the root_shell capability")

    def column_label(self) -> str:
        return f"Android {self.android_version} ({self.root_state.value.capitalize()})"

    def summary(self) -> str:
        caps = ", ".join(sorted(c.value for c in self.capabilities)) or "none"
        mechs = ", ".join(sorted(m.value for m in self.security_mechanisms)) or "none"
        return (
            f"{self.name}: Android {self.android_version}, {self.root_state.value} "
            f"test device (capabilities: {caps}; security: {mechs})"
        )


@dataclass
class PlanGraph:
    """Validated step DAG. Immutable after load; `steps` preserves document
    order, which the canonical plan keeps topological."""

    name: str
    steps: dict[str, PlanStep] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, PlanGraph):
            return NotImplemented
        return self.name == other.name and self.steps == other.steps

    def step(self, step_id: str) -> PlanStep:
        try:
            return self.steps[step_id]
        except KeyError:
            raise PlanError(f"unknown step id {step_id!r}") from None

    def topological_order(self) -> list[PlanStep]:
        """Kahn's algorithm; ties broken by document order."""
        remaining = dict(self.steps)
        done: set[str] = set()
        ordered: list[PlanStep] = []
        while remaining:
            ready = [s for s in remaining.values() if s.prerequisites <= done]
            if not ready:
                raise PlanError("cycle detected")  # load() already prevents this
            for step in ready:
                ordered.append(step)
                done.add(step.id)
                del remaining[step.id]
        return ordered

    def depths(self) -> dict[str, int]:
        """Longest prerequisite-path length per step (roots are depth 0)."""
        depth: dict[str, int] = {}
        for step in self.topological_order():
            depth[step.id] = max((depth[p] + 1 for p in step.prerequisites), default=0)
        return depth


def _require(mapping: dict, key: str, where: str):
    if key not in mapping or mapping[key] is None:
        raise PlanError(f"{where}: missing required field {key!r}")
    return mapping[key]


def _parse_enum(enum_cls, raw, where: str):
    try:
        return enum_cls(raw)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise PlanError(f"{where}: unknown {enum_cls.__name__} {raw!r} (allowed: {allowed})") from None


def _parse_step(raw: dict, index: int) -> PlanStep:
    where = f"step[{index}]"
    if not isinstance(raw, dict):
        raise PlanError(f"{where}: expected a mapping")
    step_id = str(_require(raw, "id", where))
    where = f"step {step_id!r}"
    validation_raw = _require(raw, "validation", where)
    if not isinstance(validation_raw, dict):
        raise PlanError(f"{where}: validation must be a mapping with marker and command")
    return PlanStep(
        id=step_id,
        title=str(_require(raw, "title", where)),
        category=_parse_enum(StepCategory, _require(raw, "category", where), where),
        requires=frozenset(
            _parse_enum(CapabilityFlag, flag, where) for flag in raw.get("requires") or []
        ),
        automation_level=_parse_enum(
            AutomationLevel, _require(raw, "automation_level", where), where
        ),
        validation=ValidationSpec(
            marker=str(_require(validation_raw, "marker", f"{where}.validation")),
            command=str(_require(validation_raw, "command", f"{where}.validation")),
        ),
        prerequisites=frozenset(str(p) for p in raw.get("prerequisites") or []),
    )


def load_plan(document: str) -> PlanGraph:
    """Parse and validate a plan document (YAML syntax, see bundled file)."""
    try:
        data = yaml.safe_load(io.StringIO(document))
    except yaml.YAMLError as exc:
        raise PlanError(f"plan document does not parse: {exc}") from exc
    if not isinstance(data, dict) or "plan" not in data:
        raise PlanError("plan document must contain a top-level 'plan' mapping")
    name = str(_require(data["plan"], "name", "plan"))
    raw_steps = data.get("steps") or []
    if not raw_steps:
        raise PlanError("empty plan: at least one step required")

    steps: dict[str, PlanStep] = {}
    for i, raw in enumerate(raw_steps):
        step = _parse_step(raw, i)
        if step.id in steps:
            raise PlanError(f"duplicate step id {step.id!r}")
        steps[step.id] = step

    for step in steps.values():
        for prereq in step.prerequisites:
            if prereq not in steps:
                raise PlanError(f"step {step.id!r}: unresolved prerequisite {prereq!r}")
        if step.id in step.prerequisites:
            raise PlanError(f"cycle detected: step {step.id!r} requires itself")

    graph = PlanGraph(name=name, steps=steps)
    _check_acyclic(graph)
    if not any(not s.prerequisites for s in steps.values()):
        raise PlanError("plan has no prerequisite-free entry step")
    return graph


def _check_acyclic(graph: PlanGraph):
    done: set[str] = set()
    remaining = set(graph.steps)
    while remaining:
        ready = {s for s in remaining if graph.steps[s].prerequisites <= done}
        if not ready:
            cycle = ", ".join(sorted(remaining))
            raise PlanError(f"cycle detected among steps: {cycle}")
        done |= ready
        remaining -= ready


def serialize_plan(graph: PlanGraph) -> str:
    """Dump a graph back to plan-document text; load_plan round-trips it."""
    doc = {
        "plan": {"name": graph.name},
        "steps": [
            {
                "id": s.id,
                "title": s.title,
                "category": s.category.value,
                "requires": sorted(f.value for f in s.requires),
                "prerequisites": sorted(s.prerequisites),
                "automation_level": s.automation_level.value,
                "validation": {"marker": s.validation.marker, "command": s.validation.command},
            }
            for s in graph.steps.values()
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False, width=100)


def load_bundled_plan() -> PlanGraph:
    return load_plan(read_bundled_plan_text())


def read_bundled_plan_text() -> str:
    return (resources.files("rootflow.data") / "plans" / BUNDLED_PLAN).read_text()


def eligible_steps(graph: PlanGraph, completed: Iterable[str]) -> list[PlanStep]:
    """Frontier of runnable steps, id-lexicographic for reproducible walks."""
    completed_set = set(completed)
    unknown = completed_set - set(graph.steps)
    if unknown:
        raise PlanError(f"unknown step ids in completed set: {sorted(unknown)}")
    frontier = [
        step
        for step in graph.steps.values()
        if step.id not in completed_set and step.prerequisites <= completed_set
    ]
    return sorted(frontier, key=lambda s: s.id)


# Capability gaps that map onto report vocabulary, checked in this order.
# Runtime capabilities (adb_tcp, root_shell) have no unsupported-reason label:
# their absence surfaces as execution failure, not an environment verdict.
_GATED_CAPABILITIES = (
    (CapabilityFlag.FASTBOOT, UnsupportedReason.FASTBOOT_NOT_AVAILABLE),
    (CapabilityFlag.RECOVERY_PARTITION, UnsupportedReason.NO_RECOVERY_AVAILABLE),
    (CapabilityFlag.AB_PARTITIONS, UnsupportedReason.PARTITION_SCHEME_MISSING),
)


def environment_gate(step: PlanStep, profile: DeviceProfile) -> Optional[Verdict]:
    """Return the environment verdict if the target cannot host this step.

    Pure in (step.requires, profile.capabilities). None means the step may
    proceed to script generation and execution.
    """
    for flag, reason in _GATED_CAPABILITIES:
        if flag in step.requires and flag not in profile.capabilities:
            return Verdict.environment_unsupported(reason)
    return None


def serialize_flowchart(graph: PlanGraph) -> str:
    """Human-readable outline of the plan: one step per line, topologically
    ordered, indented by prerequisite depth. Stable for identical graphs."""
    depths = graph.depths()
    lines = []
    for step in graph.topological_order():
        indent = "  " * depths[step.id]
        suffix = ""
        if step.requires:
            suffix = " [requires: " + ", ".join(sorted(f.value for f in step.requires)) + "]"
        lines.append(f"{indent}{step.id}: {step.title}{suffix}")
    return "\n".join(lines) + "\n"
