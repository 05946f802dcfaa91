"""Simulated Android device: a verdict oracle, not an Android implementation.

Each profile ships a behavior table keyed by step category: canned exit
codes, output streams, an optional environment note (the outcome is an
artifact of the emulated environment, not of the technique), and an optional
security mechanism that fires a detection event. Dispatch is by category
tag — script bodies are never interpreted.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from ..errors import ShellTimeout, SimulatorError
from ..plan import (
    CapabilityFlag,
    DeviceProfile,
    RootState,
    SecurityMechanism,
    StepCategory,
    Verdict,
    VerdictKind,
)
from ..scripts import ApprovalState, GeneratedScript

CANONICAL_PROFILES = (
    "android-13-unrooted",
    "android-11-rooted",
    "android-12-rooted",
    "android-14-unrooted",
)


@dataclass(frozen=True)
class ShellResult:
    exit_code: int
    stdout: str
    stderr: str
    duration_ms: float

    def __post_init__(self):
        if self.duration_ms < 0:
            raise ValueError("duration must be >= 0")

    def to_dict(self) -> dict:
        return {
            "exit_code": self.exit_code,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "duration_ms": self.duration_ms,
        }


@dataclass(frozen=True)
class DetectionEvent:
    mechanism: SecurityMechanism
    step_id: str
    at: float

    def to_dict(self) -> dict:
        return {"mechanism": self.mechanism.value, "step_id": self.step_id, "at": self.at}


@dataclass(frozen=True)
class BehaviorEntry:
    outcome: VerdictKind  # worked | not_worked template
    exit_code: int
    stdout: str
    stderr: str
    environment_note: Optional[str] = None


@dataclass(frozen=True)
class LatencyModel:
    kind: str  # fixed | uniform
    low_ms: float
    high_ms: float

    def sample(self, rng: random.Random) -> float:
        if self.kind == "fixed":
            return self.low_ms
        return rng.uniform(self.low_ms, self.high_ms)


@dataclass
class SimulatorSpec:
    profile: DeviceProfile
    behavior: dict[StepCategory, BehaviorEntry]
    detection: dict[StepCategory, SecurityMechanism] = field(default_factory=dict)
    latency: LatencyModel = LatencyModel("fixed", 0.0, 0.0)

    def __post_init__(self):
        for category, mechanism in self.detection.items():
            if mechanism not in self.profile.security_mechanisms:
                raise SimulatorError(
                    f"{self.profile.name}: detection mechanism {mechanism.value} for "
                    f"{category.value} is not active on this profile"
                )

    def require_total(self, categories: set[StepCategory]):
        missing = categories - set(self.behavior)
        if missing:
            names = ", ".join(sorted(c.value for c in missing))
            raise SimulatorError(f"{self.profile.name}: behavior table missing categories: {names}")


def _parse_profile(raw: dict, source: str) -> DeviceProfile:
    try:
        return DeviceProfile(
            name=str(raw["name"]),
            android_version=int(raw["android_version"]),
            root_state=RootState(raw["root_state"]),
            capabilities=frozenset(CapabilityFlag(c) for c in raw.get("capabilities") or []),
            security_mechanisms=frozenset(
                SecurityMechanism(m) for m in raw.get("security_mechanisms") or []
            ),
        )
    except (KeyError, ValueError) as exc:
        raise SimulatorError(f"{source}: invalid profile block: {exc}") from exc


def load_simulator_spec(text: str, source: str = "<spec>") -> SimulatorSpec:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SimulatorError(f"{source}: spec does not parse: {exc}") from exc
    if not isinstance(data, dict) or "profile" not in data or "behavior" not in data:
        raise SimulatorError(f"{source}: spec needs 'profile' and 'behavior' blocks")

    profile = _parse_profile(data["profile"], source)

    behavior: dict[StepCategory, BehaviorEntry] = {}
    for key, raw in (data["behavior"] or {}).items():
        try:
            category = StepCategory(key)
        except ValueError:
            raise SimulatorError(f"{source}: unknown behavior category {key!r}") from None
        behavior[category] = BehaviorEntry(
            outcome=VerdictKind(raw.get("outcome", "not_worked")),
            exit_code=int(raw.get("exit_code", 0)),
            stdout=str(raw.get("stdout", "")),
            stderr=str(raw.get("stderr", "")),
            environment_note=raw.get("environment_note"),
        )

    detection: dict[StepCategory, SecurityMechanism] = {}
    for key, mech in (data.get("detection") or {}).items():
        detection[StepCategory(key)] = SecurityMechanism(mech)

    raw_latency = data.get("latency") or {}
    kind = str(raw_latency.get("kind", "fixed"))
    if kind == "fixed":
        millis = float(raw_latency.get("millis", 0.0))
        latency = LatencyModel("fixed", millis, millis)
    elif kind == "uniform":
        latency = LatencyModel(
            "uniform", float(raw_latency.get("low_millis", 0.0)),
            float(raw_latency.get("high_millis", 0.0)),
        )
    else:
        raise SimulatorError(f"{source}: unknown latency kind {kind!r}")

    return SimulatorSpec(profile=profile, behavior=behavior, detection=detection, latency=latency)


class SimulatorRegistry:
    """Named simulator specs. The bundled registry ships the four canonical
    profiles used by the end-to-end verdict-matrix run."""

    def __init__(self, specs: dict[str, SimulatorSpec]):
        self._specs = specs

    @classmethod
    def bundled(cls) -> "SimulatorRegistry":
        specs = {}
        sim_dir = resources.files("rootflow.data") / "sim"
        for entry in sorted(sim_dir.iterdir(), key=lambda e: e.name):
            if entry.name.endswith(".spec"):
                spec = load_simulator_spec(entry.read_text(), source=entry.name)
                specs[spec.profile.name] = spec
        return cls(specs)

    @classmethod
    def from_dir(cls, path: Path) -> "SimulatorRegistry":
        specs = {}
        for file in sorted(Path(path).glob("*.spec")):
            spec = load_simulator_spec(file.read_text(), source=file.name)
            specs[spec.profile.name] = spec
        return cls(specs)

    def get(self, name: str) -> SimulatorSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise SimulatorError(f"unknown simulated profile {name!r}") from None

    def names(self) -> list[str]:
        return sorted(self._specs)

    def profiles(self) -> list[DeviceProfile]:
        return [self._specs[name].profile for name in self.names()]


def simulate_step(
    spec: SimulatorSpec,
    category: StepCategory,
    script: GeneratedScript,
    step_id: str,
    rng: Optional[random.Random] = None,
    clock=time.time,
) -> tuple[ShellResult, Optional[DetectionEvent], Verdict]:
    """Produce the canned outcome for one script execution.

    Refuses unapproved scripts (defense in depth; the run engine enforces the
    same upstream). The returned verdict is the behavior template only —
    final verdicts are derived from validation output plus detections.
    """
    if script.approval_state is not ApprovalState.APPROVED:
        raise SimulatorError(
            f"refusing to execute script {script.script_id[:12]} in state "
            f"{script.approval_state.value}"
        )
    try:
        entry = spec.behavior[category]
    except KeyError:
        raise SimulatorError(
            f"{spec.profile.name}: no behavior for category {category.value}"
        ) from None
    duration = spec.latency.sample(rng or random)
    result = ShellResult(
        exit_code=entry.exit_code, stdout=entry.stdout, stderr=entry.stderr,
        duration_ms=duration,
    )
    detection = None
    if category in spec.detection:
        detection = DetectionEvent(
            mechanism=spec.detection[category], step_id=step_id, at=clock()
        )
    template = Verdict(entry.outcome)
    return result, detection, template


# Recognizers for ad-hoc shell commands sent without a category tag. Only a
# handful of probes matter; everything else succeeds silently.
def _adhoc_result(profile: DeviceProfile, command: str) -> tuple[int, str, str]:
    stripped = command.strip()
    if "su -c" in stripped or stripped.startswith("su ") or stripped == "su":
        if profile.root_state is RootState.ROOTED:
            return 0, "uid=0(root) gid=0(root) groups=0(root) context=u:r:magisk:s0", ""
        return 127, "", "/system/bin/sh: su: not found"
    if "getprop ro.build.version.release" in stripped:
        return 0, str(profile.android_version), ""
    if "getprop ro.product.model" in stripped:
        return 0, f"Simulated Device ({profile.name})", ""
    if stripped.startswith("echo "):
        return 0, stripped[5:], ""
    if stripped == "id":
        return 0, "uid=2000(shell) gid=2000(shell) groups=2000(shell)", ""
    return 0, "", ""


class SimulatedDeviceSession:
    """One device session over a simulator spec. Commands tagged with a step
    category go through the behavior table; untagged commands hit the ad-hoc
    recognizer. Detection events accumulate until drained."""

    def __init__(self, spec: SimulatorSpec, seed: Optional[int] = None, clock=time.time):
        self.spec = spec
        self.profile = spec.profile
        self._rng = random.Random(seed)
        self._clock = clock
        self._pending_detections: list[DetectionEvent] = []
        self.executions: list[str] = []  # script ids, for audit tests
        self.closed = False

    @property
    def endpoint_key(self) -> str:
        return f"sim:{self.profile.name}"

    def exec_shell(
        self,
        command: str,
        timeout_s: float,
        category: Optional[StepCategory] = None,
    ) -> ShellResult:
        if timeout_s <= 0:
            raise ShellTimeout(f"timeout of {timeout_s}s expired before execution")
        if self.closed:
            raise SimulatorError("session closed")
        duration = self.spec.latency.sample(self._rng)
        if duration / 1000.0 > timeout_s:
            raise ShellTimeout(f"simulated command exceeded timeout of {timeout_s}s")
        if category is not None:
            entry = self.spec.behavior.get(category)
            if entry is None:
                raise SimulatorError(
                    f"{self.profile.name}: no behavior for category {category.value}"
                )
            return ShellResult(entry.exit_code, entry.stdout, entry.stderr, duration)
        exit_code, stdout, stderr = _adhoc_result(self.profile, command)
        return ShellResult(exit_code, stdout, stderr, duration)

    def run_script(
        self, script: GeneratedScript, category: StepCategory, step_id: str, timeout_s: float
    ) -> ShellResult:
        if timeout_s <= 0:
            raise ShellTimeout(f"timeout of {timeout_s}s expired before execution")
        result, detection, _template = simulate_step(
            self.spec, category, script, step_id, rng=self._rng, clock=self._clock
        )
        self.executions.append(script.script_id)
        if detection is not None:
            self._pending_detections.append(detection)
        return result

    def drain_detections(self) -> list[DetectionEvent]:
        events, self._pending_detections = self._pending_detections, []
        return events

    def close(self):
        self.closed = True
