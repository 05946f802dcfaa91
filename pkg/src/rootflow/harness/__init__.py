"""Uniform device control: real ADB endpoints and the behavior-matrix
simulator behind one session interface."""

from __future__ import annotations

from typing import Optional, Protocol

from ..errors import DeviceError
from ..plan import DeviceProfile, StepCategory
from .adb import (
    AdbCliEndpoint,
    AdbCliSession,
    AdbServerClient,
    AdbServerEndpoint,
    AdbServerSession,
    DeviceEndpoint,
    SimulatedEndpoint,
    parse_endpoint,
    real_connection_attempts,
)
from .protocol import Fail, Okay, frame_request, parse_reply
from .simulator import (
    CANONICAL_PROFILES,
    DetectionEvent,
    ShellResult,
    SimulatorRegistry,
    SimulatorSpec,
    SimulatedDeviceSession,
    load_simulator_spec,
    simulate_step,
)


class DeviceSession(Protocol):
    endpoint_key: str
    profile: DeviceProfile

    def exec_shell(self, command: str, timeout_s: float,
                   category: Optional[StepCategory] = None) -> ShellResult: ...

    def run_script(self, script, category: StepCategory, step_id: str,
                   timeout_s: float) -> ShellResult: ...

    def drain_detections(self) -> list[DetectionEvent]: ...

    def close(self) -> None: ...


def open_session(endpoint: DeviceEndpoint, registry: Optional[SimulatorRegistry] = None,
                 seed: Optional[int] = None):
    """Open a session for any endpoint kind. Simulated endpoints resolve
    against the registry (bundled by default)."""
    if isinstance(endpoint, SimulatedEndpoint):
        reg = registry or SimulatorRegistry.bundled()
        return SimulatedDeviceSession(reg.get(endpoint.profile_name), seed=seed)
    if isinstance(endpoint, AdbServerEndpoint):
        return AdbServerSession(endpoint)
    if isinstance(endpoint, AdbCliEndpoint):
        return AdbCliSession(endpoint)
    raise DeviceError(f"unsupported endpoint {endpoint!r}")


def list_devices(registry: Optional[SimulatorRegistry] = None,
                 adb_client: Optional[AdbServerClient] = None) -> list[tuple[str, str]]:
    """Device descriptors: every registered simulator profile (serial
    `sim:<name>`) plus, when a client is supplied, the live ADB server's
    device list."""
    registry = registry or SimulatorRegistry.bundled()
    descriptors = [(f"sim:{name}", "device") for name in registry.names()]
    if adb_client is not None:
        descriptors.extend(adb_client.list_devices())
    return descriptors
