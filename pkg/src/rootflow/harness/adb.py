"""Real-device adapters: native ADB server client and host-binary fallback.

Every connection attempt (socket or subprocess) increments a module-level
counter so test suites can prove that simulated runs never touch a real
transport. The native client speaks the host smart-socket protocol; the
legacy `shell:` service merges output streams and drops the exit status, so
the client appends an exit-code sentinel and parses it back out.
"""

from __future__ import annotations

import socket
import subprocess
import threading
import time
from dataclasses import dataclass
from typing import Optional, Union

from ..errors import DeviceError, ProtocolError, ShellTimeout
from ..plan import CapabilityFlag, DeviceProfile, RootState, StepCategory
from .protocol import Fail, Okay, frame_request, read_payload, read_reply
from .simulator import ShellResult

DEFAULT_ADB_HOST = "localhost"
DEFAULT_ADB_PORT = 5037

_EXIT_SENTINEL = "__RF_EXIT__:"


class ConnectionCounter:
    """Counts every attempt to reach a real device transport."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def record(self):
        with self._lock:
            self._count += 1

    @property
    def count(self) -> int:
        return self._count

    def reset(self):
        with self._lock:
            self._count = 0


real_connection_attempts = ConnectionCounter()


@dataclass(frozen=True)
class SimulatedEndpoint:
    profile_name: str

    @property
    def key(self) -> str:
        return f"sim:{self.profile_name}"


@dataclass(frozen=True)
class AdbServerEndpoint:
    serial: str
    host: str = DEFAULT_ADB_HOST
    port: int = DEFAULT_ADB_PORT

    def __post_init__(self):
        if not self.serial:
            raise DeviceError("adb server endpoint requires a non-empty serial")

    @property
    def key(self) -> str:
        return f"adb:{self.serial}@{self.host}:{self.port}"


@dataclass(frozen=True)
class AdbCliEndpoint:
    serial: str
    binary: str = "adb"

    def __post_init__(self):
        if not self.serial:
            raise DeviceError("adb cli endpoint requires a non-empty serial")

    @property
    def key(self) -> str:
        return f"adbcli:{self.serial}"


DeviceEndpoint = Union[SimulatedEndpoint, AdbServerEndpoint, AdbCliEndpoint]


def parse_endpoint(text: str) -> DeviceEndpoint:
    """Endpoint syntax: sim:<profile> | adb:<serial>[@host:port] | adbcli:<serial>."""
    if text.startswith("sim:"):
        return SimulatedEndpoint(text[4:])
    if text.startswith("adb:"):
        rest = text[4:]
        if "@" in rest:
            serial, hostport = rest.split("@", 1)
            host, _, port = hostport.rpartition(":")
            if not host:
                raise DeviceError(f"bad adb endpoint {text!r}: expected serial@host:port")
            return AdbServerEndpoint(serial=serial, host=host, port=int(port))
        return AdbServerEndpoint(serial=rest)
    if text.startswith("adbcli:"):
        return AdbCliEndpoint(text[7:])
    raise DeviceError(f"unrecognized device endpoint {text!r}")


class AdbServerClient:
    """Minimal host smart-socket client (host:version, host:devices,
    host:transport + shell). One connection per request, as the host
    protocol expects."""

    def __init__(self, host: str = DEFAULT_ADB_HOST, port: int = DEFAULT_ADB_PORT,
                 connect_timeout: float = 5.0):
        self.host = host
        self.port = port
        self.connect_timeout = connect_timeout

    def _connect(self) -> socket.socket:
        real_connection_attempts.record()
        try:
            return socket.create_connection((self.host, self.port), timeout=self.connect_timeout)
        except OSError as exc:
            raise DeviceError(f"adb server at {self.host}:{self.port} unreachable: {exc}") from exc

    @staticmethod
    def _recv_exact(sock: socket.socket, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining > 0:
            chunk = sock.recv(remaining)
            if not chunk:
                raise ProtocolError("connection closed mid-reply")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def _request(self, sock: socket.socket, service: str):
        sock.sendall(frame_request(service))
        reply = read_reply(lambda n: self._recv_exact(sock, n))
        if isinstance(reply, Fail):
            raise DeviceError(f"adb server refused {service!r}: {reply.message}")
        return reply

    def host_version(self) -> int:
        with self._connect() as sock:
            self._request(sock, "host:version")
            payload = read_payload(lambda n: self._recv_exact(sock, n))
        return int(payload, 16)

    def list_devices(self) -> list[tuple[str, str]]:
        with self._connect() as sock:
            self._request(sock, "host:devices")
            payload = read_payload(lambda n: self._recv_exact(sock, n))
        devices = []
        for line in payload.decode("utf-8", "replace").splitlines():
            parts = line.split("\t")
            if len(parts) >= 2:
                devices.append((parts[0], parts[1]))
        return devices

    def exec_shell(self, serial: str, command: str, timeout_s: float) -> ShellResult:
        if timeout_s <= 0:
            raise ShellTimeout(f"timeout of {timeout_s}s expired before execution")
        started = time.monotonic()
        wrapped = f"({command}); echo {_EXIT_SENTINEL}$?"
        with self._connect() as sock:
            sock.settimeout(timeout_s)
            try:
                self._request(sock, f"host:transport:{serial}")
                self._request(sock, f"shell:{wrapped}")
                output = bytearray()
                while True:
                    chunk = sock.recv(4096)
                    if not chunk:
                        break
                    output.extend(chunk)
            except socket.timeout as exc:
                raise ShellTimeout(f"shell command exceeded {timeout_s}s") from exc
        duration = (time.monotonic() - started) * 1000.0
        text = output.decode("utf-8", "replace")
        exit_code = 0
        if _EXIT_SENTINEL in text:
            text, _, tail = text.rpartition(_EXIT_SENTINEL)
            try:
                exit_code = int(tail.strip() or "0")
            except ValueError:
                exit_code = 0
        # Legacy shell service merges stdout and stderr.
        return ShellResult(exit_code=exit_code, stdout=text, stderr="", duration_ms=duration)


class AdbServerSession:
    """Device session over the native client. The profile is probed once via
    benign getprop/id queries; rooting state defaults to unrooted unless the
    device proves otherwise."""

    def __init__(self, endpoint: AdbServerEndpoint, client: Optional[AdbServerClient] = None):
        self.endpoint = endpoint
        self.client = client or AdbServerClient(endpoint.host, endpoint.port)
        self._profile: Optional[DeviceProfile] = None

    @property
    def endpoint_key(self) -> str:
        return self.endpoint.key

    @property
    def profile(self) -> DeviceProfile:
        if self._profile is None:
            self._profile = self._probe_profile()
        return self._profile

    def _probe_profile(self) -> DeviceProfile:
        release = self.client.exec_shell(
            self.endpoint.serial, "getprop ro.build.version.release", 10.0
        ).stdout.strip()
        try:
            version = int(release.split(".")[0])
        except (ValueError, IndexError):
            version = 1
        ident = self.client.exec_shell(self.endpoint.serial, "id", 10.0).stdout
        rooted = "uid=0(" in ident
        capabilities = {CapabilityFlag.ADB_TCP}
        if rooted:
            capabilities.add(CapabilityFlag.ROOT_SHELL)
        return DeviceProfile(
            name=self.endpoint.serial,
            android_version=max(version, 1),
            root_state=RootState.ROOTED if rooted else RootState.UNROOTED,
            capabilities=frozenset(capabilities),
            security_mechanisms=frozenset(),
        )

    def exec_shell(self, command: str, timeout_s: float,
                   category: Optional[StepCategory] = None) -> ShellResult:
        return self.client.exec_shell(self.endpoint.serial, command, timeout_s)

    def run_script(self, script, category: StepCategory, step_id: str,
                   timeout_s: float) -> ShellResult:
        from ..scripts import ApprovalState

        if script.approval_state is not ApprovalState.APPROVED:
            raise DeviceError(
                f"refusing to execute script {script.script_id[:12]} in state "
                f"{script.approval_state.value}"
            )
        return self.exec_shell(script.body, timeout_s, category)

    def drain_detections(self):
        return []

    def close(self):
        pass


class AdbCliSession:
    """Fallback adapter that shells out to a host `adb` binary."""

    def __init__(self, endpoint: AdbCliEndpoint):
        self.endpoint = endpoint
        self._profile: Optional[DeviceProfile] = None

    @property
    def endpoint_key(self) -> str:
        return self.endpoint.key

    @property
    def profile(self) -> DeviceProfile:
        if self._profile is None:
            release = self.exec_shell("getprop ro.build.version.release", 10.0).stdout.strip()
            try:
                version = max(int(release.split(".")[0]), 1)
            except (ValueError, IndexError):
                version = 1
            self._profile = DeviceProfile(
                name=self.endpoint.serial,
                android_version=version,
                root_state=RootState.UNROOTED,
                capabilities=frozenset({CapabilityFlag.ADB_TCP}),
                security_mechanisms=frozenset(),
            )
        return self._profile

    def exec_shell(self, command: str, timeout_s: float,
                   category: Optional[StepCategory] = None) -> ShellResult:
        if timeout_s <= 0:
            raise ShellTimeout(f"timeout of {timeout_s}s expired before execution")
        real_connection_attempts.record()
        started = time.monotonic()
        try:
            proc = subprocess.run(
                [self.endpoint.binary, "-s", self.endpoint.serial, "shell", command],
                capture_output=True, text=True, timeout=timeout_s,
            )
        except subprocess.TimeoutExpired as exc:
            raise ShellTimeout(f"shell command exceeded {timeout_s}s") from exc
        except FileNotFoundError as exc:
            raise DeviceError(f"adb binary {self.endpoint.binary!r} not found") from exc
        duration = (time.monotonic() - started) * 1000.0
        return ShellResult(proc.returncode, proc.stdout, proc.stderr, duration)

    def run_script(self, script, category: StepCategory, step_id: str,
                   timeout_s: float) -> ShellResult:
        from ..scripts import ApprovalState

        if script.approval_state is not ApprovalState.APPROVED:
            raise DeviceError(
                f"refusing to execute script {script.script_id[:12]} in state "
                f"{script.approval_state.value}"
            )
        return self.exec_shell(script.body, timeout_s, category)

    def drain_detections(self):
        return []

    def close(self):
        pass
