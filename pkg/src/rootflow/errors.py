"""Exception hierarchy shared across the package."""


class RootflowError(Exception):
    """Base class for all package errors."""


class PlanError(RootflowError):
    """Plan document failed validation (duplicate id, cycle, bad category...)."""


class PromptError(RootflowError):
    """Prompt request violated its construction contract."""


class ProviderError(RootflowError):
    """LLM provider call failed."""


class TransportError(ProviderError):
    """Transient transport failure (retryable)."""


class AuthenticationError(ProviderError):
    """Credential missing or rejected (never retried)."""


class EmptyCompletionError(ProviderError):
    """Provider returned an empty completion."""


class FixtureError(RootflowError):
    """Stub fixture file missing or unparsable."""


class ExtractionError(RootflowError):
    """Completion contained no usable fenced code blocks."""


class ApprovalError(RootflowError):
    """Approval gate contract violation (double resolve, denied script...)."""


class ScreeningRejectedError(ApprovalError):
    """An edited script body matched a deny rule during re-screen."""

    def __init__(self, rule_id: str, reason: str):
        super().__init__(f"edited body denied by rule {rule_id!r}: {reason}")
        self.rule_id = rule_id
        self.reason = reason


class PolicyError(RootflowError):
    """Policy file invalid or an endpoint is outside the target allowlist."""


class ProtocolError(RootflowError):
    """Malformed ADB smart-socket frame or reply."""


class DeviceError(RootflowError):
    """Device endpoint unreachable or misconfigured."""


class ShellTimeout(DeviceError):
    """Command did not finish within its timeout."""


class SimulatorError(DeviceError):
    """Simulator spec missing, incomplete, or profile unknown."""


class CampaignError(RootflowError):
    """Campaign configuration or execution failure."""


class StoreError(RootflowError):
    """Run store I/O or replay failure."""
