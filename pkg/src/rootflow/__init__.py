"""rootflow: orchestrates LLM-assisted Android rooting assessments with
mandatory screening and human approval, against simulated or operator-owned
devices, and scores the outcomes."""

from .approval import ApprovalGate, ApprovalPolicy, PolicyMode
from .engine import Campaign, RunRecord, RunStatus, run_campaign
from .harness import SimulatorRegistry, list_devices, parse_endpoint
from .llm import PromptStyle, ProviderConfig, ProviderKind
from .metrics import build_report
from .plan import (
    DeviceProfile,
    PlanGraph,
    PlanStep,
    Verdict,
    load_bundled_plan,
    load_plan,
)
from .store import RunStore

__version__ = "0.1.0"

__all__ = [
    "ApprovalGate",
    "ApprovalPolicy",
    "Campaign",
    "DeviceProfile",
    "PlanGraph",
    "PlanStep",
    "PolicyMode",
    "PromptStyle",
    "ProviderConfig",
    "ProviderKind",
    "RunRecord",
    "RunStatus",
    "RunStore",
    "SimulatorRegistry",
    "Verdict",
    "build_report",
    "list_devices",
    "load_bundled_plan",
    "load_plan",
    "parse_endpoint",
    "run_campaign",
    "__version__",
]
