from __future__ import annotations

import pytest

from rootflow.approval import ApprovalGate, ApprovalPolicy, PolicyMode
from rootflow.engine import Campaign, CampaignRunner, auto_operator
from rootflow.harness import parse_endpoint
from rootflow.llm import PromptStyle, ProviderConfig, ProviderKind
from rootflow.plan import load_bundled_plan
from rootflow.store import RunStore

# Device column order used throughout: matches the published verdict table.
CANONICAL_DEVICES = (
    "sim:android-13-unrooted",
    "sim:android-11-rooted",
    "sim:android-12-rooted",
    "sim:android-14-unrooted",
)

# Frozen 15x4 expected verdict matrix (step id -> cells in device order).
W, NW = "Worked", "Not Worked"
FNA = "Fastboot Not Available"
NRA = "No Recovery Available"
NOAB = "Emulator Doesn't Have This Partition Scheme"
EXPECTED_MATRIX = {
    "backup": [W, W, W, W],
    "bootloader_check": [FNA, FNA, FNA, FNA],
    "bootloader_unlock": [FNA, FNA, FNA, FNA],
    "recovery_flash": [FNA, FNA, FNA, FNA],
    "recovery_boot": [NRA, NRA, NRA, NRA],
    "magisk_sideload": [W, W, W, W],
    "kernel_exploit": [NW, NW, NW, NW],
    "boot_image_patch": [NOAB, NOAB, NOAB, NOAB],
    "root_verify": [W, W, W, W],
    "adb_wifi": [W, W, W, W],
    "metasploit": [W, W, W, W],
    "rce_malware": [NW, W, W, NW],
    "adb_debug_exploit": [W, W, W, W],
    "mitm_network": [W, W, W, W],
    "component_hijack": [W, W, W, W],
}

# Frozen feature-metrics table (step id -> success, detection display,
# adaptability, risk display), exactly the nine rows that are not
# environment-limited.
EXPECTED_FEATURES = {
    "backup": ("100%", "Not Detected", 3, "High Risk"),
    "magisk_sideload": ("100%", "Not Detected", 3, "Medium Risk"),
    "root_verify": ("100%", "Not Detected", 3, "High Risk"),
    "adb_wifi": ("100%", "Not Detected", 3, "High Risk"),
    "metasploit": ("100%", "Not Detected", 3, "Low Risk"),
    "rce_malware": ("50%", "50%", 2, "Medium Risk"),
    "adb_debug_exploit": ("100%", "Not Detected", 3, "High Risk"),
    "mitm_network": ("100%", "Not Detected", 3, "Low Risk"),
    "component_hijack": ("100%", "Not Detected", 3, "Low Risk"),
}

GATED_STEPS = {
    "bootloader_check", "bootloader_unlock", "recovery_flash",
    "recovery_boot", "boot_image_patch",
}


@pytest.fixture(scope="session")
def bundled_plan():
    return load_bundled_plan()


def make_campaign(plan, devices=CANONICAL_DEVICES, style=PromptStyle.STRUCTURED,
                  policy=None, retry_budget=2, step_filter=None) -> Campaign:
    return Campaign(
        plan=plan,
        devices=[parse_endpoint(d) for d in devices],
        prompt_style=style,
        provider=ProviderConfig(kind=ProviderKind.STUB),
        policy=policy or ApprovalPolicy.default(),
        retry_budget=retry_budget,
        step_filter=step_filter,
    )


@pytest.fixture(scope="session")
def acceptance_run(bundled_plan, tmp_path_factory):
    """One full canonical campaign, shared by every test that only reads it:
    4 simulated profiles, stub provider, ManualAll policy with the
    auto-approving operator, events persisted for replay checks."""
    data_dir = tmp_path_factory.mktemp("acceptance-store")
    campaign = make_campaign(bundled_plan)
    store = RunStore(data_dir=data_dir)
    gate = ApprovalGate(campaign.policy)
    runner = CampaignRunner(campaign, store, gate=gate, operator=auto_operator)
    record = runner.run()
    store.close()
    return {
        "record": record,
        "store": store,
        "gate": gate,
        "runner": runner,
        "data_dir": data_dir,
        "campaign": campaign,
    }
