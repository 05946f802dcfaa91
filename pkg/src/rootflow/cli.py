"""Command-line interface.

Exit codes: 0 success, 1 campaign/validation error, 2 usage error (click's
default for bad invocations).
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import __version__
from .approval import ApprovalGate, ApprovalPolicy, PolicyMode, load_deny_rules
from .engine import Campaign, auto_operator, run_campaign
from .errors import RootflowError
from .harness import SimulatorRegistry, list_devices as harness_list_devices, parse_endpoint
from .llm import PromptStyle, ProviderConfig, ProviderKind
from .metrics import build_report
from .plan import load_bundled_plan, load_plan
from .store import RunStore


@click.group()
@click.version_option(version=__version__)
def main():
    """Orchestrate screened, human-approved Android assessment campaigns."""


@main.group()
def plan():
    """Plan document operations."""


@plan.command("validate")
@click.argument("file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def plan_validate(file: Path):
    """Validate a plan document and print a summary."""
    try:
        graph = load_plan(file.read_text())
    except RootflowError as exc:
        click.echo(f"invalid plan: {exc}", err=True)
        sys.exit(1)
    click.echo(f"plan {graph.name!r} valid: {len(graph.steps)} steps")


@main.group()
def campaign():
    """Campaign execution."""


@campaign.command("run")
@click.option("--plan", "plan_file", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Plan document (defaults to the bundled rooting plan).")
@click.option("--devices", required=True,
              help="Comma-separated endpoints, e.g. sim:android-13-unrooted,sim:android-11-rooted")
@click.option("--style", type=click.Choice(["general", "structured"]), default="structured",
              show_default=True)
@click.option("--provider", "provider_kind", type=click.Choice(["stub", "http"]), default="stub",
              show_default=True)
@click.option("--base-url", default=None, help="Chat-completion endpoint (http provider).")
@click.option("--model", default="stub-pentest", show_default=True)
@click.option("--credential-env", default="ROOTFLOW_API_KEY", show_default=True,
              help="Environment variable holding the provider credential.")
@click.option("--policy", "policy_file", type=click.Path(exists=True, dir_okay=False,
              path_type=Path), help="Deny-rules file (defaults to bundled rules).")
@click.option("--policy-mode", type=click.Choice([m.value for m in PolicyMode]),
              default=PolicyMode.MANUAL_ALL.value, show_default=True)
@click.option("--retries", type=click.IntRange(0, 5), default=2, show_default=True,
              help="Re-prompts allowed per step after a failed attempt.")
@click.option("--steps", "step_filter", default=None,
              help="Comma-separated step ids to run (default: whole plan).")
@click.option("--sim-dir", type=click.Path(exists=True, file_okay=False, path_type=Path),
              default=None, help="Directory of simulator .spec files (defaults to bundled).")
@click.option("--allow", "allowlist", multiple=True,
              help="Allowlist a real device endpoint (repeatable).")
@click.option("--report", "report_dir", type=click.Path(file_okay=False, path_type=Path),
              default=None, help="Write report.json and report.md here.")
@click.option("--store", "store_dir", type=click.Path(file_okay=False, path_type=Path),
              default=None, help="Persist the event log here (enables replay).")
def campaign_run(plan_file, devices, style, provider_kind, base_url, model, credential_env,
                 policy_file, policy_mode, retries, step_filter, sim_dir, allowlist,
                 report_dir, store_dir):
    """Run a campaign to completion with the unattended approving operator."""
    try:
        graph = load_plan(plan_file.read_text()) if plan_file else load_bundled_plan()
        endpoints = [parse_endpoint(text.strip()) for text in devices.split(",") if text.strip()]
        registry = SimulatorRegistry.from_dir(sim_dir) if sim_dir else SimulatorRegistry.bundled()

        deny_rules = tuple(
            load_deny_rules(policy_file.read_text(), source=str(policy_file))
        ) if policy_file else ApprovalPolicy.default().deny_rules
        policy = ApprovalPolicy(
            mode=PolicyMode(policy_mode),
            deny_rules=deny_rules,
            target_allowlist=frozenset(allowlist),
        )

        if provider_kind == "http":
            provider = ProviderConfig(
                kind=ProviderKind.HTTP_CHAT_COMPLETION,
                base_url=base_url,
                model_name=model,
                credential_source=credential_env,
            )
        else:
            provider = ProviderConfig(kind=ProviderKind.STUB, model_name=model)

        run_spec = Campaign(
            plan=graph,
            devices=endpoints,
            prompt_style=PromptStyle(style),
            provider=provider,
            policy=policy,
            retry_budget=retries,
            step_filter=frozenset(
                s.strip() for s in step_filter.split(",") if s.strip()
            ) if step_filter else None,
        )

        store = RunStore(data_dir=store_dir)
        gate = ApprovalGate(policy)
        record = run_campaign(
            run_spec, store, gate=gate, operator=auto_operator, registry=registry
        )
        report = build_report(record, graph)
    except RootflowError as exc:
        click.echo(f"campaign failed: {exc}", err=True)
        sys.exit(1)

    click.echo(f"run {record.run_id} completed: {len(record.outcomes)} verdicts")
    for row in report.matrix:
        click.echo(f"  {row['title']}: " + " | ".join(row["cells"]))
    if report_dir is not None:
        report_dir.mkdir(parents=True, exist_ok=True)
        (report_dir / "report.json").write_text(report.to_json())
        (report_dir / "report.md").write_text(report.to_markdown())
        click.echo(f"report written to {report_dir}")
    if store_dir is not None:
        click.echo(f"event log persisted under {store_dir}")


@main.group()
def devices():
    """Device discovery."""


@devices.command("list")
@click.option("--sim-dir", type=click.Path(exists=True, file_okay=False, path_type=Path),
              default=None)
def devices_list(sim_dir):
    """List simulated device profiles (and nothing else without a live server)."""
    registry = SimulatorRegistry.from_dir(sim_dir) if sim_dir else SimulatorRegistry.bundled()
    for serial, state in harness_list_devices(registry=registry):
        click.echo(f"{serial}\t{state}")


@main.group()
def report():
    """Report rendering from a persisted event log."""


@report.command("render")
@click.argument("run_id")
@click.option("--store", "store_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--format", "fmt", type=click.Choice(["json", "md"]), default="json",
              show_default=True)
@click.option("--plan", "plan_file", type=click.Path(exists=True, dir_okay=False,
              path_type=Path), default=None)
def report_render(run_id, store_dir, fmt, plan_file):
    """Rebuild a run from its event log and print the report."""
    try:
        store, corruption = RunStore.replay(store_dir)
        if corruption is not None:
            click.echo(
                f"warning: log corrupt at line {corruption.line_number} "
                f"(offset {corruption.offset}): {corruption.detail}",
                err=True,
            )
        record = store.run_record(run_id)
        graph = load_plan(plan_file.read_text()) if plan_file else load_bundled_plan()
        doc = build_report(record, graph)
    except RootflowError as exc:
        click.echo(f"report failed: {exc}", err=True)
        sys.exit(1)
    click.echo(doc.to_json() if fmt == "json" else doc.to_markdown(), nl=False)


@main.command()
@click.option("--config", "config_file", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
def serve(config_file):
    """Start the HTTP service for the operator console."""
    from .service import ServiceConfig, serve as run_service

    run_service(ServiceConfig.from_file(config_file))


if __name__ == "__main__":
    main()
