"""HTTP/event API consumed by the operator console and the CLI `serve`
command.

Single-node service: campaigns run on background threads that write through
one shared RunStore; approval tickets resolve asynchronously via the API
while the owning run worker blocks. Mutating endpoints are idempotent via
client-supplied request keys. All run state is reconstructable from the
event log.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml
from fastapi import Depends, FastAPI, Header, HTTPException, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, PlainTextResponse, Response, StreamingResponse
from pydantic import BaseModel, Field

from . import __version__
from .approval import ApprovalGate, ApprovalPolicy, PolicyMode, load_deny_rules
from .engine import Campaign, CampaignRunner, RunStatus, auto_operator
from .errors import (
    ApprovalError,
    CampaignError,
    DeviceError,
    RootflowError,
    ScreeningRejectedError,
    SimulatorError,
    StoreError,
)
from .harness import SimulatorRegistry, list_devices, parse_endpoint
from .harness.adb import SimulatedEndpoint
from .llm import PromptStyle, ProviderConfig, ProviderKind
from .metrics import build_report
from .plan import PlanGraph, load_bundled_plan, load_plan
from .store import RunStore


@dataclass
class ServiceConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 8400
    data_dir: Optional[Path] = None
    plan_path: Optional[Path] = None
    policy_path: Optional[Path] = None
    sim_dir: Optional[Path] = None
    provider: ProviderConfig = field(
        default_factory=lambda: ProviderConfig(kind=ProviderKind.STUB)
    )
    cors_origins: list[str] = field(default_factory=list)
    api_token: Optional[str] = None

    @classmethod
    def from_file(cls, path: Path) -> "ServiceConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        listen = str(raw.get("listen", "127.0.0.1:8400"))
        host, _, port = listen.rpartition(":")
        provider_raw = raw.get("provider") or {}
        provider = ProviderConfig(
            kind=ProviderKind(provider_raw.get("kind", "stub")),
            model_name=provider_raw.get("model_name", "stub-pentest"),
            base_url=provider_raw.get("base_url"),
            timeout=float(provider_raw.get("timeout", 30.0)),
            credential_source=provider_raw.get("credential_source"),
        )
        def _path(key):
            value = raw.get(key)
            return Path(value) if value else None

        return cls(
            listen_host=host or "127.0.0.1",
            listen_port=int(port or 8400),
            data_dir=_path("data_dir"),
            plan_path=_path("plan"),
            policy_path=_path("policy"),
            sim_dir=_path("sim_dir"),
            provider=provider,
            cors_origins=list(raw.get("cors_origins") or []),
            api_token=raw.get("api_token"),
        )


class CampaignRequest(BaseModel):
    devices: list[str] = Field(min_length=1)
    style: str = "structured"
    retries: int = 2
    step_filter: Optional[list[str]] = None
    policy_mode: str = PolicyMode.MANUAL_ALL.value
    operator_mode: str = "manual"  # manual | auto
    request_key: str = Field(min_length=1)


class ResolutionRequest(BaseModel):
    decision: str  # approve | reject
    operator: str = Field(min_length=1)
    reason: Optional[str] = None
    edited_body: Optional[str] = None
    request_key: str = Field(min_length=1)


class AppState:
    def __init__(self, config: ServiceConfig):
        self.config = config
        self.store = RunStore(data_dir=config.data_dir)
        self.plan: PlanGraph = (
            load_plan(Path(config.plan_path).read_text())
            if config.plan_path
            else load_bundled_plan()
        )
        self.registry = (
            SimulatorRegistry.from_dir(config.sim_dir)
            if config.sim_dir
            else SimulatorRegistry.bundled()
        )
        if config.policy_path:
            self.deny_rules = tuple(
                load_deny_rules(Path(config.policy_path).read_text(),
                                source=str(config.policy_path))
            )
        else:
            from .approval import bundled_deny_rules

            self.deny_rules = tuple(bundled_deny_rules())
        self.gates: dict[str, ApprovalGate] = {}
        self.threads: dict[str, threading.Thread] = {}
        self.request_cache: dict[str, dict] = {}
        self.lock = threading.Lock()

    def find_ticket(self, ticket_id: str):
        for run_id, gate in self.gates.items():
            try:
                return run_id, gate, gate.ticket(ticket_id)
            except ApprovalError:
                continue
        return None, None, None


def create_app(config: Optional[ServiceConfig] = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="rootflow", version=__version__)
    state = AppState(config)
    app.state.rootflow = state

    if config.cors_origins:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=config.cors_origins,
            allow_methods=["*"],
            allow_headers=["*"],
        )

    def require_token(authorization: Optional[str] = Header(default=None)):
        if config.api_token is None:
            return
        if authorization != f"Bearer {config.api_token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        errors = [
            {"field": ".".join(str(p) for p in err.get("loc", [])), "message": err.get("msg")}
            for err in exc.errors()
        ]
        return JSONResponse(status_code=400, content={"detail": "validation failed",
                                                      "errors": errors})

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.get("/v1/plan", dependencies=[Depends(require_token)])
    def plan_view():
        return {
            "name": state.plan.name,
            "steps": [
                {
                    "id": s.id,
                    "title": s.title,
                    "category": s.category.value,
                    "requires": sorted(f.value for f in s.requires),
                    "prerequisites": sorted(s.prerequisites),
                    "automation_level": s.automation_level.value,
                }
                for s in state.plan.steps.values()
            ],
        }

    @app.get("/v1/devices", dependencies=[Depends(require_token)])
    def devices_view():
        descriptors = list_devices(registry=state.registry)
        profiles = {
            f"sim:{p.name}": {
                "android_version": p.android_version,
                "root_state": p.root_state.value,
                "label": p.column_label(),
            }
            for p in state.registry.profiles()
        }
        return {
            "devices": [
                {"serial": serial, "state": dev_state, **profiles.get(serial, {})}
                for serial, dev_state in descriptors
            ]
        }

    @app.post("/v1/campaigns", dependencies=[Depends(require_token)])
    def create_campaign(body: CampaignRequest):
        with state.lock:
            cached = state.request_cache.get(body.request_key)
        if cached is not None:
            return cached

        endpoints = []
        for i, text in enumerate(body.devices):
            try:
                endpoint = parse_endpoint(text)
                if isinstance(endpoint, SimulatedEndpoint):
                    state.registry.get(endpoint.profile_name)
            except (DeviceError, SimulatorError) as exc:
                raise HTTPException(
                    status_code=400,
                    detail={"field": f"devices[{i}]", "message": str(exc)},
                )
            endpoints.append(endpoint)

        try:
            style = PromptStyle(body.style)
            mode = PolicyMode(body.policy_mode)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

        if config.provider.kind is ProviderKind.HTTP_CHAT_COMPLETION:
            if not os.environ.get(config.provider.credential_source or ""):
                raise HTTPException(status_code=503, detail="provider credential unavailable")

        policy = ApprovalPolicy(mode=mode, deny_rules=state.deny_rules)
        try:
            campaign = Campaign(
                plan=state.plan,
                devices=endpoints,
                prompt_style=style,
                provider=config.provider,
                policy=policy,
                retry_budget=body.retries,
                step_filter=frozenset(body.step_filter) if body.step_filter else None,
            )
        except CampaignError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

        gate = ApprovalGate(policy)
        operator = auto_operator if body.operator_mode == "auto" else None
        runner = CampaignRunner(
            campaign, state.store, gate=gate, operator=operator, registry=state.registry
        )
        with state.lock:
            state.gates[runner.run_id] = gate

        def _run():
            try:
                runner.run()
            except RootflowError:
                pass  # recorded as an aborted run in the event log

        thread = threading.Thread(target=_run, name=f"campaign-{runner.run_id}", daemon=True)
        with state.lock:
            state.threads[runner.run_id] = thread
        thread.start()

        response = {"run_id": runner.run_id}
        with state.lock:
            state.request_cache[body.request_key] = response
        return response

    @app.get("/v1/campaigns", dependencies=[Depends(require_token)])
    def list_campaigns():
        runs = []
        for run_id in state.store.run_ids():
            record = state.store.run_record(run_id)
            runs.append({"run_id": run_id, "status": record.status.value})
        return {"runs": runs}

    def _get_record(run_id: str):
        try:
            return state.store.run_record(run_id)
        except StoreError:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")

    @app.get("/v1/runs/{run_id}", dependencies=[Depends(require_token)])
    def run_view(run_id: str):
        record = _get_record(run_id)
        outcomes = []
        for (device, step_id), outcome in record.outcomes.items():
            outcomes.append(
                {
                    "device": device,
                    "step_id": step_id,
                    "final_verdict": outcome.final_verdict.display()
                    if outcome.final_verdict
                    else None,
                    "attempts": len(outcome.attempts),
                    "annotations": outcome.annotations,
                }
            )
        return {
            "run_id": run_id,
            "status": record.status.value,
            "campaign": record.campaign,
            "devices": [
                {"key": key, "label": record.device_labels.get(key, key)}
                for key in record.device_keys
            ],
            "outcomes": outcomes,
        }

    @app.get("/v1/runs/{run_id}/events", dependencies=[Depends(require_token)])
    def run_events(
        run_id: str,
        after: int = Query(default=0),
        last_event_id: Optional[str] = Header(default=None),
    ):
        _get_record(run_id)
        cursor = after
        if last_event_id:
            try:
                cursor = max(cursor, int(last_event_id))
            except ValueError:
                pass

        def stream():
            for event in state.store.subscribe(run_id, after=cursor):
                payload = event.to_json()
                yield f"id: {event.seq}\nevent: {event.type}\ndata: {payload}\n\n"

        return StreamingResponse(stream(), media_type="text/event-stream")

    @app.get("/v1/tickets", dependencies=[Depends(require_token)])
    def pending_tickets(run_id: Optional[str] = Query(default=None)):
        tickets = []
        with state.lock:
            gates = dict(state.gates)
        for rid, gate in gates.items():
            if run_id is not None and rid != run_id:
                continue
            for ticket in gate.pending_tickets():
                script = gate.script_for(ticket)
                tickets.append(
                    {
                        "ticket_id": ticket.ticket_id,
                        "run_id": rid,
                        "script_id": ticket.script_id,
                        "created_at": ticket.created_at,
                        "script": script.to_dict() if script else None,
                    }
                )
        tickets.sort(key=lambda t: t["created_at"])
        return {"tickets": tickets}

    @app.post("/v1/tickets/{ticket_id}/resolution", dependencies=[Depends(require_token)])
    def resolve_ticket(ticket_id: str, body: ResolutionRequest):
        cache_key = f"resolution:{body.request_key}"
        with state.lock:
            cached = state.request_cache.get(cache_key)
        if cached is not None:
            return cached

        run_id, gate, ticket = state.find_ticket(ticket_id)
        if ticket is None:
            raise HTTPException(status_code=404, detail=f"unknown ticket {ticket_id!r}")
        if body.decision not in ("approve", "reject"):
            raise HTTPException(status_code=400, detail="decision must be approve or reject")

        try:
            new_version = gate.resolve(
                ticket,
                approved=body.decision == "approve",
                operator=body.operator,
                reason=body.reason,
                edited_body=body.edited_body,
            )
        except ScreeningRejectedError as exc:
            raise HTTPException(
                status_code=400,
                detail={"error": "screening_rejected", "rule_id": exc.rule_id,
                        "reason": exc.reason},
            )
        except ApprovalError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

        response = {
            "ticket_id": ticket_id,
            "run_id": run_id,
            "decision": body.decision,
            "new_script_id": new_version.script_id if new_version else None,
        }
        with state.lock:
            state.request_cache[cache_key] = response
        return response

    @app.get("/v1/runs/{run_id}/report", dependencies=[Depends(require_token)])
    def run_report(run_id: str, format: str = Query(default="json")):
        record = _get_record(run_id)
        if record.status is not RunStatus.COMPLETED:
            raise HTTPException(
                status_code=409,
                detail=f"run not completed (status: {record.status.value})",
            )
        report = build_report(record, state.plan)
        if format == "md":
            return PlainTextResponse(report.to_markdown(), media_type="text/markdown")
        if format != "json":
            raise HTTPException(status_code=400, detail="format must be json or md")
        # Return the canonical rendering byte-for-byte (replay comparisons
        # depend on it), not a re-serialized copy.
        return Response(content=report.to_json(), media_type="application/json")

    return app


def serve(config: ServiceConfig):
    import uvicorn

    app = create_app(config)
    uvicorn.run(app, host=config.listen_host, port=config.listen_port, log_level="info")
