"""Evaluation metrics and report rendering.

Rates are computed in exact integer arithmetic (tenths of a percent) and
rounded half-to-even, so scale invariance and the partition bound
(success + detection <= 100 when counters partition attempts) hold for the
reported values, not just the ideal ones. Values that land on an integer
print without a decimal, matching the source tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

from .errors import CampaignError
from .plan import PlanGraph, Verdict, VerdictKind
from .scripts import RiskLevel, classify_risk

REPORT_SCHEMA = "rootflow.report@1"

NOT_DETECTED = "Not Detected"

RISK_DISPLAY = {
    RiskLevel.LOW: "Low Risk",
    RiskLevel.MEDIUM: "Medium Risk",
    RiskLevel.HIGH: "High Risk",
}


@dataclass(frozen=True)
class MetricsSample:
    successful_executions: int
    blocked_exploits: int
    total_attempts: int

    def __post_init__(self):
        if min(self.successful_executions, self.blocked_exploits, self.total_attempts) < 0:
            raise ValueError("counters must be non-negative")
        if self.successful_executions + self.blocked_exploits > self.total_attempts:
            raise ValueError("successes plus blocked attempts cannot exceed total attempts")


def _rate_tenths(numerator: int, total: int) -> int:
    """round(1000 * numerator / total) with half-to-even ties, exactly."""
    scaled = 1000 * numerator
    quotient, remainder = divmod(scaled, total)
    doubled = 2 * remainder
    if doubled > total or (doubled == total and quotient % 2 == 1):
        quotient += 1
    return quotient


def success_rate(sample: MetricsSample) -> float:
    """Percent of attempts that achieved their objective, one decimal."""
    if sample.total_attempts <= 0:
        raise CampaignError("success rate undefined for zero attempts (environment-limited)")
    return _rate_tenths(sample.successful_executions, sample.total_attempts) / 10.0


def detection_rate(sample: MetricsSample) -> float:
    """Percent of attempts flagged by a security mechanism, one decimal."""
    if sample.total_attempts <= 0:
        raise CampaignError("detection rate undefined for zero attempts (environment-limited)")
    return _rate_tenths(sample.blocked_exploits, sample.total_attempts) / 10.0


def format_percent(value: float) -> str:
    if value == int(value):
        return f"{int(value)}%"
    return f"{value:.1f}%"


def detection_display(value: float) -> str:
    return NOT_DETECTED if value == 0 else format_percent(value)


def adaptability(verdicts: list[Verdict]) -> int:
    """3 when the technique worked on every counted profile, 1 when it worked
    on none, 2 otherwise. Environment-unsupported profiles don't count."""
    counted = [v for v in verdicts if v.kind is not VerdictKind.ENVIRONMENT_UNSUPPORTED]
    if not counted:
        raise CampaignError("adaptability undefined: all profiles environment-limited")
    worked = sum(1 for v in counted if v.kind is VerdictKind.WORKED)
    if worked == len(counted):
        return 3
    if worked == 0:
        return 1
    return 2


@dataclass(frozen=True)
class FeatureMetrics:
    step_id: str
    title: str
    sample: MetricsSample
    success_rate: float
    detection_rate: float
    detection_display: str
    adaptability: int
    ethical_risk: RiskLevel
    environment_limited: bool

    def to_dict(self) -> dict:
        return {
            "step_id": self.step_id,
            "title": self.title,
            "sample": {
                "successful_executions": self.sample.successful_executions,
                "blocked_exploits": self.sample.blocked_exploits,
                "total_attempts": self.sample.total_attempts,
            },
            "success_rate": self.success_rate,
            "detection_rate": self.detection_rate,
            "detection_display": self.detection_display,
            "adaptability": self.adaptability,
            "ethical_risk": RISK_DISPLAY[self.ethical_risk],
            "environment_limited": self.environment_limited,
        }


@dataclass(frozen=True)
class LimitationEntry:
    step_id: str
    title: str
    reason: str

    def to_dict(self) -> dict:
        return {"step_id": self.step_id, "title": self.title, "reason": self.reason}


@dataclass(frozen=True)
class ReportDocument:
    schema: str
    run_id: str
    plan_name: str
    generated_at: float
    device_labels: list[str]
    # verdict matrix rows: {step_id, title, cells: [display text per device]}
    matrix: list[dict]
    features: list[FeatureMetrics]
    limitations: list[LimitationEntry]

    def to_json(self) -> str:
        doc = {
            "schema": self.schema,
            "run_id": self.run_id,
            "plan_name": self.plan_name,
            "generated_at": self.generated_at,
            "devices": self.device_labels,
            "verdict_matrix": self.matrix,
            "feature_metrics": [f.to_dict() for f in self.features],
            "limitations": [entry.to_dict() for entry in self.limitations],
        }
        return json.dumps(doc, indent=2) + "\n"

    def to_markdown(self) -> str:
        lines = [
            f"# Campaign report: {self.plan_name}",
            "",
            f"Run `{self.run_id}`",
            "",
            "## Verdicts by device",
            "",
            "| Feature | " + " | ".join(self.device_labels) + " |",
            "|" + "---|" * (len(self.device_labels) + 1),
        ]
        for row in self.matrix:
            lines.append("| " + row["title"] + " | " + " | ".join(row["cells"]) + " |")
        lines += [
            "",
            "## Feature metrics",
            "",
            "| Feature | Success Rate | Detection Rate | Adaptability Score | Ethical Risk Factor |",
            "|---|---|---|---|---|",
        ]
        for fm in self.features:
            lines.append(
                "| {} | {} | {} | {} | {} |".format(
                    fm.title,
                    format_percent(fm.success_rate),
                    fm.detection_display,
                    fm.adaptability,
                    RISK_DISPLAY[fm.ethical_risk],
                )
            )
        lines += ["", "## Environment limitations", ""]
        if not self.limitations:
            lines.append("None observed.")
        for entry in self.limitations:
            lines.append(f"- **{entry.title}**: {entry.reason}")
        return "\n".join(lines) + "\n"


def _limitation_reason(outcomes: list) -> str:
    reasons = []
    for outcome in outcomes:
        note = outcome.limitation_note()
        if note and note not in reasons:
            reasons.append(note)
    return "; ".join(reasons) if reasons else "unavailable in every tested environment"


def build_report(run, plan: PlanGraph) -> ReportDocument:
    """Render a completed run as verdict matrix + feature metrics + annex.

    `run` is a RunRecord (engine module); typed loosely here to keep this
    module a pure consumer of run snapshots.
    """
    from .engine import RunStatus  # local import to avoid a module cycle

    if run.status is not RunStatus.COMPLETED:
        raise CampaignError(f"report requires a completed run (status: {run.status.value})")

    device_keys = run.device_keys
    device_labels = [run.device_labels[key] for key in device_keys]

    matrix = []
    features: list[FeatureMetrics] = []
    limitations: list[LimitationEntry] = []

    for step in plan.steps.values():
        outcomes = [run.outcome(key, step.id) for key in device_keys]
        outcomes = [o for o in outcomes if o is not None]
        if not outcomes:
            continue  # step was outside the campaign's step filter
        matrix.append(
            {
                "step_id": step.id,
                "title": step.title,
                "cells": [o.final_verdict.display() for o in outcomes],
            }
        )
        countable = [o for o in outcomes if o.counts_as_attempt()]
        if not countable:
            limitations.append(
                LimitationEntry(
                    step_id=step.id, title=step.title,
                    reason=_limitation_reason(outcomes),
                )
            )
            continue
        verdicts = [o.final_verdict for o in countable]
        sample = MetricsSample(
            successful_executions=sum(
                1 for v in verdicts if v.kind is VerdictKind.WORKED
            ),
            blocked_exploits=sum(1 for v in verdicts if v.kind is VerdictKind.BLOCKED),
            total_attempts=len(verdicts),
        )
        success = success_rate(sample)
        detection = detection_rate(sample)
        features.append(
            FeatureMetrics(
                step_id=step.id,
                title=step.title,
                sample=sample,
                success_rate=success,
                detection_rate=detection,
                detection_display=detection_display(detection),
                adaptability=adaptability(verdicts),
                ethical_risk=classify_risk(step),
                environment_limited=False,
            )
        )

    return ReportDocument(
        schema=REPORT_SCHEMA,
        run_id=run.run_id,
        plan_name=plan.name,
        generated_at=run.ended_at or 0.0,
        device_labels=device_labels,
        matrix=matrix,
        features=features,
        limitations=limitations,
    )
