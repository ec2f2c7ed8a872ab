"""Phase III: judge gating, the selectively triggered two-round debate, and
finalization into standardized names and ICD-10 codes.

The judge labels every drafted diagnosis; only Ambiguous ones are debated.
A debate is always five turns: opening arguments from both sides, one
rebuttal each, then the arbiter's ruling.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

from .errors import AdjudicationError
from .gateway import ChatRequest, FieldSpec, Gateway, OutputSchema
from .prompts import (
    ANGEL_REBUTTAL_TEMPLATE,
    ANGEL_TEMPLATE,
    ARBITER_TEMPLATE,
    DEVIL_REBUTTAL_TEMPLATE,
    DEVIL_TEMPLATE,
    FINALIZE_TEMPLATE,
    JUDGE_TEMPLATE,
    angel_prompt,
    arbiter_prompt,
    devil_prompt,
    finalize_prompt,
    judge_prompt,
    rebuttal_prompt,
)
from .reports import DraftReport, FinalReport, ReportedDiagnosis, report_violations

if TYPE_CHECKING:
    from .navigation import DiagnosticState

logger = logging.getLogger(__name__)

STATUSES = ("Confident", "Ambiguous", "Incorrect")


@dataclass(frozen=True)
class JudgeVerdict:
    status: dict[str, str]
    ambiguity_points: tuple[str, ...] = ()
    diagnoses_to_remove: tuple[str, ...] = ()

    def ambiguous_names(self) -> list[str]:
        return [name for name, label in self.status.items() if label == "Ambiguous"]


@dataclass(frozen=True)
class DebateVerdict:
    kind: str
    new_name: str = ""


@dataclass(frozen=True)
class DebateTurn:
    role: str
    round: int
    arguments: dict[str, str]

    def to_dict(self) -> dict:
        return {"role": self.role, "round": self.round, "arguments": dict(self.arguments)}


@dataclass(frozen=True)
class DebateOutcome:
    transcript: tuple[DebateTurn, ...]
    final_verdicts: dict[str, DebateVerdict]
    confidence_updates: dict[str, float]
    summary: str

    def to_dict(self) -> dict:
        verdicts = {
            name: (v.kind if not v.new_name else f"Modify: {v.new_name}")
            for name, v in self.final_verdicts.items()
        }
        return {
            "transcript": [turn.to_dict() for turn in self.transcript],
            "final_verdicts": verdicts,
            "confidence_updates": dict(self.confidence_updates),
            "summary": self.summary,
        }


def parse_debate_verdict(text: str) -> DebateVerdict | None:
    text = text.strip()
    if text == "Keep":
        return DebateVerdict("Keep")
    if text == "Discard":
        return DebateVerdict("Discard")
    match = re.fullmatch(r"Modify:\s*(.+)", text)
    if match and match.group(1).strip():
        return DebateVerdict("Modify", match.group(1).strip())
    return None


def _canonical(names: list[str]) -> dict[str, str]:
    return {name.lower(): name for name in names}


_JUDGE_SCHEMA = OutputSchema(
    schema_id="judge.v1",
    fields=(
        FieldSpec("status", "object"),
        FieldSpec("ambiguity_points", "list", item_kind="string", required=False),
        FieldSpec("diagnoses_to_remove", "list", item_kind="string", required=False),
    ),
)


def _judge_violations(obj: dict, draft_names: list[str]) -> list[str]:
    violations: list[str] = []
    status = obj.get("status")
    if not isinstance(status, dict):
        return ["status: expected an object"]
    canonical = _canonical(draft_names)
    labeled: dict[str, str] = {}
    for name, label in status.items():
        key = str(name).strip().lower()
        if key not in canonical:
            violations.append(f"status: {name!r} is not in the draft report")
            continue
        if label not in STATUSES:
            violations.append(f"status.{name}: must be one of {list(STATUSES)}")
            continue
        labeled[key] = label
    for name in draft_names:
        if name.lower() not in labeled:
            violations.append(f"status: missing entry for {name!r}")
    points = [str(p) for p in obj.get("ambiguity_points") or []]
    for key, label in labeled.items():
        if label == "Ambiguous":
            mentioned = any(key in point.lower() for point in points)
            if not mentioned:
                violations.append(
                    f"ambiguity_points: no point mentions the Ambiguous diagnosis "
                    f"{canonical[key]!r}"
                )
    for name in obj.get("diagnoses_to_remove") or []:
        key = str(name).strip().lower()
        if key not in canonical:
            violations.append(f"diagnoses_to_remove: {name!r} is not in the draft report")
        elif labeled.get(key) != "Incorrect":
            violations.append(
                f"diagnoses_to_remove: {name!r} is not labeled Incorrect"
            )
    return violations


def judge(gateway: Gateway, state: DiagnosticState, draft: DraftReport) -> JudgeVerdict:
    """Label every drafted diagnosis Confident, Ambiguous, or Incorrect."""
    names = draft.names()
    if not names:
        raise AdjudicationError("draft report has no diagnoses to judge")
    obj = gateway.complete_structured(
        ChatRequest("judge", state.turn, judge_prompt(state, draft), JUDGE_TEMPLATE),
        _JUDGE_SCHEMA,
        validate_extra=lambda o: _judge_violations(o, names),
    )
    canonical = _canonical(names)
    status = {canonical[str(k).strip().lower()]: v for k, v in obj["status"].items()}
    removals = tuple(
        canonical[str(n).strip().lower()] for n in obj.get("diagnoses_to_remove") or []
    )
    return JudgeVerdict(
        status=status,
        ambiguity_points=tuple(str(p) for p in obj.get("ambiguity_points") or []),
        diagnoses_to_remove=removals,
    )


def _argument_map_violations(obj: dict, field: str, expected: list[str]) -> list[str]:
    mapping = obj.get(field)
    if not isinstance(mapping, dict):
        return [f"{field}: expected an object"]
    violations = []
    canonical = _canonical(expected)
    covered = set()
    for name, argument in mapping.items():
        key = str(name).strip().lower()
        if key not in canonical:
            violations.append(f"{field}: {name!r} is not under debate")
            continue
        covered.add(key)
        if not str(argument).strip():
            violations.append(f"{field}.{name}: must not be empty")
    for name in expected:
        if name.lower() not in covered:
            violations.append(f"{field}: missing entry for {name!r}")
    return violations


def _canonical_map(obj_map: dict, expected: list[str]) -> dict[str, str]:
    canonical = _canonical(expected)
    return {canonical[str(k).strip().lower()]: str(v) for k, v in obj_map.items()}


def angel_argue(
    gateway: Gateway, diagnoses: list[str], key_findings: list[str], turn: int
) -> dict[str, str]:
    if not diagnoses:
        raise AdjudicationError("no diagnoses for the Angel to defend")
    obj = gateway.complete_structured(
        ChatRequest("debate.angel", turn, angel_prompt(diagnoses, key_findings),
                    ANGEL_TEMPLATE),
        OutputSchema(schema_id="debate.angel.v1"),
        validate_extra=lambda o: _argument_map_violations(o, "arguments", diagnoses),
    )
    return _canonical_map(obj["arguments"], diagnoses)


def devil_argue(
    gateway: Gateway, diagnoses: list[str], key_findings: list[str], turn: int
) -> dict[str, str]:
    if not diagnoses:
        raise AdjudicationError("no diagnoses for the Devil to attack")
    obj = gateway.complete_structured(
        ChatRequest("debate.devil", turn, devil_prompt(diagnoses, key_findings),
                    DEVIL_TEMPLATE),
        OutputSchema(schema_id="debate.devil.v1"),
        validate_extra=lambda o: _argument_map_violations(o, "arguments", diagnoses),
    )
    return _canonical_map(obj["arguments"], diagnoses)


def rebut(gateway: Gateway, role: str, opposing: dict[str, str], turn: int) -> dict[str, str]:
    if role not in ("Angel", "Devil"):
        raise AdjudicationError(f"unknown debate role: {role!r}")
    if not opposing:
        raise AdjudicationError("nothing to rebut")
    names = list(opposing)
    node_tag = "debate.angel_rebuttal" if role == "Angel" else "debate.devil_rebuttal"
    template = ANGEL_REBUTTAL_TEMPLATE if role == "Angel" else DEVIL_REBUTTAL_TEMPLATE
    obj = gateway.complete_structured(
        ChatRequest(node_tag, turn, rebuttal_prompt(role, opposing), template),
        OutputSchema(schema_id=f"{node_tag}.v1"),
        validate_extra=lambda o: _argument_map_violations(o, "rebuttals", names),
    )
    return _canonical_map(obj["rebuttals"], names)


_ARBITER_SCHEMA = OutputSchema(
    schema_id="debate.arbiter.v1",
    fields=(
        FieldSpec("debate_transcript", "string", nonempty=True),
        FieldSpec("final_verdicts", "object"),
        FieldSpec("confidence_updates", "object", required=False),
    ),
)


def _arbiter_violations(obj: dict, debated: list[str]) -> list[str]:
    violations: list[str] = []
    verdicts = obj.get("final_verdicts")
    if not isinstance(verdicts, dict):
        return ["final_verdicts: expected an object"]
    canonical = _canonical(debated)
    covered = set()
    for name, raw in verdicts.items():
        key = str(name).strip().lower()
        if key not in canonical:
            violations.append(f"final_verdicts: {name!r} was not under debate")
            continue
        covered.add(key)
        if not isinstance(raw, str) or parse_debate_verdict(raw) is None:
            violations.append(
                f"final_verdicts.{name}: must be \"Keep\", \"Discard\", or "
                f"\"Modify: New Name\", got {raw!r}"
            )
    for name in debated:
        if name.lower() not in covered:
            violations.append(f"final_verdicts: missing ruling for {name!r}")
    updates = obj.get("confidence_updates")
    if updates is not None:
        if not isinstance(updates, dict):
            violations.append("confidence_updates: expected an object")
        else:
            for name, value in updates.items():
                if str(name).strip().lower() not in canonical:
                    violations.append(f"confidence_updates: {name!r} was not under debate")
                elif not isinstance(value, (int, float)) or isinstance(value, bool):
                    violations.append(f"confidence_updates.{name}: expected a number")
                elif not 0 <= value <= 1:
                    violations.append(f"confidence_updates.{name}: must be within [0, 1]")
    return violations


def run_debate(
    gateway: Gateway, verdict: JudgeVerdict, state: DiagnosticState, draft: DraftReport
) -> DebateOutcome:
    """Five fixed turns over the Ambiguous diagnoses, ending in a ruling."""
    draft_order = draft.names()
    ambiguous = set(verdict.ambiguous_names())
    debated = [name for name in draft_order if name in ambiguous]
    if not debated:
        raise AdjudicationError("debate invoked with no Ambiguous diagnoses")
    findings = list(state.key_findings)
    turn = state.turn

    angel_r1 = angel_argue(gateway, debated, findings, turn)
    devil_r1 = devil_argue(gateway, debated, findings, turn)
    angel_r2 = rebut(gateway, "Angel", devil_r1, turn)
    devil_r2 = rebut(gateway, "Devil", angel_r1, turn)

    lines = []
    for label, arguments in (
        ("Angel round 1", angel_r1),
        ("Devil round 1", devil_r1),
        ("Angel rebuttal", angel_r2),
        ("Devil rebuttal", devil_r2),
    ):
        for name, argument in arguments.items():
            lines.append(f"[{label}] {name}: {argument}")

    obj = gateway.complete_structured(
        ChatRequest("debate.arbiter", turn, arbiter_prompt(debated, lines, findings),
                    ARBITER_TEMPLATE),
        _ARBITER_SCHEMA,
        validate_extra=lambda o: _arbiter_violations(o, debated),
    )
    canonical = _canonical(debated)
    final_verdicts = {
        canonical[str(name).strip().lower()]: parse_debate_verdict(raw)
        for name, raw in obj["final_verdicts"].items()
    }
    confidence_updates = {
        canonical[str(name).strip().lower()]: float(value)
        for name, value in (obj.get("confidence_updates") or {}).items()
    }
    transcript = (
        DebateTurn("Angel", 1, angel_r1),
        DebateTurn("Devil", 1, devil_r1),
        DebateTurn("Angel", 2, angel_r2),
        DebateTurn("Devil", 2, devil_r2),
        DebateTurn("Arbiter", 2, {n: v for n, v in obj["final_verdicts"].items()}),
    )
    return DebateOutcome(
        transcript=transcript,
        final_verdicts=final_verdicts,
        confidence_updates=confidence_updates,
        summary=obj["debate_transcript"],
    )


def apply_verdicts(
    draft: DraftReport, verdict: JudgeVerdict, outcome: DebateOutcome | None
) -> DraftReport:
    """Pure application of judge removals and arbiter rulings to the draft."""
    draft_names = {name.lower() for name in draft.names()}
    ambiguous = verdict.ambiguous_names()
    if ambiguous and outcome is None:
        raise AdjudicationError("Ambiguous diagnoses present but no debate outcome")
    if not ambiguous and outcome is not None:
        raise AdjudicationError("debate outcome present without Ambiguous diagnoses")
    for name in list(verdict.status) + list(verdict.diagnoses_to_remove):
        if name.lower() not in draft_names:
            raise AdjudicationError(f"verdict names {name!r}, which is not in the draft")
    if outcome is not None:
        for name in outcome.final_verdicts:
            if name.lower() not in draft_names:
                raise AdjudicationError(f"ruling names {name!r}, which is not in the draft")

    dropped = {name.lower() for name in verdict.diagnoses_to_remove}
    rulings = outcome.final_verdicts if outcome else {}
    updates = outcome.confidence_updates if outcome else {}

    def rewrite(entries: tuple[ReportedDiagnosis, ...]) -> tuple[ReportedDiagnosis, ...]:
        kept = []
        for diagnosis in entries:
            key = diagnosis.disease_name.lower()
            if key in dropped:
                continue
            ruling = next(
                (v for name, v in rulings.items() if name.lower() == key), None
            )
            if ruling is None:
                kept.append(diagnosis)
                continue
            if ruling.kind == "Discard":
                continue
            if ruling.kind == "Modify":
                kept.append(replace(diagnosis, disease_name=ruling.new_name, icd10_code=""))
                continue
            update = next(
                (v for name, v in updates.items() if name.lower() == key), None
            )
            if update is not None:
                kept.append(replace(diagnosis, confidence=update))
            else:
                kept.append(diagnosis)
        return tuple(kept)

    return replace(
        draft,
        primary_diagnoses=rewrite(draft.primary_diagnoses),
        secondary_diagnoses=rewrite(draft.secondary_diagnoses),
    )


def finalize(
    gateway: Gateway,
    report: DraftReport,
    state: DiagnosticState,
    banned_names: set[str] | None = None,
) -> FinalReport:
    """Standardize names, assign ICD-10 codes, and enforce the acute/chronic split.

    banned_names are diagnoses excised during adjudication; they must not
    reappear in the output under any circumstances.
    """
    if not report.all_diagnoses():
        raise AdjudicationError("nothing to finalize: the report is empty")
    banned = {name.lower() for name in (banned_names or set())}

    def extra(obj: dict) -> list[str]:
        violations = report_violations(obj, require_codes=True)
        for slot in ("primary_diagnoses", "secondary_diagnoses"):
            for i, entry in enumerate(obj.get(slot) or []):
                if not isinstance(entry, dict):
                    continue
                name = str(entry.get("disease_name", "")).strip()
                if name.lower() in banned:
                    violations.append(
                        f"{slot}[{i}].disease_name: {name!r} was excised and must not return"
                    )
        return violations

    obj = gateway.complete_structured(
        ChatRequest("finalize", state.turn, finalize_prompt(report, state.profile),
                    FINALIZE_TEMPLATE),
        OutputSchema(schema_id="finalize.v1"),
        validate_extra=extra,
    )
    return FinalReport.from_dict(obj)
