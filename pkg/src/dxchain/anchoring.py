"""Phase I: turn raw case text into the anchored starting state.

Three extraction passes (structured record, three-way problem profile,
clinical abstract) feed init_state, which builds the working memory all
later phases read from.  The profile is immutable once built.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .gateway import ChatRequest, FieldSpec, Gateway, OutputSchema
from .navigation import DiagnosticState
from .prompts import (
    PERCEPTION_TEMPLATE,
    PROFILE_TEMPLATE,
    RECORD_SLOTS,
    SUMMARY_TEMPLATE,
    perception_prompt,
    profile_prompt,
    summary_prompt,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StructuredRecord:
    chief_complaint: str | tuple[str, ...] = ""
    hpi: str | tuple[str, ...] = ""
    physical_exam: str | tuple[str, ...] = ""
    labs: str | tuple[str, ...] = ""
    imaging: str | tuple[str, ...] = ""
    medications: str | tuple[str, ...] = ""
    past_medical_history: str | tuple[str, ...] = ""
    vitals: str | tuple[str, ...] = ""

    def populated_slots(self) -> list[str]:
        return [slot for slot in RECORD_SLOTS if getattr(self, slot)]

    def to_dict(self) -> dict:
        out = {}
        for slot in RECORD_SLOTS:
            value = getattr(self, slot)
            out[slot] = list(value) if isinstance(value, tuple) else value
        return out


@dataclass(frozen=True)
class PatientProfile:
    acute: tuple[str, ...] = ()
    chronic: tuple[str, ...] = ()
    risk: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"acute": list(self.acute), "chronic": list(self.chronic),
                "risk": list(self.risk)}


@dataclass(frozen=True)
class ClinicalAbstract:
    chief_complaint_hpi: str
    positive_findings: tuple[str, ...] = ()
    pertinent_negatives: tuple[str, ...] = ()
    history_meds: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "chief_complaint_hpi": self.chief_complaint_hpi,
            "positive_findings": list(self.positive_findings),
            "pertinent_negatives": list(self.pertinent_negatives),
            "history_meds": list(self.history_meds),
        }


def _record_violations(obj: dict, slots: tuple[str, ...]) -> list[str]:
    violations: list[str] = []
    populated = 0
    for slot in slots:
        if slot not in obj:
            continue
        value = obj[slot]
        if isinstance(value, str):
            if value.strip():
                populated += 1
        elif isinstance(value, list):
            if any(not isinstance(item, str) for item in value):
                violations.append(f"{slot}: list items must be strings")
            elif any(not item.strip() for item in value):
                violations.append(f"{slot}: list items must not be empty")
            elif value:
                populated += 1
        else:
            violations.append(f"{slot}: must be a string or a list of strings")
    if not violations and populated == 0:
        violations.append("at least one slot must be populated")
    return violations


def perceive(gateway: Gateway, raw_text: str, slots: tuple[str, ...] = RECORD_SLOTS) -> StructuredRecord:
    """Extract the fixed-slot record; absent slots stay empty."""
    if not raw_text.strip():
        raise ValueError("raw_text is empty")
    schema = OutputSchema(schema_id="perception.v1")
    obj = gateway.complete_structured(
        ChatRequest("perception", 0, perception_prompt(raw_text), PERCEPTION_TEMPLATE),
        schema,
        validate_extra=lambda o: _record_violations(o, slots),
    )
    values: dict[str, str | tuple[str, ...]] = {}
    for slot in slots:
        value = obj.get(slot, "")
        if isinstance(value, list):
            values[slot] = tuple(item.strip() for item in value)
        else:
            values[slot] = value.strip()
    return StructuredRecord(**values)


def resolve_profile_lists(
    acute: list[str], chronic: list[str], risk: list[str]
) -> tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]:
    """Deduplicate across the three lists with priority acute > chronic > risk."""
    seen: set[str] = set()
    resolved: list[tuple[str, ...]] = []
    for items in (acute, chronic, risk):
        kept = []
        for item in items:
            item = item.strip()
            if not item or item in seen:
                continue
            seen.add(item)
            kept.append(item)
        resolved.append(tuple(kept))
    return resolved[0], resolved[1], resolved[2]


_PROFILE_SCHEMA = OutputSchema(
    schema_id="profile.v1",
    fields=(
        FieldSpec("acute", "list", item_kind="string"),
        FieldSpec("chronic", "list", item_kind="string"),
        FieldSpec("risk", "list", item_kind="string"),
    ),
)


def profile(gateway: Gateway, raw_text: str) -> PatientProfile:
    if not raw_text.strip():
        raise ValueError("raw_text is empty")
    obj = gateway.complete_structured(
        ChatRequest("profile", 0, profile_prompt(raw_text), PROFILE_TEMPLATE),
        _PROFILE_SCHEMA,
    )
    acute, chronic, risk = resolve_profile_lists(obj["acute"], obj["chronic"], obj["risk"])
    return PatientProfile(acute=acute, chronic=chronic, risk=risk)


_SUMMARY_SCHEMA = OutputSchema(
    schema_id="summary.v1",
    fields=(
        FieldSpec("chief_complaint_hpi", "string", nonempty=True),
        FieldSpec("positive_findings", "list", item_kind="string"),
        FieldSpec("pertinent_negatives", "list", item_kind="string"),
        FieldSpec("history_meds", "list", item_kind="string"),
    ),
)


def summarize(gateway: Gateway, raw_text: str) -> ClinicalAbstract:
    if not raw_text.strip():
        raise ValueError("raw_text is empty")
    obj = gateway.complete_structured(
        ChatRequest("summary", 0, summary_prompt(raw_text), SUMMARY_TEMPLATE),
        _SUMMARY_SCHEMA,
    )
    def cleaned(key: str) -> tuple[str, ...]:
        return tuple(item.strip() for item in obj[key] if item.strip())
    return ClinicalAbstract(
        chief_complaint_hpi=obj["chief_complaint_hpi"].strip(),
        positive_findings=cleaned("positive_findings"),
        pertinent_negatives=cleaned("pertinent_negatives"),
        history_meds=cleaned("history_meds"),
    )


def init_state(record, profile, abstract, retrieved) -> DiagnosticState:
    """Assemble the initial working memory: turn 0, nothing investigated yet."""
    return DiagnosticState(
        profile=profile,
        abstract=abstract,
        record=record,
        retrieved=tuple(retrieved),
    )
