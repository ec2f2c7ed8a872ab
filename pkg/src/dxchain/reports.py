"""Diagnostic report types shared by synthesis, adjudication, and output."""

from __future__ import annotations

from dataclasses import dataclass, field, replace


def _clamp01(value: float) -> float:
    return min(1.0, max(0.0, float(value)))


@dataclass(frozen=True)
class ReportedDiagnosis:
    disease_name: str
    icd10_code: str = ""
    reasoning: str = ""
    confidence: float = 0.5

    def to_dict(self) -> dict:
        return {
            "disease_name": self.disease_name,
            "icd10_code": self.icd10_code,
            "reasoning": self.reasoning,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ReportedDiagnosis":
        return cls(
            disease_name=str(raw.get("disease_name", "")).strip(),
            icd10_code=str(raw.get("icd10_code") or "").strip(),
            reasoning=str(raw.get("reasoning") or ""),
            confidence=_clamp01(raw.get("confidence", 0.5)),
        )


@dataclass(frozen=True)
class DraftReport:
    """Pre-adjudication report; FinalReport has the same shape."""

    primary_diagnoses: tuple[ReportedDiagnosis, ...]
    secondary_diagnoses: tuple[ReportedDiagnosis, ...] = ()
    treatment_recommendations: tuple[str, ...] = ()

    def all_diagnoses(self) -> tuple[ReportedDiagnosis, ...]:
        return self.primary_diagnoses + self.secondary_diagnoses

    def names(self) -> list[str]:
        return [d.disease_name for d in self.all_diagnoses()]

    def to_dict(self) -> dict:
        return {
            "primary_diagnoses": [d.to_dict() for d in self.primary_diagnoses],
            "secondary_diagnoses": [d.to_dict() for d in self.secondary_diagnoses],
            "treatment_recommendations": list(self.treatment_recommendations),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DraftReport":
        return cls(
            primary_diagnoses=tuple(
                ReportedDiagnosis.from_dict(d) for d in raw.get("primary_diagnoses", [])
            ),
            secondary_diagnoses=tuple(
                ReportedDiagnosis.from_dict(d) for d in raw.get("secondary_diagnoses", [])
            ),
            treatment_recommendations=tuple(
                str(t) for t in raw.get("treatment_recommendations", [])
            ),
        )

    def without(self, names: set[str]) -> "DraftReport":
        """Drop every diagnosis whose name matches (case-insensitive)."""
        lowered = {n.lower() for n in names}
        return replace(
            self,
            primary_diagnoses=tuple(
                d for d in self.primary_diagnoses if d.disease_name.lower() not in lowered
            ),
            secondary_diagnoses=tuple(
                d for d in self.secondary_diagnoses if d.disease_name.lower() not in lowered
            ),
        )


# A FinalReport is a DraftReport that survived adjudication and finalize's
# invariants (non-empty primaries, unique names, populated ICD-10 codes).
FinalReport = DraftReport


def report_violations(raw: dict, require_codes: bool = False) -> list[str]:
    """Contract check used inside structured-output repair loops."""
    violations: list[str] = []
    primaries = raw.get("primary_diagnoses")
    if not isinstance(primaries, list) or not primaries:
        violations.append("primary_diagnoses: must be a non-empty list")
        primaries = []
    secondaries = raw.get("secondary_diagnoses")
    if not isinstance(secondaries, list):
        violations.append("secondary_diagnoses: must be a list")
        secondaries = []
    seen: set[str] = set()
    for slot, entries in (("primary_diagnoses", primaries), ("secondary_diagnoses", secondaries)):
        for i, entry in enumerate(entries):
            where = f"{slot}[{i}]"
            if not isinstance(entry, dict):
                violations.append(f"{where}: expected an object")
                continue
            name = str(entry.get("disease_name", "")).strip()
            if not name:
                violations.append(f"{where}.disease_name: must not be empty")
                continue
            if name.lower() in seen:
                violations.append(f"{where}.disease_name: {name!r} listed twice")
            seen.add(name.lower())
            confidence = entry.get("confidence", 0.5)
            if not isinstance(confidence, (int, float)) or isinstance(confidence, bool):
                violations.append(f"{where}.confidence: expected a number")
            if require_codes and not str(entry.get("icd10_code") or "").strip():
                violations.append(f"{where}.icd10_code: must not be empty")
    return violations
