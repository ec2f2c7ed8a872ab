"""Prompt builders for every model-facing node.

Each builder returns a message tuple ready for a ChatRequest, plus a module
constant naming the template version (recorded in traces).  Builders accept
domain objects via attributes only; no runtime import of the domain modules,
which keeps the import graph acyclic.
"""

from __future__ import annotations

import json
from typing import TYPE_CHECKING, Iterable

from .gateway import ChatMessage

if TYPE_CHECKING:
    from .anchoring import ClinicalAbstract, PatientProfile, StructuredRecord
    from .navigation import DiagnosticState, Observation, Strategy
    from .reports import DraftReport

RECORD_SLOTS = (
    "chief_complaint",
    "hpi",
    "physical_exam",
    "labs",
    "imaging",
    "medications",
    "past_medical_history",
    "vitals",
)

EXPERT_IDS = (
    "diagnostic_test_specialist",
    "medical_imaging_specialist",
    "clinical_specialist",
    "medical_coder",
    "internal_medicine_specialist",
)

ARCHETYPES = ("Broad", "Focused", "Alternative")

PERCEPTION_TEMPLATE = "perception.v1"
PROFILE_TEMPLATE = "profile.v1"
SUMMARY_TEMPLATE = "summary.v1"
EXPANSION_TEMPLATE = "expansion.v1"
SELECTION_TEMPLATE = "selection.v1"
EXPERT_TEMPLATE = "expert.v1"
EXPECT_CHECK_TEMPLATE = "expect_check.v1"
SYNTHESIS_TEMPLATE = "synthesis.v1"
BASELINE_TEMPLATE = "baseline.v1"
REFLECTION_TEMPLATE = "reflection.v1"
JUDGE_TEMPLATE = "judge.v1"
ANGEL_TEMPLATE = "debate.angel.v1"
DEVIL_TEMPLATE = "debate.devil.v1"
ANGEL_REBUTTAL_TEMPLATE = "debate.angel_rebuttal.v1"
DEVIL_REBUTTAL_TEMPLATE = "debate.devil_rebuttal.v1"
ARBITER_TEMPLATE = "debate.arbiter.v1"
FINALIZE_TEMPLATE = "finalize.v1"

_REPORT_SHAPE = (
    '{"primary_diagnoses": [{"disease_name": "...", "icd10_code": "...", '
    '"reasoning": "...", "confidence": 0.0}], '
    '"secondary_diagnoses": [same shape], '
    '"treatment_recommendations": ["..."]}'
)


def _bullets(items: Iterable[str]) -> str:
    lines = [f"- {item}" for item in items]
    return "\n".join(lines) if lines else "- none"


def perception_prompt(raw_text: str) -> tuple[ChatMessage, ...]:
    system = (
        "You organize clinical narratives into fixed slots. Copy information "
        "out of the note; never infer or invent anything that is not written "
        "there. A slot with no supporting text stays empty."
    )
    user = (
        "Read the case below and return one JSON object with exactly these "
        f"keys: {', '.join(RECORD_SLOTS)}. Each value is a string or a list "
        "of strings taken from the note; use \"\" or [] when the note says "
        "nothing for that slot.\n\n"
        f"CASE:\n{raw_text}"
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def profile_prompt(raw_text: str) -> tuple[ChatMessage, ...]:
    system = (
        "You classify a patient's problems into three buckets: acute issues "
        "driving this encounter, chronic conditions that predate it, and "
        "risk factors (exposures, habits, demographics). Place each item in "
        "exactly one bucket."
    )
    user = (
        "Return one JSON object: {\"acute\": [...], \"chronic\": [...], "
        "\"risk\": [...]}. Lists may be empty; never repeat an item across "
        "lists.\n\n"
        f"CASE:\n{raw_text}"
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def summary_prompt(raw_text: str) -> tuple[ChatMessage, ...]:
    system = (
        "You are a senior clinical data specialist writing a compact case "
        "abstract for downstream reasoning. Filter noise: drop insurance, "
        "billing, scheduling, and other administrative content. Keep "
        "pertinent negatives; a normal result that rules something out is "
        "as valuable as an abnormal one."
    )
    user = (
        "Return one JSON object: {\"chief_complaint_hpi\": \"...\", "
        "\"positive_findings\": [...], \"pertinent_negatives\": [...], "
        "\"history_meds\": [...]}. chief_complaint_hpi must not be empty.\n\n"
        f"CASE:\n{raw_text}"
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def render_profile(profile: PatientProfile) -> str:
    return (
        f"Acute problems:\n{_bullets(profile.acute)}\n"
        f"Chronic conditions:\n{_bullets(profile.chronic)}\n"
        f"Risk factors:\n{_bullets(profile.risk)}"
    )


def render_abstract(abstract: ClinicalAbstract) -> str:
    return (
        f"Chief complaint and course: {abstract.chief_complaint_hpi}\n"
        f"Positive findings:\n{_bullets(abstract.positive_findings)}\n"
        f"Pertinent negatives:\n{_bullets(abstract.pertinent_negatives)}\n"
        f"History and medications:\n{_bullets(abstract.history_meds)}"
    )


def render_record_slots(record: StructuredRecord, slots: Iterable[str]) -> str:
    parts = []
    for slot in slots:
        value = getattr(record, slot)
        if isinstance(value, (list, tuple)):
            rendered = "; ".join(value) if value else ""
        else:
            rendered = value
        parts.append(f"{slot}: {rendered or '(not documented)'}")
    return "\n".join(parts)


def _render_working(state: DiagnosticState) -> str:
    items = [f"{name} (confidence {conf:.2f})" for name, conf in state.working_diagnoses]
    return _bullets(items)


def _render_history(state: DiagnosticState) -> str:
    lines = []
    for action, observation in state.history:
        findings = "; ".join(observation.extracted_findings) or observation.content
        lines.append(f"- turn asked {action.expert}: {action.directive} -> {findings}")
    return "\n".join(lines) if lines else "- none yet"


def _render_retrieved(state: DiagnosticState) -> str:
    lines = [
        f"- similar case {case.case_id} (similarity {case.similarity:.2f}), "
        f"reference diagnosis {case.reference_primary}: {case.snippet}"
        for case in state.retrieved
    ]
    return "\n".join(lines) if lines else ""


def expansion_prompt(state: DiagnosticState, feedback: list[str]) -> tuple[ChatMessage, ...]:
    system = (
        "You are the diagnostic planner. Brainstorm multiple distinct "
        "strategies for the next investigative step, then commit to what "
        "each one should find before anything is observed. Archetypes:\n"
        "- Broad: widen the differential, gather foundational data.\n"
        "- Focused: drill into the current leading hypothesis.\n"
        "- Alternative: pursue a rival explanation the workup may have missed.\n"
        f"Each strategy calls one or more of these exact expert ids: "
        f"{', '.join(EXPERT_IDS)}. The experts listed are called immediately, "
        "in this turn."
    )
    context = [
        "PATIENT PROFILE:\n" + render_profile(state.profile),
        "CASE ABSTRACT:\n" + render_abstract(state.abstract),
        "WORKING DIAGNOSES:\n" + _render_working(state),
        "RULED OUT:\n" + _bullets(state.ruled_out),
        "INVESTIGATION SO FAR:\n" + _render_history(state),
    ]
    retrieved = _render_retrieved(state)
    if retrieved:
        context.append("SIMILAR PRIOR CASES:\n" + retrieved)
    if feedback:
        context.append("REVIEWER FEEDBACK ON THE LAST DRAFT:\n" + _bullets(feedback))
    user = (
        "\n\n".join(context)
        + "\n\nReturn one JSON object:\n"
        '{"strategies": [{"archetype": "Broad|Focused|Alternative", '
        '"name": "...", "description": "at most 2 sentences", '
        '"first_step_actions": ["expert ids to call immediately"], '
        '"expected_outcome": "what the findings should show if this strategy '
        'is right"}], '
        '"working_diagnoses": [{"name": "...", "confidence": 0.0}], '
        '"ruled_out": ["..."], "ready_to_synthesize": false}\n'
        "Give 2 or 3 strategies with distinct archetypes. expected_outcome "
        "must never be empty: commit to a concrete prediction. Set "
        "ready_to_synthesize to true only when enough evidence exists to "
        "write the final report after this turn."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def selection_prompt(state: DiagnosticState, strategies: list[Strategy]) -> tuple[ChatMessage, ...]:
    system = (
        "You pick the single most informative diagnostic strategy. Score "
        "each candidate 0 to 10 for expected information gain given the "
        "current state; higher is better."
    )
    rendered = "\n".join(
        f"- {s.name} [{s.archetype}]: {s.description} "
        f"Expecting: {s.expected_outcome}"
        for s in strategies
    )
    user = (
        "WORKING DIAGNOSES:\n" + _render_working(state)
        + "\n\nCANDIDATE STRATEGIES:\n" + rendered
        + "\n\nReturn one JSON object: {\"scores\": {\"<strategy name>\": 0}} "
        "covering every candidate exactly once."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


_EXPERT_BRIEFS = {
    "diagnostic_test_specialist": "You interpret laboratory results and vital signs.",
    "medical_imaging_specialist": "You interpret imaging studies and their reports.",
    "clinical_specialist": "You interpret the presentation: complaint, course, and exam.",
    "medical_coder": "You review documented history and medications for codable conditions.",
    "internal_medicine_specialist": "You integrate the history, comorbidities, and medications.",
}

# Record slots each expert is shown; everything else is withheld on purpose.
EXPERT_SLOTS = {
    "diagnostic_test_specialist": ("labs", "vitals"),
    "medical_imaging_specialist": ("imaging",),
    "clinical_specialist": ("chief_complaint", "hpi", "physical_exam"),
    "medical_coder": ("past_medical_history", "medications"),
    "internal_medicine_specialist": ("hpi", "past_medical_history", "medications"),
}


def expert_prompt(expert: str, directive: str, record: StructuredRecord) -> tuple[ChatMessage, ...]:
    system = (
        f"{_EXPERT_BRIEFS[expert]} Work only from the data shown; say so "
        "plainly when the data you would need is not documented."
    )
    slots = render_record_slots(record, EXPERT_SLOTS[expert])
    user = (
        f"TASK FROM THE PLANNER: {directive}\n\n"
        f"AVAILABLE DATA:\n{slots}\n\n"
        "Return one JSON object: {\"content\": \"your read of the data\", "
        "\"extracted_findings\": [\"short factual findings\"]}. content must "
        "not be empty."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def expectation_check_prompt(expectation: str, observation: Observation) -> tuple[ChatMessage, ...]:
    findings = "; ".join(observation.extracted_findings) or observation.content
    user = (
        "A planner predicted an outcome before the data came back.\n"
        f"PREDICTED: {expectation}\n"
        f"OBSERVED ({observation.expert}): {findings}\n"
        "Is the observation consistent with the prediction? "
        "Answer only YES or NO."
    )
    return (ChatMessage("user", user),)


def synthesis_prompt(state: DiagnosticState) -> tuple[ChatMessage, ...]:
    system = (
        "You write the diagnostic conclusion. Consolidate the working "
        "diagnoses and accumulated findings into a report. List acute "
        "problems under primary_diagnoses and chronic or background "
        "conditions under secondary_diagnoses. Never include anything "
        "already ruled out."
    )
    user = (
        "PATIENT PROFILE:\n" + render_profile(state.profile)
        + "\n\nCASE ABSTRACT:\n" + render_abstract(state.abstract)
        + "\n\nWORKING DIAGNOSES:\n" + _render_working(state)
        + "\n\nKEY FINDINGS:\n" + _bullets(state.key_findings)
        + "\n\nRULED OUT:\n" + _bullets(state.ruled_out)
        + "\n\nReturn one JSON object: " + _REPORT_SHAPE
        + "\nConfidence values are between 0 and 1. primary_diagnoses must "
        "not be empty."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def baseline_prompt(raw_text: str) -> tuple[ChatMessage, ...]:
    system = (
        "You are a diagnostician. Read the case and produce your best "
        "diagnostic report in a single pass."
    )
    user = (
        f"CASE:\n{raw_text}\n\nReturn one JSON object: {_REPORT_SHAPE}\n"
        "Confidence values are between 0 and 1. primary_diagnoses must not "
        "be empty."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def reflection_prompt(state: DiagnosticState, draft: DraftReport) -> tuple[ChatMessage, ...]:
    system = (
        "You are the quality reviewer. Check the draft report for internal "
        "coherence: does every diagnosis follow from the key findings, and "
        "is anything important unexplained? Fail the draft when the evidence "
        "does not support it."
    )
    user = (
        "KEY FINDINGS:\n" + _bullets(state.key_findings)
        + "\n\nDRAFT REPORT:\n" + json.dumps(draft.to_dict(), ensure_ascii=False, indent=2)
        + "\n\nReturn one JSON object: {\"passed\": true, \"feedback\": \"...\"}. "
        "When passed is false, feedback must say what to investigate next."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def judge_prompt(state: DiagnosticState, draft: DraftReport) -> tuple[ChatMessage, ...]:
    system = (
        "You are the gatekeeper reviewing a draft diagnostic report. Label "
        "every listed diagnosis Confident, Ambiguous, or Incorrect. "
        "Ambiguous means the evidence neither confirms nor excludes it; "
        "each Ambiguous label needs a written ambiguity point naming that "
        "diagnosis. Incorrect diagnoses you want dropped go in "
        "diagnoses_to_remove."
    )
    names = [d.disease_name for d in draft.primary_diagnoses + draft.secondary_diagnoses]
    user = (
        "PATIENT PROFILE:\n" + render_profile(state.profile)
        + "\n\nCASE ABSTRACT:\n" + render_abstract(state.abstract)
        + "\n\nKEY FINDINGS:\n" + _bullets(state.key_findings)
        + "\n\nDRAFT REPORT:\n" + json.dumps(draft.to_dict(), ensure_ascii=False, indent=2)
        + "\n\nReturn one JSON object: {\"status\": {name: \"Confident\"|"
        "\"Ambiguous\"|\"Incorrect\"}, \"ambiguity_points\": [\"...\"], "
        "\"diagnoses_to_remove\": [\"...\"]}. status must cover exactly "
        f"these names: {json.dumps(names, ensure_ascii=False)}. Only "
        "Incorrect diagnoses may appear in diagnoses_to_remove."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def angel_prompt(diagnoses: list[str], key_findings: list[str]) -> tuple[ChatMessage, ...]:
    system = (
        "You are the Angel advocate in a clinical debate. Defend each "
        "contested diagnosis: argue why it is clinically vital or an "
        "important risk factor, citing the findings and the harm of "
        "dropping it."
    )
    user = (
        "CONTESTED DIAGNOSES:\n" + _bullets(diagnoses)
        + "\n\nKEY FINDINGS:\n" + _bullets(key_findings)
        + "\n\nReturn one JSON object: {\"arguments\": {diagnosis name: "
        "\"your defense\"}} covering every contested diagnosis."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def devil_prompt(diagnoses: list[str], key_findings: list[str]) -> tuple[ChatMessage, ...]:
    system = (
        "You are the Devil, the ruthless skeptic in a clinical debate. "
        "Attack each contested diagnosis:\n"
        "- Ask so what: would dropping it change management at all?\n"
        "- Is it a symptom wearing the mask of a disease, already explained "
        "by another diagnosis on the list?\n"
        "- Is it incidental or too minor to report?\n"
        "- Does it duplicate or overlap another listed diagnosis?\n"
        "When a finding points to an underlying chronic disease, do NOT "
        "argue to discard it; argue to rename it to the underlying disease. "
        "Open each attack with DISCARD or MODIFY and give the reason."
    )
    user = (
        "CONTESTED DIAGNOSES:\n" + _bullets(diagnoses)
        + "\n\nKEY FINDINGS:\n" + _bullets(key_findings)
        + "\n\nReturn one JSON object: {\"arguments\": {diagnosis name: "
        "\"DISCARD: ... or MODIFY: ...\"}} covering every contested diagnosis."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def rebuttal_prompt(role: str, opposing: dict[str, str]) -> tuple[ChatMessage, ...]:
    if role == "Angel":
        system = (
            "You are the Angel advocate. Rebut the Devil's attack on each "
            "diagnosis: if the attack dismisses real clinical danger, say "
            "exactly what harm follows from dropping it."
        )
    else:
        system = (
            "You are the Devil, the ruthless skeptic. Rebut the Angel's "
            "defense of each diagnosis: if the defense overstates "
            "significance, say why the diagnosis still fails to matter."
        )
    rendered = "\n".join(f"- {name}: {argument}" for name, argument in opposing.items())
    user = (
        "OPPOSING ARGUMENTS:\n" + rendered
        + "\n\nReturn one JSON object: {\"rebuttals\": {diagnosis name: "
        "\"your rebuttal\"}} covering every diagnosis argued above."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def arbiter_prompt(
    diagnoses: list[str],
    transcript_lines: list[str],
    key_findings: list[str],
) -> tuple[ChatMessage, ...]:
    system = (
        "You are the final arbiter of a two-round clinical debate. Weigh "
        "both sides and rule on each contested diagnosis: Keep it, Discard "
        "it, or Modify it to a better name (for example when a finding "
        "should be renamed to its underlying disease)."
    )
    user = (
        "CONTESTED DIAGNOSES:\n" + _bullets(diagnoses)
        + "\n\nKEY FINDINGS:\n" + _bullets(key_findings)
        + "\n\nDEBATE SO FAR:\n" + "\n".join(transcript_lines)
        + "\n\nReturn one JSON object: {\"debate_transcript\": \"one-paragraph "
        "summary\", \"final_verdicts\": {diagnosis name: \"Keep\" | "
        "\"Discard\" | \"Modify: New Name\"}, \"confidence_updates\": "
        "{diagnosis name: 0.0}}. final_verdicts must cover exactly the "
        "contested diagnoses; confidence_updates is optional and only for "
        "kept diagnoses."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def finalize_prompt(report: DraftReport, profile: PatientProfile) -> tuple[ChatMessage, ...]:
    system = (
        "You are the terminology standardizer. Map every diagnosis to its "
        "standard name and ICD-10 code. Strictly separate the lists: acute "
        "problems of this encounter are primary, chronic or background "
        "conditions are secondary. Do not add or drop diagnoses except to "
        "move them between the two lists."
    )
    user = (
        "PATIENT PROFILE:\n" + render_profile(profile)
        + "\n\nREPORT TO STANDARDIZE:\n"
        + json.dumps(report.to_dict(), ensure_ascii=False, indent=2)
        + "\n\nReturn one JSON object: " + _REPORT_SHAPE
        + "\nEvery diagnosis needs a non-empty icd10_code. A name must not "
        "appear in both lists."
    )
    return (ChatMessage("system", system), ChatMessage("user", user))
