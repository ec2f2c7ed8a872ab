"""Shared test scaffolding: the cardiac fixture set, scripted-response
builders for the scenario variants, and canned backends for repair loops."""

from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path

import pytest

from dxchain.anchoring import ClinicalAbstract, PatientProfile, StructuredRecord
from dxchain.case_model import load_cases, split_retrieval_corpus
from dxchain.gateway import ChatResponse, Gateway, ScriptedBackend, load_fixture
from dxchain.navigation import DiagnosticState, NavigationConfig
from dxchain.orchestrator import RunConfig, run_batch

FIXTURES = Path(__file__).parent / "fixtures"

GOLDEN_CASE_ID = "C101"
GOLDEN_FIXTURE_PATH = FIXTURES / "golden_session.fixture.jsonl"
GOLDEN_REPORT_PATH = FIXTURES / "golden_final_report.json"
GOLDEN_SEQUENCE_PATH = FIXTURES / "golden_node_sequence.json"
CASES_PATH = FIXTURES / "cardiac_cases.jsonl"
ABSTRACTS_PATH = FIXTURES / "cardiac_abstracts.json"


def j(obj) -> str:
    return json.dumps(obj)


# ---------------------------------------------------------------------------
# Canned domain objects


def build_record(**overrides) -> StructuredRecord:
    values = dict(
        chief_complaint="Crushing substernal chest pain",
        hpi="90 minutes of chest pain radiating to the left arm",
        physical_exam=("Diaphoretic", "No chest wall tenderness"),
        labs=("Troponin I 2.3 ng/mL elevated",),
        imaging=("ECG with inferior ST elevation",),
        medications=("Lisinopril", "Atorvastatin"),
        past_medical_history=("Hypertension", "Hyperlipidemia"),
        vitals=("BP 158/94", "HR 96"),
    )
    values.update(overrides)
    return StructuredRecord(**values)


def build_state(**overrides) -> DiagnosticState:
    values = dict(
        profile=PatientProfile(
            acute=("Acute chest pain",),
            chronic=("Hypertension",),
            risk=("Current smoker",),
        ),
        abstract=ClinicalAbstract(
            chief_complaint_hpi="Chest pain for 90 minutes",
            positive_findings=("Troponin elevated",),
            pertinent_negatives=("Chest x-ray normal",),
            history_meds=("On a statin",),
        ),
        record=build_record(),
    )
    values.update(overrides)
    return DiagnosticState(**values)


def scripted_gateway(fixture: dict[tuple[str, int], str], recorder=None) -> Gateway:
    return Gateway(ScriptedBackend(fixture), recorder=recorder)


class QueueBackend:
    """Serves responses in order regardless of key; for repair-loop tests."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []

    def send(self, request):
        self.requests.append(request)
        if not self.responses:
            raise AssertionError("queue backend ran out of scripted responses")
        return ChatResponse(text=self.responses.pop(0))


# ---------------------------------------------------------------------------
# Golden session


def golden_fixture() -> dict[tuple[str, int], str]:
    return load_fixture(GOLDEN_FIXTURE_PATH)


def golden_report_dict() -> dict:
    return json.loads(GOLDEN_REPORT_PATH.read_text(encoding="utf-8"))


def golden_sequence() -> list[str]:
    return json.loads(GOLDEN_SEQUENCE_PATH.read_text(encoding="utf-8"))


def golden_dataset():
    return split_retrieval_corpus(load_cases(CASES_PATH), 2)


def golden_config(**overrides) -> RunConfig:
    values = dict(
        backend_kind="scripted",
        fixture_path=str(GOLDEN_FIXTURE_PATH),
        navigation=NavigationConfig(),
        retrieval_enabled=True,
        retrieval_k=2,
        abstracts_path=str(ABSTRACTS_PATH),
    )
    values.update(overrides)
    return RunConfig(**values)


def run_golden(fixture=None, **config_overrides):
    """Run the golden case and return its SessionResult."""
    dataset = golden_dataset()
    config = golden_config(**config_overrides)
    fixtures = {GOLDEN_CASE_ID: golden_fixture() if fixture is None else fixture}
    return run_batch(dataset, config, fixtures=fixtures)[0]


# ---------------------------------------------------------------------------
# Scenario variants built on the golden case

SIMPLE_DRAFT = {
    "primary_diagnoses": [
        {
            "disease_name": "Acute inferior myocardial infarction",
            "icd10_code": "",
            "reasoning": "Inferior ST elevation with elevated troponin",
            "confidence": 0.9,
        }
    ],
    "secondary_diagnoses": [
        {
            "disease_name": "Essential hypertension",
            "icd10_code": "",
            "reasoning": "Long-standing hypertension on lisinopril",
            "confidence": 0.8,
        }
    ],
    "treatment_recommendations": ["Urgent reperfusion evaluation"],
}

SIMPLE_FINAL = {
    "primary_diagnoses": [
        {
            "disease_name": "Acute inferior myocardial infarction",
            "icd10_code": "I21.19",
            "reasoning": "Inferior ST elevation with elevated troponin",
            "confidence": 0.9,
        }
    ],
    "secondary_diagnoses": [
        {
            "disease_name": "Essential hypertension",
            "icd10_code": "I10",
            "reasoning": "Long-standing hypertension on lisinopril",
            "confidence": 0.8,
        }
    ],
    "treatment_recommendations": ["Urgent reperfusion evaluation"],
}

SIMPLE_JUDGE = {
    "status": {
        "Acute inferior myocardial infarction": "Confident",
        "Essential hypertension": "Confident",
    },
    "ambiguity_points": [],
    "diagnoses_to_remove": [],
}

_LOOP_PLAN = {
    "strategies": [
        {
            "archetype": "Broad",
            "name": "Survey the presentation",
            "description": "Review the clinical picture for leading causes.",
            "first_step_actions": ["clinical_specialist"],
            "expected_outcome": "The presentation pattern narrows the differential",
        },
        {
            "archetype": "Focused",
            "name": "Chase the leading cause",
            "description": "Probe the current best explanation.",
            "first_step_actions": ["clinical_specialist"],
            "expected_outcome": "Supporting features of the leading diagnosis",
        },
    ],
    "ready_to_synthesize": False,
}

_LOOP_OBSERVATION = {
    "content": "The ischemic pattern persists; nothing redirects the differential.",
    "extracted_findings": [],
}


def turn_budget_fixture(max_turns: int = 20) -> dict[tuple[str, int], str]:
    """Planner never signals completion; only the budget ends navigation."""
    base = golden_fixture()
    fixture = {
        ("perception", 0): base[("perception", 0)],
        ("profile", 0): base[("profile", 0)],
        ("summary", 0): base[("summary", 0)],
    }
    for turn in range(max_turns):
        fixture[("plan", turn)] = j(_LOOP_PLAN)
        fixture[("expert.clinical_specialist", turn)] = j(_LOOP_OBSERVATION)
        fixture[("expect_check.clinical_specialist", turn)] = "YES"
    fixture[("synthesis", max_turns)] = j(SIMPLE_DRAFT)
    fixture[("reflection", max_turns)] = j({"passed": True, "feedback": ""})
    fixture[("judge", max_turns)] = j(SIMPLE_JUDGE)
    fixture[("finalize", max_turns)] = j(SIMPLE_FINAL)
    return fixture


GATING_DRAFT = {
    "primary_diagnoses": [
        {
            "disease_name": "Acute inferior myocardial infarction",
            "icd10_code": "",
            "reasoning": "Inferior ST elevation with elevated troponin",
            "confidence": 0.9,
        }
    ],
    "secondary_diagnoses": [
        {
            "disease_name": "Essential hypertension",
            "icd10_code": "",
            "reasoning": "Documented hypertension on treatment",
            "confidence": 0.6,
        },
        {
            "disease_name": "Elevated troponin",
            "icd10_code": "",
            "reasoning": "Marked biomarker abnormality",
            "confidence": 0.5,
        },
        {
            "disease_name": "Pleural effusion",
            "icd10_code": "",
            "reasoning": "Possible blunting on the radiograph",
            "confidence": 0.4,
        },
        {
            "disease_name": "Anemia",
            "icd10_code": "",
            "reasoning": "Suggested by pallor",
            "confidence": 0.3,
        },
    ],
    "treatment_recommendations": ["Urgent reperfusion evaluation"],
}

GATING_JUDGE = {
    "status": {
        "Acute inferior myocardial infarction": "Confident",
        "Essential hypertension": "Ambiguous",
        "Elevated troponin": "Ambiguous",
        "Pleural effusion": "Ambiguous",
        "Anemia": "Incorrect",
    },
    "ambiguity_points": [
        "Essential hypertension, elevated troponin, and pleural effusion all "
        "rest on thin or indirect documentation in this record.",
    ],
    "diagnoses_to_remove": ["Anemia"],
}

_GATING_DEBATED = ["Essential hypertension", "Elevated troponin", "Pleural effusion"]

GATING_ARBITER = {
    "debate_transcript": "The panel weighed documentation strength for each "
    "contested entry and ruled on all three.",
    "final_verdicts": {
        "Essential hypertension": "Keep",
        "Elevated troponin": "Discard",
        "Pleural effusion": "Modify: Congestive heart failure",
    },
    "confidence_updates": {"Essential hypertension": 0.8},
}

GATING_FINAL = {
    "primary_diagnoses": [
        {
            "disease_name": "Acute inferior myocardial infarction",
            "icd10_code": "I21.19",
            "reasoning": "Inferior ST elevation with elevated troponin",
            "confidence": 0.9,
        }
    ],
    "secondary_diagnoses": [
        {
            "disease_name": "Essential hypertension",
            "icd10_code": "I10",
            "reasoning": "Documented hypertension on treatment",
            "confidence": 0.8,
        },
        {
            "disease_name": "Congestive heart failure",
            "icd10_code": "I50.9",
            "reasoning": "The effusion finding is better explained by pump failure",
            "confidence": 0.4,
        },
    ],
    "treatment_recommendations": ["Urgent reperfusion evaluation"],
}


def _argument_map(names, text_fn) -> dict:
    return {name: text_fn(name) for name in names}


def gating_fixture() -> dict[tuple[str, int], str]:
    """One navigation turn, then a judge split across all three statuses."""
    base = golden_fixture()
    plan = json.loads(base[("plan", 0)])
    plan["ready_to_synthesize"] = True
    plan["working_diagnoses"] = []
    plan["ruled_out"] = []
    fixture = {
        ("perception", 0): base[("perception", 0)],
        ("profile", 0): base[("profile", 0)],
        ("summary", 0): base[("summary", 0)],
        ("plan", 0): j(plan),
        ("select", 0): base[("select", 0)],
        ("expert.diagnostic_test_specialist", 0): base[("expert.diagnostic_test_specialist", 0)],
        ("expert.clinical_specialist", 0): base[("expert.clinical_specialist", 0)],
        ("expect_check.diagnostic_test_specialist", 0): "YES",
        ("expect_check.clinical_specialist", 0): "YES",
        ("synthesis", 1): j(GATING_DRAFT),
        ("reflection", 1): j({"passed": True, "feedback": ""}),
        ("judge", 1): j(GATING_JUDGE),
        ("debate.angel", 1): j({
            "arguments": _argument_map(
                _GATING_DEBATED, lambda n: f"{n} is supported by the record and matters for care."
            )
        }),
        ("debate.devil", 1): j({
            "arguments": _argument_map(
                _GATING_DEBATED, lambda n: f"DISCARD: {n} lacks direct documentation here."
            )
        }),
        ("debate.angel_rebuttal", 1): j({
            "rebuttals": _argument_map(
                _GATING_DEBATED, lambda n: f"The attack on {n} ignores the treatment context."
            )
        }),
        ("debate.devil_rebuttal", 1): j({
            "rebuttals": _argument_map(
                _GATING_DEBATED, lambda n: f"The defense of {n} still cites no measurement."
            )
        }),
        ("debate.arbiter", 1): j(GATING_ARBITER),
        ("finalize", 1): j(GATING_FINAL),
    }
    return fixture


def ablation_fixture() -> dict[tuple[str, int], str]:
    """One response set serving all four phase combinations."""
    base = golden_fixture()
    plan = json.loads(j(_LOOP_PLAN))
    plan["ready_to_synthesize"] = True
    return {
        ("baseline", 0): j(SIMPLE_DRAFT),
        ("perception", 0): base[("perception", 0)],
        ("profile", 0): base[("profile", 0)],
        ("summary", 0): base[("summary", 0)],
        ("synthesis", 0): j(SIMPLE_DRAFT),
        ("plan", 0): j(plan),
        ("expert.clinical_specialist", 0): j(_LOOP_OBSERVATION),
        ("expect_check.clinical_specialist", 0): "YES",
        ("synthesis", 1): j(SIMPLE_DRAFT),
        ("reflection", 1): j({"passed": True, "feedback": ""}),
        ("judge", 1): j(SIMPLE_JUDGE),
        ("finalize", 0): j(SIMPLE_FINAL),
        ("finalize", 1): j(SIMPLE_FINAL),
    }


# ---------------------------------------------------------------------------
# Batch scenario: eight single-turn cases for parallel determinism

BATCH_CONDITIONS = (
    ("B01", "Community-acquired pneumonia", "J18.9"),
    ("B02", "Acute pyelonephritis", "N10"),
    ("B03", "Cellulitis of the left leg", "L03.115"),
    ("B04", "Acute pancreatitis", "K85.90"),
    ("B05", "Deep vein thrombosis of the left leg", "I82.402"),
    ("B06", "Exacerbation of chronic obstructive pulmonary disease", "J44.1"),
    ("B07", "Gastroesophageal reflux disease", "K21.9"),
    ("B08", "Iron deficiency anemia", "D50.9"),
)


def batch_case_record(case_id: str, name: str, code: str) -> dict:
    return {
        "case_id": case_id,
        "raw_text": f"Adult patient with a presentation consistent with {name.lower()}; "
        "evaluation and response to treatment documented in the record.",
        "reference": {
            "primary": {"name": name, "icd10_code": code},
            "all": [{"name": name, "icd10_code": code}],
        },
        "source_tag": "synthetic-batch",
    }


def batch_case_fixture(name: str, code: str) -> dict[tuple[str, int], str]:
    report = {
        "primary_diagnoses": [
            {
                "disease_name": name,
                "icd10_code": "",
                "reasoning": f"Presentation and course typical of {name.lower()}",
                "confidence": 0.85,
            }
        ],
        "secondary_diagnoses": [],
        "treatment_recommendations": [f"Standard management of {name.lower()}"],
    }
    final = json.loads(j(report))
    final["primary_diagnoses"][0]["icd10_code"] = code
    return {
        ("perception", 0): j({
            "chief_complaint": f"Symptoms of {name.lower()}",
            "hpi": f"Course consistent with {name.lower()}",
            "physical_exam": [],
            "labs": [],
            "imaging": [],
            "medications": [],
            "past_medical_history": [],
            "vitals": [],
        }),
        ("profile", 0): j({"acute": [name], "chronic": [], "risk": []}),
        ("summary", 0): j({
            "chief_complaint_hpi": f"Presentation consistent with {name.lower()}",
            "positive_findings": [f"Findings typical of {name.lower()}"],
            "pertinent_negatives": [],
            "history_meds": [],
        }),
        ("synthesis", 0): j(report),
        ("finalize", 0): j(final),
    }


def batch_fixtures() -> dict[str, dict[tuple[str, int], str]]:
    return {
        case_id: batch_case_fixture(name, code)
        for case_id, name, code in BATCH_CONDITIONS
    }


def write_batch_files(directory: Path) -> tuple[Path, Path]:
    """Write the batch case file and batch fixture file; returns their paths."""
    cases_path = directory / "batch_cases.jsonl"
    with cases_path.open("w", encoding="utf-8") as fh:
        for case_id, name, code in BATCH_CONDITIONS:
            fh.write(j(batch_case_record(case_id, name, code)) + "\n")
    fixture_path = directory / "batch.fixture.jsonl"
    with fixture_path.open("w", encoding="utf-8") as fh:
        for case_id, fixture in batch_fixtures().items():
            for (tag, turn), response in sorted(fixture.items()):
                fh.write(j({
                    "case_id": case_id,
                    "node_tag": tag,
                    "turn_index": turn,
                    "response": response,
                }) + "\n")
    return cases_path, fixture_path


def batch_config(parallelism: int = 1) -> RunConfig:
    return RunConfig(
        backend_kind="scripted",
        phase1=True,
        phase2=False,
        phase3=False,
        parallelism=parallelism,
    )


# ---------------------------------------------------------------------------
# Acceptance reporting: one pass/fail line per criterion in the summary

ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion():
    @contextmanager
    def _criterion(number: int, label: str):
        try:
            yield
        except BaseException:
            ACCEPTANCE_RESULTS[number] = (label, "FAIL")
            raise
        else:
            ACCEPTANCE_RESULTS[number] = (label, "PASS")

    return _criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        label, status = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {label}")
