"""Case and diagnosis data types plus dataset ingestion.

The canonical on-disk format is one JSON document per line:

    {"case_id": ..., "raw_text": ..., "reference": {"primary": {"name", "icd10_code"},
     "all": [{"name", "icd10_code"}, ...]}, "source_tag": ...}

A CSV adapter is provided for flat exports (see ``load_cases``).
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CaseValidationError, DatasetFormatError, DuplicateCaseIdError

# Letter + two digits, optional dotted alphanumeric suffix (e.g. I21.4, J18, S52.501A).
_ICD10_RE = re.compile(r"[A-Za-z]\d{2}(?:\.[A-Za-z0-9]{1,4})?")

_WS_RE = re.compile(r"\s+")


def normalize_name(name: str) -> str:
    """Trim and collapse internal whitespace; case is preserved."""
    return _WS_RE.sub(" ", name.strip())


@dataclass(frozen=True)
class DiagnosisLabel:
    name: str
    icd10_code: str | None = None

    def validate(self) -> list[str]:
        problems = []
        if not self.name:
            problems.append("diagnosis name is empty")
        if self.icd10_code is not None and not _ICD10_RE.fullmatch(self.icd10_code):
            problems.append(f"icd10_code {self.icd10_code!r} does not match the code pattern")
        return problems

    def to_dict(self) -> dict:
        return {"name": self.name, "icd10_code": self.icd10_code}


@dataclass(frozen=True)
class ReferenceDiagnoses:
    primary: DiagnosisLabel
    all: tuple[DiagnosisLabel, ...]

    def validate(self) -> list[str]:
        problems = self.primary.validate()
        if not self.all:
            problems.append("reference diagnosis list is empty")
        for label in self.all:
            problems.extend(label.validate())
        names = {label.name.lower() for label in self.all}
        if self.all and self.primary.name.lower() not in names:
            problems.append(
                f"primary diagnosis {self.primary.name!r} missing from the full list"
            )
        return problems

    def to_dict(self) -> dict:
        return {
            "primary": self.primary.to_dict(),
            "all": [label.to_dict() for label in self.all],
        }


@dataclass(frozen=True)
class RawCase:
    case_id: str
    raw_text: str
    reference: ReferenceDiagnoses
    source_tag: str = ""

    def validate(self) -> list[str]:
        problems = []
        if not self.case_id:
            problems.append("case_id is empty")
        if not self.raw_text.strip():
            problems.append("raw_text is empty")
        problems.extend(self.reference.validate())
        return problems

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "raw_text": self.raw_text,
            "reference": self.reference.to_dict(),
            "source_tag": self.source_tag,
        }


@dataclass(frozen=True)
class Dataset:
    """Test cases plus an optional held-out retrieval corpus.

    A case_id never appears in both partitions; this is checked on
    construction so every Dataset in the program satisfies it.
    """

    cases: tuple[RawCase, ...]
    retrieval_corpus: tuple[RawCase, ...] = ()
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        seen: set[str] = set()
        for case in self.cases + self.retrieval_corpus:
            if case.case_id in seen:
                raise DuplicateCaseIdError(case.case_id)
            seen.add(case.case_id)

    def __len__(self) -> int:
        return len(self.cases) + len(self.retrieval_corpus)

    def case_by_id(self, case_id: str) -> RawCase | None:
        for case in self.cases + self.retrieval_corpus:
            if case.case_id == case_id:
                return case
        return None


def _label_from_dict(raw: object, problems: list[str], slot: str) -> DiagnosisLabel:
    if not isinstance(raw, dict):
        problems.append(f"{slot}: expected an object, got {type(raw).__name__}")
        return DiagnosisLabel(name="")
    name = raw.get("name", "")
    if not isinstance(name, str):
        problems.append(f"{slot}: name must be a string")
        name = ""
    code = raw.get("icd10_code")
    if code is not None and not isinstance(code, str):
        problems.append(f"{slot}: icd10_code must be a string or null")
        code = None
    return DiagnosisLabel(name=normalize_name(name), icd10_code=code or None)


def validate_case(raw: dict) -> RawCase:
    """Build a RawCase from an untyped record, aggregating every violation."""
    problems: list[str] = []
    for key in ("case_id", "raw_text", "reference"):
        if key not in raw:
            problems.append(f"missing field: {key}")
    if problems:
        raise CaseValidationError(problems)

    reference_raw = raw["reference"]
    if not isinstance(reference_raw, dict) or "primary" not in reference_raw:
        problems.append("reference must be an object with primary and all")
        raise CaseValidationError(problems)

    primary = _label_from_dict(reference_raw["primary"], problems, "reference.primary")
    all_labels = tuple(
        _label_from_dict(entry, problems, f"reference.all[{i}]")
        for i, entry in enumerate(reference_raw.get("all", []))
    )
    case = RawCase(
        case_id=str(raw["case_id"]).strip(),
        raw_text=str(raw["raw_text"]),
        reference=ReferenceDiagnoses(primary=primary, all=all_labels),
        source_tag=str(raw.get("source_tag", "")),
    )
    problems.extend(case.validate())
    if problems:
        raise CaseValidationError(problems)
    return case


def _record_from_csv_row(row: dict) -> dict:
    def split(col: str) -> list[str]:
        value = (row.get(col) or "").strip()
        return [part.strip() for part in value.split(";")] if value else []

    names = split("all_names")
    codes = split("all_icd10")
    codes += [""] * (len(names) - len(codes))
    return {
        "case_id": row.get("case_id", ""),
        "raw_text": row.get("raw_text", ""),
        "reference": {
            "primary": {
                "name": row.get("primary_name", ""),
                "icd10_code": (row.get("primary_icd10") or "").strip() or None,
            },
            "all": [
                {"name": name, "icd10_code": code or None}
                for name, code in zip(names, codes)
            ],
        },
        "source_tag": row.get("source_tag", ""),
    }


def load_cases(path: str | Path, format: str = "case-jsonl") -> Dataset:
    """Load a case file into a validated Dataset (corpus starts empty).

    Raises CaseValidationError naming the offending record index,
    DuplicateCaseIdError, or DatasetFormatError.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"case file not found: {path}")

    records: list[dict] = []
    if format == "case-jsonl":
        with path.open(encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DatasetFormatError(f"{path}:{line_no}: not valid JSON ({exc.msg})")
    elif format == "case-csv":
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"case_id", "raw_text", "primary_name", "all_names"}
            missing = required - set(reader.fieldnames or [])
            if missing:
                raise DatasetFormatError(
                    f"{path}: missing CSV columns: {', '.join(sorted(missing))}"
                )
            records = [_record_from_csv_row(row) for row in reader]
    else:
        raise DatasetFormatError(f"unknown case format: {format!r}")

    cases: list[RawCase] = []
    seen: set[str] = set()
    for index, record in enumerate(records):
        try:
            case = validate_case(record)
        except CaseValidationError as exc:
            raise CaseValidationError(exc.violations, record_index=index)
        if case.case_id in seen:
            raise DuplicateCaseIdError(case.case_id)
        seen.add(case.case_id)
        cases.append(case)
    return Dataset(cases=tuple(cases))


def save_cases(dataset: Dataset, path: str | Path) -> None:
    """Write all cases (test order first, then corpus) in canonical JSONL."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for case in dataset.cases + dataset.retrieval_corpus:
            fh.write(json.dumps(case.to_dict(), ensure_ascii=False) + "\n")


def split_retrieval_corpus(dataset: Dataset, n: int) -> Dataset:
    """Move the first ``n`` cases (file order) into the retrieval corpus."""
    if n < 0:
        raise ValueError(f"corpus size must be nonnegative, got {n}")
    if n > len(dataset.cases):
        raise ValueError(
            f"corpus size {n} exceeds the {len(dataset.cases)} available cases"
        )
    corpus = dataset.cases[:n]
    remaining = dataset.cases[n:]
    warnings = dataset.warnings
    if n and not remaining:
        warnings = warnings + ("empty test set: every case went to the retrieval corpus",)
    return Dataset(cases=remaining, retrieval_corpus=dataset.retrieval_corpus + corpus,
                   warnings=warnings)
