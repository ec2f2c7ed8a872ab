"""Semantic set-matching metrics over predicted vs reference diagnoses.

Two matching families: greedy matching at a similarity threshold (the STS
scores) and an exact Hungarian assignment (the soft scores), plus a
primary-diagnosis accuracy check and run-level aggregation.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .case_model import Dataset
from .errors import MissingReferenceError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.7

# Similarity assigned to padding cells when squaring a rectangular matrix;
# low enough that no real pairing ever loses to a padded one.
PAD_SENTINEL = -1e9


def similarity_matrix(pred: list[str], ref: list[str], backend) -> np.ndarray:
    """Rows are predictions, columns are references."""
    if not pred or not ref:
        return np.zeros((len(pred), len(ref)), dtype=np.float64)
    vectors = backend.embed(list(pred) + list(ref))
    p = vectors[: len(pred)]
    r = vectors[len(pred):]
    p_norm = np.linalg.norm(p, axis=1, keepdims=True)
    r_norm = np.linalg.norm(r, axis=1, keepdims=True)
    p = np.divide(p, p_norm, out=np.zeros_like(p), where=p_norm != 0)
    r = np.divide(r, r_norm, out=np.zeros_like(r), where=r_norm != 0)
    return np.clip(p @ r.T, -1.0, 1.0)


def greedy_match(matrix: np.ndarray, threshold: float) -> list[tuple[int, int, float]]:
    """Repeatedly take the best remaining entry at or above the threshold.

    Ties go to the lowest row index, then the lowest column index; a matched
    entry removes its whole row and column.
    """
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must be within [0, 1]")
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0:
        return []
    work = matrix.copy()
    matches: list[tuple[int, int, float]] = []
    blocked = PAD_SENTINEL
    while True:
        best = work.max()
        if best < threshold:
            break
        # argwhere scans row-major, so the first hit is the tie-break winner.
        row, col = np.argwhere(work == best)[0]
        matches.append((int(row), int(col), float(matrix[row, col])))
        work[row, :] = blocked
        work[:, col] = blocked
    return matches


def _solve_square_min(cost: np.ndarray) -> list[int]:
    """Exact minimum-cost square assignment; returns row index per column."""
    n = cost.shape[0]
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    assigned = [0] * (n + 1)  # assigned[j] = row (1-based) matched to column j
    for i in range(1, n + 1):
        assigned[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        way = [0] * (n + 1)
        while True:
            used[j0] = True
            i0 = assigned[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[assigned[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if assigned[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            assigned[j0] = assigned[j1]
            j0 = j1
    return assigned


def hungarian(matrix: np.ndarray) -> list[tuple[int, int]]:
    """Assignment of size min(rows, cols) maximizing total similarity.

    Rectangular input is padded square with a huge negative sentinel; padded
    pairings are dropped from the result.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0:
        return []
    rows, cols = matrix.shape
    n = max(rows, cols)
    padded = np.full((n, n), PAD_SENTINEL, dtype=np.float64)
    padded[:rows, :cols] = matrix
    assigned = _solve_square_min(-padded)
    pairs = [
        (assigned[j] - 1, j - 1)
        for j in range(1, n + 1)
        if assigned[j] - 1 < rows and j - 1 < cols
    ]
    pairs.sort()
    return pairs


@dataclass(frozen=True)
class SetScores:
    precision: float
    recall: float
    f1: float
    matched: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "matched": self.matched,
        }


def _harmonic(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


_ZERO_SCORES = SetScores(precision=0.0, recall=0.0, f1=0.0, matched=0)


def sts_scores(
    pred: list[str], ref: list[str], backend, threshold: float = DEFAULT_THRESHOLD
) -> SetScores:
    """Greedy threshold matching: counts matched pairs."""
    if not ref:
        raise ValueError("reference set is empty")
    if not pred:
        return _ZERO_SCORES
    matches = greedy_match(similarity_matrix(pred, ref, backend), threshold)
    matched = len(matches)
    precision = matched / len(pred)
    recall = matched / len(ref)
    return SetScores(precision, recall, _harmonic(precision, recall), matched)


def soft_scores(
    pred: list[str],
    ref: list[str],
    backend,
    mode: str = "soft",
    threshold: float = DEFAULT_THRESHOLD,
) -> SetScores:
    """Hungarian matching; 'soft' credits the summed similarity of the
    optimal assignment, 'thresholded' counts its pairs at the threshold."""
    if mode not in ("soft", "thresholded"):
        raise ValueError(f"unknown soft-score mode: {mode!r}")
    if not ref:
        raise ValueError("reference set is empty")
    if not pred:
        return _ZERO_SCORES
    matrix = similarity_matrix(pred, ref, backend)
    pairs = hungarian(matrix)
    clamped = [min(1.0, max(0.0, float(matrix[r, c]))) for r, c in pairs]
    matched = sum(1 for score in clamped if score >= threshold)
    total = matched if mode == "thresholded" else sum(clamped)
    precision = total / len(pred)
    recall = total / len(ref)
    return SetScores(precision, recall, _harmonic(precision, recall), matched)


def primary_accuracy(
    pred_primary: str, ref_primary: str, backend, threshold: float = DEFAULT_THRESHOLD
) -> bool:
    if not pred_primary.strip() or not ref_primary.strip():
        raise ValueError("primary diagnosis names must be non-empty")
    matrix = similarity_matrix([pred_primary], [ref_primary], backend)
    return float(matrix[0, 0]) >= threshold


@dataclass(frozen=True)
class CaseEval:
    case_id: str
    primary_correct: bool
    sts: SetScores
    soft: SetScores
    n_predicted: int

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "primary_correct": self.primary_correct,
            "sts": self.sts.to_dict(),
            "soft": self.soft.to_dict(),
            "n_predicted": self.n_predicted,
        }


@dataclass(frozen=True)
class MetricsReport:
    n_cases: int
    n_failures: int
    primary_accuracy: float
    sts_precision: float
    sts_recall: float
    sts_f1: float
    soft_precision: float
    soft_recall: float
    soft_f1: float
    average_diagnosis: float
    per_case: tuple[CaseEval, ...]

    def to_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "n_failures": self.n_failures,
            "primary_accuracy": self.primary_accuracy,
            "sts_precision": self.sts_precision,
            "sts_recall": self.sts_recall,
            "sts_f1": self.sts_f1,
            "soft_precision": self.soft_precision,
            "soft_recall": self.soft_recall,
            "soft_f1": self.soft_f1,
            "average_diagnosis": self.average_diagnosis,
        }


def predicted_names(report_dict: dict) -> list[str]:
    """Primary then secondary names, deduplicated case-insensitively."""
    names: list[str] = []
    seen: set[str] = set()
    for slot in ("primary_diagnoses", "secondary_diagnoses"):
        for entry in report_dict.get(slot) or []:
            name = str(entry.get("disease_name", "")).strip()
            if name and name.lower() not in seen:
                seen.add(name.lower())
                names.append(name)
    return names


def evaluate_run(
    results,
    references: Dataset,
    backend,
    threshold: float = DEFAULT_THRESHOLD,
    soft_mode: str = "soft",
) -> MetricsReport:
    """Score every completed session against its reference diagnoses.

    Failed sessions are excluded from the means and counted separately.
    results may be SessionResult objects or their to_dict() forms.
    """
    evals: list[CaseEval] = []
    n_failures = 0
    for result in results:
        entry = result if isinstance(result, dict) else result.to_dict()
        case_id = entry["case_id"]
        case = references.case_by_id(case_id)
        if case is None:
            raise MissingReferenceError(case_id)
        if entry["outcome"] != "completed" or not entry.get("final_report"):
            n_failures += 1
            continue
        report = entry["final_report"]
        pred = predicted_names(report)
        ref = [label.name for label in case.reference.all]
        primaries = report.get("primary_diagnoses") or []
        if primaries:
            correct = primary_accuracy(
                str(primaries[0].get("disease_name", "")),
                case.reference.primary.name,
                backend,
                threshold,
            )
        else:
            correct = False
        evals.append(CaseEval(
            case_id=case_id,
            primary_correct=correct,
            sts=sts_scores(pred, ref, backend, threshold),
            soft=soft_scores(pred, ref, backend, soft_mode, threshold),
            n_predicted=len(pred),
        ))

    def mean(values: list[float]) -> float:
        return float(sum(values) / len(values)) if values else 0.0

    return MetricsReport(
        n_cases=len(evals),
        n_failures=n_failures,
        primary_accuracy=mean([1.0 if e.primary_correct else 0.0 for e in evals]),
        sts_precision=mean([e.sts.precision for e in evals]),
        sts_recall=mean([e.sts.recall for e in evals]),
        sts_f1=mean([e.sts.f1 for e in evals]),
        soft_precision=mean([e.soft.precision for e in evals]),
        soft_recall=mean([e.soft.recall for e in evals]),
        soft_f1=mean([e.soft.f1 for e in evals]),
        average_diagnosis=mean([float(e.n_predicted) for e in evals]),
        per_case=tuple(evals),
    )


CSV_COLUMNS = (
    "case_id", "primary_correct",
    "sts_p", "sts_r", "sts_f1",
    "soft_p", "soft_r", "soft_f1",
    "n_predicted",
)


def write_case_csv(report: MetricsReport, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for e in report.per_case:
            writer.writerow([
                e.case_id,
                "true" if e.primary_correct else "false",
                f"{e.sts.precision:.6f}", f"{e.sts.recall:.6f}", f"{e.sts.f1:.6f}",
                f"{e.soft.precision:.6f}", f"{e.soft.recall:.6f}", f"{e.soft.f1:.6f}",
                e.n_predicted,
            ])
