"""Stateful diagnostic-reasoning sessions over pluggable LLM backends.

A session anchors a raw clinical narrative into structured working memory,
navigates investigative strategies under a turn budget with expectation
checks, adjudicates the draft through judge gating and a selective
two-round debate, and emits a standardized final report.  A deterministic
scripted backend, JSONL traces, and replay verification make every run
reproducible; the evaluation half scores predicted diagnosis sets with
greedy threshold matching and exact Hungarian assignment.
"""

from .case_model import (
    Dataset,
    DiagnosisLabel,
    RawCase,
    ReferenceDiagnoses,
    load_cases,
    save_cases,
    split_retrieval_corpus,
)
from .errors import DxChainError
from .gateway import Gateway, RemoteBackend, ScriptedBackend
from .orchestrator import (
    NodeId,
    RunConfig,
    Session,
    SessionResult,
    load_trace,
    replay_session,
    run_batch,
    run_case,
    save_trace,
)
from .evaluation import evaluate_run, greedy_match, hungarian, primary_accuracy
from .embedding import MockEmbedder

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DiagnosisLabel",
    "DxChainError",
    "Gateway",
    "MockEmbedder",
    "NodeId",
    "RawCase",
    "ReferenceDiagnoses",
    "RemoteBackend",
    "RunConfig",
    "ScriptedBackend",
    "Session",
    "SessionResult",
    "evaluate_run",
    "greedy_match",
    "hungarian",
    "load_cases",
    "load_trace",
    "primary_accuracy",
    "replay_session",
    "run_batch",
    "run_case",
    "save_cases",
    "save_trace",
    "split_retrieval_corpus",
    "__version__",
]
