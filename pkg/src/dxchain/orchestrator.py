"""Session orchestration: runs the node graph over a case, with phase
toggles, bounded batch execution, JSONL traces, and trace replay.

The graph has exactly two backward edges: ExpectCheck back to Plan when an
expectation conflicts, and Reflection back to Plan when the draft fails
review.  Everything else flows forward.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from . import anchoring
from .adjudication import apply_verdicts, finalize, judge, run_debate
from .case_model import Dataset, DiagnosisLabel, RawCase, ReferenceDiagnoses
from .errors import (
    RetrievalError,
    SessionStepError,
    TraceParseError,
    TraceVersionError,
)
from .gateway import (
    Gateway,
    GatewayConfig,
    LLMBackend,
    RemoteBackend,
    ScriptedBackend,
    load_batch_fixture,
    load_fixture,
)
from .navigation import (
    DiagnosticState,
    ExpertAction,
    FlowDecision,
    NavigationConfig,
    apply_flow,
    baseline_draft,
    check_expectation,
    dispatch_expert,
    expand_strategies,
    reflect,
    select_strategy,
    synthesize,
)
from .prompts import render_abstract
from .reports import DraftReport, FinalReport
from .retrieval import build_index, retrieve

logger = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1


class NodeId(Enum):
    PERCEPTION = "Perception"
    PROFILING = "Profiling"
    SUMMARY = "Summary"
    RETRIEVE = "Retrieve"
    PLAN = "Plan"
    EXECUTE = "Execute"
    EXPECT_CHECK = "ExpectCheck"
    SYNTHESIS = "Synthesis"
    REFLECTION = "Reflection"
    JUDGE = "Judge"
    DEBATE = "Debate"
    FINALIZE = "Finalize"


@dataclass(frozen=True)
class SessionEvent:
    node: NodeId
    event: str  # "enter" | "exit"


@dataclass(frozen=True)
class RunConfig:
    backend_kind: str = "scripted"
    endpoint_url: str = ""
    model_id: str = ""
    fixture_path: str = ""
    temperature: float = 0.1
    max_inflight: int = 4
    retry_limit: int = 3
    backoff_base: float = 0.5
    navigation: NavigationConfig = field(default_factory=NavigationConfig)
    retrieval_enabled: bool = False
    retrieval_k: int = 3
    abstracts_path: str = ""
    phase1: bool = True
    phase2: bool = True
    phase3: bool = True
    parallelism: int = 1
    annotations: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backend_kind not in ("scripted", "remote"):
            raise ValueError(f"unknown backend kind: {self.backend_kind!r}")
        if self.phase2 and not self.phase1:
            raise ValueError("phase2 requires phase1: navigation needs the anchored state")
        if self.parallelism < 1:
            raise ValueError("parallelism must be at least 1")

    def to_flat(self) -> dict:
        nav = self.navigation
        return {
            "backend.kind": self.backend_kind,
            "backend.endpoint_url": self.endpoint_url,
            "backend.model_id": self.model_id,
            "backend.fixture_path": self.fixture_path,
            "backend.max_inflight": self.max_inflight,
            "backend.retry_limit": self.retry_limit,
            "backend.backoff_base": self.backoff_base,
            "temperature": self.temperature,
            "navigation.max_turns": nav.max_turns,
            "navigation.max_strategies": nav.max_strategies,
            "navigation.max_reflections": nav.max_reflections,
            "navigation.strategy_selection_mode": nav.strategy_selection_mode,
            "retrieval.enabled": self.retrieval_enabled,
            "retrieval.k": self.retrieval_k,
            "retrieval.abstracts_path": self.abstracts_path,
            "phase1.enabled": self.phase1,
            "phase2.enabled": self.phase2,
            "phase3.enabled": self.phase3,
            "parallelism": self.parallelism,
            "annotations": dict(self.annotations),
        }

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        known = set(cls().to_flat())
        unknown = set(flat) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")

        def get(key, default):
            return flat.get(key, default)

        navigation = NavigationConfig(
            max_turns=int(get("navigation.max_turns", 20)),
            max_strategies=int(get("navigation.max_strategies", 3)),
            max_reflections=int(get("navigation.max_reflections", 2)),
            strategy_selection_mode=str(get("navigation.strategy_selection_mode", "llm")),
        )
        return cls(
            backend_kind=str(get("backend.kind", "scripted")),
            endpoint_url=str(get("backend.endpoint_url", "")),
            model_id=str(get("backend.model_id", "")),
            fixture_path=str(get("backend.fixture_path", "")),
            temperature=float(get("temperature", 0.1)),
            max_inflight=int(get("backend.max_inflight", 4)),
            retry_limit=int(get("backend.retry_limit", 3)),
            backoff_base=float(get("backend.backoff_base", 0.5)),
            navigation=navigation,
            retrieval_enabled=bool(get("retrieval.enabled", False)),
            retrieval_k=int(get("retrieval.k", 3)),
            abstracts_path=str(get("retrieval.abstracts_path", "")),
            phase1=bool(get("phase1.enabled", True)),
            phase2=bool(get("phase2.enabled", True)),
            phase3=bool(get("phase3.enabled", True)),
            parallelism=int(get("parallelism", 1)),
            annotations=dict(get("annotations", {})),
        )


@dataclass
class SessionTrace:
    case_id: str
    header: dict
    events: list = field(default_factory=list)
    schema_version: int = TRACE_SCHEMA_VERSION

    def append(self, event: dict) -> None:
        self.events.append(event)

    def node_sequence(self) -> list[str]:
        return [
            e["node"] for e in self.events
            if e.get("kind") == "node" and e.get("event") == "enter"
        ]

    def final_report_dict(self) -> dict | None:
        for event in reversed(self.events):
            if event.get("kind") == "final_report":
                return event["report"]
        return None


def save_trace(trace: SessionTrace, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(trace.header, ensure_ascii=False) + "\n")
        for event in trace.events:
            fh.write(json.dumps(event, ensure_ascii=False) + "\n")


def load_trace(path: str | Path) -> SessionTrace:
    path = Path(path)
    header = None
    events = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(str(path), line_no, f"not valid JSON ({exc.msg})")
            if header is None:
                if entry.get("kind") != "header":
                    raise TraceParseError(str(path), line_no, "first line must be the header")
                if entry.get("schema_version") != TRACE_SCHEMA_VERSION:
                    raise TraceVersionError(entry.get("schema_version"), TRACE_SCHEMA_VERSION)
                header = entry
            else:
                events.append(entry)
    if header is None:
        raise TraceParseError(str(path), 0, "file is empty")
    return SessionTrace(
        case_id=header["case_id"], header=header, events=events,
        schema_version=header["schema_version"],
    )


@dataclass
class SessionResult:
    case_id: str
    outcome: str  # "completed" | "failed"
    final_report: FinalReport | None
    trace: SessionTrace
    usage: dict
    failure_reason: str = ""

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "outcome": self.outcome,
            "failure_reason": self.failure_reason,
            "final_report": self.final_report.to_dict() if self.final_report else None,
            "usage": dict(self.usage),
        }


def build_backend(config: RunConfig) -> LLMBackend:
    if config.backend_kind == "scripted":
        if not config.fixture_path:
            raise ValueError("scripted backend needs backend.fixture_path")
        return ScriptedBackend(load_fixture(config.fixture_path))
    if not config.endpoint_url or not config.model_id:
        raise ValueError("remote backend needs backend.endpoint_url and backend.model_id")
    return RemoteBackend(GatewayConfig(
        endpoint_url=config.endpoint_url,
        model_id=config.model_id,
        temperature=config.temperature,
        max_inflight=config.max_inflight,
        retry_limit=config.retry_limit,
        backoff_base=config.backoff_base,
    ))


class Session:
    """One case moving through the graph; drives itself via step() or run()."""

    def __init__(self, case: RawCase, config: RunConfig,
                 backend: LLMBackend | None = None, retriever=None):
        self.case = case
        self.config = config
        header = {
            "kind": "header",
            "schema_version": TRACE_SCHEMA_VERSION,
            "case_id": case.case_id,
            "case": {"case_id": case.case_id, "raw_text": case.raw_text},
            "config": config.to_flat(),
        }
        self.trace = SessionTrace(case_id=case.case_id, header=header)
        self.gateway = Gateway(backend or build_backend(config), recorder=self.trace.append)
        self._retriever = retriever
        self._iter = self._run_nodes()
        self._done = False
        self.final_report: FinalReport | None = None

    def step(self) -> SessionEvent:
        if self._done:
            raise SessionStepError("session already complete")
        try:
            return next(self._iter)
        except StopIteration:
            self._done = True
            raise SessionStepError("session already complete")
        except Exception:
            self._done = True
            raise

    def run(self) -> SessionResult:
        try:
            while True:
                try:
                    next(self._iter)
                except StopIteration:
                    break
            self._done = True
            return SessionResult(
                case_id=self.case.case_id, outcome="completed",
                final_report=self.final_report, trace=self.trace, usage=self._usage(),
            )
        except Exception as exc:
            self._done = True
            logger.warning("case %s failed: %s", self.case.case_id, exc)
            return SessionResult(
                case_id=self.case.case_id, outcome="failed", final_report=None,
                trace=self.trace, usage=self._usage(),
                failure_reason=f"{type(exc).__name__}: {exc}",
            )

    def _usage(self) -> dict:
        prompt = completion = calls = 0
        for event in self.trace.events:
            if event.get("kind") == "gateway":
                prompt += event["tokens"]["prompt"]
                completion += event["tokens"]["completion"]
                calls += 1
        return {"prompt": prompt, "completion": completion, "calls": calls}

    def _node(self, node: NodeId, event: str) -> SessionEvent:
        self.trace.append({"kind": "node", "event": event, "node": node.value})
        return SessionEvent(node=node, event=event)

    def _run_nodes(self):
        cfg = self.config
        gw = self.gateway
        raw = self.case.raw_text

        if not cfg.phase1:
            # Single-pass baseline: raw narrative straight to a draft.
            yield self._node(NodeId.SYNTHESIS, "enter")
            draft = baseline_draft(gw, raw)
            yield self._node(NodeId.SYNTHESIS, "exit")
            state = DiagnosticState(
                profile=anchoring.PatientProfile(),
                abstract=anchoring.ClinicalAbstract(chief_complaint_hpi=""),
                record=anchoring.StructuredRecord(),
            )
            yield from self._finalize(draft, state, banned=set())
            return

        yield self._node(NodeId.PERCEPTION, "enter")
        record = anchoring.perceive(gw, raw)
        yield self._node(NodeId.PERCEPTION, "exit")

        yield self._node(NodeId.PROFILING, "enter")
        patient_profile = anchoring.profile(gw, raw)
        yield self._node(NodeId.PROFILING, "exit")

        yield self._node(NodeId.SUMMARY, "enter")
        abstract = anchoring.summarize(gw, raw)
        yield self._node(NodeId.SUMMARY, "exit")

        retrieved = []
        if cfg.retrieval_enabled and self._retriever is not None:
            yield self._node(NodeId.RETRIEVE, "enter")
            retrieved = self._retriever(render_abstract(abstract))
            self.trace.append({
                "kind": "retrieval",
                "retrieved": [case.to_dict() for case in retrieved],
            })
            yield self._node(NodeId.RETRIEVE, "exit")

        state = anchoring.init_state(record, patient_profile, abstract, retrieved)
        self.trace.append({"kind": "state", "snapshot": state.snapshot()})

        if cfg.phase2:
            draft, state = yield from self._navigate(state)
        else:
            yield self._node(NodeId.SYNTHESIS, "enter")
            draft = synthesize(gw, state, require_evidence=False)
            yield self._node(NodeId.SYNTHESIS, "exit")

        banned: set[str] = set()
        if cfg.phase3:
            yield self._node(NodeId.JUDGE, "enter")
            verdict = judge(gw, state, draft)
            self.trace.append({
                "kind": "judge",
                "status": dict(verdict.status),
                "removed": list(verdict.diagnoses_to_remove),
            })
            yield self._node(NodeId.JUDGE, "exit")
            outcome = None
            if verdict.ambiguous_names():
                yield self._node(NodeId.DEBATE, "enter")
                outcome = run_debate(gw, verdict, state, draft)
                self.trace.append({"kind": "debate", "outcome": outcome.to_dict()})
                yield self._node(NodeId.DEBATE, "exit")
            draft = apply_verdicts(draft, verdict, outcome)
            banned = set(verdict.diagnoses_to_remove)
            if outcome is not None:
                banned |= {
                    name for name, ruling in outcome.final_verdicts.items()
                    if ruling.kind == "Discard"
                }
        yield from self._finalize(draft, state, banned)

    def _finalize(self, draft: DraftReport, state: DiagnosticState, banned: set[str]):
        yield self._node(NodeId.FINALIZE, "enter")
        final = finalize(self.gateway, draft, state, banned)
        self.final_report = final
        self.trace.append({"kind": "final_report", "report": final.to_dict()})
        yield self._node(NodeId.FINALIZE, "exit")

    def _navigate(self, state: DiagnosticState):
        cfg = self.config
        nav = cfg.navigation
        gw = self.gateway
        while True:
            while True:
                yield self._node(NodeId.PLAN, "enter")
                expansion, state = expand_strategies(gw, state, nav)
                selected = select_strategy(gw, state, list(expansion.strategies), nav)
                self.trace.append({
                    "kind": "plan",
                    "turn": state.turn,
                    "selected": selected.name,
                    "archetype": selected.archetype,
                    "planner_done": expansion.ready_to_synthesize,
                })
                yield self._node(NodeId.PLAN, "exit")

                yield self._node(NodeId.EXECUTE, "enter")
                directive = f"{selected.name}: {selected.description}"
                actions = []
                observations = []
                for expert in selected.first_step_actions:
                    observation = dispatch_expert(gw, expert, state, directive)
                    actions.append(ExpertAction(expert=expert, directive=directive))
                    observations.append(observation)
                yield self._node(NodeId.EXECUTE, "exit")

                yield self._node(NodeId.EXPECT_CHECK, "enter")
                conflicts = [
                    check_expectation(gw, selected.expected_outcome, obs, state.turn)
                    for obs in observations
                ]
                yield self._node(NodeId.EXPECT_CHECK, "exit")

                state, decision = apply_flow(
                    state, actions, observations, conflicts,
                    expansion.ready_to_synthesize, nav,
                )
                self.trace.append({
                    "kind": "flow",
                    "turn": state.turn,
                    "decision": decision.value,
                    "conflicts": conflicts,
                    "planner_done": expansion.ready_to_synthesize,
                })
                self.trace.append({"kind": "state", "snapshot": state.snapshot()})
                if decision is FlowDecision.PROCEED_TO_SYNTHESIS:
                    break

            yield self._node(NodeId.SYNTHESIS, "enter")
            draft = synthesize(gw, state)
            yield self._node(NodeId.SYNTHESIS, "exit")

            yield self._node(NodeId.REFLECTION, "enter")
            review = reflect(gw, state, draft, nav)
            self.trace.append({
                "kind": "reflection",
                "passed": review.passed,
                "forced": review.forced,
                "feedback": review.feedback,
            })
            yield self._node(NodeId.REFLECTION, "exit")
            if review.passed:
                return draft, state
            state = replace(
                state,
                reflection_count=state.reflection_count + 1,
                feedback=state.feedback + (review.feedback,),
            )


def run_case(case: RawCase, config: RunConfig,
             backend: LLMBackend | None = None, retriever=None) -> SessionResult:
    return Session(case, config, backend=backend, retriever=retriever).run()


def _load_abstract_cache(path: str) -> dict[str, str]:
    with Path(path).open(encoding="utf-8") as fh:
        cache = json.load(fh)
    if not isinstance(cache, dict):
        raise RetrievalError(f"abstract cache {path} must be a JSON object")
    return {str(k): str(v) for k, v in cache.items()}


def build_retriever(dataset: Dataset, config: RunConfig, embedder):
    """Index the corpus and return a query callable, or None when disabled."""
    if not config.retrieval_enabled:
        return None
    corpus = list(dataset.retrieval_corpus)
    if not corpus:
        raise RetrievalError("retrieval is enabled but the corpus is empty")
    cache = _load_abstract_cache(config.abstracts_path) if config.abstracts_path else {}

    summarizer = None
    if config.backend_kind == "remote":
        remote_gateway = Gateway(build_backend(config))

        def summarizer(case: RawCase) -> str:
            return render_abstract(anchoring.summarize(remote_gateway, case.raw_text))

    def abstract_text(case: RawCase) -> str:
        if case.case_id in cache:
            return cache[case.case_id]
        if summarizer is not None:
            return summarizer(case)
        raise RetrievalError(
            f"no cached abstract for corpus case {case.case_id!r}; scripted runs "
            "need retrieval.abstracts_path to cover the whole corpus"
        )

    index = build_index(corpus, embedder, abstract_text)

    def retriever(query_text: str):
        return retrieve(index, query_text, config.retrieval_k, embedder)

    return retriever


def run_batch(dataset: Dataset, config: RunConfig, fixtures=None, embedder=None) -> list[SessionResult]:
    """One result per test case, in dataset order; failures stay isolated."""
    from .embedding import MockEmbedder

    retriever = build_retriever(dataset, config, embedder or MockEmbedder())
    shared_backend = None
    if config.backend_kind == "remote":
        shared_backend = build_backend(config)
    elif fixtures is None:
        if not config.fixture_path:
            raise ValueError("scripted batch needs backend.fixture_path or explicit fixtures")
        fixtures = load_batch_fixture(config.fixture_path)

    def one(case: RawCase) -> SessionResult:
        backend = shared_backend
        if backend is None:
            backend = ScriptedBackend(fixtures.get(case.case_id, {}))
        return Session(case, config, backend=backend, retriever=retriever).run()

    if config.parallelism == 1 or len(dataset.cases) <= 1:
        return [one(case) for case in dataset.cases]
    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        return list(pool.map(one, dataset.cases))


def fixture_from_trace(trace: SessionTrace) -> dict[tuple[str, int], str]:
    """Collapse a trace's gateway events into a scripted fixture.

    Later events overwrite earlier ones at the same key, so a repaired
    exchange replays its final (accepted) response directly.
    """
    fixture: dict[tuple[str, int], str] = {}
    for event in trace.events:
        if event.get("kind") == "gateway":
            fixture[(event["node_tag"], int(event["turn_index"]))] = event["response_text"]
    return fixture


_REPLAY_REFERENCE = ReferenceDiagnoses(
    primary=DiagnosisLabel(name="unknown"), all=(DiagnosisLabel(name="unknown"),)
)


def replay_session(trace: SessionTrace) -> SessionResult:
    """Re-execute a recorded session with its own responses as the script.

    Retrieval is forced off: retrieved snippets only shaped prompts, and
    replay answers every call from the recorded responses.
    """
    config = RunConfig.from_flat(trace.header["config"])
    config = dataclasses.replace(
        config, backend_kind="scripted", fixture_path="",
        retrieval_enabled=False, parallelism=1,
    )
    case = RawCase(
        case_id=trace.header["case"]["case_id"],
        raw_text=trace.header["case"]["raw_text"],
        reference=_REPLAY_REFERENCE,
    )
    backend = ScriptedBackend(fixture_from_trace(trace))
    return Session(case, config, backend=backend).run()


def diff_structures(a, b, path: str = "$") -> list[str]:
    """Paths at which two JSON-like structures differ."""
    if type(a) is not type(b):
        return [f"{path}: {type(a).__name__} vs {type(b).__name__}"]
    if isinstance(a, dict):
        diffs = []
        for key in sorted(set(a) | set(b)):
            if key not in a:
                diffs.append(f"{path}.{key}: missing on the recorded side")
            elif key not in b:
                diffs.append(f"{path}.{key}: missing on the replayed side")
            else:
                diffs.extend(diff_structures(a[key], b[key], f"{path}.{key}"))
        return diffs
    if isinstance(a, list):
        diffs = []
        if len(a) != len(b):
            diffs.append(f"{path}: length {len(a)} vs {len(b)}")
        for i, (x, y) in enumerate(zip(a, b)):
            diffs.extend(diff_structures(x, y, f"{path}[{i}]"))
        return diffs
    if a != b:
        return [f"{path}: {a!r} vs {b!r}"]
    return []
