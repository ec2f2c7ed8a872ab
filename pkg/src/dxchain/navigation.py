"""Phase II: strategy expansion and selection, expert dispatch, expectation
checking with replan-on-conflict, synthesis, and reflection.

The planner commits to an expected outcome before any expert runs; the
expectation check compares prediction with observation and a mismatch
triggers replanning.  Everything is bounded by the turn budget.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import TYPE_CHECKING

from .errors import PlanningError, SchemaViolationError
from .gateway import ChatMessage, ChatRequest, FieldSpec, Gateway, OutputSchema
from .prompts import (
    ARCHETYPES,
    BASELINE_TEMPLATE,
    EXPANSION_TEMPLATE,
    EXPECT_CHECK_TEMPLATE,
    EXPERT_IDS,
    EXPERT_SLOTS,
    EXPERT_TEMPLATE,
    REFLECTION_TEMPLATE,
    SELECTION_TEMPLATE,
    SYNTHESIS_TEMPLATE,
    baseline_prompt,
    expansion_prompt,
    expectation_check_prompt,
    expert_prompt,
    reflection_prompt,
    selection_prompt,
    synthesis_prompt,
)
from .reports import DraftReport, report_violations

if TYPE_CHECKING:
    from .anchoring import ClinicalAbstract, PatientProfile, StructuredRecord
    from .retrieval import RetrievedCase

logger = logging.getLogger(__name__)


class FlowDecision(Enum):
    PROCEED = "Proceed"
    TRIGGER_REPLAN = "TriggerReplan"
    PROCEED_TO_SYNTHESIS = "ProceedToSynthesis"


@dataclass(frozen=True)
class NavigationConfig:
    max_turns: int = 20
    # The conflict comparison is realized as a binary consistency judge;
    # the threshold is kept for configuration compatibility only.
    conflict_threshold: float = 0.5
    max_strategies: int = 3
    max_reflections: int = 2
    strategy_selection_mode: str = "llm"

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be at least 1")
        if not 2 <= self.max_strategies <= 3:
            raise ValueError("max_strategies must be 2 or 3")
        if self.strategy_selection_mode not in ("llm", "heuristic"):
            raise ValueError(f"unknown selection mode: {self.strategy_selection_mode!r}")


@dataclass(frozen=True)
class ExpertAction:
    expert: str
    directive: str


@dataclass(frozen=True)
class Observation:
    expert: str
    content: str
    extracted_findings: tuple[str, ...] = ()


@dataclass(frozen=True)
class Strategy:
    archetype: str
    name: str
    description: str
    first_step_actions: tuple[str, ...]
    expected_outcome: str


@dataclass(frozen=True)
class DiagnosticState:
    """Working memory for one session; updated only by replacement."""

    profile: PatientProfile
    abstract: ClinicalAbstract
    record: StructuredRecord
    working_diagnoses: tuple[tuple[str, float], ...] = ()
    key_findings: tuple[str, ...] = ()
    ruled_out: tuple[str, ...] = ()
    history: tuple[tuple[ExpertAction, Observation], ...] = ()
    retrieved: tuple[RetrievedCase, ...] = ()
    turn: int = 0
    reflection_count: int = 0
    feedback: tuple[str, ...] = ()

    def __post_init__(self):
        working = {name.lower() for name, _ in self.working_diagnoses}
        ruled = {name.lower() for name in self.ruled_out}
        overlap = working & ruled
        if overlap:
            raise ValueError(f"diagnoses both working and ruled out: {sorted(overlap)}")

    def snapshot(self) -> dict:
        return {
            "turn": self.turn,
            "working_diagnoses": [[name, conf] for name, conf in self.working_diagnoses],
            "ruled_out": list(self.ruled_out),
            "n_findings": len(self.key_findings),
            "n_history": len(self.history),
            "reflection_count": self.reflection_count,
        }


@dataclass(frozen=True)
class ExpansionResult:
    strategies: tuple[Strategy, ...]
    ready_to_synthesize: bool = False


@dataclass(frozen=True)
class ReflectionResult:
    passed: bool
    feedback: str
    forced: bool = False


_SENTENCE_END = re.compile(r"[.!?]+(?=\s|$)")


def _sentence_count(text: str) -> int:
    return max(1, len(_SENTENCE_END.findall(text.strip())))


def _expansion_violations(obj: dict, config: NavigationConfig) -> list[str]:
    violations: list[str] = []
    strategies = obj.get("strategies")
    if not isinstance(strategies, list):
        return ["strategies: expected a list"]
    if not 2 <= len(strategies) <= config.max_strategies:
        violations.append(
            f"strategies: need between 2 and {config.max_strategies} entries, got {len(strategies)}"
        )
    seen_archetypes: set[str] = set()
    for i, entry in enumerate(strategies):
        where = f"strategies[{i}]"
        if not isinstance(entry, dict):
            violations.append(f"{where}: expected an object")
            continue
        archetype = entry.get("archetype")
        if archetype not in ARCHETYPES:
            violations.append(f"{where}.archetype: must be one of {list(ARCHETYPES)}")
        elif archetype in seen_archetypes:
            violations.append(f"{where}.archetype: duplicate archetype {archetype}")
        else:
            seen_archetypes.add(archetype)
        if not str(entry.get("name", "")).strip():
            violations.append(f"{where}.name: must not be empty")
        description = str(entry.get("description", ""))
        if not description.strip():
            violations.append(f"{where}.description: must not be empty")
        elif _sentence_count(description) > 2:
            violations.append(f"{where}.description: keep it to at most 2 sentences")
        actions = entry.get("first_step_actions")
        if not isinstance(actions, list) or not actions:
            violations.append(f"{where}.first_step_actions: must be a non-empty list")
        else:
            for action in actions:
                if action not in EXPERT_IDS:
                    violations.append(
                        f"{where}.first_step_actions: unknown expert id {action!r}"
                    )
        if not str(entry.get("expected_outcome", "")).strip():
            violations.append(f"{where}.expected_outcome: must not be empty")
    if "ready_to_synthesize" in obj and not isinstance(obj["ready_to_synthesize"], bool):
        violations.append("ready_to_synthesize: expected a boolean")
    violations.extend(_planner_update_violations(obj))
    return violations


def _planner_update_violations(obj: dict) -> list[str]:
    violations: list[str] = []
    working = obj.get("working_diagnoses")
    names: set[str] = set()
    if working is not None:
        if not isinstance(working, list):
            violations.append("working_diagnoses: expected a list")
        else:
            for i, entry in enumerate(working):
                if not isinstance(entry, dict) or not str(entry.get("name", "")).strip():
                    violations.append(f"working_diagnoses[{i}]: needs a non-empty name")
                    continue
                names.add(str(entry["name"]).strip().lower())
                confidence = entry.get("confidence", 0.5)
                if not isinstance(confidence, (int, float)) or isinstance(confidence, bool):
                    violations.append(f"working_diagnoses[{i}].confidence: expected a number")
    ruled_out = obj.get("ruled_out")
    if ruled_out is not None:
        if not isinstance(ruled_out, list) or any(not isinstance(r, str) for r in ruled_out):
            violations.append("ruled_out: expected a list of strings")
        else:
            overlap = names & {r.strip().lower() for r in ruled_out}
            if overlap:
                violations.append(
                    f"ruled_out: {sorted(overlap)} cannot be both working and ruled out"
                )
    return violations


def _clamp01(value: float) -> float:
    return min(1.0, max(0.0, float(value)))


def expand_strategies(
    gateway: Gateway, state: DiagnosticState, config: NavigationConfig
) -> tuple[ExpansionResult, DiagnosticState]:
    """One planning step: distinct-archetype strategies plus differential updates.

    Returns the expansion and the state with the planner's updated
    working_diagnoses / ruled_out applied.
    """
    if state.turn >= config.max_turns:
        raise PlanningError(f"turn budget exhausted at {state.turn}")
    schema = OutputSchema(schema_id="expansion.v1")
    obj = gateway.complete_structured(
        ChatRequest("plan", state.turn, expansion_prompt(state, list(state.feedback)),
                    EXPANSION_TEMPLATE),
        schema,
        validate_extra=lambda o: _expansion_violations(o, config),
    )
    strategies = tuple(
        Strategy(
            archetype=entry["archetype"],
            name=str(entry["name"]).strip(),
            description=str(entry["description"]).strip(),
            first_step_actions=tuple(dict.fromkeys(entry["first_step_actions"])),
            expected_outcome=str(entry["expected_outcome"]).strip(),
        )
        for entry in obj["strategies"]
    )
    if obj.get("working_diagnoses") is not None:
        working = tuple(
            (str(e["name"]).strip(), _clamp01(e.get("confidence", 0.5)))
            for e in obj["working_diagnoses"]
        )
        state = replace(state, working_diagnoses=working)
    if obj.get("ruled_out") is not None:
        ruled = tuple(dict.fromkeys(r.strip() for r in obj["ruled_out"] if r.strip()))
        state = replace(state, ruled_out=ruled)
    result = ExpansionResult(
        strategies=strategies,
        ready_to_synthesize=bool(obj.get("ready_to_synthesize", False)),
    )
    return result, state


_ARCHETYPE_ORDER = {name: i for i, name in enumerate(ARCHETYPES)}


def _heuristic_select(state: DiagnosticState, strategies: list[Strategy]) -> Strategy:
    preferred = "Broad" if not state.working_diagnoses else "Focused"
    for strategy in strategies:
        if strategy.archetype == preferred:
            return strategy
    return min(strategies, key=lambda s: _ARCHETYPE_ORDER[s.archetype])


def _selection_violations(obj: dict, strategies: list[Strategy]) -> list[str]:
    scores = obj.get("scores")
    if not isinstance(scores, dict):
        return ["scores: expected an object"]
    violations = []
    wanted = {s.name for s in strategies}
    for name in wanted:
        if name not in scores:
            violations.append(f"scores: missing entry for {name!r}")
    for name, value in scores.items():
        if name not in wanted:
            violations.append(f"scores: unknown strategy {name!r}")
        elif not isinstance(value, (int, float)) or isinstance(value, bool):
            violations.append(f"scores.{name}: expected a number")
        elif not 0 <= value <= 10:
            violations.append(f"scores.{name}: must be between 0 and 10")
    return violations


def select_strategy(
    gateway: Gateway,
    state: DiagnosticState,
    strategies: list[Strategy],
    config: NavigationConfig,
) -> Strategy:
    """Pick one strategy; llm mode scores 0-10, heuristic picks by archetype."""
    if not strategies:
        raise PlanningError("no strategies to select from")
    if config.strategy_selection_mode == "heuristic":
        return _heuristic_select(state, strategies)
    schema = OutputSchema(schema_id="selection.v1")
    try:
        obj = gateway.complete_structured(
            ChatRequest("select", state.turn, selection_prompt(state, strategies),
                        SELECTION_TEMPLATE),
            schema,
            validate_extra=lambda o: _selection_violations(o, strategies),
        )
    except SchemaViolationError:
        logger.warning("strategy scoring unusable after repairs; falling back to heuristic")
        return _heuristic_select(state, strategies)
    scores = obj["scores"]
    return min(
        strategies,
        key=lambda s: (-float(scores[s.name]), _ARCHETYPE_ORDER[s.archetype]),
    )


_EXPERT_SCHEMA = OutputSchema(
    schema_id="expert.v1",
    fields=(
        FieldSpec("content", "string", nonempty=True),
        FieldSpec("extracted_findings", "list", item_kind="string"),
    ),
)


def _slot_empty(value) -> bool:
    return not value


def dispatch_expert(
    gateway: Gateway, expert: str, state: DiagnosticState, directive: str
) -> Observation:
    """Run one expert over the record slots its role is allowed to see.

    When every relevant slot is empty there is nothing to interpret, so a
    deterministic no-data observation is returned without a model call.
    """
    if expert not in EXPERT_IDS:
        raise PlanningError(f"unknown expert id: {expert!r}")
    slots = EXPERT_SLOTS[expert]
    if all(_slot_empty(getattr(state.record, slot)) for slot in slots):
        return Observation(
            expert=expert,
            content=f"No {' or '.join(s.replace('_', ' ') for s in slots)} documented for this case.",
            extracted_findings=(),
        )
    obj = gateway.complete_structured(
        ChatRequest(f"expert.{expert}", state.turn,
                    expert_prompt(expert, directive, state.record), EXPERT_TEMPLATE),
        _EXPERT_SCHEMA,
    )
    return Observation(
        expert=expert,
        content=obj["content"].strip(),
        extracted_findings=tuple(f.strip() for f in obj["extracted_findings"] if f.strip()),
    )


_FIRST_WORD = re.compile(r"[A-Za-z]+")


def check_expectation(
    gateway: Gateway,
    expectation: str,
    observation: Observation,
    turn: int,
    max_repairs: int = 2,
) -> bool:
    """Binary consistency check; NO (observation contradicts) means conflict."""
    if not expectation.strip():
        raise ValueError("expectation is empty")
    if not observation.content.strip():
        raise ValueError("observation content is empty")
    request = ChatRequest(
        f"expect_check.{observation.expert}", turn,
        expectation_check_prompt(expectation, observation), EXPECT_CHECK_TEMPLATE,
    )
    current = request
    answer = ""
    for _ in range(max_repairs + 1):
        response = gateway.complete(current)
        match = _FIRST_WORD.search(response.text)
        answer = match.group(0).upper() if match else ""
        if answer == "YES":
            return False
        if answer == "NO":
            return True
        current = ChatRequest(
            request.node_tag, request.turn_index,
            current.messages + (
                ChatMessage("assistant", response.text),
                ChatMessage("user", "Answer only YES or NO."),
            ),
            request.template_id,
        )
    raise SchemaViolationError(
        "expect_check.v1", [f"answer must be YES or NO, got {answer or 'nothing'!r}"]
    )


def apply_flow(
    state: DiagnosticState,
    actions: list[ExpertAction],
    observations: list[Observation],
    conflicts: list[bool],
    planner_done: bool,
    config: NavigationConfig,
) -> tuple[DiagnosticState, FlowDecision]:
    """Fold a turn's observations into state and route the next transition.

    The turn budget wins over everything; conflicts trump planner_done.
    """
    if not (len(actions) == len(observations) == len(conflicts)):
        raise ValueError("actions, observations, and conflicts must align")
    findings = [f for obs in observations for f in obs.extracted_findings]
    state = replace(
        state,
        history=state.history + tuple(zip(actions, observations)),
        key_findings=state.key_findings + tuple(findings),
        turn=state.turn + 1,
    )
    if state.turn >= config.max_turns:
        return state, FlowDecision.PROCEED_TO_SYNTHESIS
    if any(conflicts):
        return state, FlowDecision.TRIGGER_REPLAN
    if planner_done:
        return state, FlowDecision.PROCEED_TO_SYNTHESIS
    return state, FlowDecision.PROCEED


def _draft_violations(obj: dict, ruled_out: tuple[str, ...]) -> list[str]:
    violations = report_violations(obj)
    ruled = {name.lower() for name in ruled_out}
    for slot in ("primary_diagnoses", "secondary_diagnoses"):
        for i, entry in enumerate(obj.get(slot) or []):
            if not isinstance(entry, dict):
                continue
            name = str(entry.get("disease_name", "")).strip()
            if name.lower() in ruled:
                violations.append(
                    f"{slot}[{i}].disease_name: {name!r} was already ruled out"
                )
    return violations


def synthesize(
    gateway: Gateway, state: DiagnosticState, require_evidence: bool = True
) -> DraftReport:
    """Consolidate the differential and findings into a draft report."""
    if require_evidence and not state.history and not state.key_findings:
        raise PlanningError("nothing to synthesize: no history or findings")
    schema = OutputSchema(schema_id="synthesis.v1")
    obj = gateway.complete_structured(
        ChatRequest("synthesis", state.turn, synthesis_prompt(state), SYNTHESIS_TEMPLATE),
        schema,
        validate_extra=lambda o: _draft_violations(o, state.ruled_out),
    )
    return DraftReport.from_dict(obj)


def baseline_draft(gateway: Gateway, raw_text: str) -> DraftReport:
    """Single-pass draft straight from the raw narrative (anchoring disabled)."""
    if not raw_text.strip():
        raise ValueError("raw_text is empty")
    schema = OutputSchema(schema_id="baseline.v1")
    obj = gateway.complete_structured(
        ChatRequest("baseline", 0, baseline_prompt(raw_text), BASELINE_TEMPLATE),
        schema,
        validate_extra=report_violations,
    )
    return DraftReport.from_dict(obj)


_REFLECTION_SCHEMA = OutputSchema(
    schema_id="reflection.v1",
    fields=(FieldSpec("passed", "boolean"),),
)


def _reflection_violations(obj: dict) -> list[str]:
    if obj.get("passed") is False and not str(obj.get("feedback", "")).strip():
        return ["feedback: required when passed is false"]
    return []


def reflect(
    gateway: Gateway,
    state: DiagnosticState,
    draft: DraftReport,
    config: NavigationConfig,
) -> ReflectionResult:
    """Quality-review the draft; failures are forced to pass once the
    reflection or turn budget is spent, so the session always terminates."""
    obj = gateway.complete_structured(
        ChatRequest("reflection", state.turn, reflection_prompt(state, draft),
                    REFLECTION_TEMPLATE),
        _REFLECTION_SCHEMA,
        validate_extra=_reflection_violations,
    )
    passed = bool(obj["passed"])
    feedback = str(obj.get("feedback", "")).strip()
    if passed:
        return ReflectionResult(passed=True, feedback=feedback)
    if state.reflection_count + 1 >= config.max_reflections:
        logger.info("reflection budget spent; forcing pass")
        return ReflectionResult(passed=True, feedback=feedback, forced=True)
    if state.turn >= config.max_turns:
        logger.info("turn budget spent during reflection; forcing pass")
        return ReflectionResult(passed=True, feedback=feedback, forced=True)
    return ReflectionResult(passed=False, feedback=feedback)
