"""Command-line driver: run cases, evaluate results, replay and inspect traces.

Exit codes: 0 success, 1 session failures or a failed replay check,
2 usage/config/input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from .case_model import load_cases, split_retrieval_corpus
from .embedding import MockEmbedder
from .errors import DxChainError
from .evaluation import evaluate_run, write_case_csv
from .gateway import save_fixture
from .orchestrator import (
    NodeId,
    RunConfig,
    diff_structures,
    fixture_from_trace,
    load_trace,
    replay_session,
    run_batch,
    save_trace,
)

logger = logging.getLogger(__name__)

# Which gateway node_tags belong to each graph node (prefixes end with a dot).
_NODE_TAGS = {
    "Perception": ("perception",),
    "Profiling": ("profile",),
    "Summary": ("summary",),
    "Retrieve": (),
    "Plan": ("plan", "select"),
    "Execute": ("expert.",),
    "ExpectCheck": ("expect_check.",),
    "Synthesis": ("synthesis", "baseline"),
    "Reflection": ("reflection",),
    "Judge": ("judge",),
    "Debate": ("debate.",),
    "Finalize": ("finalize",),
}


def _load_config(path: str) -> RunConfig:
    config_path = Path(path)
    if not config_path.exists():
        raise DxChainError(f"config file not found: {path}")
    try:
        flat = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DxChainError(f"config file {path} is not valid JSON: {exc.msg}")
    if not isinstance(flat, dict):
        raise DxChainError(f"config file {path} must hold a JSON object")
    return RunConfig.from_flat(flat)


def _case_format(path: str) -> str:
    return "case-csv" if path.endswith(".csv") else "case-jsonl"


def cmd_run(args: argparse.Namespace) -> int:
    import dataclasses

    config = _load_config(args.config)
    overrides: dict = {}
    if args.parallelism is not None:
        overrides["parallelism"] = args.parallelism
    if args.disable_retrieval:
        overrides["retrieval_enabled"] = False
    for phase in args.disable_phase or []:
        overrides[f"phase{phase}"] = False
    if overrides:
        config = dataclasses.replace(config, **overrides)

    dataset = load_cases(args.cases, format=_case_format(args.cases))
    if args.corpus_size is not None:
        dataset = split_retrieval_corpus(dataset, args.corpus_size)
    for warning in dataset.warnings:
        logger.warning("%s", warning)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = run_batch(dataset, config)

    n_failures = 0
    manifest_rows = []
    for result in results:
        if result.outcome != "completed":
            n_failures += 1
        result_path = out_dir / f"{result.case_id}.result.json"
        result_path.write_text(
            json.dumps(result.to_dict(), ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )
        save_trace(result.trace, out_dir / f"{result.case_id}.trace.jsonl")
        manifest_rows.append({
            "case_id": result.case_id,
            "outcome": result.outcome,
            "failure_reason": result.failure_reason,
        })
        status = result.outcome if result.outcome == "completed" \
            else f"failed ({result.failure_reason})"
        print(f"{result.case_id}: {status}")

    manifest = {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "config": config.to_flat(),
        "n_cases": len(results),
        "n_failures": n_failures,
        "results": manifest_rows,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    print(f"{len(results)} case(s), {n_failures} failure(s); outputs in {out_dir}")
    return 0 if n_failures == 0 else 1


def cmd_eval(args: argparse.Namespace) -> int:
    results_dir = Path(args.results)
    result_paths = sorted(results_dir.glob("*.result.json"))
    if not result_paths:
        print(f"no results found in {results_dir}", file=sys.stderr)
        return 2
    results = [
        json.loads(path.read_text(encoding="utf-8")) for path in result_paths
    ]
    references = load_cases(args.references, format=_case_format(args.references))
    report = evaluate_run(
        results, references, MockEmbedder(),
        threshold=args.threshold, soft_mode=args.soft_mode,
    )
    payload = json.dumps(report.to_dict(), ensure_ascii=False, indent=2)
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(payload + "\n", encoding="utf-8")
        write_case_csv(report, out_path.with_suffix(".csv"))
        print(f"aggregate written to {out_path}, per-case CSV beside it")
    print(payload)
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    trace = load_trace(args.trace)
    recorded = trace.final_report_dict()
    if recorded is None:
        print("trace has no recorded final report; nothing to verify", file=sys.stderr)
        return 2
    result = replay_session(trace)
    if result.outcome != "completed" or result.final_report is None:
        print(f"FAIL: replay did not complete ({result.failure_reason})")
        return 1
    diffs = diff_structures(recorded, result.final_report.to_dict())
    if diffs:
        print("FAIL: replayed report differs from the recorded one")
        for line in diffs:
            print(f"  {line}")
        return 1
    print("PASS")
    return 0


def _matches_node(node_tag: str, node: str) -> bool:
    for pattern in _NODE_TAGS.get(node, ()):
        if pattern.endswith("."):
            if node_tag.startswith(pattern):
                return True
        elif node_tag == pattern:
            return True
    return False


def cmd_inspect(args: argparse.Namespace) -> int:
    valid_nodes = {node.value for node in NodeId}
    if args.node is not None and args.node not in valid_nodes:
        print(f"unknown node: {args.node!r} (one of {sorted(valid_nodes)})", file=sys.stderr)
        return 2
    trace = load_trace(args.trace)

    if args.node is not None:
        visited = args.node in trace.node_sequence()
        if not visited:
            print(f"node {args.node} not visited in this trace")
            return 0
        print(f"== gateway exchanges at {args.node} ==")
        for event in trace.events:
            if event.get("kind") != "gateway" or not _matches_node(event["node_tag"], args.node):
                continue
            print(f"--- {event['node_tag']} (turn {event['turn_index']}, "
                  f"template {event['template_id']}, digest {event['digest'][:12]}) ---")
            for message in event["request_messages"]:
                print(f"[{message['role']}]")
                print(message["content"])
            print("[response]")
            print(event["response_text"])
        return 0

    print(f"case {trace.case_id}")
    for event in trace.events:
        kind = event.get("kind")
        if kind == "node" and event["event"] == "enter":
            print(f"-> {event['node']}")
        elif kind == "flow":
            print(f"   flow: {event['decision']} (turn {event['turn']}, "
                  f"conflicts {event['conflicts']})")
        elif kind == "reflection":
            flag = " [forced]" if event.get("forced") else ""
            print(f"   reflection: {'pass' if event['passed'] else 'fail'}{flag}")
        elif kind == "judge":
            print(f"   judge: {event['status']}")
        elif kind == "retrieval":
            ids = [r["case_id"] for r in event["retrieved"]]
            print(f"   retrieved: {ids}")
        elif kind == "final_report":
            names = [d["disease_name"] for d in event["report"]["primary_diagnoses"]]
            print(f"   final primaries: {names}")
    return 0


def cmd_fixtures(args: argparse.Namespace) -> int:
    trace = load_trace(args.trace)
    fixture = fixture_from_trace(trace)
    if not fixture:
        print("trace contains no gateway exchanges", file=sys.stderr)
        return 2
    save_fixture(fixture, args.out)
    print(f"{len(fixture)} scripted response(s) written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dxchain",
        description="Diagnostic-reasoning sessions over pluggable model backends.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run cases and write results, traces, and a manifest")
    run.add_argument("--cases", required=True, help="case file (.jsonl or .csv)")
    run.add_argument("--config", required=True, help="flat-key JSON config file")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--corpus-size", type=int, default=None,
                     help="move the first N cases into the retrieval corpus")
    run.add_argument("--parallelism", type=int, default=None)
    run.add_argument("--disable-phase", type=int, choices=(2, 3), action="append",
                     help="disable phase 2 (navigation) or phase 3 (adjudication)")
    run.add_argument("--disable-retrieval", action="store_true")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score results against reference diagnoses")
    ev.add_argument("--results", required=True, help="directory of *.result.json files")
    ev.add_argument("--references", required=True, help="case file with reference diagnoses")
    ev.add_argument("--threshold", type=float, default=0.7)
    ev.add_argument("--soft-mode", choices=("soft", "thresholded"), default="soft")
    ev.add_argument("--out", default=None, help="aggregate JSON path (CSV written beside it)")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("replay", help="re-run a trace against itself and verify the report")
    rp.add_argument("--trace", required=True)
    rp.set_defaults(func=cmd_replay)

    ins = sub.add_parser("inspect", help="print a trace timeline or one node's exchanges")
    ins.add_argument("--trace", required=True)
    ins.add_argument("--node", default=None, help="graph node to show exchanges for")
    ins.set_defaults(func=cmd_inspect)

    fx = sub.add_parser("fixtures", help="extract a scripted fixture from a trace")
    fx.add_argument("--trace", required=True)
    fx.add_argument("--out", required=True)
    fx.set_defaults(func=cmd_fixtures)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DxChainError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
