"""Command line entry point.

Exit codes: 0 success, 1 domain failure (Fail status, no feasible model,
invalid spec), 2 usage error, 3 I/O, credential or adapter error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .arch_spec import SpecError, parse_spec, validate_schema
from .evaluator import TrainerConfig
from .feasibility import (
    PROFILES,
    AdapterConfig,
    AdapterError,
    ConstraintSet,
    analyze,
    analyze_external,
    bytes_to_kb,
)
from .graph import GraphError, TensorShape, build_graph, dump_graph, expand_blocks
from .orchestrator import ConfigError, RunConfig, Termination, emit_report, make_report, run
from .proposal import KNOWN_TASKS, LlmConfig, TaskDescriptor, TransportError
from .repository import MalformedRepository, Repository

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _emit(doc) -> None:
    print(json.dumps(doc))


def _err(msg: str) -> None:
    print(f"mcuforge: {msg}", file=sys.stderr)


def _shape(text: str) -> TensorShape:
    try:
        return TensorShape.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_kb(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("KB budgets must be positive")
    return value


def _read_spec(path: str):
    text = Path(path).read_text(encoding="utf-8")
    return parse_spec(text)


# ---------------------------------------------------------------------------
# commands


def cmd_customize(args) -> int:
    if args.task in KNOWN_TASKS:
        task = KNOWN_TASKS[args.task]
    else:
        if args.input_shape is None or args.num_classes is None:
            _err(f"unknown task {args.task!r}: give --input-shape and --num-classes")
            return EXIT_USAGE
        task = TaskDescriptor(args.task, args.input_shape, args.num_classes)
    if args.input_shape is not None:
        task = TaskDescriptor(task.dataset, args.input_shape, args.num_classes or task.num_classes)
    constraints = ConstraintSet.from_kb(args.ram_kb, args.flash_kb, task.input_shape, args.profile)
    report_path = Path(args.report)
    log_path = args.log or str(report_path.with_suffix(".log.jsonl"))
    llm = LlmConfig(base_url=args.llm_base_url, model=args.llm_model, api_key_env=args.llm_key_env)
    config = RunConfig(
        task=task,
        constraints=constraints,
        strategy=args.strategy,
        evaluator=args.evaluator,
        max_iterations=args.max_iters,
        target_accuracy=args.target_acc,
        mode=args.mode,
        seed=args.seed,
        max_epochs=args.max_epochs,
        patience=args.patience,
        llm=llm,
        trainer=TrainerConfig.from_string(args.trainer_cmd) if args.trainer_cmd else None,
        backend=AdapterConfig.from_string(args.backend_cmd) if args.backend_cmd else None,
        repo_path=args.repo,
        log_path=log_path,
    )
    try:
        state = run(config)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except TransportError as exc:
        _err(str(exc))
        return EXIT_IO
    emit_report(state, report_path)
    report = make_report(state)
    best = report.best
    _emit({
        "best": None if best is None else best.model_id,
        "model_acc": None if best is None else best.performance.accuracy_percent,
        "model_ram_KB": None if best is None else bytes_to_kb(best.measurement.ram_bytes),
        "model_flash_KB": None if best is None else bytes_to_kb(best.measurement.flash_bytes),
        "termination_reason": report.termination.value,
    })
    if report.termination is Termination.ABORTED_ON_FAILURES or best is None:
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        spec = _read_spec(args.spec)
    except OSError as exc:
        _err(f"cannot read {args.spec}: {exc}")
        return EXIT_IO
    except SpecError as exc:
        _emit({"valid": False, "issues": [{"where": getattr(exc, "where", None),
                                            "code": getattr(exc, "code", "ParseError"),
                                            "message": str(exc)}],
               "constructible": False})
        return EXIT_DOMAIN
    report = validate_schema(spec)
    doc = report.to_dict()
    doc["input_shape"] = str(args.input_shape)
    if report.valid:
        try:
            graph = build_graph(spec, args.input_shape)
            doc["constructible"] = True
            doc["output_shape"] = str(graph.shape(graph.output))
        except GraphError as exc:
            doc["constructible"] = False
            doc["shape_error"] = str(exc)
    else:
        doc["constructible"] = False
    _emit(doc)
    print("constructible" if doc["constructible"] else "not constructible", file=sys.stderr)
    return EXIT_OK if doc["constructible"] else EXIT_DOMAIN


def cmd_analyze(args) -> int:
    try:
        spec = _read_spec(args.spec)
    except OSError as exc:
        _err(f"cannot read {args.spec}: {exc}")
        return EXIT_IO
    except SpecError as exc:
        _err(str(exc))
        return EXIT_DOMAIN
    constraints = ConstraintSet.from_kb(args.ram_kb, args.flash_kb, args.input_shape, args.profile)
    if args.dump_graph:
        try:
            graph = build_graph(spec, args.input_shape)
        except (GraphError, SpecError) as exc:
            graph = None
            _err(f"shape inference failed: {exc}")
            print(dump_graph(expand_blocks(spec)) if validate_schema(spec).valid else "", file=sys.stderr)
        if graph is not None:
            print(dump_graph(graph), file=sys.stderr)
    if args.backend_cmd:
        try:
            m = analyze_external(spec, constraints, AdapterConfig.from_string(args.backend_cmd, args.backend_timeout))
        except AdapterError as exc:
            _err(f"{exc.code}: {exc}")
            return EXIT_IO
        except SpecError as exc:
            _err(str(exc))
            return EXIT_DOMAIN
    else:
        m = analyze(spec, constraints)
    d = m.to_dict()
    _emit({"ram_kb": d["ram_kb"], "flash_kb": d["flash_kb"], "status": d["status"],
           "reasons": d["reasons"], "ram_bytes": d["ram_bytes"], "flash_bytes": d["flash_bytes"]})
    return EXIT_OK if m.passed else EXIT_DOMAIN


def _row(rec) -> dict:
    m = rec.measurement
    return {
        "model_id": rec.model_id,
        "model_acc": None if rec.performance is None else rec.performance.accuracy_percent,
        "model_ram_KB": None if m.ram_bytes is None else bytes_to_kb(m.ram_bytes),
        "model_flash_KB": None if m.flash_bytes is None else bytes_to_kb(m.flash_bytes),
        "status": m.status,
        "reasons": [str(r) for r in m.reasons],
    }


def cmd_repo(args) -> int:
    try:
        repo = Repository.load(args.repo)
    except OSError as exc:
        _err(f"cannot read {args.repo}: {exc}")
        return EXIT_IO
    except MalformedRepository as exc:
        _err(f"malformed repository: {exc}")
        return EXIT_IO
    if args.action == "list":
        _emit([_row(r) for r in repo])
        return EXIT_OK
    if args.action == "best":
        best = repo.best_feasible()
        if best is None:
            _err("no feasible record")
            _emit(None)
            return EXIT_DOMAIN
        _emit(_row(best))
        return EXIT_OK
    rec = repo.get(args.model_id)
    if rec is None:
        _err(f"no record with id {args.model_id}")
        return EXIT_DOMAIN
    _emit(rec.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcuforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("customize", help="run the closed-loop search")
    p.add_argument("--task", required=True, help=f"dataset name; known: {', '.join(KNOWN_TASKS)}")
    p.add_argument("--ram-kb", type=_positive_kb, required=True)
    p.add_argument("--flash-kb", type=_positive_kb, required=True)
    p.add_argument("--strategy", choices=("llm", "random", "mutation"), default="random")
    p.add_argument("--evaluator", choices=("surrogate", "external"), default="surrogate")
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repo", default="repository.json")
    p.add_argument("--report", default="report.json")
    p.add_argument("--log", default=None, help="run log path (default: <report>.log.jsonl)")
    p.add_argument("--target-acc", type=float, default=None)
    p.add_argument("--mode", choices=("isolated", "shared"), default="isolated")
    p.add_argument("--input-shape", type=_shape, default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--profile", choices=sorted(PROFILES), default="default")
    p.add_argument("--max-epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--llm-base-url", default=LlmConfig.base_url)
    p.add_argument("--llm-model", default=LlmConfig.model)
    p.add_argument("--llm-key-env", default=LlmConfig.api_key_env)
    p.add_argument("--trainer-cmd", default=None)
    p.add_argument("--backend-cmd", default=None)
    p.set_defaults(func=cmd_customize)

    p = sub.add_parser("validate", help="check a spec file for constructibility")
    p.add_argument("spec")
    p.add_argument("--input-shape", type=_shape, default=TensorShape(3, 32, 32))
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("analyze", help="measure RAM/Flash of a spec file")
    p.add_argument("spec")
    p.add_argument("--ram-kb", type=_positive_kb, default=1024.0)
    p.add_argument("--flash-kb", type=_positive_kb, default=1024.0)
    p.add_argument("--input-shape", type=_shape, default=TensorShape(3, 32, 32))
    p.add_argument("--profile", choices=sorted(PROFILES), default="default")
    p.add_argument("--backend-cmd", default=None)
    p.add_argument("--backend-timeout", type=float, default=300.0)
    p.add_argument("--dump-graph", action="store_true", help="print the lowered op listing to stderr")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("repo", help="inspect a repository file")
    rsub = p.add_subparsers(dest="action", required=True)
    for action in ("list", "best"):
        q = rsub.add_parser(action)
        q.add_argument("repo")
    q = rsub.add_parser("show")
    q.add_argument("repo")
    q.add_argument("model_id")
    p.set_defaults(func=cmd_repo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    if getattr(args, "command", None) == "customize":
        if args.max_iters < 1:
            parser.error("--max-iters must be >= 1")
        if args.strategy == "llm":
            if not os.environ.get(args.llm_key_env):
                _err(f"LLM credential missing: set environment variable {args.llm_key_env}")
                return EXIT_IO
        if args.evaluator == "external" and not args.trainer_cmd:
            parser.error("--evaluator external requires --trainer-cmd")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
