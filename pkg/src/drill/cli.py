"""Operator-facing command line: run, batch, validate, report."""
from __future__ import annotations

import argparse
import concurrent.futures
import json
import random
import sys
from pathlib import Path

from . import taskmodel
from .errors import DrillError, InvalidSpec, MalformedSpec
from .llm import ReplayBackend, backend_from_environment
from .metrics import compute_metrics, pov_similarity
from .pipeline import run_pipeline, validate_run
from .taskmodel import TaskReport, with_overrides

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drill",
        description="Generate and validate proof-of-vulnerability inputs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one task end to end")
    run.add_argument("--task", required=True, help="task document (JSON)")
    run.add_argument("--budget", type=float, help="budget in USD")
    run.add_argument("--n1", type=int, help="path-exploration iteration cap")
    run.add_argument("--n2", type=int, help="crash-triggering iteration cap")
    run.add_argument("--workdir", default="runs", help="directory for run output")
    run.add_argument(
        "--early-exit-pe",
        action="store_true",
        help="stop path exploration at the first useful test case",
    )
    run.add_argument("--replay", help="replay transcript instead of a live model")
    run.add_argument(
        "--replay-lenient",
        action="store_true",
        help="serve the transcript without digest verification",
    )

    batch = sub.add_parser("batch", help="run a list of tasks with worker processes")
    batch.add_argument("--tasks", required=True, help="file listing task documents")
    batch.add_argument("--workers", type=int, default=1)
    batch.add_argument("--seed", type=int, default=42, help="task shuffle seed")
    batch.add_argument("--workdir", default="runs")
    batch.add_argument("--budget", type=float)

    val = sub.add_parser("validate", help="re-validate a stored run's PoV")
    val.add_argument("run_dir")

    rep = sub.add_parser("report", help="aggregate run directories into metrics")
    rep.add_argument("runs_dir")
    rep.add_argument("--json", action="store_true", dest="as_json")

    sim = sub.add_parser("similarity", help="byte similarity of two PoV files")
    sim.add_argument("generated")
    sim.add_argument("ground_truth")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(f"error: {kind}: {message}", file=sys.stderr)
    return code


def _make_backend(args):
    if getattr(args, "replay", None):
        return ReplayBackend.from_file(
            Path(args.replay), strict=not args.replay_lenient
        )
    backend = backend_from_environment()
    if backend is None:
        raise DrillError(
            "no model backend configured; set DRILL_LLM_BASE_URL or pass --replay"
        )
    return backend


def _config_overrides(args, config):
    overrides = {}
    if getattr(args, "budget", None) is not None:
        overrides["budget_usd"] = args.budget
    if getattr(args, "n1", None) is not None:
        overrides["n1_max_iterations"] = args.n1
    if getattr(args, "n2", None) is not None:
        overrides["n2_max_iterations"] = args.n2
    if getattr(args, "early_exit_pe", False):
        overrides["early_exit_pe"] = True
    return with_overrides(config, **overrides) if overrides else config


def cmd_run(args) -> int:
    try:
        spec, config = taskmodel.load_task_spec(Path(args.task))
    except MalformedSpec as e:
        return _fail("MalformedSpec", str(e), EXIT_USAGE)
    except InvalidSpec as e:
        return _fail("InvalidSpec", str(e), EXIT_USAGE)
    config = _config_overrides(args, config)
    try:
        backend = _make_backend(args)
    except DrillError as e:
        return _fail("NoBackend", str(e), EXIT_USAGE)
    run_dir = Path(args.workdir) / spec.project_id
    report = run_pipeline(spec, config, backend, run_dir)
    print(json.dumps(report.to_document(), indent=2))
    return EXIT_OK if report.verdict in ("validated", "variant") else EXIT_FAILURE


def _batch_worker(task_path: str, workdir: str, budget) -> dict:
    task_file = Path(task_path)
    spec, config = taskmodel.load_task_spec(task_file)
    if budget is not None:
        config = with_overrides(config, budget_usd=budget)
    # A transcript stored next to the task document replays that task.
    transcript = task_file.parent / "transcript.json"
    if transcript.exists():
        backend = ReplayBackend.from_file(transcript)
    else:
        backend = backend_from_environment()
    if backend is None:
        raise DrillError("batch requires DRILL_LLM_BASE_URL or per-task transcripts")
    report = run_pipeline(backend=backend, spec=spec, config=config,
                          run_dir=Path(workdir) / spec.project_id)
    return report.to_document()


def cmd_batch(args) -> int:
    tasks_file = Path(args.tasks)
    if not tasks_file.is_file():
        return _fail("MalformedSpec", f"{tasks_file} not found", EXIT_USAGE)
    tasks = [t.strip() for t in tasks_file.read_text().splitlines() if t.strip()]
    if not tasks:
        return _fail("EmptyBatch", "task list is empty", EXIT_USAGE)
    random.Random(args.seed).shuffle(tasks)
    docs = []
    with concurrent.futures.ProcessPoolExecutor(max_workers=args.workers) as pool:
        futures = {
            pool.submit(_batch_worker, t, args.workdir, args.budget): t for t in tasks
        }
        for fut in concurrent.futures.as_completed(futures):
            task = futures[fut]
            try:
                docs.append(fut.result())
            except Exception as e:
                print(f"error: TaskFailed: {task}: {e}", file=sys.stderr)
    reports = [TaskReport.from_document(d) for d in docs]
    if reports:
        print(compute_metrics(reports).render_table())
    return EXIT_OK if len(reports) == len(tasks) else EXIT_FAILURE


def cmd_validate(args) -> int:
    try:
        verdict = validate_run(Path(args.run_dir))
    except (OSError, json.JSONDecodeError, DrillError) as e:
        return _fail(type(e).__name__, str(e), EXIT_USAGE)
    print(verdict.label)
    return EXIT_OK if verdict.is_crash else EXIT_FAILURE


def cmd_report(args) -> int:
    runs_dir = Path(args.runs_dir)
    if not runs_dir.is_dir():
        return _fail("NotFound", f"{runs_dir} is not a directory", EXIT_USAGE)
    reports = []
    for report_file in sorted(runs_dir.glob("*/report.json")):
        try:
            reports.append(
                TaskReport.from_document(json.loads(report_file.read_text()))
            )
        except (json.JSONDecodeError, KeyError) as e:
            print(f"error: BadReport: {report_file}: {e}", file=sys.stderr)
    if not reports:
        return _fail("EmptyBatch", f"no reports under {runs_dir}", EXIT_USAGE)
    metrics = compute_metrics(reports)
    if args.as_json:
        print(json.dumps(metrics.to_document(), indent=2))
    else:
        print(metrics.render_table())
    return EXIT_OK


def cmd_similarity(args) -> int:
    try:
        score = pov_similarity(
            Path(args.generated).read_bytes(), Path(args.ground_truth).read_bytes()
        )
    except (OSError, DrillError) as e:
        return _fail(type(e).__name__, str(e), EXIT_USAGE)
    print(
        json.dumps(
            {
                "gram_sim": round(score.gram_sim, 4),
                "chunk_sim": round(score.chunk_sim, 4),
                "score": round(score.score, 4),
            }
        )
    )
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "batch": cmd_batch,
        "validate": cmd_validate,
        "report": cmd_report,
        "similarity": cmd_similarity,
    }
    try:
        return handlers[args.command](args)
    except DrillError as e:
        return _fail(type(e).__name__, str(e), EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
