import json
from pathlib import Path

import pytest

from drill.errors import AnalysisFailed
from drill.llm import ReplayBackend
from drill.pipeline import (
    GENERIC_GUIDANCE,
    GUIDANCE_TABLE,
    RootCause,
    TaskRunner,
    VAReport,
    sample_vuln_type_hints,
    validate_run,
)
from drill.sanitizer import CrashTrace, StackFrame
from drill.taskmodel import (
    CrashKind,
    SourceLocation,
    VulnSpec,
    load_task_spec,
    with_overrides,
)
from drill import taskmodel

from .conftest import requires_clang

CORPUS = Path(__file__).parents[1] / "corpus"


def _rc():
    return RootCause(forward="f", backward="b", type_specific="t")


def _trace():
    return CrashTrace(frames=(StackFrame(0, "f", "a.c", 1),))


# --- VAReport & RootCause -----------------------------------------------------

def test_va_report_requires_single_placeholder():
    with pytest.raises(AnalysisFailed):
        VAReport(
            crash_kind=taskmodel.HEAP_BUFFER_OVERFLOW,
            crash_trace=_trace(),
            harness_cmd="./tool input.bin",  # no placeholder
            input_extension=None,
            root_cause=_rc(),
        )
    with pytest.raises(AnalysisFailed):
        VAReport(
            crash_kind=taskmodel.HEAP_BUFFER_OVERFLOW,
            crash_trace=_trace(),
            harness_cmd="./tool {input} {input}",
            input_extension=None,
            root_cause=_rc(),
        )


def test_root_cause_requires_all_sections():
    with pytest.raises(AnalysisFailed):
        RootCause(forward="f", backward="", type_specific="t")


def test_va_report_document_round_trip():
    va = VAReport(
        crash_kind=taskmodel.USE_AFTER_FREE,
        crash_trace=_trace(),
        harness_cmd="./tool {input}",
        input_extension=".img",
        root_cause=_rc(),
    )
    again = VAReport.from_document(json.loads(json.dumps(va.to_document())))
    assert again.harness_cmd == va.harness_cmd
    assert again.input_extension == ".img"
    assert again.crash_kind == va.crash_kind
    assert again.root_cause == va.root_cause


# --- prompt sampler -------------------------------------------------------------

def _spec_with_effect(kind: CrashKind) -> VulnSpec:
    return VulnSpec(
        project_id="p",
        repo_path=CORPUS / "magic_gate",
        v_location=SourceLocation(file="src/x.c", line=3),
        v_effect=kind,
    )


def test_hints_direct_lookup():
    g = sample_vuln_type_hints("whatever", _spec_with_effect(taskmodel.HEAP_BUFFER_OVERFLOW))
    assert g.vuln_type == taskmodel.HEAP_BUFFER_OVERFLOW
    assert g.hint_text == GUIDANCE_TABLE["heap-buffer-overflow"]


def test_hints_keyword_triage_all_kinds():
    cases = {
        "the object is freed then used: use-after-free": "heap-use-after-free",
        "classic heap-buffer-overflow on the copy": "heap-buffer-overflow",
        "writes past a local array, stack-buffer-overflow": "stack-buffer-overflow",
        "reads the global-buffer-overflow table": "global-buffer-overflow",
        "dereferences a null pointer when absent": "null-dereference",
        "allocation is never released, a memory leak": "memory-leak",
    }
    for text, token in cases.items():
        g = sample_vuln_type_hints(text, spec=None)
        assert g.vuln_type.token == token, text
        assert g.hint_text == GUIDANCE_TABLE[token]


def test_hints_generic_fallback():
    g = sample_vuln_type_hints("an inscrutable failure", spec=None)
    assert g.hint_text == GENERIC_GUIDANCE


def test_hints_reject_empty_root_cause():
    with pytest.raises(ValueError):
        sample_vuln_type_hints("", spec=None)


# --- replay end-to-end over the corpus -------------------------------------------

def _run_corpus(target: str, tmp_path, transcript="transcript.json", **overrides):
    task = CORPUS / target / "truth" / "task.json"
    spec, config = load_task_spec(task)
    if overrides:
        config = with_overrides(config, **overrides)
    backend = ReplayBackend.from_file(CORPUS / target / "truth" / transcript)
    runner = TaskRunner(spec, config, backend, tmp_path / "run")
    report = runner.run()
    return report, runner, backend


@requires_clang
def test_magic_gate_validated(tmp_path):
    report, runner, backend = _run_corpus("magic_gate", tmp_path)
    assert report.verdict == "validated"
    assert report.n1_used == 2
    assert report.n2_used == 1
    assert report.useful_tc_count == 1
    assert report.pov_path is not None and report.pov_path.exists()
    assert backend.cursor == len(backend.entries)

    run_dir = runner.run_dir
    assert (run_dir / "va_report.json").exists()
    assert (run_dir / "crash_trace.json").exists()
    assert (run_dir / "build_cov.log").exists()
    assert (run_dir / "build_san.log").exists()
    assert (run_dir / "iters" / "pe_1" / "input.bin").exists()
    assert (run_dir / "iters" / "pe_2" / "coverage.json").exists()
    assert (run_dir / "iters" / "ct_1" / "gen.py").exists()
    assert (run_dir / "iters" / "ct_1" / "asan_report.txt").exists()
    assert (run_dir / "report.json").exists()

    # Iteration 1 stalled at the magic check; the feedback names the stall.
    feedback1 = (run_dir / "iters" / "pe_1" / "feedback.txt").read_text()
    assert "stalled" in feedback1
    cov1 = json.loads((run_dir / "iters" / "pe_1" / "coverage.json").read_text())
    assert cov1["reaches_vuln"] is False
    cov2 = json.loads((run_dir / "iters" / "pe_2" / "coverage.json").read_text())
    assert cov2["reaches_vuln"] is True

    # The stored PoV re-validates from the run directory alone.
    assert validate_run(run_dir).is_validated


@requires_clang
def test_magic_gate_report_totals_match_ledger(tmp_path):
    report, runner, _ = _run_corpus("magic_gate", tmp_path)
    assert report.cost_usd == pytest.approx(runner.ledger.cost_usd)
    phase_cost = sum(st.cost_usd for st in report.phase_breakdown.values())
    assert phase_cost == pytest.approx(report.cost_usd)
    phase_in = sum(st.input_tokens for st in report.phase_breakdown.values())
    assert phase_in == runner.ledger.input_tokens


@requires_clang
def test_flag_override_build_retry(tmp_path):
    report, runner, _ = _run_corpus("flag_override", tmp_path)
    assert report.verdict == "validated"
    cov_log = (runner.run_dir / "build_cov.log").read_text()
    assert "=== attempt 1 ===" in cov_log
    assert "=== attempt 2 ===" in cov_log
    assert "lacks the expected" in cov_log
    san_log = (runner.run_dir / "build_san.log").read_text()
    assert "=== attempt 2 ===" in san_log


@requires_clang
def test_leak_exit_validated_memory_leak(tmp_path):
    report, _, _ = _run_corpus("leak_exit", tmp_path)
    assert report.verdict == "validated"


@requires_clang
def test_uaf_order_wrong_transcript_yields_variant(tmp_path):
    report, _, _ = _run_corpus(
        "uaf_order", tmp_path, transcript="transcript_variant.json"
    )
    assert report.verdict == "variant"
    assert report.observed_kind == "global-buffer-overflow"
    assert report.pov_path is not None and report.pov_path.exists()


@requires_clang
def test_uaf_order_correct_transcript_validates(tmp_path):
    report, _, _ = _run_corpus("uaf_order", tmp_path)
    assert report.verdict == "validated"
    assert report.observed_kind == "heap-use-after-free"


@requires_clang
def test_wrapper_entry_resolves_launcher(tmp_path):
    report, runner, _ = _run_corpus("wrapper_entry", tmp_path)
    assert report.verdict == "validated"
    report_doc = json.loads((runner.run_dir / "report.json").read_text())
    assert report_doc["binaries"]["cov"].endswith("bin/tool")
    assert report_doc["binaries"]["san"].endswith("bin/tool")


@requires_clang
def test_early_exit_pe_stops_at_first_useful_tc(tmp_path):
    # The budget transcript's first exploration input already reaches the
    # vulnerable frames; with the flag set the loop must not run iteration 2.
    report, _, backend = _run_corpus(
        "magic_gate",
        tmp_path,
        transcript="transcript_budget.json",
        early_exit_pe=True,
    )
    assert report.verdict == "validated"
    assert report.n1_used == 1
    assert report.useful_tc_count == 1
    assert backend.cursor == len(backend.entries)


@requires_clang
def test_budget_guarantee_one_cycle_per_phase(tmp_path):
    report, _, _ = _run_corpus(
        "magic_gate",
        tmp_path,
        transcript="transcript_budget.json",
        budget_usd=0.000001,
    )
    assert report.verdict == "validated"
    assert report.n1_used == 1  # exactly one exploration cycle, then stop
    assert report.n2_used == 1
    assert report.cost_usd > 0.000001


@requires_clang
def test_failed_build_produces_failing_phase_report(tmp_path, tiny_repo):
    from drill.llm import ReplayEntry, ToolCall, Usage

    task = tmp_path / "task.json"
    task.write_text(
        json.dumps(
            {
                "project_id": "broken",
                "repo_path": str(tiny_repo),
                "v_location": {"file": "src/main.c", "line": 2, "function": "main"},
                "v_effect": "heap-buffer-overflow",
                "n1": 1,
                "n2": 1,
            }
        )
    )
    spec, config = load_task_spec(task)

    def finish(payload):
        return ReplayEntry(
            response_content="",
            tool_calls=(ToolCall("c", "finish", {"payload": json.dumps(payload)}),),
            usage=Usage(10, 5),
        )

    entries = [
        finish(
            {
                "harness_cmd": "./target_bin {input}",
                "input_extension": None,
                "root_cause": {"forward": "f", "backward": "b", "type_specific": "t"},
            }
        ),
        finish({"steps": ["exit 9"], "env": {}, "entry_point": "target_bin"}),
        finish({"steps": ["exit 9"], "env": {}, "entry_point": "target_bin"}),
        finish({"steps": ["exit 9"], "env": {}, "entry_point": "target_bin"}),
        finish({"steps": ["exit 9"], "env": {}, "entry_point": "target_bin"}),
    ]
    report = TaskRunner(spec, config, ReplayBackend(entries), tmp_path / "run").run()
    assert report.verdict == "nocrash"
    assert report.failing_phase == "instrumentation"
    assert report.failure_reason


@requires_clang
def test_replay_pipeline_determinism(tmp_path):
    """Three repetitions over the same transcript and run path must agree on
    every prompt digest and every persisted artifact (timestamps aside)."""
    import shutil

    task = CORPUS / "magic_gate" / "truth" / "task.json"
    spec, config = load_task_spec(task)
    run_dir = tmp_path / "rep"

    def strip_times(doc):
        if isinstance(doc, dict):
            return {
                k: strip_times(v)
                for k, v in doc.items()
                if k not in ("wall_time_secs",)
            }
        if isinstance(doc, list):
            return [strip_times(v) for v in doc]
        return doc

    snapshots = []
    for _ in range(3):
        if run_dir.exists():
            shutil.rmtree(run_dir)
        backend = ReplayBackend.from_file(
            CORPUS / "magic_gate" / "truth" / "transcript.json"
        )
        report = TaskRunner(spec, config, backend, run_dir).run()
        assert report.verdict == "validated"
        artifacts = {}
        for rel in (
            "va_report.json",
            "crash_trace.json",
            "iters/pe_1/feedback.txt",
            "iters/pe_2/feedback.txt",
            "iters/pe_1/input.bin",
            "iters/pe_2/input.bin",
            "iters/ct_1/input.bin",
            "pov/pov.bin",
        ):
            artifacts[rel] = (run_dir / rel).read_bytes()
        report_doc = strip_times(json.loads((run_dir / "report.json").read_text()))
        snapshots.append((backend.observed_digests, artifacts, report_doc))
    assert snapshots[0] == snapshots[1] == snapshots[2]


def test_vuln_analysis_without_report_needs_function(tmp_path, tiny_repo):
    task = tmp_path / "task.json"
    task.write_text(
        json.dumps(
            {
                "project_id": "nofunc",
                "repo_path": str(tiny_repo),
                "v_location": {"file": "src/main.c", "line": 2},
                "v_effect": "heap-buffer-overflow",
            }
        )
    )
    spec, config = load_task_spec(task)
    report = TaskRunner(spec, config, ReplayBackend([]), tmp_path / "run").run()
    assert report.verdict == "nocrash"
    assert report.failing_phase == "vuln_analysis"
    assert "function" in report.failure_reason
