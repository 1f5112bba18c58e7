import itertools
import json

import pytest
from hypothesis import given, strategies as st

from drill.coverage import (
    CoverageMap,
    CoverageQuery,
    collect_trace_coverage,
    merge_maps,
    parse_export_document,
    query_coverage,
    reaches_vuln_func,
    render_trace_feedback,
)
from drill.coverage.model import (
    KIND_CODE,
    KIND_GAP,
    FunctionCoverage,
    Region,
    line_counts_from_regions,
)
from drill.errors import MalformedProfile, RangeOutOfBounds, UnknownFile, UnknownFunction
from drill.sanitizer import CrashTrace, StackFrame

from .conftest import COVERAGE


# --- independent oracle: brute-force line counts over raw region tuples ------

def brute_force_line_counts(regions):
    """Re-derivation of the line-count convention, written independently of
    the implementation: per line, max of code regions starting there, else
    the innermost (latest-starting) enclosing code region, else gap count."""
    lines = {}
    all_lines = set()
    for r in regions:
        if r.kind in (KIND_CODE, KIND_GAP):
            all_lines.update(range(r.line_start, r.line_end + 1))
    for line in all_lines:
        starting = [
            r.count for r in regions if r.kind == KIND_CODE and r.line_start == line
        ]
        if starting:
            lines[line] = max(starting)
            continue
        enclosing = [
            r
            for r in regions
            if r.kind == KIND_CODE and r.line_start < line <= r.line_end
        ]
        if enclosing:
            best = max(enclosing, key=lambda r: (r.line_start, r.col_start))
            lines[line] = best.count
            continue
        gaps = [
            r.count
            for r in regions
            if r.kind == KIND_GAP and r.line_start <= line <= r.line_end
        ]
        if gaps:
            lines[line] = max(gaps)
    return lines


def test_export_parses_field_by_field(export_doc):
    doc = export_doc("single")
    cov = parse_export_document(doc)
    assert set(cov.functions) == {"main", "process", "multi.c:check_magic"}

    for fn_doc in doc["data"][0]["functions"]:
        fc = cov.functions[fn_doc["name"]]
        assert fc.entry_count == fn_doc["count"]
        regions = [
            Region(
                kind={0: "code", 1: "expansion", 2: "skipped", 3: "gap", 4: "branch"}[r[7]],
                count=r[4],
                line_start=r[0],
                col_start=r[1],
                line_end=r[2],
                col_end=r[3],
            )
            for r in fn_doc["regions"]
        ]
        assert fc.line_counts == brute_force_line_counts(regions), fn_doc["name"]


def test_export_expected_values_frozen(export_doc):
    """Spot values hand-derived from the instrumented run: input 'MGxxabc'
    executes the loop 7 times and takes the 'x' branch twice."""
    cov = parse_export_document(export_doc("single"))
    process = cov.functions["process"]
    assert process.entry_count == 1
    assert process.line_counts[13] == 8  # loop condition: 7 iterations + exit
    assert process.line_counts[15] == 2  # then-branch: two 'x' bytes
    assert process.line_counts[17] == 5  # else-branch: five other bytes
    check = cov.functions["multi.c:check_magic"]
    assert check.entry_count == 1
    main = cov.functions["main"]
    assert main.entry_count == 1
    assert cov.files["multi.c"][13] == 8


def test_uncovered_branch_is_reported(export_doc):
    cov = parse_export_document(export_doc("nox"))
    process = cov.functions["process"]
    assert process.uncovered_line_ranges == ((15, 15),)
    assert process.covered_lines == process.total_lines - 1


def test_fully_covered_function_has_no_uncovered_ranges(export_doc):
    cov = parse_export_document(export_doc("single"))
    assert cov.functions["process"].uncovered_line_ranges == ()


def test_parse_determinism(export_doc):
    doc = export_doc("single")
    assert parse_export_document(doc) == parse_export_document(doc)


def test_merge_additivity_against_stored_double_run(export_doc):
    single = parse_export_document(export_doc("single"))
    double = parse_export_document(export_doc("double"))
    merged = merge_maps(single, single)
    assert set(merged.functions) == set(double.functions)
    for name, fc in merged.functions.items():
        assert fc.entry_count == double.functions[name].entry_count, name
        assert fc.line_counts == double.functions[name].line_counts, name
    assert merged.files == double.files


@given(st.integers(min_value=1, max_value=5))
def test_merge_k_identical_maps_multiplies_counts(k):
    base = CoverageMap(
        functions={
            "f": FunctionCoverage("f", "a.c", 2, {1: 2, 2: 0, 3: 7}),
        },
        files={"a.c": {1: 2, 2: 0, 3: 7}},
    )
    merged = base
    for _ in range(k - 1):
        merged = merge_maps(merged, base)
    assert merged.functions["f"].entry_count == 2 * k
    assert merged.functions["f"].line_counts == {1: 2 * k, 2: 0, 3: 7 * k}
    assert merged.files["a.c"][3] == 7 * k


def test_rejects_wrong_document_type():
    with pytest.raises(MalformedProfile):
        parse_export_document({"type": "something-else", "version": "2.0.1"})
    with pytest.raises(MalformedProfile):
        parse_export_document(
            {"type": "llvm.coverage.json.export", "version": "1.0.0", "data": [{}]}
        )


# --- trace coverage -----------------------------------------------------------

def _trace(n: int) -> CrashTrace:
    return CrashTrace(
        frames=tuple(
            StackFrame(index=i, function=f"fn{i}", file="a.c", line=10 * (i + 1))
            for i in range(n)
        )
    )


def _map_with(entries: dict[str, int]) -> CoverageMap:
    return CoverageMap(
        functions={
            name: FunctionCoverage(name, "a.c", count, {1: count})
            for name, count in entries.items()
        },
        files={"a.c": {1: 1}},
    )


def test_all_frames_reached():
    trace = _trace(3)
    cov = _map_with({"fn0": 1, "fn1": 4, "fn2": 9})
    summary = collect_trace_coverage(cov, trace)
    assert all(fc.reached for fc in summary.per_frame)
    assert summary.deepest_reached_index == 0
    assert reaches_vuln_func(summary, trace)


def test_empty_map_reaches_nothing():
    trace = _trace(4)
    cov = CoverageMap(functions={}, files={})
    summary = collect_trace_coverage(cov, trace)
    assert not any(fc.reached for fc in summary.per_frame)
    assert summary.deepest_reached_index == -1
    assert all(not fc.in_mapping for fc in summary.per_frame)
    assert not reaches_vuln_func(summary, trace)


def test_execution_stalling_mid_trace():
    # 6-frame trace; execution stops after frame 3 (outermost 5,4,3 reached).
    trace = _trace(6)
    cov = _map_with({"fn5": 1, "fn4": 1, "fn3": 1, "fn2": 0, "fn1": 0, "fn0": 0})
    summary = collect_trace_coverage(cov, trace)
    reached = [fc.reached for fc in summary.per_frame]
    assert reached == [False, False, False, True, True, True]
    assert summary.deepest_reached_index == 3
    assert not reaches_vuln_func(summary, trace)
    assert all(fc.in_mapping for fc in summary.per_frame)


def test_present_but_zero_distinguished_from_absent():
    trace = _trace(2)
    cov = _map_with({"fn0": 0})  # fn1 absent entirely
    summary = collect_trace_coverage(cov, trace)
    assert summary.per_frame[0].in_mapping and not summary.per_frame[0].reached
    assert not summary.per_frame[1].in_mapping


def test_static_function_name_matching():
    trace = CrashTrace(
        frames=(StackFrame(0, "check_magic", "multi.c", 6),)
    )
    cov = CoverageMap(
        functions={
            "multi.c:check_magic": FunctionCoverage(
                "multi.c:check_magic", "multi.c", 3, {6: 3}
            )
        },
        files={"multi.c": {6: 3}},
    )
    summary = collect_trace_coverage(cov, trace)
    assert summary.per_frame[0].reached
    assert summary.per_frame[0].entry_count == 3


def test_reaches_vuln_func_brute_force_truth_table():
    """All reach patterns for traces of length 1..4 against an independently
    stated rule: the min(3, len) innermost frames must all be reached."""
    for n in range(1, 5):
        trace = _trace(n)
        for pattern in itertools.product([0, 1], repeat=n):
            cov = _map_with(
                {f"fn{i}": pattern[i] for i in range(n)}
            )
            summary = collect_trace_coverage(cov, trace)
            expected = all(pattern[i] == 1 for i in range(min(3, n)))
            assert reaches_vuln_func(summary, trace) == expected, (n, pattern)


def test_reaches_implies_frame0_reached():
    for n in range(1, 5):
        trace = _trace(n)
        for pattern in itertools.product([0, 1], repeat=n):
            cov = _map_with({f"fn{i}": pattern[i] for i in range(n)})
            summary = collect_trace_coverage(cov, trace)
            if reaches_vuln_func(summary, trace):
                assert summary.per_frame[0].reached


# --- queries ---------------------------------------------------------------------

@pytest.fixture
def nox_map(export_doc):
    return parse_export_document(export_doc("nox"), source_root=COVERAGE)


def test_query_uncovered_in_function(nox_map):
    out = query_coverage(
        nox_map, CoverageQuery(kind="uncovered_in_function", name="process")
    )
    assert "lines 15-15" in out
    assert "total += 2" in out  # one-line source excerpt


def test_query_fully_covered_function(export_doc):
    cov = parse_export_document(export_doc("single"))
    out = query_coverage(cov, CoverageQuery(kind="function", name="process"))
    assert "all 10 lines covered" in out


def test_query_file_lines(nox_map, export_doc):
    out = query_coverage(
        nox_map, CoverageQuery(kind="file_lines", path="multi.c", start=11, end=20)
    )
    rows = out.splitlines()
    assert len(rows) == 10
    doc = export_doc("nox")
    process = next(
        f for f in doc["data"][0]["functions"] if f["name"] == "process"
    )
    regions = [
        Region(
            kind={0: "code", 3: "gap"}.get(r[7], "other"),
            count=r[4],
            line_start=r[0],
            col_start=r[1],
            line_end=r[2],
            col_end=r[3],
        )
        for r in process["regions"]
    ]
    expected = brute_force_line_counts([r for r in regions if r.kind in ("code", "gap")])
    for row in rows:
        lineno, count, _text = [c.strip() for c in row.split("|", 2)]
        if int(lineno) in expected:
            assert int(count) == expected[int(lineno)], row


def test_query_unknown_function(nox_map):
    with pytest.raises(UnknownFunction):
        query_coverage(nox_map, CoverageQuery(kind="function", name="nonexistent"))


def test_query_unknown_file(nox_map):
    with pytest.raises(UnknownFile):
        query_coverage(
            nox_map, CoverageQuery(kind="file_lines", path="ghost.c", start=1, end=2)
        )


def test_query_range_out_of_bounds(nox_map):
    with pytest.raises(RangeOutOfBounds):
        query_coverage(
            nox_map,
            CoverageQuery(kind="file_lines", path="multi.c", start=4000, end=4010),
        )


def test_query_output_respects_limit(nox_map):
    out = query_coverage(
        nox_map,
        CoverageQuery(kind="file_lines", path="multi.c", start=1, end=33),
        limit=200,
    )
    assert len(out) <= 200
    assert "…[truncated]" in out


# --- trace feedback -----------------------------------------------------------------

def test_feedback_all_reached():
    trace = _trace(3)
    cov = _map_with({"fn0": 1, "fn1": 1, "fn2": 1})
    text = render_trace_feedback(collect_trace_coverage(cov, trace))
    assert "reached the vulnerable function" in text
    assert "stalled" not in text


def test_feedback_stall_line_names_next_unreached_frame():
    trace = _trace(6)
    cov = _map_with({"fn5": 1, "fn4": 1, "fn3": 1, "fn2": 0, "fn1": 0, "fn0": 0})
    summary = collect_trace_coverage(cov, trace)
    text = render_trace_feedback(summary)
    # Template oracle: assemble the expected stall line from summary fields.
    stall = summary.per_frame[summary.deepest_reached_index - 1].frame
    assert f"execution stalled before {stall.function} at {stall.file}:{stall.line}" in text
    assert stall.function == "fn2"


def test_feedback_nothing_executed():
    trace = _trace(2)
    cov = CoverageMap(functions={}, files={})
    text = render_trace_feedback(collect_trace_coverage(cov, trace))
    assert "no function on the crash backtrace was executed" in text


def test_feedback_deterministic():
    trace = _trace(4)
    cov = _map_with({"fn3": 2, "fn2": 1, "fn1": 0, "fn0": 0})
    s1 = render_trace_feedback(collect_trace_coverage(cov, trace))
    s2 = render_trace_feedback(collect_trace_coverage(cov, trace))
    assert s1 == s2


# --- line count semantics -------------------------------------------------------------

def test_line_counts_nested_region_overrides():
    regions = [
        Region(KIND_CODE, 5, 1, 1, 10, 2),  # function body
        Region(KIND_CODE, 0, 4, 9, 6, 2),  # unexecuted inner branch
    ]
    counts = line_counts_from_regions(regions)
    assert counts[1] == 5
    assert counts[4] == 0  # branch starts here
    assert counts[5] == 0  # inside the unexecuted branch
    assert counts[7] == 5  # back in the body
    assert counts == brute_force_line_counts(regions)


def test_line_counts_gap_only_when_no_code():
    regions = [
        Region(KIND_CODE, 3, 1, 1, 2, 10),
        Region(KIND_GAP, 1, 3, 1, 4, 10),
    ]
    counts = line_counts_from_regions(regions)
    assert counts[3] == 1 and counts[4] == 1
    assert counts == brute_force_line_counts(regions)
